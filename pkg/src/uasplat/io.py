"""Serialization: PNG images, the versioned binary checkpoint container,
human-readable scene files, dataset directories with content-hash manifests,
and the metrics log.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import yaml
from PIL import Image

from .geometry import Camera, GaussianCloud
from .skeleton import PoseFrame, Skeleton

CHECKPOINT_MAGIC = b"UASP"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_DTYPE_IDS = {np.dtype("float64"): 0, np.dtype("int64"): 1, np.dtype("uint8"): 2}

METRICS_COLUMNS = ["iteration", "mode", "l1", "nll", "spa", "temp", "mask", "ssim", "psnr_train"]


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def quantize_image(img: np.ndarray) -> np.ndarray:
    """round(255 * clamp(x, 0, 1)) as uint8."""
    return np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)


def write_image(path: str, img: np.ndarray):
    arr = quantize_image(img)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def read_image(path: str) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr


_HEAT_LO = np.array([0.02, 0.02, 0.25])
_HEAT_HI = np.array([1.00, 0.95, 0.05])


def uncertainty_heatmap(u: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fixed two-stop colormap dark blue -> bright yellow over [lo, hi]."""
    span = max(hi - lo, 1e-12)
    t = np.clip((np.asarray(u, dtype=np.float64) - lo) / span, 0.0, 1.0)
    return (1.0 - t[..., None]) * _HEAT_LO + t[..., None] * _HEAT_HI


# ---------------------------------------------------------------------------
# checkpoint container: versioned binary with named little-endian tensors
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict,
                    config_hash: str):
    """Write atomically (temp + rename); round-trips bit-exactly."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += bytes.fromhex(config_hash)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob += struct.pack("<Q", len(meta_bytes))
    blob += meta_bytes
    names = sorted(arrays)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        if arr.dtype not in _DTYPE_IDS:
            arr = arr.astype(np.float64)
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<BB", _DTYPE_IDS[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}q", *arr.shape) if arr.ndim else b""
        blob += arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict, str]:
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg_hash = data[off:off + 32].hex()
    off += 32
    (meta_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (n_tensors,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}q", data, off) if ndim else ()
        off += 8 * ndim
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += count * dtype.itemsize
        arrays[name] = arr.copy()
    return arrays, meta, cfg_hash


# ---------------------------------------------------------------------------
# scene file: skeleton, poses, cameras, ground-truth figure, spec echo
# ---------------------------------------------------------------------------

def _camera_to_dict(cam: Camera) -> dict:
    return {
        "R": cam.R.tolist(), "t": cam.t.tolist(), "fx": cam.fx, "fy": cam.fy,
        "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height,
    }


def _camera_from_dict(d: dict) -> Camera:
    return Camera(R=np.array(d["R"]), t=np.array(d["t"]), fx=d["fx"], fy=d["fy"],
                  cx=d["cx"], cy=d["cy"], width=d["width"], height=d["height"])


def scene_to_dict(skel: Skeleton, poses: list[PoseFrame], train_cam: Camera,
                  holdout_cams: list[Camera], gt_cloud: GaussianCloud,
                  background, spec_echo: dict) -> dict:
    return {
        "skeleton": {
            "joint_names": list(skel.joint_names),
            "parents": skel.parents.tolist(),
            "offsets": skel.offsets.tolist(),
            "bone_radii": skel.bone_radii.tolist(),
            "bind_vertices": skel.bind_vertices.tolist(),
            "blend_weights": skel.blend_weights.tolist(),
        },
        "poses": [
            {"t": int(p.t), "joint_rotations": p.joint_rotations.tolist(),
             "root_translation": p.root_translation.tolist()}
            for p in poses
        ],
        "cameras": {
            "train": _camera_to_dict(train_cam),
            "holdout": [_camera_to_dict(c) for c in holdout_cams],
        },
        "ground_truth": {
            "means": gt_cloud.means.tolist(),
            "rotations": gt_cloud.rotations.tolist(),
            "log_scales": gt_cloud.log_scales.tolist(),
            "opacity_logits": gt_cloud.opacity_logits.tolist(),
            "colors": gt_cloud.colors.tolist(),
            "bind_vertex": gt_cloud.bind_vertex.tolist(),
        },
        "background": list(background),
        "spec_echo": spec_echo,
    }


def scene_from_dict(d: dict):
    sk = d["skeleton"]
    skel = Skeleton(joint_names=list(sk["joint_names"]), parents=np.array(sk["parents"]),
                    offsets=np.array(sk["offsets"]), bone_radii=np.array(sk["bone_radii"]),
                    bind_vertices=np.array(sk["bind_vertices"]).reshape(-1, 3),
                    blend_weights=np.array(sk["blend_weights"]))
    poses = [
        PoseFrame(t=p["t"], joint_rotations=np.array(p["joint_rotations"]),
                  root_translation=np.array(p["root_translation"]))
        for p in d["poses"]
    ]
    train_cam = _camera_from_dict(d["cameras"]["train"])
    holdout = [_camera_from_dict(c) for c in d["cameras"]["holdout"]]
    gt = d["ground_truth"]
    gt_cloud = GaussianCloud(
        means=np.array(gt["means"]), rotations=np.array(gt["rotations"]),
        log_scales=np.array(gt["log_scales"]), opacity_logits=np.array(gt["opacity_logits"]),
        colors=np.array(gt["colors"]), bind_vertex=np.array(gt["bind_vertex"]),
    )
    background = np.array(d["background"], dtype=np.float64)
    return skel, poses, train_cam, holdout, gt_cloud, background, d.get("spec_echo", {})


def write_scene_file(path: str, scene_dict: dict):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(scene_dict, fh, sort_keys=True)


def read_scene_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return yaml.safe_load(fh)


# ---------------------------------------------------------------------------
# manifests and metrics
# ---------------------------------------------------------------------------

def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(dataset_dir: str, seed: int, extra: dict | None = None):
    entries = {}
    for root, _, files in os.walk(dataset_dir):
        for name in sorted(files):
            if name == "manifest.json":
                continue
            full = os.path.join(root, name)
            rel = os.path.relpath(full, dataset_dir)
            entries[rel.replace(os.sep, "/")] = sha256_file(full)
    manifest = {"seed": int(seed), "hashes": entries}
    if extra:
        manifest.update(extra)
    with open(os.path.join(dataset_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_manifest(dataset_dir: str) -> dict:
    with open(os.path.join(dataset_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)


class MetricsLog:
    """Comma-separated per-interval training metrics with a fixed column order.

    Inactive loss components are logged as empty fields so the warmup-to-MAP
    switch is visible in the file.
    """

    def __init__(self, path: str | None):
        self.path = path
        self.rows: list[dict] = []
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(",".join(METRICS_COLUMNS) + "\n")

    @staticmethod
    def _fmt(value) -> str:
        if value is None:
            return ""
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def append(self, **kv):
        row = {col: kv.get(col) for col in METRICS_COLUMNS}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(",".join(self._fmt(row[c]) for c in METRICS_COLUMNS) + "\n")


@dataclass
class RunLock:
    """Exclusive lockfile guarding a run directory against concurrent writers."""

    directory: str
    _fd: int | None = None

    def __enter__(self):
        os.makedirs(self.directory, exist_ok=True)
        path = os.path.join(self.directory, ".lock")
        try:
            self._fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory {self.directory} is locked by another process "
                f"(remove {path} if stale)"
            ) from None
        return self

    def __exit__(self, *exc):
        if self._fd is not None:
            os.close(self._fd)
            os.unlink(os.path.join(self.directory, ".lock"))
        return False
