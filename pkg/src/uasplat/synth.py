"""Procedural generation of ground-truth articulated sequences with injected
occlusions. The ground truth is itself a Gaussian cloud rendered through the
project's own pipeline, so the clean frames double as a closed-loop oracle:
reconstruction error is attributable to optimization and occlusion, never to
representation mismatch.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .config import OcclusionSettings, SceneSettings
from .geometry import Camera, GaussianCloud, logit, quat_from_axis_angle
from .io import (
    read_image,
    read_manifest,
    read_scene_file,
    scene_from_dict,
    scene_to_dict,
    write_image,
    write_manifest,
    write_scene_file,
)
from .rasterizer import RasterConfig, full_forward
from .skeleton import PoseFrame, Skeleton, default_skeleton, render_skeleton_mask

_PALETTE = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.55, 0.85],
    [0.95, 0.80, 0.20],
    [0.30, 0.75, 0.35],
    [0.80, 0.35, 0.75],
    [0.95, 0.55, 0.15],
])
_MARKER_COLOR = np.array([0.98, 0.10, 0.45])  # asymmetric left-forearm marking


@dataclass
class SyntheticDataset:
    settings: SceneSettings
    seed: int
    skeleton: Skeleton            # carries the ground-truth bind table
    poses: list[PoseFrame]
    train_camera: Camera
    holdout_cameras: list[Camera]
    gt_cloud: GaussianCloud
    background: np.ndarray
    clean: np.ndarray             # (T, H, W, 3)
    occluded: np.ndarray          # (T, H, W, 3)
    occ_masks: np.ndarray         # (T, H, W) bool
    skel_masks: np.ndarray        # (T, H, W) bool

    @property
    def num_frames(self) -> int:
        return self.clean.shape[0]

    def t_norm(self, t: int) -> float:
        T = self.num_frames
        return 0.0 if T <= 1 else t / (T - 1)

    def train_frames(self, interval: int) -> list[int]:
        return list(range(0, self.num_frames, max(1, interval)))

    def temporal_centers(self, interval: int) -> list[int]:
        """Sampled timestamps whose t-k and t+k neighbors are also sampled."""
        frames = self.train_frames(interval)
        return frames[1:-1] if len(frames) >= 3 else []


def motion_script(skel: Skeleton, frames: int, amplitude: float) -> list[PoseFrame]:
    """Periodic waving/bending: sinusoidal joint angles plus a gentle root sway."""
    name_to_idx = {n: i for i, n in enumerate(skel.joint_names)}
    poses = []
    for t in range(frames):
        phase = 2.0 * np.pi * t / max(frames, 1)
        q = np.zeros((skel.num_joints, 4))
        q[:, 0] = 1.0
        z = np.array([0.0, 0.0, 1.0])
        x = np.array([1.0, 0.0, 0.0])
        a = amplitude

        def set_rot(name, axis, angle):
            if name in name_to_idx:
                q[name_to_idx[name]] = quat_from_axis_angle(axis, angle)

        set_rot("spine", x, 0.12 * a * np.sin(phase))
        set_rot("l_arm", z, 0.55 * a * np.sin(phase))
        set_rot("l_fore", z, 0.40 * a * np.sin(phase + 0.8))
        set_rot("r_arm", z, -0.45 * a * np.sin(phase + 1.9))
        set_rot("r_fore", z, 0.35 * a * np.cos(phase + 0.3))
        root_t = a * np.array([0.05 * np.sin(phase), 0.0, 0.03 * np.cos(phase)])
        poses.append(PoseFrame(t=t, joint_rotations=q, root_translation=root_t))
    return poses


def make_gt_figure(skel: Skeleton, gt_per_bone: int, rng: np.random.Generator
                   ) -> tuple[GaussianCloud, Skeleton]:
    """Textured ground-truth cloud sampled on the bone capsules.

    Colors form stripes along each bone; the left forearm carries a distinct
    marker so left/right symmetry assumptions are visibly wrong.
    """
    bind = skel.bind_joint_positions()
    positions, colors, log_scales = [], [], []
    lfore = skel.joint_names.index("l_fore") if "l_fore" in skel.joint_names else -1
    for b, ((p, c), radius) in enumerate(zip(skel.bones, skel.bone_radii)):
        a_pt, b_pt = bind[p], bind[c]
        for i in range(gt_per_bone):
            s = (i + 0.5) / gt_per_bone
            jitter = rng.normal(0.0, 0.35 * radius, 3)
            positions.append(a_pt + s * (b_pt - a_pt) + jitter)
            stripe = int(s * 4) % len(_PALETTE)
            color = _PALETTE[(b + stripe) % len(_PALETTE)]
            if c == lfore and s > 0.35:
                color = _MARKER_COLOR
            colors.append(color)
            log_scales.append(np.log(0.55 * radius) * np.ones(3))
    positions = np.asarray(positions)
    n = positions.shape[0]
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    cloud = GaussianCloud(
        means=positions, rotations=rotations, log_scales=np.asarray(log_scales),
        opacity_logits=np.full(n, logit(0.85)), colors=np.asarray(colors),
        bind_vertex=np.arange(n),
    )
    return cloud, skel.with_bindings(positions)


def camera_ring(settings: SceneSettings, azimuth_deg: float) -> Camera:
    center = np.array([0.0, 0.35, 0.0])  # skeleton root height offset
    az = np.deg2rad(azimuth_deg)
    pos = center + settings.camera_distance * np.array([np.sin(az), 0.0, -np.cos(az)])
    return Camera.look_at(pos, np.zeros(3), settings.focal, settings.focal,
                          settings.width, settings.height)


def hold_out_views(settings: SceneSettings) -> list[Camera]:
    """Evaluation cameras on the ring, uniformly spaced in azimuth.

    For n cameras the azimuths are (i+1) * 180 / (n+1) degrees, i.e.
    45/90/135 for the default n=3.
    """
    n = settings.holdout_cameras
    return [camera_ring(settings, (i + 1) * 180.0 / (n + 1)) for i in range(n)]


def _subject_bbox(opacity: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(opacity > 0.05)
    if len(ys) == 0:
        return 0, opacity.shape[0] - 1, 0, opacity.shape[1] - 1
    return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


def _occlusion_mask(pattern: str, coverage: float, bbox, frame_idx: int,
                    n_affected: int, shape, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    if coverage <= 0.0:
        return mask
    y0, y1, x0, x1 = bbox
    bh, bw = y1 - y0 + 1, x1 - x0 + 1
    if pattern == "center-rectangle":
        # equal per-axis shrink so rect area ~= coverage * bbox area
        s = np.sqrt(coverage)
        rh, rw = max(1, round(bh * s)), max(1, round(bw * s))
        cy, cx = y0 + bh // 2, x0 + bw // 2
        ry0 = max(0, cy - rh // 2)
        rx0 = max(0, cx - rw // 2)
        mask[ry0:ry0 + rh, rx0:rx0 + rw] = True
    elif pattern == "moving-bar":
        bar_w = max(1, round(bw * coverage))
        span = max(1, bw - bar_w)
        frac = frame_idx / max(1, n_affected - 1)
        rx0 = x0 + round(frac * span)
        mask[y0:y1 + 1, rx0:rx0 + bar_w] = True
    elif pattern == "random-patches":
        target = coverage * bh * bw
        ph, pw = max(2, bh // 4), max(2, bw // 4)
        guard = 0
        while mask[y0:y1 + 1, x0:x1 + 1].sum() < target and guard < 200:
            py = int(rng.integers(y0, max(y0 + 1, y1 - ph + 2)))
            px = int(rng.integers(x0, max(x0 + 1, x1 - pw + 2)))
            mask[py:py + ph, px:px + pw] = True
            guard += 1
    else:
        raise ValueError(f"unknown occlusion pattern {pattern!r}")
    return mask


def generate_sequence(settings: SceneSettings, seed: int | None = None) -> SyntheticDataset:
    """Render the ground-truth figure, composite occluders, record masks."""
    seed = settings.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    skel = default_skeleton()
    gt_cloud, skel_bound = make_gt_figure(skel, settings.gt_per_bone, rng)
    poses = motion_script(skel, settings.frames, settings.motion_amplitude)
    cam = camera_ring(settings, 0.0)
    holdout = hold_out_views(settings)
    bg = np.asarray(settings.background, dtype=np.float64)
    rcfg = RasterConfig(background=bg)

    T = settings.frames
    h, w = settings.height, settings.width
    clean = np.zeros((T, h, w, 3))
    occluded = np.zeros((T, h, w, 3))
    occ_masks = np.zeros((T, h, w), dtype=bool)
    skel_masks = np.zeros((T, h, w), dtype=bool)
    occ = settings.occlusion
    n_affected = int(np.floor(occ.affected_fraction * T))
    occ_color = np.asarray(occ.color, dtype=np.float64)
    t_norm = lambda t: 0.0 if T <= 1 else t / (T - 1)

    for t in range(T):
        render, _ = full_forward(gt_cloud, skel_bound, poses[t], t_norm(t), cam,
                                 rcfg, net=None, mode="a")
        clean[t] = render.color
        skel_masks[t] = render_skeleton_mask(skel, poses[t], cam)
        frame = clean[t].copy()
        if t < n_affected and occ.coverage > 0.0:
            bbox = _subject_bbox(render.opacity)
            m = _occlusion_mask(occ.pattern, occ.coverage, bbox, t, n_affected,
                                (h, w), rng)
            frame[m] = occ_color
            occ_masks[t] = m
        occluded[t] = frame

    return SyntheticDataset(
        settings=settings, seed=seed, skeleton=skel_bound, poses=poses,
        train_camera=cam, holdout_cameras=holdout, gt_cloud=gt_cloud,
        background=bg, clean=clean, occluded=occluded, occ_masks=occ_masks,
        skel_masks=skel_masks,
    )


# ---------------------------------------------------------------------------
# dataset directory io
# ---------------------------------------------------------------------------

def _settings_echo(settings: SceneSettings) -> dict:
    from .config import config_to_dict
    return config_to_dict(settings)


def write_dataset(ds: SyntheticDataset, directory: str):
    os.makedirs(directory, exist_ok=True)
    for sub in ("clean", "occluded", "occ_mask", "skel_mask"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    for t in range(ds.num_frames):
        write_image(os.path.join(directory, "clean", f"frame_{t:04d}.png"), ds.clean[t])
        write_image(os.path.join(directory, "occluded", f"frame_{t:04d}.png"), ds.occluded[t])
        write_image(os.path.join(directory, "occ_mask", f"frame_{t:04d}.png"),
                    ds.occ_masks[t].astype(np.float64))
        write_image(os.path.join(directory, "skel_mask", f"frame_{t:04d}.png"),
                    ds.skel_masks[t].astype(np.float64))
    scene = scene_to_dict(ds.skeleton, ds.poses, ds.train_camera, ds.holdout_cameras,
                          ds.gt_cloud, ds.background.tolist(), _settings_echo(ds.settings))
    write_scene_file(os.path.join(directory, "scene.yaml"), scene)
    write_manifest(directory, ds.seed)


def read_dataset(directory: str) -> SyntheticDataset:
    from .config import config_from_dict

    manifest = read_manifest(directory)
    scene = read_scene_file(os.path.join(directory, "scene.yaml"))
    skel, poses, cam, holdout, gt_cloud, bg, echo = scene_from_dict(scene)
    settings = config_from_dict({"scene": echo}).scene
    T = len(poses)
    clean, occluded, occm, skelm = [], [], [], []
    for t in range(T):
        clean.append(read_image(os.path.join(directory, "clean", f"frame_{t:04d}.png")))
        occluded.append(read_image(os.path.join(directory, "occluded", f"frame_{t:04d}.png")))
        occm.append(read_image(os.path.join(directory, "occ_mask", f"frame_{t:04d}.png")) > 0.5)
        skelm.append(read_image(os.path.join(directory, "skel_mask", f"frame_{t:04d}.png")) > 0.5)
    return SyntheticDataset(
        settings=settings, seed=int(manifest["seed"]), skeleton=skel, poses=poses,
        train_camera=cam, holdout_cameras=holdout, gt_cloud=gt_cloud, background=bg,
        clean=np.stack(clean), occluded=np.stack(occluded),
        occ_masks=np.stack(occm), skel_masks=np.stack(skelm),
    )
