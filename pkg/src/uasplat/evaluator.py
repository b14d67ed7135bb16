"""Metrics and experiment analysis: PSNR/SSIM on train and held-out views,
occluded-region PSNR against clean ground truth, uncertainty localization,
temporal color stability, and the ablation comparison table.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, GaussianCloud
from .losses import ssim_loss
from .rasterizer import RasterConfig, full_forward
from .synth import SyntheticDataset
from .trainer import TrainerState

log = logging.getLogger(__name__)

PSNR_INF = float("inf")  # sentinel for identical images
RHO_CAP = 1e6            # sentinel cap when no uncertainty sits on visible pixels

REPORT_COLUMNS = ["mode", "psnr", "ssim", "occluded_psnr", "rho",
                  "delta_psnr", "delta_occluded_psnr"]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf sentinel when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * np.log10(1.0 / mse)


def uncertainty_localization(u_frames: list[np.ndarray], occ_masks: list[np.ndarray],
                             subject_masks: list[np.ndarray]) -> float | None:
    """rho = mean(U | occluded px) / mean(U | visible subject px), averaged
    over frames that actually contain occluded pixels. None when no frame
    does; per-frame ratios are capped at RHO_CAP for a vanishing denominator."""
    ratios = []
    for u, occ, subj in zip(u_frames, occ_masks, subject_masks):
        occ = occ.astype(bool)
        vis = subj.astype(bool) & ~occ
        if not occ.any():
            continue
        num = float(u[occ].mean())
        den = float(u[vis].mean()) if vis.any() else 0.0
        ratios.append(min(num / den, RHO_CAP) if den > 1e-12 else RHO_CAP)
    if not ratios:
        return None
    return float(np.mean(ratios))


@dataclass
class MetricsReport:
    mode: str
    psnr_train: float
    ssim_train: float
    psnr_holdout: float | None
    ssim_holdout: float | None
    occluded_psnr: float | None
    rho: float | None
    per_frame_psnr: list[float] = field(default_factory=list)


def _render_model(state: TrainerState, frame: int, cam: Camera):
    ds = state.dataset
    render, _ = full_forward(state.cloud, state.skel, ds.poses[frame],
                             ds.t_norm(frame), cam, state.raster_config(),
                             net=state.net, mode=state.train_cfg.mode)
    return render


def _render_gt(ds: SyntheticDataset, frame: int, cam: Camera, cfg: RasterConfig):
    render, _ = full_forward(ds.gt_cloud, ds.skeleton, ds.poses[frame],
                             ds.t_norm(frame), cam, cfg, net=None, mode="a")
    return render


def evaluate_state(state: TrainerState, frames: list[int] | None = None) -> MetricsReport:
    """Full report for a trained state: train-view and held-out PSNR/SSIM
    (held-out ground truth is re-rendered from the closed-loop figure),
    occluded-region PSNR vs clean frames, and the localization ratio rho."""
    ds = state.dataset
    cfg = state.train_cfg
    if frames is None:
        frames = ds.train_frames(cfg.frame_interval)
    rcfg = state.raster_config()

    per_frame = []
    ssims = []
    occ_sq = []
    u_frames, occ_m, subj_m = [], [], []
    for t in frames:
        render = _render_model(state, t, ds.train_camera)
        clean = ds.clean[t]
        per_frame.append(psnr(render.color, clean))
        ssims.append(1.0 - ssim_loss(render.color, clean)[0])
        occ = ds.occ_masks[t]
        if occ.any():
            occ_sq.append(((render.color - clean) ** 2)[occ].ravel())
        u_frames.append(render.uncertainty)
        occ_m.append(occ)
        subj_m.append(render.opacity > 0.5)

    psnr_train = float(np.mean([p for p in per_frame if np.isfinite(p)])) \
        if any(np.isfinite(p) for p in per_frame) else PSNR_INF
    ssim_train = float(np.mean(ssims))

    occluded_psnr = None
    if occ_sq:
        mse = float(np.mean(np.concatenate(occ_sq)))
        occluded_psnr = PSNR_INF if mse == 0.0 else 10.0 * np.log10(1.0 / mse)

    rho = uncertainty_localization(u_frames, occ_m, subj_m) if cfg.mode != "a" else None

    psnr_h = ssim_h = None
    if ds.holdout_cameras:
        vals, svals = [], []
        for cam in ds.holdout_cameras:
            for t in frames:
                model = _render_model(state, t, cam)
                gt = _render_gt(ds, t, cam, rcfg)
                vals.append(psnr(model.color, gt.color))
                svals.append(1.0 - ssim_loss(model.color, gt.color)[0])
        finite = [v for v in vals if np.isfinite(v)]
        psnr_h = float(np.mean(finite)) if finite else PSNR_INF
        ssim_h = float(np.mean(svals))

    return MetricsReport(mode=cfg.mode, psnr_train=psnr_train, ssim_train=ssim_train,
                         psnr_holdout=psnr_h, ssim_holdout=ssim_h,
                         occluded_psnr=occluded_psnr, rho=rho, per_frame_psnr=per_frame)


def temporal_color_stability(state: TrainerState, probe_indices: np.ndarray,
                             frames: list[int] | None = None) -> dict[int, float | None]:
    """Per-probe variance of the rendered color at the probe Gaussian's
    projected pixel across frames where it is unoccluded in the ground truth.
    Colors are time-invariant attributes, so this measures geometry-induced
    flicker. Probes never visible map to None."""
    ds = state.dataset
    if frames is None:
        frames = ds.train_frames(state.train_cfg.frame_interval)
    samples: dict[int, list[np.ndarray]] = {int(p): [] for p in probe_indices}
    for t in frames:
        render, cache = full_forward(state.cloud, state.skel, ds.poses[t], ds.t_norm(t),
                                     ds.train_camera, state.raster_config(),
                                     net=state.net, mode=state.train_cfg.mode)
        proj = cache.proj
        for p in probe_indices:
            p = int(p)
            if not proj.valid[p]:
                continue
            u, v = proj.means2d[p]
            xi, yi = int(round(u)), int(round(v))
            if not (0 <= xi < render.color.shape[1] and 0 <= yi < render.color.shape[0]):
                continue
            if ds.occ_masks[t][yi, xi]:
                continue
            samples[p].append(render.color[yi, xi])
    out: dict[int, float | None] = {}
    for p, vals in samples.items():
        if len(vals) < 2:
            out[p] = None
            log.info("probe %d never visible enough; skipped", p)
        else:
            arr = np.stack(vals)
            out[p] = float(arr.var(axis=0).sum())
    return out


def ablation_report(reports: dict[str, MetricsReport | None]) -> list[dict]:
    """Comparison table over modes a..d with deltas against mode a.

    Missing runs are flagged rather than dropped."""
    base = reports.get("a")
    rows = []
    for mode in ("a", "b", "c", "d"):
        rep = reports.get(mode)
        if rep is None:
            rows.append({"mode": mode, "missing": True})
            continue
        p = rep.psnr_holdout if rep.psnr_holdout is not None else rep.psnr_train
        row = {
            "mode": mode, "missing": False,
            "psnr": p, "ssim": rep.ssim_holdout if rep.ssim_holdout is not None else rep.ssim_train,
            "occluded_psnr": rep.occluded_psnr, "rho": rep.rho,
        }
        if base is not None:
            bp = base.psnr_holdout if base.psnr_holdout is not None else base.psnr_train
            row["delta_psnr"] = p - bp
            if rep.occluded_psnr is not None and base.occluded_psnr is not None:
                row["delta_occluded_psnr"] = rep.occluded_psnr - base.occluded_psnr
        rows.append(row)
    return rows


def format_report_csv(rows: list[dict]) -> str:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return "inf" if v == PSNR_INF else f"{v:.6g}"
        return str(v)

    lines = [",".join(REPORT_COLUMNS)]
    for row in rows:
        if row.get("missing"):
            lines.append(f"{row['mode']},MISSING,,,,,")
            continue
        lines.append(",".join(fmt(row.get(c)) for c in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"
