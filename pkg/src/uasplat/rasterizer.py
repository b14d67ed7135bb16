"""Tile-based CPU differentiable rasterizer.

Color, uncertainty and accumulated opacity are blended front-to-back through
the *same* per-contribution weights T_i * a_i, where a_i = alpha_i * G_i(u) is
the opacity times the 2D Gaussian density at the pixel. The uncertainty and
opacity channels receive no background term. Tiling affects traversal only:
every pixel sees the identical sequence of floating-point operations, so
tiled and untiled renders are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deformation import DeformationNet, DeformationOutput, apply_deformation, \
    apply_deformation_backward
from .geometry import (
    Camera,
    GaussianCloud,
    NumericalFault,
    ProjectionCache,
    build_covariance,
    build_covariance_backward,
    project_gaussians,
    project_gaussians_backward,
    sigmoid,
)
from .skeleton import LbsMaps, PoseFrame, Skeleton, lbs_maps


@dataclass
class RasterConfig:
    tile_size: int = 16
    alpha_cutoff: float = 1.0 / 255.0   # skip contributions below this a_i
    t_min: float = 1e-4                 # early termination transmittance
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    alpha_clamp: float = 0.99

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.tile_size < 1:
            raise ValueError("tile size must be >= 1")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")
        if not 0.0 < self.alpha_cutoff < 1.0:
            raise ValueError("alpha cutoff must lie in (0, 1)")


@dataclass
class Contribs:
    """Flat per-pixel contributor lists, front-to-back within each pixel."""

    pix: np.ndarray      # (M,) flat pixel index y * W + x
    gid: np.ndarray      # (M,) index into the rasterizer's input arrays
    T: np.ndarray        # (M,) transmittance before this contribution
    alpha: np.ndarray    # (M,) a_i = clamp(alpha * G)
    G: np.ndarray        # (M,) Gaussian density value
    clamped: np.ndarray  # (M,) bool, a_i hit the clamp


@dataclass
class RenderOutput:
    color: np.ndarray        # (H, W, 3)
    uncertainty: np.ndarray  # (H, W)
    opacity: np.ndarray      # (H, W)
    t_final: np.ndarray      # (H, W) remaining transmittance
    contribs: Contribs | None
    inputs: dict | None      # rasterizer inputs retained for the backward pass

    @property
    def shape(self) -> tuple[int, int]:
        return self.color.shape[0], self.color.shape[1]


def _check_finite(name: str, arr: np.ndarray):
    bad = ~np.isfinite(arr)
    if np.any(bad):
        idx = int(np.argwhere(bad)[0][0])
        raise NumericalFault(f"non-finite {name} at index {idx}")


def rasterize(
    means2d: np.ndarray,
    covs2d: np.ndarray,
    depths: np.ndarray,
    opacities: np.ndarray,
    colors: np.ndarray,
    sigmas: np.ndarray,
    width: int,
    height: int,
    cfg: RasterConfig,
) -> RenderOutput:
    """Blend projected Gaussians into color / uncertainty / opacity images.

    Contributors are processed in ascending depth (ties broken by index).
    Per pixel: C += T a c, U += T a sigma, O += T a, then T *= (1 - a);
    blending stops once T <= t_min. Background is composited into color only.
    """
    means2d = np.asarray(means2d, dtype=np.float64).reshape(-1, 2)
    covs2d = np.asarray(covs2d, dtype=np.float64).reshape(-1, 2, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    opacities = np.asarray(opacities, dtype=np.float64).reshape(-1)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    n = means2d.shape[0]
    for name, arr in (("mean2d", means2d), ("cov2d", covs2d), ("depth", depths),
                      ("opacity", opacities), ("color", colors), ("sigma", sigmas)):
        _check_finite(name, arr)

    color = np.zeros((height, width, 3))
    unc = np.zeros((height, width))
    opac = np.zeros((height, width))
    T = np.ones((height, width))

    order = np.lexsort((np.arange(n), depths))

    # conic (inverse 2D covariance) and 3-sigma bounding boxes
    a = covs2d[:, 0, 0]
    b = covs2d[:, 0, 1]
    c = covs2d[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0):
        raise NumericalFault(f"non-positive-definite 2D covariance at index "
                             f"{int(np.argmax(det <= 0))}")
    inv_a, inv_b, inv_c = c / det, -b / det, a / det
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = 3.0 * np.sqrt(lam_max)
    x0 = np.clip(np.floor(means2d[:, 0] - radius), 0, width).astype(np.int64)
    x1 = np.clip(np.ceil(means2d[:, 0] + radius) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.floor(means2d[:, 1] - radius), 0, height).astype(np.int64)
    y1 = np.clip(np.ceil(means2d[:, 1] + radius) + 1, 0, height).astype(np.int64)

    ts = cfg.tile_size
    tiles_x = (width + ts - 1) // ts
    tiles_y = (height + ts - 1) // ts
    tile_lists: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    for g in order:
        if x0[g] >= x1[g] or y0[g] >= y1[g]:
            continue
        for tyi in range(y0[g] // ts, (y1[g] - 1) // ts + 1):
            for txi in range(x0[g] // ts, (x1[g] - 1) // ts + 1):
                tile_lists[tyi * tiles_x + txi].append(g)

    pix_l: list[np.ndarray] = []
    gid_l: list[np.ndarray] = []
    T_l: list[np.ndarray] = []
    alpha_l: list[np.ndarray] = []
    G_l: list[np.ndarray] = []
    clamp_l: list[np.ndarray] = []

    for tyi in range(tiles_y):
        ty0, ty1 = tyi * ts, min((tyi + 1) * ts, height)
        for txi in range(tiles_x):
            glist = tile_lists[tyi * tiles_x + txi]
            if not glist:
                continue
            tx0, tx1 = txi * ts, min((txi + 1) * ts, width)
            for g in glist:
                px0, px1 = max(x0[g], tx0), min(x1[g], tx1)
                py0, py1 = max(y0[g], ty0), min(y1[g], ty1)
                if px0 >= px1 or py0 >= py1:
                    continue
                xs = np.arange(px0, px1, dtype=np.float64)
                ys = np.arange(py0, py1, dtype=np.float64)
                dx = xs[None, :] - means2d[g, 0]
                dy = ys[:, None] - means2d[g, 1]
                power = -0.5 * (inv_a[g] * dx * dx + inv_c[g] * dy * dy) - inv_b[g] * dx * dy
                G = np.exp(power)
                a_i = opacities[g] * G
                clamped = a_i > cfg.alpha_clamp
                a_i = np.minimum(a_i, cfg.alpha_clamp)
                T_patch = T[py0:py1, px0:px1]
                active = (a_i >= cfg.alpha_cutoff) & (T_patch > cfg.t_min)
                if not np.any(active):
                    continue
                iy, ix = np.nonzero(active)
                t_sel = T_patch[iy, ix]
                a_sel = a_i[iy, ix]
                w = t_sel * a_sel
                yy, xx = iy + py0, ix + px0
                color[yy, xx, :] += w[:, None] * colors[g]
                unc[yy, xx] += w * sigmas[g]
                opac[yy, xx] += w
                T[yy, xx] = t_sel * (1.0 - a_sel)
                pix_l.append(yy * width + xx)
                gid_l.append(np.full(w.shape, g, dtype=np.int64))
                T_l.append(t_sel)
                alpha_l.append(a_sel)
                G_l.append(G[iy, ix])
                clamp_l.append(clamped[iy, ix])

    color += T[:, :, None] * cfg.background

    def _cat(parts, dtype):
        return np.concatenate(parts) if parts else np.zeros(0, dtype=dtype)

    contribs = Contribs(
        pix=_cat(pix_l, np.int64), gid=_cat(gid_l, np.int64), T=_cat(T_l, np.float64),
        alpha=_cat(alpha_l, np.float64), G=_cat(G_l, np.float64),
        clamped=_cat(clamp_l, bool),
    )
    inputs = {
        "means2d": means2d, "conic": (inv_a, inv_b, inv_c), "opacities": opacities,
        "colors": colors, "sigmas": sigmas, "n": n, "cfg": cfg,
    }
    return RenderOutput(color=color, uncertainty=unc, opacity=opac, t_final=T,
                        contribs=contribs, inputs=inputs)


def _segment_suffix(values: np.ndarray, seg_end: np.ndarray) -> np.ndarray:
    """Exclusive suffix sums within segments of a segment-sorted array.

    seg_end[i] is the one-past-the-end index of element i's segment.
    """
    csum = np.concatenate([np.cumsum(values[::-1])[::-1], [0.0]])
    idx = np.arange(values.shape[0])
    return csum[idx + 1] - csum[seg_end]


def rasterize_backward(
    out: RenderOutput,
    d_color: np.ndarray,
    d_unc: np.ndarray,
    d_opac: np.ndarray,
) -> dict[str, np.ndarray]:
    """Exact adjoint of the blend recurrence.

    Returns gradients on means2d, covs2d, opacities, colors and sigmas. The
    sigma gradient flows only through the uncertainty channel; clamped
    contributions get zero gradient through a_i (subgradient convention).
    """
    if out.contribs is None or out.inputs is None:
        raise NumericalFault("rasterize_backward called without a forward cache")
    inp = out.inputs
    n = inp["n"]
    height, width = out.shape
    inv_a, inv_b, inv_c = inp["conic"]
    colors = inp["colors"]
    sigmas = inp["sigmas"]
    opacities = inp["opacities"]
    cfg: RasterConfig = inp["cfg"]

    grads = {
        "means2d": np.zeros((n, 2)), "covs2d": np.zeros((n, 2, 2)),
        "opacities": np.zeros(n), "colors": np.zeros((n, 3)), "sigmas": np.zeros(n),
    }
    c = out.contribs
    m = c.pix.shape[0]
    if m == 0:
        return grads

    d_color = np.asarray(d_color, dtype=np.float64).reshape(height * width, 3)
    d_unc = np.asarray(d_unc, dtype=np.float64).reshape(height * width)
    d_opac = np.asarray(d_opac, dtype=np.float64).reshape(height * width)
    t_final = out.t_final.reshape(-1)

    order = np.argsort(c.pix, kind="stable")  # per-pixel front-to-back runs
    pix = c.pix[order]
    gid = c.gid[order]
    T = c.T[order]
    a_i = c.alpha[order]
    G = c.G[order]
    clamped = c.clamped[order]
    w = T * a_i

    # segment bookkeeping: one segment per pixel
    changes = np.nonzero(np.diff(pix))[0] + 1
    starts = np.concatenate([[0], changes])
    ends = np.concatenate([changes, [m]])
    seg_id = np.repeat(np.arange(starts.shape[0]), ends - starts)
    seg_end = ends[seg_id]

    dc_at = d_color[pix]                      # (m, 3)
    cdot = np.einsum("mc,mc->m", dc_at, colors[gid])
    du_at = d_unc[pix]
    do_at = d_opac[pix]

    after_color = _segment_suffix(w * cdot, seg_end)
    after_unc = _segment_suffix(w * du_at * sigmas[gid], seg_end)
    after_opac = _segment_suffix(w * do_at, seg_end)
    bg_dot = (d_color[pix] @ cfg.background) * t_final[pix]

    one_minus = 1.0 - a_i
    d_alpha = (
        T * cdot - (after_color + bg_dot) / one_minus
        + T * du_at * sigmas[gid] - after_unc / one_minus
        + T * do_at - after_opac / one_minus
    )

    # direct attribute gradients
    grads["sigmas"] = np.bincount(gid, weights=du_at * w, minlength=n)
    for ch in range(3):
        grads["colors"][:, ch] = np.bincount(gid, weights=dc_at[:, ch] * w, minlength=n)

    live = ~clamped
    d_alpha_pre = np.where(live, d_alpha, 0.0)
    grads["opacities"] = np.bincount(gid, weights=d_alpha_pre * G, minlength=n)
    d_power = d_alpha_pre * opacities[gid] * G  # dG = d_alpha * opacity; d_power = dG * G

    px = (pix % width).astype(np.float64)
    py = (pix // width).astype(np.float64)
    means2d = inp["means2d"]
    dx = px - means2d[gid, 0]
    dy = py - means2d[gid, 1]
    ia, ib, ic = inv_a[gid], inv_b[gid], inv_c[gid]
    grads["means2d"][:, 0] = np.bincount(gid, weights=d_power * (ia * dx + ib * dy), minlength=n)
    grads["means2d"][:, 1] = np.bincount(gid, weights=d_power * (ib * dx + ic * dy), minlength=n)

    dA_a = np.bincount(gid, weights=d_power * (-0.5 * dx * dx), minlength=n)
    dA_b = np.bincount(gid, weights=d_power * (-dx * dy), minlength=n)
    dA_c = np.bincount(gid, weights=d_power * (-0.5 * dy * dy), minlength=n)
    dA = np.empty((n, 2, 2))
    dA[:, 0, 0] = dA_a
    dA[:, 0, 1] = dA[:, 1, 0] = 0.5 * dA_b
    dA[:, 1, 1] = dA_c
    A = np.empty((n, 2, 2))
    A[:, 0, 0] = inv_a
    A[:, 0, 1] = A[:, 1, 0] = inv_b
    A[:, 1, 1] = inv_c
    grads["covs2d"] = -A @ dA @ A
    return grads


# ---------------------------------------------------------------------------
# full differentiable pipeline: deformation -> LBS -> projection -> blending
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    mode: str
    net: DeformationNet | None
    net_cache: object | None
    deform: DeformationOutput
    apply_cache: object | None
    maps: LbsMaps
    q_def: np.ndarray
    s_def: np.ndarray
    proj: ProjectionCache
    render: RenderOutput
    valid_idx: np.ndarray
    opacities: np.ndarray
    sigmas_used: np.ndarray


@dataclass
class PipelineGrads:
    """Gradients on every trainable value of the pipeline."""

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    net: dict[str, np.ndarray] | None
    deform_sigma: np.ndarray  # dL/dsigma before the softplus head (diagnostics)


def full_forward(
    cloud: GaussianCloud,
    skel: Skeleton,
    pose: PoseFrame,
    t_norm: float,
    cam: Camera,
    cfg: RasterConfig,
    net: DeformationNet | None = None,
    mode: str = "d",
) -> tuple[RenderOutput, ForwardCache]:
    """Render one frame. Mode 'a' (baseline) skips the deformation network and
    blends with sigma = 0; modes 'b'..'d' differ only in the training loss."""
    mode = mode.lower()
    n = len(cloud)
    if mode == "a" or net is None:
        deform = DeformationOutput.zeros(n)
        net_cache = None
        mu_def, q_def, s_def = cloud.means, cloud.rotations, cloud.log_scales
        apply_cache = None
        sigmas = np.zeros(n)
    else:
        deform, net_cache = net.forward(cloud.means, t_norm, pose.flat_quaternions())
        mu_def, q_def, s_def, apply_cache = apply_deformation(
            cloud.means, cloud.rotations, cloud.log_scales, deform)
        sigmas = deform.sigma

    weights = skel.blend_weights[cloud.bind_vertex]
    maps = lbs_maps(skel, pose, weights)
    mu_obs = np.einsum("nab,nb->na", maps.M, mu_def) + maps.b
    cov_def = build_covariance(q_def, s_def)
    cov_obs = maps.R_blend @ cov_def @ np.swapaxes(maps.R_blend, -1, -2)

    proj = project_gaussians(mu_obs, cov_obs, cam)
    valid_idx = np.nonzero(proj.valid)[0]
    opac = sigmoid(cloud.opacity_logits)
    render = rasterize(
        proj.means2d[valid_idx], proj.covs2d[valid_idx], proj.depths[valid_idx],
        opac[valid_idx], cloud.colors[valid_idx], sigmas[valid_idx],
        cam.width, cam.height, cfg,
    )
    cache = ForwardCache(mode=mode, net=net if mode != "a" else None,
                         net_cache=net_cache, deform=deform, apply_cache=apply_cache,
                         maps=maps, q_def=q_def, s_def=s_def, proj=proj,
                         render=render, valid_idx=valid_idx, opacities=opac,
                         sigmas_used=sigmas)
    return render, cache


def full_backward(
    cache: ForwardCache,
    d_color: np.ndarray,
    d_unc: np.ndarray,
    d_opac: np.ndarray,
) -> PipelineGrads:
    """Backpropagate image-space gradients to the cloud and network."""
    n = cache.proj.x_cam.shape[0]
    rg = rasterize_backward(cache.render, d_color, d_unc, d_opac)
    vi = cache.valid_idx

    d_means2d = np.zeros((n, 2))
    d_covs2d = np.zeros((n, 2, 2))
    d_means2d[vi] = rg["means2d"]
    d_covs2d[vi] = rg["covs2d"]
    d_mu_obs, d_cov_obs = project_gaussians_backward(cache.proj, d_means2d, d_covs2d)

    d_alpha = np.zeros(n)
    d_colors = np.zeros((n, 3))
    d_sigma = np.zeros(n)
    d_alpha[vi] = rg["opacities"]
    d_colors[vi] = rg["colors"]
    d_sigma[vi] = rg["sigmas"]

    # LBS transport: positions through the blended affine map, covariances
    # through the (constant) polar rotation.
    d_mu_def = np.einsum("nba,nb->na", cache.maps.M, d_mu_obs)
    Rb = cache.maps.R_blend
    d_cov_def = np.swapaxes(Rb, -1, -2) @ d_cov_obs @ Rb

    d_q_def, d_s_def = build_covariance_backward(cache.q_def, cache.s_def, d_cov_def)

    opac = cache.opacities
    d_opacity_logits = d_alpha * opac * (1.0 - opac)

    if cache.mode == "a" or cache.net is None:
        return PipelineGrads(
            means=d_mu_def, rotations=d_q_def, log_scales=d_s_def,
            opacity_logits=d_opacity_logits, colors=d_colors, net=None,
            deform_sigma=d_sigma,
        )

    d_mu_can, d_q_can, d_s_can, d_dmu, d_drot, d_dscale = apply_deformation_backward(
        cache.apply_cache, d_mu_def, d_q_def, d_s_def)
    net_grads = cache.net.backward(cache.net_cache, d_dmu, d_drot, d_dscale, d_sigma)
    return PipelineGrads(
        means=d_mu_can, rotations=d_q_can, log_scales=d_s_can,
        opacity_logits=d_opacity_logits, colors=d_colors, net=net_grads,
        deform_sigma=d_sigma,
    )
