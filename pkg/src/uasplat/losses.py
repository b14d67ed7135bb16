"""MAP training objective: uncertainty-weighted photometric NLL, confidence
guided spatial consistency, uncertainty-weighted temporal inertia, silhouette
mask loss, SSIM, and their mode-dependent weighted sum.

Every component returns both its value and analytic gradients. The sigma
weights inside the spatial/temporal regularizers are gradient-stopped: they
scale the penalty but never receive gradient themselves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .deformation import DeformationOutput
from .geometry import NumericalFault
from .rasterizer import RenderOutput

log = logging.getLogger(__name__)

MODES = ("a", "b", "c", "d")


@dataclass
class LossWeights:
    lambda_reg: float = 1.0     # log-barrier weight inside the NLL
    lambda_rot: float = 0.5
    lambda_scl: float = 0.5
    lambda_spa: float = 0.01
    lambda_temp: float = 0.01
    lambda_mask: float = 0.1
    lambda_ssim: float = 0.01
    lambda_lpips: float = 0.0   # carried for the total-loss shape; fixed no-op
    eps: float = 1e-7
    frame_interval: int = 5
    knn: int = 5

    def __post_init__(self):
        for name in ("lambda_reg", "lambda_rot", "lambda_scl", "lambda_spa",
                     "lambda_temp", "lambda_mask", "lambda_ssim", "lambda_lpips"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.knn < 1 or self.frame_interval < 1:
            raise ValueError("knn and frame_interval must be >= 1")


# ---------------------------------------------------------------------------
# photometric terms
# ---------------------------------------------------------------------------

def l1_loss(c_gt: np.ndarray, c_hat: np.ndarray) -> tuple[float, np.ndarray]:
    """Pixel-mean of the channel-summed absolute residual."""
    res = np.asarray(c_gt, dtype=np.float64) - np.asarray(c_hat, dtype=np.float64)
    npix = res.shape[0] * res.shape[1]
    loss = float(np.abs(res).sum() / npix)
    return loss, -np.sign(res) / npix


def nll_loss(c_gt: np.ndarray, c_hat: np.ndarray, u_hat: np.ndarray,
             weights: LossWeights) -> tuple[float, np.ndarray, np.ndarray]:
    """Laplacian negative log-likelihood with a learned per-pixel scale.

    Per pixel: |residual|_1 / (U + eps) + lambda_reg * log(U + eps),
    averaged over the image. The stationary point in U sits at
    r / lambda_reg - eps, so the scale tracks the residual magnitude.
    """
    u_hat = np.asarray(u_hat, dtype=np.float64)
    if np.any(u_hat < 0):
        raise NumericalFault("negative uncertainty map entered the NLL")
    res = np.asarray(c_gt, dtype=np.float64) - np.asarray(c_hat, dtype=np.float64)
    npix = res.shape[0] * res.shape[1]
    r = np.abs(res).sum(axis=2)
    denom = u_hat + weights.eps
    loss = float(np.sum(r / denom + weights.lambda_reg * np.log(denom)) / npix)
    d_c_hat = -np.sign(res) / denom[:, :, None] / npix
    d_u_hat = (-r / denom**2 + weights.lambda_reg / denom) / npix
    return loss, d_c_hat, d_u_hat


def mask_loss(o_hat: np.ndarray, m_skel: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference between accumulated opacity and the capsule mask."""
    o_hat = np.asarray(o_hat, dtype=np.float64)
    m = np.asarray(m_skel, dtype=np.float64)
    if o_hat.shape != m.shape:
        raise ValueError(f"resolution mismatch: {o_hat.shape} vs {m.shape}")
    diff = o_hat - m
    npix = diff.size
    return float(np.sum(diff * diff) / npix), 2.0 * diff / npix


# ---------------------------------------------------------------------------
# SSIM (11x11 Gaussian window, std 1.5, valid-mode) with analytic gradient
# ---------------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _ssim_kernel() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    x = np.arange(SSIM_WINDOW) - half
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _ssim_kernel()


def _blur_valid(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    out = np.zeros((h - SSIM_WINDOW + 1, w))
    for j in range(SSIM_WINDOW):
        out += _KERNEL[j] * img[j:j + h - SSIM_WINDOW + 1, :]
    out2 = np.zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1))
    for j in range(SSIM_WINDOW):
        out2 += _KERNEL[j] * out[:, j:j + w - SSIM_WINDOW + 1]
    return out2


def _blur_valid_adjoint(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    gh, gw = g.shape
    tmp = np.zeros((gh, w))
    for j in range(SSIM_WINDOW):
        tmp[:, j:j + gw] += _KERNEL[j] * g
    out = np.zeros((h, w))
    for j in range(SSIM_WINDOW):
        out[j:j + gh, :] += _KERNEL[j] * tmp
    return out


def ssim_loss(c_hat: np.ndarray, c_gt: np.ndarray) -> tuple[float, np.ndarray]:
    """1 - mean SSIM, per channel then averaged; gradient w.r.t. c_hat only."""
    x_img = np.asarray(c_hat, dtype=np.float64)
    y_img = np.asarray(c_gt, dtype=np.float64)
    h, w = x_img.shape[0], x_img.shape[1]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    grad = np.zeros_like(x_img)
    total = 0.0
    nvalid = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)
    for ch in range(3):
        x, y = x_img[:, :, ch], y_img[:, :, ch]
        mu_x, mu_y = _blur_valid(x), _blur_valid(y)
        bxx, byy, bxy = _blur_valid(x * x), _blur_valid(y * y), _blur_valid(x * y)
        sxx = bxx - mu_x * mu_x
        syy = byy - mu_y * mu_y
        sxy = bxy - mu_x * mu_y
        l_num = 2 * mu_x * mu_y + SSIM_C1
        l_den = mu_x * mu_x + mu_y * mu_y + SSIM_C1
        cs_num = 2 * sxy + SSIM_C2
        cs_den = sxx + syy + SSIM_C2
        L = l_num / l_den
        CS = cs_num / cs_den
        total += float(np.mean(L * CS))

        # adjoints holding (mu_x, bxx, bxy) as the independent intermediates
        dL_dmu = (2 * mu_y * l_den - 2 * mu_x * l_num) / (l_den * l_den)
        dCS_dsxx = -cs_num / (cs_den * cs_den)
        dCS_dsxy = 2.0 / cs_den
        f_mu = CS * dL_dmu + L * (dCS_dsxx * (-2 * mu_x) + dCS_dsxy * (-mu_y))
        f_bxx = L * dCS_dsxx
        f_bxy = L * dCS_dsxy
        scale = -1.0 / (3.0 * nvalid)  # d(1 - mean)/dSSIM_map
        grad[:, :, ch] = scale * (
            _blur_valid_adjoint(f_mu, (h, w))
            + 2 * x * _blur_valid_adjoint(f_bxx, (h, w))
            + y * _blur_valid_adjoint(f_bxy, (h, w))
        )
    ssim_value = total / 3.0
    return 1.0 - ssim_value, grad


# ---------------------------------------------------------------------------
# confidence-aware regularizers
# ---------------------------------------------------------------------------

@dataclass
class KnnGraph:
    """Frozen canonical-space neighborhood: K neighbors per Gaussian with
    row-stochastic inverse-distance weights."""

    idx: np.ndarray      # (N, K) neighbor indices
    omega: np.ndarray    # (N, K) positive weights, rows sum to 1

    @staticmethod
    def build(points: np.ndarray, k: int) -> "KnnGraph":
        pts = np.asarray(points, dtype=np.float64)
        n = pts.shape[0]
        if n < 2:
            raise ValueError("KNN graph needs at least two points")
        k = min(k, n - 1)
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
        dist = np.sqrt(np.take_along_axis(d2, idx, axis=1))
        inv = 1.0 / (dist + 1e-8)
        omega = inv / inv.sum(axis=1, keepdims=True)
        return KnnGraph(idx=idx, omega=omega)


def _safe_unit(diff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(diff, axis=-1)
    unit = np.zeros_like(diff)
    ok = norms > 1e-12
    unit[ok] = diff[ok] / norms[ok][:, None]
    return norms, unit


def spatial_loss(deform: DeformationOutput, graph: KnnGraph, weights: LossWeights
                 ) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Local-rigidity penalty on neighbor deformation differences, scaled by
    the gradient-stopped per-Gaussian sigma; mean over Gaussians.

    Returns (loss, d_dmu, d_drot, d_dscale); no gradient reaches sigma.
    """
    n, k = graph.idx.shape
    sg_sigma = deform.sigma  # treated as a constant
    d_dmu = np.zeros_like(deform.dmu)
    d_drot = np.zeros_like(deform.drot)
    d_dscale = np.zeros_like(deform.dscale)
    loss = 0.0
    coeff = (sg_sigma[:, None] * graph.omega) / n  # (N, K)
    for arr, lam, grad in (
        (deform.dmu, 1.0, d_dmu),
        (deform.drot, weights.lambda_rot, d_drot),
        (deform.dscale, weights.lambda_scl, d_dscale),
    ):
        diff = arr[:, None, :] - arr[graph.idx]          # (N, K, D)
        norms, unit = _safe_unit(diff.reshape(n * k, -1))
        loss += lam * float(np.sum(coeff.reshape(-1) * norms))
        g_pair = (lam * coeff.reshape(-1))[:, None] * unit  # (N*K, D)
        g_pair = g_pair.reshape(n, k, -1)
        grad += g_pair.sum(axis=1)
        np.add.at(grad, graph.idx.reshape(-1), -g_pair.reshape(n * k, -1))
    return loss, d_dmu, d_drot, d_dscale


def _stack_deform(out: DeformationOutput) -> np.ndarray:
    return np.concatenate([out.dmu, out.drot, out.dscale], axis=1)  # (N, 10)


def _split_deform(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return g[:, 0:3], g[:, 3:7], g[:, 7:10]


def temporal_loss(prev: DeformationOutput, mid: DeformationOutput,
                  nxt: DeformationOutput) -> tuple[float, tuple, tuple, tuple]:
    """Second-order difference of the stacked deformation vector over a
    (t-k, t, t+k) stencil, weighted by the center frame's stopped sigma.

    Vanishes on trajectories affine in t. Returns the loss and one
    (d_dmu, d_drot, d_dscale) gradient triple per stencil evaluation.
    """
    f_prev, f_mid, f_next = _stack_deform(prev), _stack_deform(mid), _stack_deform(nxt)
    n = f_mid.shape[0]
    diff = f_prev - 2.0 * f_mid + f_next
    norms, unit = _safe_unit(diff)
    sg_sigma = mid.sigma
    loss = float(np.sum(sg_sigma * norms) / n)
    base = (sg_sigma / n)[:, None] * unit
    return loss, _split_deform(base), _split_deform(-2.0 * base), _split_deform(base)


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: float
    l1: float | None = None
    nll: float | None = None
    spa: float | None = None
    temp: float | None = None
    mask: float | None = None
    ssim: float | None = None


@dataclass
class TotalLossGrads:
    d_color: np.ndarray
    d_unc: np.ndarray
    d_opac: np.ndarray
    d_deform: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    d_temporal: list[tuple] = field(default_factory=list)  # one triple per stencil


def total_loss(
    mode: str,
    warmup: bool,
    weights: LossWeights,
    c_gt: np.ndarray,
    render: RenderOutput,
    m_skel: np.ndarray,
    deform: DeformationOutput | None = None,
    graph: KnnGraph | None = None,
    temporal_triples: list[tuple[DeformationOutput, DeformationOutput, DeformationOutput]] = (),
) -> tuple[LossBreakdown, TotalLossGrads]:
    """Assemble the mode-dependent objective.

    Mode 'a' (and any mode during warmup) uses the plain L1 photometric term
    and drops the regularizers; 'b' switches to the NLL; 'c' adds the spatial
    term; 'd' additionally adds the temporal term.
    """
    mode = mode.lower()
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    photometric_l1 = warmup or mode == "a"
    use_spa = mode in ("c", "d") and not warmup
    use_temp = mode == "d" and not warmup

    bd = LossBreakdown(total=0.0)
    d_unc = np.zeros_like(render.uncertainty)
    if photometric_l1:
        phot, d_color = l1_loss(c_gt, render.color)
        bd.l1 = phot
    else:
        phot, d_color, d_unc = nll_loss(c_gt, render.color, render.uncertainty, weights)
        bd.nll = phot
    total = phot

    m_val, d_opac = mask_loss(render.opacity, m_skel)
    bd.mask = m_val
    total += weights.lambda_mask * m_val
    d_opac = weights.lambda_mask * d_opac

    s_val, d_ssim = ssim_loss(render.color, c_gt)
    bd.ssim = s_val
    total += weights.lambda_ssim * s_val
    d_color = d_color + weights.lambda_ssim * d_ssim

    grads = TotalLossGrads(d_color=d_color, d_unc=d_unc, d_opac=d_opac)

    if use_spa:
        if deform is None or graph is None:
            raise ValueError("spatial loss requires deformation outputs and a KNN graph")
        spa, g_mu, g_rot, g_scl = spatial_loss(deform, graph, weights)
        bd.spa = spa
        total += weights.lambda_spa * spa
        grads.d_deform = (weights.lambda_spa * g_mu, weights.lambda_spa * g_rot,
                          weights.lambda_spa * g_scl)

    if use_temp:
        if not temporal_triples:
            bd.temp = 0.0
            log.warning("temporal loss requested but no valid stencil frames; using 0")
        else:
            vals = []
            scale = weights.lambda_temp / len(temporal_triples)
            for prev, mid, nxt in temporal_triples:
                t_val, g_prev, g_mid, g_next = temporal_loss(prev, mid, nxt)
                vals.append(t_val)
                grads.d_temporal.append(tuple(
                    tuple(scale * g for g in triple) for triple in (g_prev, g_mid, g_next)
                ))
            bd.temp = float(np.mean(vals))
            total += weights.lambda_temp * bd.temp

    bd.total = float(total)
    return bd, grads
