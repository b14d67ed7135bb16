"""Probabilistic deformation network: an MLP mapping (encoded canonical mean,
encoded time, pose) to per-Gaussian geometry offsets and a positive
uncertainty scale. Forward and reverse passes are written out by hand so the
whole trainer stays in plain float64 numpy and can be checked against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import NumericalFault, quat_mul, quat_normalize, sigmoid

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class PosEncodingConfig:
    """Sinusoidal band counts for coordinates and time."""

    l_xyz: int = 10
    l_t: int = 6
    include_input: bool = False

    def __post_init__(self):
        if self.l_xyz < 1 or self.l_t < 1:
            raise ValueError("band counts must be >= 1")

    def dim_xyz(self) -> int:
        return 3 * (2 * self.l_xyz + (1 if self.include_input else 0))

    def dim_t(self) -> int:
        return 2 * self.l_t + (1 if self.include_input else 0)


def pos_encode(x: np.ndarray, bands: int, include_input: bool = False) -> np.ndarray:
    """gamma(x) = (sin(2^k pi x), cos(2^k pi x)) for k = 0..bands-1, per component.

    Output dim is 2*bands*d (+d when the raw input is appended); layout is
    component-major, band-minor, sin before cos.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x[None]
    freqs = (2.0 ** np.arange(bands)) * np.pi
    ang = x[..., :, None] * freqs  # (..., d, L)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., d, L, 2)
    enc = enc.reshape(*x.shape[:-1], -1)
    if include_input:
        enc = np.concatenate([x, enc], axis=-1)
    return enc


def pos_encode_scalar(t: float, bands: int, include_input: bool = False) -> np.ndarray:
    return pos_encode(np.array([float(t)]), bands, include_input)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


@dataclass
class NetConfig:
    depth: int = 8
    width: int = 256
    skip_layers: tuple[int, ...] = (4,)
    encoding: PosEncodingConfig = field(default_factory=PosEncodingConfig)
    pose_dim: int = 24
    bbox_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bbox_half: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.bbox_center = np.asarray(self.bbox_center, dtype=np.float64).reshape(3)
        self.bbox_half = np.asarray(self.bbox_half, dtype=np.float64).reshape(3)
        if any(l <= 0 or l >= self.depth for l in self.skip_layers):
            raise ValueError("skip layers must be strictly inside the trunk")

    @property
    def input_dim(self) -> int:
        return self.encoding.dim_xyz() + self.encoding.dim_t() + self.pose_dim


HEAD_DIMS = {"dmu": 3, "drot": 4, "dscale": 3, "sigma": 1}


@dataclass
class DeformationOutput:
    """Per-Gaussian offsets. drot is the un-normalized quaternion delta
    (identity plus the raw head output), so zero head output is a no-op."""

    dmu: np.ndarray     # (N, 3)
    drot: np.ndarray    # (N, 4)
    dscale: np.ndarray  # (N, 3)
    sigma: np.ndarray   # (N,) softplus-positive
    sigma_raw: np.ndarray  # (N,) pre-activation, kept for the backward pass

    @staticmethod
    def zeros(n: int) -> "DeformationOutput":
        return DeformationOutput(
            dmu=np.zeros((n, 3)), drot=np.tile(IDENTITY_QUAT, (n, 1)),
            dscale=np.zeros((n, 3)), sigma=softplus(np.zeros(n)), sigma_raw=np.zeros(n),
        )


@dataclass
class NetCache:
    enc: np.ndarray
    layer_inputs: list[np.ndarray]
    pre_acts: list[np.ndarray]
    hidden: np.ndarray
    sigma_raw: np.ndarray


class DeformationNet:
    """ReLU MLP with a skip concatenation of the encoded input and four
    zero-initialized output heads, so training starts from the undeformed
    canonical state."""

    def __init__(self, cfg: NetConfig, params: dict[str, np.ndarray] | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        if params is not None:
            self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        else:
            self.params = self._init_params(rng or np.random.default_rng(0))

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        cfg = self.cfg
        params: dict[str, np.ndarray] = {}
        in_dim = cfg.input_dim
        for l in range(cfg.depth):
            d_in = cfg.width + (in_dim if l in cfg.skip_layers else 0) if l > 0 else in_dim
            params[f"layer{l}.W"] = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(cfg.width, d_in))
            params[f"layer{l}.b"] = np.zeros(cfg.width)
        for name, dim in HEAD_DIMS.items():
            params[f"head_{name}.W"] = np.zeros((dim, cfg.width))
            params[f"head_{name}.b"] = np.zeros(dim)
        return params

    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def encode_inputs(self, means_can: np.ndarray, t_norm: float, pose_vec: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        x_n = (np.asarray(means_can, dtype=np.float64) - cfg.bbox_center) / cfg.bbox_half
        enc_x = pos_encode(x_n, cfg.encoding.l_xyz, cfg.encoding.include_input)
        enc_t = pos_encode_scalar(t_norm, cfg.encoding.l_t, cfg.encoding.include_input)
        n = enc_x.shape[0]
        pose_vec = np.asarray(pose_vec, dtype=np.float64).reshape(-1)
        if pose_vec.shape[0] != cfg.pose_dim:
            raise ValueError(f"pose vector has dim {pose_vec.shape[0]}, expected {cfg.pose_dim}")
        return np.concatenate(
            [enc_x, np.tile(enc_t, (n, 1)), np.tile(pose_vec, (n, 1))], axis=1
        )

    def forward(self, means_can: np.ndarray, t_norm: float, pose_vec: np.ndarray
                ) -> tuple[DeformationOutput, NetCache]:
        """Evaluate the network on a gradient-stopped batch of canonical means.

        The canonical means enter only through the encoding; backward never
        propagates to them (stop-gradient contract).
        """
        cfg = self.cfg
        enc = self.encode_inputs(means_can, t_norm, pose_vec)
        h = enc
        layer_inputs: list[np.ndarray] = []
        pre_acts: list[np.ndarray] = []
        for l in range(cfg.depth):
            inp = np.concatenate([h, enc], axis=1) if (l in cfg.skip_layers and l > 0) else h
            layer_inputs.append(inp)
            z = inp @ self.params[f"layer{l}.W"].T + self.params[f"layer{l}.b"]
            pre_acts.append(z)
            h = np.maximum(z, 0.0)
        heads = {
            name: h @ self.params[f"head_{name}.W"].T + self.params[f"head_{name}.b"]
            for name in HEAD_DIMS
        }
        sigma_raw = heads["sigma"][:, 0]
        out = DeformationOutput(
            dmu=heads["dmu"],
            drot=heads["drot"] + IDENTITY_QUAT,
            dscale=heads["dscale"],
            sigma=softplus(sigma_raw),
            sigma_raw=sigma_raw,
        )
        for name, arr in (("dmu", out.dmu), ("drot", out.drot),
                          ("dscale", out.dscale), ("sigma", out.sigma)):
            if not np.all(np.isfinite(arr)):
                raise NumericalFault(f"deformation network produced non-finite {name}")
        return out, NetCache(enc=enc, layer_inputs=layer_inputs, pre_acts=pre_acts,
                             hidden=h, sigma_raw=sigma_raw)

    def backward(self, cache: NetCache, d_dmu: np.ndarray, d_drot: np.ndarray,
                 d_dscale: np.ndarray, d_sigma: np.ndarray) -> dict[str, np.ndarray]:
        """Exact reverse pass onto the parameters.

        d_drot is the gradient on the identity-shifted delta (the shift is
        constant, so it is also the raw-head gradient). d_sigma is chained
        through the softplus. Regularizers pass d_sigma = 0 by contract.
        """
        cfg = self.cfg
        n = cache.hidden.shape[0]
        grads = {}
        up = {
            "dmu": np.asarray(d_dmu, dtype=np.float64).reshape(n, 3),
            "drot": np.asarray(d_drot, dtype=np.float64).reshape(n, 4),
            "dscale": np.asarray(d_dscale, dtype=np.float64).reshape(n, 3),
            "sigma": (np.asarray(d_sigma, dtype=np.float64).reshape(n)
                      * sigmoid(cache.sigma_raw))[:, None],
        }
        d_h = np.zeros_like(cache.hidden)
        for name, g in up.items():
            grads[f"head_{name}.W"] = g.T @ cache.hidden
            grads[f"head_{name}.b"] = g.sum(axis=0)
            d_h = d_h + g @ self.params[f"head_{name}.W"]
        for l in range(cfg.depth - 1, -1, -1):
            d_z = d_h * (cache.pre_acts[l] > 0.0)
            grads[f"layer{l}.W"] = d_z.T @ cache.layer_inputs[l]
            grads[f"layer{l}.b"] = d_z.sum(axis=0)
            d_inp = d_z @ self.params[f"layer{l}.W"]
            if l in cfg.skip_layers and l > 0:
                d_h = d_inp[:, : cfg.width]  # encoded-input part is gradient-stopped
            else:
                d_h = d_inp
        return grads


# ---------------------------------------------------------------------------
# applying offsets to canonical Gaussians
# ---------------------------------------------------------------------------

@dataclass
class ApplyCache:
    q_can: np.ndarray
    drot: np.ndarray
    dq_unit: np.ndarray
    q_prod: np.ndarray


def apply_deformation(means, rotations, log_scales, out: DeformationOutput
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray, ApplyCache]:
    """Deformed state: mu + dmu, s + ds, normalize(q (x) normalize(drot))."""
    dq_unit = quat_normalize(out.drot)
    q_prod = quat_mul(rotations, dq_unit)
    q_def = quat_normalize(q_prod)
    cache = ApplyCache(q_can=np.asarray(rotations, dtype=np.float64),
                       drot=out.drot, dq_unit=dq_unit, q_prod=q_prod)
    return means + out.dmu, q_def, log_scales + out.dscale, cache


def _quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., 1:] *= -1.0
    return out


def apply_deformation_backward(cache: ApplyCache, d_mu_def, d_q_def, d_s_def):
    """Adjoints: identity for the additive offsets, product rule plus
    normalization Jacobians for the quaternion path.

    Returns (d_mu_can, d_q_can, d_s_can, d_dmu, d_drot, d_dscale).
    """
    from .geometry import quat_normalize_backward

    d_q_prod = quat_normalize_backward(cache.q_prod, np.asarray(d_q_def, dtype=np.float64))
    # c = a (x) b: dL/da = dc (x) conj(b), dL/db = conj(a) (x) dc
    d_q_can = quat_mul(d_q_prod, _quat_conj(cache.dq_unit))
    d_dq_unit = quat_mul(_quat_conj(cache.q_can), d_q_prod)
    d_drot = quat_normalize_backward(cache.drot, d_dq_unit)
    return (np.asarray(d_mu_def, dtype=np.float64), d_q_can,
            np.asarray(d_s_def, dtype=np.float64),
            np.asarray(d_mu_def, dtype=np.float64), d_drot,
            np.asarray(d_s_def, dtype=np.float64))
