"""Gaussian primitives, quaternion/scale covariance algebra, and camera projection.

All functions are pure and operate on float64 numpy arrays. Quaternions use the
(w, x, y, z) convention. Batched variants accept arbitrary leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_NEAR_PLANE = 0.01
COV2D_LOW_PASS = 0.3  # isotropic floor added to the 2D covariance diagonal, px^2
CULL_SIGMA = 3.0


class NumericalFault(RuntimeError):
    """Non-finite value or broken numerical invariant detected at runtime."""


# ---------------------------------------------------------------------------
# quaternion algebra
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / ||q||. Rejects (near-)zero quaternions."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("degenerate zero quaternion")
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion; shape (..., 4) -> (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a (x) b, batched over leading dims."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def _rotmat_backward_unit(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """dL/dq for a *unit* quaternion given dL/dR; batched."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    D = dR
    dw = 2 * (
        -z * D[..., 0, 1] + y * D[..., 0, 2] + z * D[..., 1, 0]
        - x * D[..., 1, 2] - y * D[..., 2, 0] + x * D[..., 2, 1]
    )
    dx = 2 * (
        y * D[..., 0, 1] + z * D[..., 0, 2] + y * D[..., 1, 0]
        - 2 * x * D[..., 1, 1] - w * D[..., 1, 2] + z * D[..., 2, 0]
        + w * D[..., 2, 1] - 2 * x * D[..., 2, 2]
    )
    dy = 2 * (
        -2 * y * D[..., 0, 0] + x * D[..., 0, 1] + w * D[..., 0, 2]
        + x * D[..., 1, 0] + z * D[..., 1, 2] - w * D[..., 2, 0]
        + z * D[..., 2, 1] - 2 * y * D[..., 2, 2]
    )
    dz = 2 * (
        -2 * z * D[..., 0, 0] - w * D[..., 0, 1] + x * D[..., 0, 2]
        + w * D[..., 1, 0] - 2 * z * D[..., 1, 1] + y * D[..., 1, 2]
        + x * D[..., 2, 0] + y * D[..., 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def quat_normalize_backward(q_raw: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient on q/||q|| back to the raw quaternion."""
    n = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    u = q_raw / n
    proj = np.sum(d_unit * u, axis=-1, keepdims=True)
    return (d_unit - proj * u) / n


# ---------------------------------------------------------------------------
# covariance from (quaternion, log-scale)
# ---------------------------------------------------------------------------

def build_covariance(q: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)).

    The quaternion is normalized internally, so callers may pass raw
    optimization variables. Batched: (..., 4), (..., 3) -> (..., 3, 3).
    """
    qn = quat_normalize(q)
    R = quat_to_rotmat(qn)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def build_covariance_backward(
    q: np.ndarray, log_scale: np.ndarray, d_sigma: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of build_covariance w.r.t. the raw quaternion and log-scale.

    d_sigma is expected symmetric (upstream losses on a symmetric matrix).
    """
    q = np.asarray(q, dtype=np.float64)
    qn = quat_normalize(q)
    R = quat_to_rotmat(qn)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    M = R * s[..., None, :]
    dM = (d_sigma + np.swapaxes(d_sigma, -1, -2)) @ M
    dR = dM * s[..., None, :]
    # S is diagonal: dL/ds_k = (R^T dM)_kk, then chain through exp.
    dS_diag = np.einsum("...ik,...ik->...k", R, dM)
    d_log_scale = dS_diag * s
    d_qn = _rotmat_backward_unit(qn, dR)
    d_q = quat_normalize_backward(q, d_qn)
    return d_q, d_log_scale


# ---------------------------------------------------------------------------
# camera model
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera: world-to-camera rigid transform plus intrinsics.

    x_cam = R @ x_world + t; u = fx * x/z + cx, v = fy * y/z + cy.
    Pixel (i, j) has its center at (u, v) = (j, i).
    """

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation block is not orthonormal")

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    @staticmethod
    def look_at(position, target, fx, fy, width, height, up=(0.0, 1.0, 0.0)) -> "Camera":
        """Camera at `position` with the principal ray through `target`."""
        position = np.asarray(position, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        z_c = target - position
        z_c = z_c / np.linalg.norm(z_c)
        x_c = np.cross(z_c, np.asarray(up, dtype=np.float64))
        nx = np.linalg.norm(x_c)
        if nx < 1e-9:
            x_c = np.cross(z_c, np.array([1.0, 0.0, 0.0]))
            nx = np.linalg.norm(x_c)
        x_c = x_c / nx
        y_c = np.cross(z_c, x_c)
        R = np.stack([x_c, y_c, z_c], axis=0)
        t = -R @ position
        return Camera(R=R, t=t, fx=float(fx), fy=float(fy),
                      cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=int(width), height=int(height))


# ---------------------------------------------------------------------------
# 3D -> 2D projection of Gaussians
# ---------------------------------------------------------------------------

@dataclass
class Gaussian2D:
    mean: np.ndarray      # (2,) pixels
    cov: np.ndarray       # (2, 2) pixels^2, includes the low-pass floor
    depth: float          # view-space z
    source: int           # index into the projected batch


@dataclass
class ProjectionCache:
    """Everything the projection backward pass needs."""

    cam: Camera
    x_cam: np.ndarray       # (N, 3)
    covs_world: np.ndarray  # (N, 3, 3)
    J: np.ndarray           # (N, 2, 3)
    valid: np.ndarray       # (N,) bool
    means2d: np.ndarray     # (N, 2)
    covs2d: np.ndarray      # (N, 2, 2)
    depths: np.ndarray      # (N,)


def project_gaussians(
    means_world: np.ndarray,
    covs_world: np.ndarray,
    cam: Camera,
    near: float = DEFAULT_NEAR_PLANE,
    low_pass: float = COV2D_LOW_PASS,
) -> ProjectionCache:
    """Perspective-project a batch of 3D Gaussians onto the image plane.

    Sigma' = J W_rot Sigma W_rot^T J^T + low_pass * I, with J the Jacobian of
    the perspective map at the mean. Gaussians behind the near plane or whose
    3-sigma footprint misses the image are marked invalid (culled).
    """
    means_world = np.asarray(means_world, dtype=np.float64).reshape(-1, 3)
    covs_world = np.asarray(covs_world, dtype=np.float64).reshape(-1, 3, 3)
    n = means_world.shape[0]
    x_cam = cam.world_to_cam(means_world)
    xs, ys, zs = x_cam[:, 0], x_cam[:, 1], x_cam[:, 2]
    in_front = zs > near
    zs_safe = np.where(in_front, zs, 1.0)

    means2d = np.empty((n, 2))
    means2d[:, 0] = cam.fx * xs / zs_safe + cam.cx
    means2d[:, 1] = cam.fy * ys / zs_safe + cam.cy

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs_safe
    J[:, 0, 2] = -cam.fx * xs / zs_safe**2
    J[:, 1, 1] = cam.fy / zs_safe
    J[:, 1, 2] = -cam.fy * ys / zs_safe**2

    M = cam.R @ covs_world @ cam.R.T  # view-space covariance
    covs2d = J @ M @ np.swapaxes(J, -1, -2)
    covs2d[:, 0, 0] += low_pass
    covs2d[:, 1, 1] += low_pass

    # 3-sigma screen-footprint culling against the pixel-center rectangle.
    a, b, c = covs2d[:, 0, 0], covs2d[:, 0, 1], covs2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = CULL_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))
    on_screen = (
        (means2d[:, 0] + radius >= 0.0)
        & (means2d[:, 0] - radius <= cam.width - 1)
        & (means2d[:, 1] + radius >= 0.0)
        & (means2d[:, 1] - radius <= cam.height - 1)
    )
    valid = in_front & on_screen
    return ProjectionCache(cam=cam, x_cam=x_cam, covs_world=covs_world, J=J,
                           valid=valid, means2d=means2d, covs2d=covs2d, depths=zs)


def project_gaussian(mean_world, cov_world, cam: Camera,
                     near: float = DEFAULT_NEAR_PLANE,
                     low_pass: float = COV2D_LOW_PASS) -> Gaussian2D | None:
    """Single-Gaussian projection; returns None when culled."""
    pc = project_gaussians(np.asarray(mean_world)[None], np.asarray(cov_world)[None],
                           cam, near=near, low_pass=low_pass)
    if not pc.valid[0]:
        return None
    return Gaussian2D(mean=pc.means2d[0], cov=pc.covs2d[0], depth=float(pc.depths[0]), source=0)


def project_gaussians_backward(
    pc: ProjectionCache, d_means2d: np.ndarray, d_covs2d: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of project_gaussians for the valid subset (culled entries get 0).

    Includes the dependence of the perspective Jacobian J on the camera-space
    mean, so gradients match finite differences away from culling boundaries.
    """
    cam = pc.cam
    n = pc.x_cam.shape[0]
    d_means_world = np.zeros((n, 3))
    d_covs_world = np.zeros((n, 3, 3))
    v = pc.valid
    if not np.any(v):
        return d_means_world, d_covs_world

    x, y, z = pc.x_cam[v, 0], pc.x_cam[v, 1], pc.x_cam[v, 2]
    J = pc.J[v]
    M = cam.R @ pc.covs_world[v] @ cam.R.T
    dm2 = np.asarray(d_means2d, dtype=np.float64)[v]
    dc2 = np.asarray(d_covs2d, dtype=np.float64)[v]

    # mean path: d x_cam = J^T d mean2d
    d_xcam = np.einsum("nij,ni->nj", J, dm2)

    # covariance path
    dSym = dc2 + np.swapaxes(dc2, -1, -2)
    dJ = dSym @ J @ M  # = (dC + dC^T) J M for symmetric M
    dM = np.swapaxes(J, -1, -2) @ dc2 @ J
    d_cov_w = cam.R.T @ dM @ cam.R
    d_covs_world[v] = d_cov_w

    # J depends on x_cam: J00=fx/z, J02=-fx x/z^2, J11=fy/z, J12=-fy y/z^2
    z2, z3 = z * z, z * z * z
    d_xcam[:, 0] += dJ[:, 0, 2] * (-cam.fx / z2)
    d_xcam[:, 1] += dJ[:, 1, 2] * (-cam.fy / z2)
    d_xcam[:, 2] += (
        dJ[:, 0, 0] * (-cam.fx / z2)
        + dJ[:, 0, 2] * (2.0 * cam.fx * x / z3)
        + dJ[:, 1, 1] * (-cam.fy / z2)
        + dJ[:, 1, 2] * (2.0 * cam.fy * y / z3)
    )
    d_means_world[v] = d_xcam @ cam.R
    return d_means_world, d_covs_world


# ---------------------------------------------------------------------------
# canonical Gaussian cloud
# ---------------------------------------------------------------------------

@dataclass
class GaussianCloud:
    """Canonical set of anisotropic 3D Gaussians with skinning bindings.

    Scales are stored as logs and opacity as a logit so unconstrained
    optimizer steps cannot violate positivity.
    """

    means: np.ndarray           # (N, 3)
    rotations: np.ndarray       # (N, 4) unit quaternions
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3) in [0, 1]
    bind_vertex: np.ndarray     # (N,) int indices into the skeleton bind table

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        self.bind_vertex = np.asarray(self.bind_vertex, dtype=np.int64)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            means=self.means.copy(), rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(), opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(), bind_vertex=self.bind_vertex.copy(),
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "means": self.means, "rotations": self.rotations,
            "log_scales": self.log_scales, "opacity_logits": self.opacity_logits,
            "colors": self.colors,
        }


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))
