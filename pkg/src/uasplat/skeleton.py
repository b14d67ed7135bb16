"""Simplified articulated skeleton: forward kinematics, blend weights, LBS,
and the projected capsule silhouette used by the mask loss.

Joints are stored in topological order (parent index < own index, root = -1).
A bone is the segment from a joint to its parent; it moves rigidly with the
*parent* (proximal) joint, which is where its blend weight is accumulated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, quat_normalize, quat_to_rotmat


@dataclass
class Skeleton:
    joint_names: list[str]
    parents: np.ndarray          # (J,) int, root has -1
    offsets: np.ndarray          # (J, 3) bind-pose local translations
    bone_radii: np.ndarray       # (B,) capsule radius per bone, bones = non-root joints
    bind_vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    blend_weights: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.bone_radii = np.asarray(self.bone_radii, dtype=np.float64)
        self.bind_vertices = np.asarray(self.bind_vertices, dtype=np.float64).reshape(-1, 3)
        self.blend_weights = np.asarray(self.blend_weights, dtype=np.float64)
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j in range(1, self.num_joints):
            if not 0 <= self.parents[j] < j:
                raise ValueError("joints must be in topological order")
        if self.blend_weights.size:
            rows = self.blend_weights.sum(axis=1)
            if np.any(self.blend_weights < 0) or np.any(np.abs(rows - 1.0) > 1e-6):
                raise ValueError("blend-weight rows must be non-negative and sum to 1")

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @property
    def bones(self) -> list[tuple[int, int]]:
        """(parent, child) joint index pairs, one per non-root joint."""
        return [(int(self.parents[j]), j) for j in range(1, self.num_joints)]

    def bind_joint_positions(self) -> np.ndarray:
        """World joint positions in the bind pose (identity rotations)."""
        pos = np.zeros((self.num_joints, 3))
        for j in range(self.num_joints):
            p = self.parents[j]
            pos[j] = self.offsets[j] if p < 0 else pos[p] + self.offsets[j]
        return pos

    def with_bindings(self, points: np.ndarray) -> "Skeleton":
        """Return a copy whose bind table is `points` with computed weights."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return Skeleton(
            joint_names=list(self.joint_names), parents=self.parents.copy(),
            offsets=self.offsets.copy(), bone_radii=self.bone_radii.copy(),
            bind_vertices=points, blend_weights=compute_blend_weights(self, points),
        )


@dataclass
class PoseFrame:
    t: int
    joint_rotations: np.ndarray  # (J, 4) local unit quaternions
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)

    @staticmethod
    def identity(num_joints: int, t: int = 0) -> "PoseFrame":
        q = np.zeros((num_joints, 4))
        q[:, 0] = 1.0
        return PoseFrame(t=t, joint_rotations=q, root_translation=np.zeros(3))

    def flat_quaternions(self) -> np.ndarray:
        return self.joint_rotations.reshape(-1)


def forward_kinematics(skel: Skeleton, pose: PoseFrame) -> np.ndarray:
    """Per-joint world transforms as (J, 4, 4) rigid matrices.

    A_j = A_parent . Trans(offset_j) . Rot(q_j); the root additionally
    composes the pose's root translation.
    """
    J = skel.num_joints
    if pose.joint_rotations.shape != (J, 4):
        raise ValueError(
            f"pose has {pose.joint_rotations.shape[0]} joint rotations, skeleton has {J}"
        )
    R = quat_to_rotmat(quat_normalize(pose.joint_rotations))
    out = np.zeros((J, 4, 4))
    for j in range(J):
        local = np.eye(4)
        local[:3, :3] = R[j]
        local[:3, 3] = skel.offsets[j]
        p = skel.parents[j]
        if p < 0:
            root = np.eye(4)
            root[:3, 3] = pose.root_translation
            out[j] = root @ local
        else:
            out[j] = out[p] @ local
    return out


def skinning_transforms(skel: Skeleton, pose: PoseFrame) -> np.ndarray:
    """Per-joint matrices mapping bind-space points to posed space: A_j B_j^{-1}."""
    A = forward_kinematics(skel, pose)
    bind = skel.bind_joint_positions()
    out = A.copy()
    # B_j is a pure translation to the bind position, so B^{-1} just shifts.
    out[:, :3, 3] -= np.einsum("jab,jb->ja", A[:, :3, :3], bind)
    return out


def compute_blend_weights(skel: Skeleton, points: np.ndarray) -> np.ndarray:
    """Normalized inverse-distance weights to the two nearest bones.

    Each bone's weight lands on its proximal joint; if both nearest bones
    share that joint the row collapses to a single 1.0 entry.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    bind = skel.bind_joint_positions()
    bones = skel.bones
    dists = np.stack(
        [_point_segment_distance(points, bind[p], bind[c]) for p, c in bones], axis=1
    )
    weights = np.zeros((points.shape[0], skel.num_joints))
    order = np.argsort(dists, axis=1)
    for i in range(points.shape[0]):
        b0, b1 = order[i, 0], order[i, min(1, len(bones) - 1)]
        inv = np.array([1.0 / (dists[i, b0] + 1e-6), 1.0 / (dists[i, b1] + 1e-6)])
        inv /= inv.sum()
        weights[i, bones[b0][0]] += inv[0]
        weights[i, bones[b1][0]] += inv[1]
    return weights


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=1)
    s = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + s[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


# ---------------------------------------------------------------------------
# linear blend skinning
# ---------------------------------------------------------------------------

@dataclass
class LbsMaps:
    """Per-point affine maps x_obs = M x + b plus the polar-projected rotation."""

    M: np.ndarray        # (N, 3, 3) blended linear part
    b: np.ndarray        # (N, 3)
    R_blend: np.ndarray  # (N, 3, 3) polar projection of M


def lbs_maps(skel: Skeleton, pose: PoseFrame, weights: np.ndarray) -> LbsMaps:
    """Blend per-joint skinning transforms with the given weight rows."""
    T = skinning_transforms(skel, pose)  # (J, 4, 4)
    weights = np.asarray(weights, dtype=np.float64)
    M = np.einsum("nj,jab->nab", weights, T[:, :3, :3])
    b = weights @ T[:, :3, 3]
    return LbsMaps(M=M, b=b, R_blend=_polar_rotation(M))


def _polar_rotation(M: np.ndarray) -> np.ndarray:
    """Closest rotation to each 3x3 matrix (polar factor, reflection-corrected)."""
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    det = np.linalg.det(R)
    flip = det < 0
    if np.any(flip):
        U = U.copy()
        U[flip, :, 2] *= -1.0
        R = U @ Vt
    return R


def lbs_transform(
    x_can: np.ndarray, weights: np.ndarray, skel: Skeleton, pose: PoseFrame
) -> tuple[np.ndarray, np.ndarray]:
    """Warp canonical points to observation space.

    Returns (x_obs, R_blend): positions use the raw blended affine map, while
    R_blend is the re-orthonormalized rotation applied to Gaussian frames.
    """
    x_can = np.asarray(x_can, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    single = x_can.ndim == 1
    pts = x_can.reshape(-1, 3)
    w = weights.reshape(1, -1) if weights.ndim == 1 else weights
    maps = lbs_maps(skel, pose, w)
    x_obs = np.einsum("nab,nb->na", maps.M, pts) + maps.b
    if single:
        return x_obs[0], maps.R_blend[0]
    return x_obs, maps.R_blend


def lbs_backward(d_x_obs: np.ndarray, maps: LbsMaps) -> np.ndarray:
    """dL/dx_can = M^T dL/dx_obs (pose and weights are constants)."""
    d = np.asarray(d_x_obs, dtype=np.float64)
    if d.ndim == 1:
        return maps.M[0].T @ d
    return np.einsum("nba,nb->na", maps.M, d)


# ---------------------------------------------------------------------------
# capsule silhouette mask
# ---------------------------------------------------------------------------

def render_skeleton_mask(
    skel: Skeleton, pose: PoseFrame, cam: Camera, capsule_radii: np.ndarray | None = None
) -> np.ndarray:
    """Binary silhouette of the posed skeleton's bone capsules.

    A pixel is inside when its viewing ray passes within the capsule radius
    of the posed bone segment (exact ray-segment distance, no sampling).
    """
    radii = skel.bone_radii if capsule_radii is None else np.asarray(capsule_radii, dtype=np.float64)
    A = forward_kinematics(skel, pose)
    joints_w = A[:, :3, 3]

    # Rays through every pixel center, in world space.
    us, vs = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    dirs_cam = np.stack(
        [(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us, dtype=np.float64)],
        axis=-1,
    ).reshape(-1, 3)
    dirs = dirs_cam @ cam.R  # R^T dirs_cam
    origin = -cam.R.T @ cam.t

    mask = np.zeros(cam.height * cam.width, dtype=bool)
    for (p, c), r in zip(skel.bones, radii):
        d = _ray_segment_distance(origin, dirs, joints_w[p], joints_w[c])
        mask |= d <= r
    return mask.reshape(cam.height, cam.width)


def _ray_segment_distance(o: np.ndarray, dirs: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimum distance between rays (o + t*dir, t >= 0) and segment a->b."""
    u = dirs                      # (n, 3), not normalized (scales t only)
    v = b - a                     # (3,)
    w0 = o - a                    # (3,)
    A = np.einsum("ni,ni->n", u, u)
    B = u @ v
    C = float(v @ v)
    D = u @ w0
    E = float(v @ w0)
    denom = A * C - B * B
    # closest parameters of the infinite lines
    with np.errstate(divide="ignore", invalid="ignore"):
        t_line = np.where(denom > 1e-12, (B * E - C * D) / denom, 0.0)
        s_line = np.where(denom > 1e-12, (A * E - B * D) / denom, E / C if C > 1e-18 else 0.0)
    # clamp segment parameter, re-solve ray parameter, clamp ray parameter
    s = np.clip(s_line, 0.0, 1.0)
    t = np.where(A > 1e-18, (s * B - D) / A, 0.0)
    t = np.maximum(t, 0.0)
    # after clamping t, re-clamp s for that fixed t
    s = np.clip((t * B + E) / C, 0.0, 1.0) if C > 1e-18 else np.zeros_like(t)
    p_ray = o + t[:, None] * u
    p_seg = a + s[:, None] * v
    return np.linalg.norm(p_ray - p_seg, axis=1)


def default_skeleton() -> Skeleton:
    """Six-joint figure: root, spine, and two 2-joint arms hanging off the spine."""
    names = ["root", "spine", "l_arm", "l_fore", "r_arm", "r_fore"]
    parents = [-1, 0, 1, 2, 1, 4]
    offsets = np.array([
        [0.0, 0.0, 0.0],
        [0.0, 0.55, 0.0],
        [-0.28, 0.0, 0.0],
        [-0.32, 0.0, 0.0],
        [0.28, 0.0, 0.0],
        [0.32, 0.0, 0.0],
    ])
    radii = np.array([0.14, 0.07, 0.06, 0.07, 0.06])
    return Skeleton(joint_names=names, parents=parents, offsets=offsets, bone_radii=radii)
