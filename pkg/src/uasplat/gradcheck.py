"""Finite-difference verification harness for every backward-bearing
operation: covariance construction, projection, rasterization (color,
uncertainty and opacity channels), the deformation network, LBS, and the NLL
/ SSIM / spatial / temporal losses.

Each check builds random instances, scalarizes the op's outputs with fixed
random projection weights, and compares the implemented gradients against
central finite differences. Instances are resampled when they land too close
to a non-smooth point (ReLU kinks, absolute-value or norm kinks), mirroring
standard gradcheck practice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deformation import DeformationNet, DeformationOutput, NetConfig, PosEncodingConfig
from .geometry import (
    Camera,
    build_covariance,
    build_covariance_backward,
    project_gaussians,
    project_gaussians_backward,
    quat_normalize,
)
from .losses import KnnGraph, LossWeights, nll_loss, spatial_loss, ssim_loss, temporal_loss
from .rasterizer import RasterConfig, rasterize, rasterize_backward
from .skeleton import PoseFrame, lbs_backward, lbs_maps, default_skeleton

TOLERANCE = 1e-4
_REL_FLOOR = 1e-3  # guards the ratio where both gradients are essentially zero


@dataclass
class GradCheckResult:
    op: str
    max_rel_err: float
    n_instances: int
    passed: bool


def _rel_err(analytic: float, fd: float) -> float:
    return abs(analytic - fd) / max(abs(analytic), abs(fd), _REL_FLOOR)


def _central_diff(f, x: np.ndarray, idx, h: float) -> float:
    xp = x.copy()
    xp[idx] += h
    fp = f(xp)
    xp[idx] -= 2 * h
    fm = f(xp)
    return (fp - fm) / (2 * h)


def _check_array(f, x: np.ndarray, analytic: np.ndarray, h: float,
                 sample: int | None = None, rng=None) -> float:
    """Max relative error of `analytic` vs central differences of f at x."""
    flat = x.reshape(-1)
    g = analytic.reshape(-1)
    coords = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        coords = rng.choice(flat.size, size=sample, replace=False)
    worst = 0.0
    for i in coords:
        fd = _central_diff(lambda v: f(v.reshape(x.shape)), flat, i, h)
        worst = max(worst, _rel_err(g[i], fd))
    return worst


def _sym_rand(rng, n: int) -> np.ndarray:
    m = rng.normal(size=(n, n))
    return 0.5 * (m + m.T)


# ---------------------------------------------------------------------------
# per-op checks; each returns the max relative error over its instances
# ---------------------------------------------------------------------------

def _check_build_covariance(rng, n_instances):
    worst = 0.0
    for _ in range(n_instances):
        q = rng.normal(size=4)
        q += np.sign(q) * 0.2  # keep away from the zero quaternion
        s = rng.uniform(-1.0, 1.0, 3)
        up = _sym_rand(rng, 3)
        dq, ds = build_covariance_backward(q, s, up)

        worst = max(worst, _check_array(
            lambda v: float(np.sum(up * build_covariance(v, s))), q, dq, 1e-6))
        worst = max(worst, _check_array(
            lambda v: float(np.sum(up * build_covariance(q, v))), s, ds, 1e-6))
    return worst


def _random_camera(rng) -> Camera:
    q = quat_normalize(rng.normal(size=4) + np.array([2.0, 0, 0, 0]))
    from .geometry import quat_to_rotmat
    R = quat_to_rotmat(q)
    return Camera(R=R, t=rng.normal(0, 0.1, 3), fx=60 + 40 * rng.random(),
                  fy=60 + 40 * rng.random(), cx=15.5, cy=15.5, width=32, height=32)


def _check_projection(rng, n_instances):
    worst = 0.0
    done = 0
    while done < n_instances:
        cam = _random_camera(rng)
        # a point in front of the camera, near the principal ray
        x_cam = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                          rng.uniform(1.5, 4.0)])
        mean_w = cam.R.T @ (x_cam - cam.t)
        cov = build_covariance(rng.normal(size=4) + np.array([2, 0, 0, 0]),
                               rng.uniform(-3.5, -2.0, 3))
        pc = project_gaussians(mean_w[None], cov[None], cam)
        if not pc.valid[0]:
            continue
        done += 1
        wm = rng.normal(size=2)
        wc = _sym_rand(rng, 2)

        def f_from(mw, cv):
            p = project_gaussians(mw[None], cv[None], cam)
            return float(wm @ p.means2d[0] + np.sum(wc * p.covs2d[0]))

        dmw, dcv = project_gaussians_backward(pc, wm[None], wc[None])
        worst = max(worst, _check_array(lambda v: f_from(v, cov), mean_w, dmw[0], 1e-6))
        # symmetric-pair perturbations for the covariance
        for i in range(3):
            for j in range(i, 3):
                h = 1e-6
                d = np.zeros((3, 3))
                d[i, j] = d[j, i] = 1.0
                fd = (f_from(mean_w, cov + h * d) - f_from(mean_w, cov - h * d)) / (2 * h)
                ana = dcv[0][i, j] + dcv[0][j, i] if i != j else dcv[0][i, i]
                worst = max(worst, _rel_err(ana, fd))
    return worst


def _raster_instance(rng, n_gauss=4, size=8):
    means = rng.uniform(1.0, size - 2.0, (n_gauss, 2))
    covs = np.zeros((n_gauss, 2, 2))
    for i in range(n_gauss):
        b = rng.normal(size=(2, 2))
        covs[i] = b @ b.T + 0.4 * np.eye(2)
    depths = rng.uniform(1.0, 5.0, n_gauss)
    opac = rng.uniform(0.2, 0.8, n_gauss)
    colors = rng.uniform(0.0, 1.0, (n_gauss, 3))
    sigmas = rng.uniform(0.1, 2.0, n_gauss)
    # negligible thresholds remove skip/termination discontinuities
    cfg = RasterConfig(tile_size=16, alpha_cutoff=1e-12, t_min=1e-12,
                       background=rng.uniform(0, 1, 3))
    return means, covs, depths, opac, colors, sigmas, size, cfg


def _check_rasterize(rng, n_instances):
    worst = 0.0
    for _ in range(n_instances):
        means, covs, depths, opac, colors, sigmas, size, cfg = _raster_instance(rng)
        wc = rng.normal(size=(size, size, 3))
        wu = rng.normal(size=(size, size))
        wo = rng.normal(size=(size, size))

        def f(means=means, covs=covs, opac=opac, colors=colors, sigmas=sigmas):
            out = rasterize(means, covs, depths, opac, colors, sigmas, size, size, cfg)
            return float(np.sum(wc * out.color) + np.sum(wu * out.uncertainty)
                         + np.sum(wo * out.opacity))

        out = rasterize(means, covs, depths, opac, colors, sigmas, size, size, cfg)
        g = rasterize_backward(out, wc, wu, wo)
        worst = max(worst, _check_array(lambda v: f(means=v), means, g["means2d"], 1e-6))
        worst = max(worst, _check_array(lambda v: f(opac=v), opac, g["opacities"], 1e-6))
        worst = max(worst, _check_array(lambda v: f(colors=v), colors, g["colors"], 1e-6))
        worst = max(worst, _check_array(lambda v: f(sigmas=v), sigmas, g["sigmas"], 1e-6))
        for n in range(means.shape[0]):
            for i in range(2):
                for j in range(i, 2):
                    h = 1e-6
                    d = np.zeros((2, 2))
                    d[i, j] = d[j, i] = 1.0
                    cp = covs.copy()
                    cp[n] += h * d
                    cm = covs.copy()
                    cm[n] -= h * d
                    fd = (f(covs=cp) - f(covs=cm)) / (2 * h)
                    ana = (g["covs2d"][n, i, j] + g["covs2d"][n, j, i]
                           if i != j else g["covs2d"][n, i, i])
                    worst = max(worst, _rel_err(ana, fd))
    return worst


def _toy_net(rng) -> tuple[DeformationNet, np.ndarray, float, np.ndarray]:
    cfg = NetConfig(depth=2, width=16, skip_layers=(1,),
                    encoding=PosEncodingConfig(l_xyz=2, l_t=2), pose_dim=8,
                    bbox_center=np.zeros(3), bbox_half=np.ones(3))
    net = DeformationNet(cfg, rng=rng)
    for name in net.params:  # random heads so every output path carries signal
        if name.startswith("head_"):
            net.params[name] = rng.normal(0, 0.3, net.params[name].shape)
    means = rng.uniform(-0.8, 0.8, (6, 3))
    t_norm = float(rng.random())
    pose = rng.normal(size=8)
    return net, means, t_norm, pose


def _check_deformation_net(rng, n_instances):
    worst = 0.0
    done = 0
    while done < n_instances:
        net, means, t_norm, pose = _toy_net(rng)
        out, cache = net.forward(means, t_norm, pose)
        if min(float(np.abs(z).min()) for z in cache.pre_acts) < 1e-3:
            continue  # too close to a ReLU kink for finite differences
        done += 1
        ups = {
            "dmu": rng.normal(size=out.dmu.shape),
            "drot": rng.normal(size=out.drot.shape),
            "dscale": rng.normal(size=out.dscale.shape),
            "sigma": rng.normal(size=out.sigma.shape),
        }
        grads = net.backward(cache, ups["dmu"], ups["drot"], ups["dscale"], ups["sigma"])

        def f(params: dict[str, np.ndarray]) -> float:
            probe = DeformationNet(net.cfg, params=params)
            o, _ = probe.forward(means, t_norm, pose)
            return float(np.sum(ups["dmu"] * o.dmu) + np.sum(ups["drot"] * o.drot)
                         + np.sum(ups["dscale"] * o.dscale) + np.sum(ups["sigma"] * o.sigma))

        for name in net.params:
            arr = net.params[name]
            g = grads[name]
            coords = rng.choice(arr.size, size=min(6, arr.size), replace=False)
            for ci in coords:
                def f_one(v, name=name):
                    p = {k: (v if k == name else a) for k, a in net.params.items()}
                    return f(p)
                fd = _central_diff(lambda v: f_one(v.reshape(arr.shape)),
                                   arr.reshape(-1), ci, 1e-4)
                worst = max(worst, _rel_err(g.reshape(-1)[ci], fd))
    return worst


def _check_lbs(rng, n_instances):
    skel = default_skeleton()
    worst = 0.0
    for _ in range(n_instances):
        q = quat_normalize(rng.normal(size=(skel.num_joints, 4))
                           + np.array([2.0, 0, 0, 0]))
        pose = PoseFrame(t=0, joint_rotations=q, root_translation=rng.normal(0, 0.2, 3))
        w = rng.random(skel.num_joints) + 0.05
        w /= w.sum()
        maps = lbs_maps(skel, pose, w[None])
        x = rng.normal(0, 0.5, 3)
        up = rng.normal(size=3)
        ana = lbs_backward(up[None], maps)[0]

        def f(v):
            return float(up @ (maps.M[0] @ v + maps.b[0]))

        worst = max(worst, _check_array(f, x, ana, 1e-6))
    return worst


def _check_nll(rng, n_instances):
    w = LossWeights()
    worst = 0.0
    done = 0
    while done < n_instances:
        gt = rng.uniform(0, 1, (6, 6, 3))
        pred = rng.uniform(0, 1, (6, 6, 3))
        if np.abs(gt - pred).min() < 1e-4:
            continue  # |.| kink within finite-difference reach
        done += 1
        u = rng.uniform(0.05, 2.0, (6, 6))
        _, d_c, d_u = nll_loss(gt, pred, u, w)
        worst = max(worst, _check_array(
            lambda v: nll_loss(gt, v, u, w)[0], pred, d_c, 1e-6))
        worst = max(worst, _check_array(
            lambda v: nll_loss(gt, pred, v, w)[0], u, d_u, 1e-6))
    return worst


def _check_ssim(rng, n_instances):
    worst = 0.0
    for _ in range(n_instances):
        gt = rng.uniform(0, 1, (16, 16, 3))
        pred = rng.uniform(0, 1, (16, 16, 3))
        _, d_c = ssim_loss(pred, gt)
        worst = max(worst, _check_array(
            lambda v: ssim_loss(v, gt)[0], pred, d_c, 1e-6, sample=40, rng=rng))
    return worst


def _random_deform(rng, n) -> DeformationOutput:
    return DeformationOutput(
        dmu=rng.normal(0, 0.5, (n, 3)), drot=rng.normal(0, 0.5, (n, 4)),
        dscale=rng.normal(0, 0.5, (n, 3)), sigma=rng.uniform(0.1, 2.0, n),
        sigma_raw=np.zeros(n),
    )


def _deform_replaced(d: DeformationOutput, **kv) -> DeformationOutput:
    fields = {"dmu": d.dmu, "drot": d.drot, "dscale": d.dscale,
              "sigma": d.sigma, "sigma_raw": d.sigma_raw}
    fields.update(kv)
    return DeformationOutput(**fields)


def _check_spatial(rng, n_instances):
    w = LossWeights()
    worst = 0.0
    n = 8
    for _ in range(n_instances):
        pts = rng.normal(0, 1, (n, 3))
        graph = KnnGraph.build(pts, 3)
        d = _random_deform(rng, n)
        _, g_mu, g_rot, g_scl = spatial_loss(d, graph, w)
        for attr, g in (("dmu", g_mu), ("drot", g_rot), ("dscale", g_scl)):
            arr = getattr(d, attr)
            worst = max(worst, _check_array(
                lambda v, attr=attr: spatial_loss(_deform_replaced(d, **{attr: v}),
                                                  graph, w)[0],
                arr, g, 1e-6))
    return worst


def _check_temporal(rng, n_instances):
    worst = 0.0
    n = 6
    for _ in range(n_instances):
        prev, mid, nxt = (_random_deform(rng, n) for _ in range(3))
        _, g_prev, g_mid, g_next = temporal_loss(prev, mid, nxt)
        for which, obj, gs in (("prev", prev, g_prev), ("mid", mid, g_mid),
                               ("next", nxt, g_next)):
            for attr, g in zip(("dmu", "drot", "dscale"), gs):
                arr = getattr(obj, attr)

                def f(v, which=which, attr=attr):
                    repl = {"prev": prev, "mid": mid, "next": nxt}
                    repl[which] = _deform_replaced(repl[which], **{attr: v})
                    return temporal_loss(repl["prev"], repl["mid"], repl["next"])[0]

                worst = max(worst, _check_array(f, arr, g, 1e-6))
    return worst


_CHECKS = {
    "build_covariance": _check_build_covariance,
    "projection": _check_projection,
    "rasterize": _check_rasterize,
    "deformation_net": _check_deformation_net,
    "lbs": _check_lbs,
    "nll": _check_nll,
    "ssim": _check_ssim,
    "spatial": _check_spatial,
    "temporal": _check_temporal,
}

ALL_OPS = tuple(_CHECKS)


def run_gradcheck(ops: list[str] | None = None, seed: int = 0,
                  n_instances: int = 20, corrupt: str | None = None
                  ) -> list[GradCheckResult]:
    """Run the finite-difference suites; `corrupt` injects a known-bad error
    into one op's result (harness self-test)."""
    names = list(ops) if ops else list(ALL_OPS)
    results = []
    for name in names:
        if name not in _CHECKS:
            raise ValueError(f"unknown gradcheck op {name!r}; choose from {ALL_OPS}")
        rng = np.random.default_rng(seed + ALL_OPS.index(name))
        worst = _CHECKS[name](rng, n_instances)
        if corrupt == name:
            worst = max(worst, 1.0)
        results.append(GradCheckResult(op=name, max_rel_err=float(worst),
                                       n_instances=n_instances,
                                       passed=worst < TOLERANCE))
    return results


def format_results(results: list[GradCheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.op:<18} max_rel_err={r.max_rel_err:.3e} "
                     f"({r.n_instances} instances)")
    return "\n".join(lines)
