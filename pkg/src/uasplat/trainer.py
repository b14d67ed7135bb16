"""Optimization loop: Adam with per-group learning rates, progressive
uncertainty activation (L1 warmup then the MAP objective), ablation modes,
deterministic seeding, and bit-exact checkpointing.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, TrainConfig, config_hash, dump_config
from .deformation import DeformationNet, NetConfig, PosEncodingConfig
from .geometry import GaussianCloud, NumericalFault, logit, quat_normalize, sigmoid
from .io import MetricsLog, load_checkpoint, save_checkpoint
from .losses import KnnGraph, LossBreakdown, total_loss
from .rasterizer import RasterConfig, full_backward, full_forward
from .skeleton import Skeleton
from .synth import SyntheticDataset

log = logging.getLogger(__name__)

GAUSSIAN_GROUPS = ("means", "rotations", "log_scales", "opacity_logits", "colors")


def init_cloud(skel: Skeleton, n_per_bone: int, rng: np.random.Generator
               ) -> tuple[GaussianCloud, Skeleton]:
    """Seed Gaussians on the bone capsules of the canonical pose.

    Scales start at the log of the mean nearest-neighbor distance, opacity at
    logit(0.1), colors mid-gray. Returns the cloud and a skeleton carrying its
    bind table (one bind vertex per Gaussian, nearest-bone weights).
    """
    if n_per_bone < 1:
        raise ValueError("n_per_bone must be >= 1")
    bind = skel.bind_joint_positions()
    positions = []
    for (p, c), radius in zip(skel.bones, skel.bone_radii):
        a_pt, b_pt = bind[p], bind[c]
        s = (np.arange(n_per_bone) + 0.5) / n_per_bone
        pts = a_pt + s[:, None] * (b_pt - a_pt)
        pts = pts + rng.normal(0.0, 0.5 * radius, (n_per_bone, 3))
        positions.append(pts)
    positions = np.concatenate(positions, axis=0)
    n = positions.shape[0]

    if n > 1:
        d2 = np.sum((positions[:, None, :] - positions[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        mean_nn = float(np.mean(np.sqrt(d2.min(axis=1))))
    else:
        mean_nn = 0.1
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    cloud = GaussianCloud(
        means=positions, rotations=rotations,
        log_scales=np.full((n, 3), np.log(max(mean_nn, 1e-6))),
        opacity_logits=np.full(n, logit(0.1)),
        colors=np.full((n, 3), 0.5), bind_vertex=np.arange(n),
    )
    return cloud, skel.with_bindings(positions)


def _net_config_for(cloud: GaussianCloud, skel: Skeleton, cfg: TrainConfig) -> NetConfig:
    lo, hi = cloud.means.min(axis=0), cloud.means.max(axis=0)
    center = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo) * 1.15, 0.1)
    return NetConfig(
        depth=cfg.net.depth, width=cfg.net.width, skip_layers=tuple(cfg.net.skip_layers),
        encoding=PosEncodingConfig(l_xyz=cfg.net.l_xyz, l_t=cfg.net.l_t),
        pose_dim=4 * skel.num_joints, bbox_center=center, bbox_half=half,
    )


@dataclass
class TrainerState:
    config: RunConfig
    dataset: SyntheticDataset
    cloud: GaussianCloud
    skel: Skeleton                  # trained cloud's bind table
    net: DeformationNet | None
    graph: KnnGraph | None
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    iteration: int
    rng: np.random.Generator

    @property
    def train_cfg(self) -> TrainConfig:
        return self.config.train

    def raster_config(self) -> RasterConfig:
        r = self.train_cfg.raster
        return RasterConfig(tile_size=r.tile_size, alpha_cutoff=r.alpha_cutoff,
                            t_min=r.t_min, background=self.dataset.background,
                            alpha_clamp=r.alpha_clamp)

    def param_items(self):
        for name, arr in self.cloud.state_arrays().items():
            yield f"cloud.{name}", arr
        if self.net is not None:
            for name, arr in self.net.params.items():
                yield f"net.{name}", arr


def init_state(config: RunConfig, dataset: SyntheticDataset) -> TrainerState:
    cfg = config.train
    cfg.loss.frame_interval = cfg.frame_interval  # trainer's value governs
    rng = np.random.default_rng(cfg.seed)
    n_bones = len(dataset.skeleton.bones)
    n_per_bone = max(1, int(np.ceil(cfg.n_gaussians / n_bones)))
    cloud, skel_bound = init_cloud(dataset.skeleton, n_per_bone, rng)
    net = None
    graph = None
    if cfg.mode != "a":
        net = DeformationNet(_net_config_for(cloud, dataset.skeleton, cfg),
                             rng=np.random.default_rng(cfg.seed + 1))
        graph = KnnGraph.build(cloud.means, cfg.loss.knn)
    state = TrainerState(
        config=config, dataset=dataset, cloud=cloud, skel=skel_bound, net=net,
        graph=graph, adam_m={}, adam_v={}, adam_step=0, iteration=0, rng=rng,
    )
    for key, arr in state.param_items():
        state.adam_m[key] = np.zeros_like(arr)
        state.adam_v[key] = np.zeros_like(arr)
    return state


def _lr_for(state: TrainerState, group: str) -> float:
    cfg = state.train_cfg
    if group == "means":
        if cfg.lr_means_init == 0.0:
            return 0.0
        frac = state.iteration / max(1, cfg.total_iters)
        return cfg.lr_means_init * (cfg.lr_means_final / cfg.lr_means_init) ** frac
    return {
        "rotations": cfg.lr_rotations, "log_scales": cfg.lr_log_scales,
        "opacity_logits": cfg.lr_opacities, "colors": cfg.lr_colors,
        "net": cfg.lr_net,
    }[group]


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                lr: float, beta1: float, beta2: float, eps: float, step: int):
    """Textbook Adam with bias correction; updates param/m/v in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _apply_gradients(state: TrainerState, cloud_grads: dict[str, np.ndarray],
                     net_grads: dict[str, np.ndarray] | None):
    cfg = state.train_cfg
    state.adam_step += 1
    for group in GAUSSIAN_GROUPS:
        lr = _lr_for(state, group)
        if lr == 0.0:
            continue
        key = f"cloud.{group}"
        adam_update(getattr(state.cloud, group), cloud_grads[group],
                    state.adam_m[key], state.adam_v[key], lr,
                    cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps_gaussian,
                    state.adam_step)
    if net_grads is not None and state.net is not None:
        lr = _lr_for(state, "net")
        if lr != 0.0:
            for name, grad in net_grads.items():
                key = f"net.{name}"
                lr_p = lr * cfg.lr_sigma_scale if name.startswith("head_sigma") else lr
                adam_update(state.net.params[name], grad, state.adam_m[key],
                            state.adam_v[key], lr_p, cfg.adam_beta1, cfg.adam_beta2,
                            cfg.adam_eps_net, state.adam_step)
    # projections back onto the type invariants
    state.cloud.rotations = quat_normalize(state.cloud.rotations)
    np.clip(state.cloud.colors, 0.0, 1.0, out=state.cloud.colors)


def _accumulate(dst: dict[str, np.ndarray], src: dict[str, np.ndarray]):
    for k, v in src.items():
        dst[k] += v


def train_step(state: TrainerState) -> tuple[LossBreakdown, float]:
    """One optimization step on a uniformly sampled training frame.

    During warmup (iteration < warmup_iters) the objective is the mode-A
    photometric form; afterwards the configured mode's MAP objective applies.
    Returns the loss breakdown and the train-view PSNR of the step's render.
    """
    cfg = state.train_cfg
    ds = state.dataset
    warmup = state.iteration < cfg.warmup_iters
    frames = ds.train_frames(cfg.frame_interval)
    frame = int(frames[state.rng.integers(len(frames))])
    pose = ds.poses[frame]
    target = ds.occluded[frame]

    render, cache = full_forward(
        state.cloud, state.skel, pose, ds.t_norm(frame), ds.train_camera,
        state.raster_config(), net=state.net, mode=cfg.mode,
    )

    temporal_triples = []
    temporal_caches = []
    if cfg.mode == "d" and not warmup and state.net is not None:
        centers = ds.temporal_centers(cfg.frame_interval)
        if centers:
            take = min(cfg.temporal_samples, len(centers))
            chosen = state.rng.choice(len(centers), size=take, replace=False)
            k = cfg.frame_interval
            for ci in np.sort(chosen):
                tc = centers[int(ci)]
                outs, caches = [], []
                for tt in (tc - k, tc, tc + k):
                    o, c = state.net.forward(state.cloud.means, ds.t_norm(tt),
                                             ds.poses[tt].flat_quaternions())
                    outs.append(o)
                    caches.append(c)
                temporal_triples.append(tuple(outs))
                temporal_caches.append(caches)

    breakdown, lgrads = total_loss(
        cfg.mode, warmup, cfg.loss, target, render, ds.skel_masks[frame],
        deform=cache.deform if cfg.mode != "a" else None,
        graph=state.graph, temporal_triples=temporal_triples,
    )
    if not np.isfinite(breakdown.total):
        raise NumericalFault(f"non-finite loss at iteration {state.iteration}")

    pgrads = full_backward(cache, lgrads.d_color, lgrads.d_unc, lgrads.d_opac)
    cloud_grads = {
        "means": pgrads.means, "rotations": pgrads.rotations,
        "log_scales": pgrads.log_scales, "opacity_logits": pgrads.opacity_logits,
        "colors": pgrads.colors,
    }
    net_grads = pgrads.net
    if lgrads.d_deform is not None and state.net is not None:
        g_mu, g_rot, g_scl = lgrads.d_deform
        extra = state.net.backward(cache.net_cache, g_mu, g_rot, g_scl,
                                   np.zeros(len(state.cloud)))
        _accumulate(net_grads, extra)
    for caches, gtriple in zip(temporal_caches, lgrads.d_temporal):
        for ncache, (g_mu, g_rot, g_scl) in zip(caches, gtriple):
            extra = state.net.backward(ncache, g_mu, g_rot, g_scl,
                                       np.zeros(len(state.cloud)))
            _accumulate(net_grads, extra)

    _apply_gradients(state, cloud_grads, net_grads)
    state.iteration += 1

    mse = float(np.mean((render.color - target) ** 2))
    psnr = float("inf") if mse == 0.0 else 10.0 * np.log10(1.0 / mse)
    return breakdown, psnr


def _prune(state: TrainerState):
    alive = sigmoid(state.cloud.opacity_logits) >= state.train_cfg.prune_opacity
    if np.all(alive):
        return
    idx = np.nonzero(alive)[0]
    c = state.cloud
    state.cloud = GaussianCloud(
        means=c.means[idx], rotations=c.rotations[idx], log_scales=c.log_scales[idx],
        opacity_logits=c.opacity_logits[idx], colors=c.colors[idx],
        bind_vertex=np.arange(len(idx)),
    )
    state.skel = state.skel.with_bindings(state.cloud.means)
    for group in GAUSSIAN_GROUPS:
        key = f"cloud.{group}"
        state.adam_m[key] = state.adam_m[key][idx]
        state.adam_v[key] = state.adam_v[key][idx]
    if state.graph is not None:
        state.graph = KnnGraph.build(state.cloud.means, state.train_cfg.loss.knn)
    log.info("pruned to %d Gaussians", len(idx))


def train(config: RunConfig, dataset: SyntheticDataset, out_dir: str | None = None,
          resume: str | None = None) -> tuple[TrainerState, MetricsLog]:
    """Run the full schedule; writes metrics.csv and checkpoint.ckpt when
    out_dir is given. On a non-finite loss the state is dumped for diagnosis
    before the fault propagates."""
    cfg = config.train
    if resume is not None:
        state = load_state(resume, dataset)
        config = state.config
        cfg = config.train
    else:
        state = init_state(config, dataset)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics = MetricsLog(os.path.join(out_dir, "metrics.csv") if out_dir else None)

    while state.iteration < cfg.total_iters:
        it = state.iteration
        try:
            breakdown, psnr = train_step(state)
        except NumericalFault:
            if out_dir:
                save_state(state, os.path.join(out_dir, "checkpoint_fault.ckpt"))
            raise
        if it % cfg.log_interval == 0 or it == cfg.total_iters - 1:
            metrics.append(iteration=it, mode=cfg.mode, l1=breakdown.l1,
                           nll=breakdown.nll, spa=breakdown.spa, temp=breakdown.temp,
                           mask=breakdown.mask, ssim=breakdown.ssim, psnr_train=psnr)
        if (cfg.prune_enabled and it >= cfg.warmup_iters
                and cfg.prune_interval > 0 and (it + 1) % cfg.prune_interval == 0):
            _prune(state)
    if out_dir:
        save_state(state, os.path.join(out_dir, "checkpoint.ckpt"))
    return state, metrics


# ---------------------------------------------------------------------------
# checkpoint round-trip
# ---------------------------------------------------------------------------

def save_state(state: TrainerState, path: str):
    arrays: dict[str, np.ndarray] = {}
    for name, arr in state.cloud.state_arrays().items():
        arrays[f"cloud.{name}"] = arr
    arrays["cloud.bind_vertex"] = state.cloud.bind_vertex
    arrays["bind.vertices"] = state.skel.bind_vertices
    arrays["bind.weights"] = state.skel.blend_weights
    if state.net is not None:
        for name, arr in state.net.params.items():
            arrays[f"net.{name}"] = arr
        arrays["net.bbox_center"] = state.net.cfg.bbox_center
        arrays["net.bbox_half"] = state.net.cfg.bbox_half
    if state.graph is not None:
        arrays["graph.idx"] = state.graph.idx
        arrays["graph.omega"] = state.graph.omega
    for key in state.adam_m:
        arrays[f"adam_m.{key}"] = state.adam_m[key]
        arrays[f"adam_v.{key}"] = state.adam_v[key]
    meta = {
        "iteration": state.iteration,
        "adam_step": state.adam_step,
        "rng_state": state.rng.bit_generator.state,
        "config_yaml": dump_config(state.config),
        "has_net": state.net is not None,
    }
    save_checkpoint(path, arrays, meta, config_hash(state.config))


def load_state(path: str, dataset: SyntheticDataset) -> TrainerState:
    from .config import load_config_text

    arrays, meta, _ = load_checkpoint(path)
    config = load_config_text(meta["config_yaml"])
    cfg = config.train
    cloud = GaussianCloud(
        means=arrays["cloud.means"], rotations=arrays["cloud.rotations"],
        log_scales=arrays["cloud.log_scales"],
        opacity_logits=arrays["cloud.opacity_logits"], colors=arrays["cloud.colors"],
        bind_vertex=arrays["cloud.bind_vertex"],
    )
    skel = Skeleton(
        joint_names=list(dataset.skeleton.joint_names),
        parents=dataset.skeleton.parents.copy(), offsets=dataset.skeleton.offsets.copy(),
        bone_radii=dataset.skeleton.bone_radii.copy(),
        bind_vertices=arrays["bind.vertices"], blend_weights=arrays["bind.weights"],
    )
    net = None
    if meta["has_net"]:
        net_cfg = NetConfig(
            depth=cfg.net.depth, width=cfg.net.width,
            skip_layers=tuple(cfg.net.skip_layers),
            encoding=PosEncodingConfig(l_xyz=cfg.net.l_xyz, l_t=cfg.net.l_t),
            pose_dim=4 * skel.num_joints,
            bbox_center=arrays["net.bbox_center"], bbox_half=arrays["net.bbox_half"],
        )
        params = {k[len("net."):]: v for k, v in arrays.items()
                  if k.startswith("net.") and not k.startswith("net.bbox")}
        net = DeformationNet(net_cfg, params=params)
    graph = None
    if "graph.idx" in arrays:
        graph = KnnGraph(idx=arrays["graph.idx"], omega=arrays["graph.omega"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainerState(
        config=config, dataset=dataset, cloud=cloud, skel=skel, net=net, graph=graph,
        adam_m={k[len("adam_m."):]: v for k, v in arrays.items() if k.startswith("adam_m.")},
        adam_v={k[len("adam_v."):]: v for k, v in arrays.items() if k.startswith("adam_v.")},
        adam_step=meta["adam_step"], iteration=meta["iteration"], rng=rng,
    )
    return state
