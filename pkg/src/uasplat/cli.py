"""Command-line surface: gen-data, train, render, eval, ablate, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 runtime fault, 3 gradcheck
failure. UASPLAT_NUM_THREADS caps the BLAS thread pools (must be set before
numpy loads, which is why it is handled at import time here).
"""

from __future__ import annotations

import os

_threads = os.environ.get("UASPLAT_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import logging
import sys

import numpy as np

log = logging.getLogger("uasplat")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAULT = 2
EXIT_GRADCHECK = 3


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uasplat",
                                 description="Uncertainty-aware articulated Gaussian splatting")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-key config override")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic occluded sequence")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--protocol", choices=["paper"], default=None,
                   help="'paper' sets 50%% coverage over the first 80%% of frames")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mode", choices=["a", "b", "c", "d"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("render", help="render frames from a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", default="all", help="comma list of frame indices or 'all'")
    p.add_argument("--camera", default="train",
                   help="'train' or 'holdout<i>' per the hold-out ordering")

    p = sub.add_parser("eval", help="metrics report for a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="train modes a-d and assemble the comparison table")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--modes", default="a,b,c,d")

    p = sub.add_parser("gradcheck", help="finite-difference verification of all backward passes")
    p.add_argument("--ops", default=None, help="comma list; default = every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    return ap


def _load_config(args):
    from .config import load_config

    cfg = load_config(args.config, args.overrides)
    if getattr(args, "seed", None) is not None:
        cfg.scene.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "mode", None):
        cfg.train.mode = args.mode
    if getattr(args, "protocol", None) == "paper":
        cfg.scene.occlusion.coverage = 0.5
        cfg.scene.occlusion.affected_fraction = 0.8
    return cfg


def _echo_config(cfg, out_dir: str):
    from .config import dump_config

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_echo.yaml"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def _cmd_gen_data(args) -> int:
    from .synth import generate_sequence, write_dataset

    cfg = _load_config(args)
    _echo_config(cfg, args.out)
    ds = generate_sequence(cfg.scene)
    write_dataset(ds, args.out)
    log.info("dataset with %d frames written to %s", ds.num_frames, args.out)
    return EXIT_OK


def _cmd_train(args) -> int:
    from .io import RunLock
    from .synth import read_dataset
    from .trainer import train

    cfg = _load_config(args)
    ds = read_dataset(args.data)
    with RunLock(args.out):
        _echo_config(cfg, args.out)
        state, _ = train(cfg, ds, out_dir=args.out, resume=args.resume)
    log.info("finished at iteration %d; checkpoint in %s", state.iteration, args.out)
    return EXIT_OK


def _select_camera(ds, name: str):
    if name == "train":
        return ds.train_camera
    if name.startswith("holdout"):
        idx = int(name[len("holdout"):] or 0)
        if not 0 <= idx < len(ds.holdout_cameras):
            raise ValueError(f"holdout camera index {idx} out of range")
        return ds.holdout_cameras[idx]
    raise ValueError(f"unknown camera {name!r}")


def _cmd_render(args) -> int:
    from .io import uncertainty_heatmap, write_image
    from .rasterizer import full_forward
    from .synth import read_dataset
    from .trainer import load_state

    ds = read_dataset(args.data)
    state = load_state(args.checkpoint, ds)
    cam = _select_camera(ds, args.camera)
    if args.frames == "all":
        frames = list(range(ds.num_frames))
    else:
        frames = [int(x) for x in args.frames.split(",") if x.strip() != ""]
    for t in frames:
        if not 0 <= t < ds.num_frames:
            raise ValueError(f"frame index {t} out of range [0, {ds.num_frames})")
    os.makedirs(args.out, exist_ok=True)
    for t in frames:
        render, _ = full_forward(state.cloud, state.skel, ds.poses[t], ds.t_norm(t),
                                 cam, state.raster_config(), net=state.net,
                                 mode=state.train_cfg.mode)
        write_image(os.path.join(args.out, f"frame_{t:04d}_color.png"), render.color)
        write_image(os.path.join(args.out, f"frame_{t:04d}_opacity.png"), render.opacity)
        lo, hi = float(render.uncertainty.min()), float(render.uncertainty.max())
        write_image(os.path.join(args.out, f"frame_{t:04d}_unc.png"),
                    uncertainty_heatmap(render.uncertainty, lo, hi))
        with open(os.path.join(args.out, f"frame_{t:04d}_unc_scale.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(f"u_min={lo!r}\nu_max={hi!r}\n")
    log.info("rendered %d frame(s) to %s", len(frames), args.out)
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .evaluator import evaluate_state, format_report_csv
    from .synth import read_dataset
    from .trainer import load_state

    ds = read_dataset(args.data)
    state = load_state(args.checkpoint, ds)
    report = evaluate_state(state)
    os.makedirs(args.out, exist_ok=True)
    rows = [{"mode": report.mode, "missing": False,
             "psnr": report.psnr_holdout or report.psnr_train,
             "ssim": report.ssim_holdout or report.ssim_train,
             "occluded_psnr": report.occluded_psnr, "rho": report.rho}]
    with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(format_report_csv(rows))
    summary = (
        f"mode {report.mode}: train PSNR {report.psnr_train:.2f} dB, "
        f"train SSIM {report.ssim_train:.4f}\n"
        f"holdout PSNR {report.psnr_holdout}\n"
        f"occluded-region PSNR {report.occluded_psnr}\n"
        f"uncertainty localization rho {report.rho}\n"
    )
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary)
    print(summary, end="")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    import copy

    from .evaluator import ablation_report, evaluate_state, format_report_csv
    from .synth import read_dataset
    from .trainer import train

    cfg = _load_config(args)
    ds = read_dataset(args.data)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)
    reports = {}
    for mode in modes:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.train.mode = mode
        run_dir = os.path.join(args.out, f"mode_{mode}")
        from .io import RunLock
        with RunLock(run_dir):
            state, _ = train(run_cfg, ds, out_dir=run_dir)
        reports[mode] = evaluate_state(state)
        log.info("mode %s done", mode)
    rows = ablation_report(reports)
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write(format_report_csv(rows))
    print(format_report_csv(rows), end="")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_gradcheck

    ops = [o.strip() for o in args.ops.split(",")] if args.ops else None
    results = run_gradcheck(ops=ops, seed=args.seed, n_instances=args.instances)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "render": _cmd_render,
        "eval": _cmd_eval,
        "ablate": _cmd_ablate,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # runtime fault
        log.error("fault: %s", exc)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
