"""Command-line entry point: ``hdrvox synth | train | render | eval | gradcheck``.

Exit codes: 0 success, 2 bad input (spec, config, view id, dataset
mismatch), 3 I/O failure, 4 training divergence, 5 gradient check failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5

log = logging.getLogger("hdrvox")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _set_threads(n):
    if n is None:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(EXIT_BAD_INPUT, f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_dataset(path):
    from .dataset import Dataset

    try:
        return Dataset.load(path)
    except (OSError, FileNotFoundError) as e:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {e}") from e
    except (ValueError, KeyError) as e:
        raise CliError(EXIT_BAD_INPUT, f"invalid dataset {path}: {e}") from e


def cmd_synth(args) -> int:
    from .oracle import DEFAULT_SCENE, SceneSpecError, synthesize

    spec_text = DEFAULT_SCENE
    if args.spec:
        try:
            spec_text = Path(args.spec).read_text()
        except OSError as e:
            raise CliError(EXIT_IO, f"cannot read spec {args.spec}: {e}") from e
    try:
        manifest = synthesize(args.out, spec_text, args.seed, args.profile, args.views,
                              args.size, args.test_views)
    except SceneSpecError as e:
        raise CliError(EXIT_BAD_INPUT, f"bad scene spec: {e}") from e
    except ValueError as e:
        raise CliError(EXIT_BAD_INPUT, str(e)) from e
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write dataset: {e}") from e
    n_test = sum(v.role == "test" for v in manifest.views)
    print(f"wrote {len(manifest.views)} views ({n_test} test) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .trainer import DivergenceError, Trainer, load_config

    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.deterministic:
        overrides["deterministic"] = "true"
    dataset = _load_dataset(args.data)
    try:
        if args.resume:
            # only the run length may change on resume
            extra = {"epochs": int(overrides["epochs"])} if "epochs" in overrides else None
            trainer = load_checkpoint(args.resume, dataset, extra)
        else:
            config = load_config(args.config, args.preset, overrides)
            trainer = Trainer(dataset, config)
    except OSError as e:
        raise CliError(EXIT_IO, str(e)) from e
    except (ValueError, KeyError) as e:
        raise CliError(EXIT_BAD_INPUT, f"bad configuration: {e}") from e
    log.info("reference view %s; %d trainable rays", dataset.views[trainer.reference].id,
             len(trainer.rays.view))
    try:
        trainer.run(args.out)
    except (DivergenceError, FloatingPointError) as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write checkpoint: {e}") from e
    if trainer.history:
        last = trainer.history[-1]
        print(f"finished {trainer.step_count} steps; final total loss {last['total']:.6g}")
    else:
        print("no training steps run; wrote initial checkpoint")
    if trainer.eval_history:
        print(f"held-out right-half PSNR {trainer.eval_history[-1]['mean']:.2f} dB")
    return EXIT_OK


def _read_pose(path):
    from .render import Camera

    try:
        d = json.loads(Path(path).read_text())
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read pose {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CliError(EXIT_BAD_INPUT, f"pose {path} is not JSON: {e}") from e
    try:
        return Camera.from_dict(d)
    except (KeyError, ValueError, TypeError) as e:
        raise CliError(EXIT_BAD_INPUT, f"invalid pose {path}: {e}") from e


def cmd_render(args) -> int:
    from .checkpoint import load_model
    from .imageio import write_pfm, write_png
    from .render import Camera, default_step, render_hdr
    from .tonemap import edit_render, tonemap

    try:
        grid, params, ids, meta = load_model(args.ckpt)
    except OSError as e:
        raise CliError(EXIT_IO, str(e)) from e

    def view_index(vid):
        if vid not in ids:
            raise CliError(EXIT_BAD_INPUT, f"unknown view id {vid!r}")
        return ids.index(vid)

    if args.view is not None:
        i = view_index(args.view)
        cam = Camera.from_dict(meta["cameras"][i])
        name = args.view
    else:
        cam = _read_pose(args.pose)
        i = meta["reference"]
        name = "pose"
    if args.tone_from is not None:
        i = view_index(args.tone_from)
    tone = params[i]
    crf = None
    if args.crf_from is not None:
        crf = params[view_index(args.crf_from)].crf
    wb = None
    if args.wb is not None:
        wb = np.array(args.wb, dtype=np.float64)
    try:
        tone = edit_render(tone, wb, args.exposure_scale, crf)
    except ValueError as e:
        raise CliError(EXIT_BAD_INPUT, str(e)) from e
    step = meta["config"].get("step_size") or default_step(grid)
    hdr = render_hdr(grid, cam, step=step, stop_thresh=meta["config"]["stop_thresh"],
                     parallel=not args.deterministic)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_pfm(out / f"{name}.pfm", hdr)
        if args.ldr:
            write_png(out / f"{name}.png", np.clip(tonemap(hdr, tone), 0.0, 1.0))
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write images: {e}") from e
    print(f"wrote {out / name}.pfm" + (f" and {out / name}.png" if args.ldr else ""))
    return EXIT_OK


def heldout_rows(dataset, render_ldr):
    """Masked right-half PSNR of each test view; ``render_ldr(i, view)`` gives the LDR image."""
    from .imageio import quantize_ldr
    from .metrics import half_masks, masked_psnr

    rows = []
    for i, v in enumerate(dataset.views):
        if v.role != "test":
            continue
        ldr = quantize_ldr(render_ldr(i, v))
        right = half_masks(v.camera.height, v.camera.width)[1]
        rows.append({"view": v.id, "psnr_right": masked_psnr(ldr, v.ldr, right)})
    if not rows:
        raise CliError(EXIT_BAD_INPUT, "dataset has no test views")
    return rows


def evaluate_checkpoint(ckpt, dataset, parallel=False):
    """Per-view masked right-half PSNR rows, plus the recovery report when GT exists."""
    from .checkpoint import load_model
    from .oracle import gt_compare, load_gt
    from .render import default_step, render_hdr
    from .tonemap import tonemap

    grid, params, ids, meta = load_model(ckpt)
    if ids != [v.id for v in dataset.views]:
        raise CliError(EXIT_BAD_INPUT, "checkpoint views do not match the dataset")
    step = meta["config"].get("step_size") or default_step(grid)
    stop = meta["config"]["stop_thresh"]

    def render_ldr(i, v):
        hdr = render_hdr(grid, v.camera, step=step, stop_thresh=stop, parallel=parallel)
        return tonemap(hdr, params[i])

    rows = heldout_rows(dataset, render_ldr)
    recovery = None
    if "gt" in dataset.manifest.extras:
        _, profile, _ = load_gt(dataset.root)
        recovery = gt_compare(grid, params, meta["reference"], dataset, profile, step)
        for r in rows:
            j = ids.index(r["view"])
            r["hdr_psnr"] = recovery.hdr_psnr[r["view"]]
            r["wb_err_max"] = float(recovery.wb_error[j].max())
            r["crf_rmse_max"] = float(recovery.crf_rmse[j].max())
    return rows, recovery


def cmd_eval(args) -> int:
    dataset = _load_dataset(args.data)
    try:
        rows, recovery = evaluate_checkpoint(args.ckpt, dataset, not args.deterministic)
    except OSError as e:
        raise CliError(EXIT_IO, str(e)) from e
    keys = list(rows[0].keys())
    mean = {"view": "mean"}
    for k in keys[1:]:
        mean[k] = float(np.mean([r[k] for r in rows]))
    if args.report:
        try:
            Path(args.report).parent.mkdir(parents=True, exist_ok=True)
            with open(args.report, "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=keys)
                w.writeheader()
                for r in rows + [mean]:
                    w.writerow({k: (f"{r[k]:.6f}" if k != "view" else r[k]) for k in keys})
        except OSError as e:
            raise CliError(EXIT_IO, f"cannot write report: {e}") from e
    for r in rows + [mean]:
        print("  ".join(f"{k}={r[k]:.3f}" if k != "view" else f"{r[k]:<6}" for k in keys))
    if recovery is not None:
        print(f"recovery: max wb error {recovery.max_wb_error:.4f}, "
              f"max CRF RMSE {recovery.max_crf_rmse:.4f}, "
              f"min held-out HDR PSNR {recovery.min_hdr_psnr:.2f} dB")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, main_check

    if args.scale != "tiny":
        raise CliError(EXIT_BAD_INPUT, f"unknown scale {args.scale!r}")
    results, seconds = main_check(args.seed, -1.0 if args.flip_sigma_sign else 1.0)
    print(format_table(results))
    print(f"runtime {seconds:.1f} s")
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        print(f"gradcheck failed: worst offender {worst.name} "
              f"(rel. error {worst.max_rel_error:.3e} at {worst.worst_index})", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdrvox", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render an oracle dataset")
    s.add_argument("--spec", help="scene spec file (default: built-in scene)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--profile", choices=("varying", "static"), default="varying")
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--test-views", type=int, default=4)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="optimize grid and tone parameters")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--preset", default="desk", choices=("desk", "smoke", "paper"))
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--deterministic", action="store_true",
                   help="serial kernels and ordered reductions (always on for training)")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a view or pose from a checkpoint")
    r.add_argument("--ckpt", required=True)
    where = r.add_mutually_exclusive_group(required=True)
    where.add_argument("--view", help="view id stored in the checkpoint")
    where.add_argument("--pose", help="JSON camera file")
    r.add_argument("--ldr", action="store_true", help="also write the tone-mapped PNG")
    r.add_argument("--hdr", action="store_true", help="write the HDR PFM (always written)")
    r.add_argument("--wb", type=float, nargs=3, metavar=("R", "G", "B"))
    r.add_argument("--exposure-scale", type=float, default=None)
    r.add_argument("--crf-from", help="view id whose CRF replaces the rendering view's")
    r.add_argument("--tone-from", help="view id whose tone parameters are used")
    r.add_argument("--out", required=True)
    r.add_argument("--deterministic", action="store_true", help="serial rendering")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="held-out metrics and oracle recovery report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", help="CSV output path")
    e.add_argument("--deterministic", action="store_true", help="serial rendering")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--scale", default="tiny")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--flip-sigma-sign", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
