"""Command line: train, eval, analyze, gen-data.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import (SWEEP_VALUES, equivariance_sweep, rank_frequency, ranked_coefficient_curve,
                       reconstruction_panels, write_csv, write_png_grid)
from .checkpoint import CheckpointError, load_checkpoint
from .config import ExperimentConfig, load_config
from .data import AffineRanges, DataError, find_mnist, make_affine_set, make_translated_set, save_set
from .tensor import NumericalError
from .train import FrozenModel, build_experiment_sets, run_experiment, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capsparse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train a capsule autoencoder")
    t.add_argument("--config", required=True, help="JSON config (may name a profile: desk | paper)")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="fit the SVM head and report accuracy for one condition")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--condition", required=True, choices=["a", "b", "mnist"])
    e.add_argument("--mnist-dir")
    e.add_argument("--out", help="directory for the JSON report (default: next to the checkpoint)")

    a = sub.add_parser("analyze", help="write figure data and images")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--fig", required=True, type=int, choices=[2, 4, 5, 6])
    a.add_argument("--mnist-dir")
    a.add_argument("--n-images", type=int, help="override the diagnostics image count")
    a.add_argument("--out")

    g = sub.add_parser("gen-data", help="write a translated or affine-transformed set as IDX + JSON")
    g.add_argument("--kind", required=True, choices=["translated", "affine"])
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--mnist-dir")
    g.add_argument("--split", default="test", choices=["train", "test"])
    g.add_argument("--canvas", type=int, default=40)
    g.add_argument("--count", type=int, default=10_000)
    return p


def _frozen(args) -> FrozenModel:
    ck = load_checkpoint(args.ckpt)
    fm = FrozenModel.from_checkpoint(ck)
    if getattr(args, "mnist_dir", None):
        fm.cfg.mnist_dir = args.mnist_dir
    return fm


def _out_dir(args) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ck, history = train(cfg, resume=args.resume)
    last = history[-1] if history else {}
    print(f"trained {ck.step} steps ({cfg.mode}); final mean loss {last.get('mean_loss')}; "
          f"checkpoint {cfg.resolved_out_dir() / 'model.ckpt'} [{ck.fingerprint}]")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = run_experiment(args.ckpt, args.condition, mnist_dir=args.mnist_dir)
    out = _out_dir(args) / f"eval_{args.condition}.json"
    out.write_text(report.to_json())
    print(report.text())
    return EXIT_OK


def cmd_analyze(args) -> int:
    fm = _frozen(args)
    out = _out_dir(args)
    n = args.n_images or fm.cfg.eval.diagnostics
    sets = build_experiment_sets(fm.cfg)
    images = sets.affine_test.images if args.fig == 5 else sets.mnist_test.images
    meta = {"fingerprint": fm.fingerprint, "mode": fm.cfg.mode, "fig": args.fig}
    if args.fig == 4:
        curve = ranked_coefficient_curve(fm, images, n)
        write_csv(out / "fig4_ranked_support.csv", [[i, float(v)] for i, v in enumerate(curve)], ["rank", "scaled_support"])
        meta["curve"] = curve.tolist()
    elif args.fig == 5:
        f = rank_frequency(fm, images, n)
        write_csv(out / "fig5_rank_frequency.csv", [[j, *map(float, row)] for j, row in enumerate(f)],
                  ["capsule", *[f"rank{r}" for r in range(f.shape[1])]])
        meta["rank0_frequency"] = f[:, 0].tolist()
    elif args.fig == 2:
        p = reconstruction_panels(fm, images[0])
        l = fm.geometry.n_latent
        write_png_grid([images[0], p.full, *p.single], l + 2, out / "fig2a_single.png")
        write_png_grid([p.full, *p.leave_one_out], l + 1, out / "fig2b_leave_one_out.png")
        d = p.diff / max(p.diff.max(), 1e-12)
        write_png_grid(list(d), l, out / "fig2c_difference.png")
        meta["diff_mse"] = p.diff_mse().tolist()
        meta["dominance_ratio"] = p.dominance_ratio()
    else:
        rows = []
        for im in images[:8]:
            recs, m = equivariance_sweep(fm, im)
            rows.extend(recs)
        write_png_grid(rows, len(SWEEP_VALUES), out / "fig6_equivariance.png")
        meta["sweep"] = {"values": SWEEP_VALUES.tolist(), "perturbed": "post-mask", "rows": 8}
    (out / f"fig{args.fig}.json").write_text(json.dumps(meta, indent=1))
    print(f"figure {args.fig} written to {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    src = find_mnist(args.mnist_dir, args.split)
    src = src.subset(np.arange(min(args.count, len(src))))
    if args.kind == "translated":
        ds = make_translated_set(src, args.canvas, args.seed)
    else:
        ds = make_affine_set(src, args.canvas, AffineRanges(), args.seed)
    paths = save_set(ds, args.out, f"{args.kind}-{args.split}")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "gen-data": cmd_gen_data}
    try:
        return handlers[args.cmd](args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
