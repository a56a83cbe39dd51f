"""Command-line entry point: ``pffnet <subcommand> ...``."""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import gradcheck as gc
from .data import (NOISE_LEVELS, CorruptionSpec, ShapeSpec, build_from_manifest, format_manifest,
                   load_cloud, manifest_values, read_normals, sample_queries, write_normals,
                   write_xyz, corrupt, synth_shape)
from .losses import pgp_svg, read_report_csv
from .train import (CHECKPOINT, RunConfig, desk_training_set, estimate, evaluate, root_seed,
                    run_config_from_text, train)

log = logging.getLogger("pffnet")


def _noise_frac(text):
    return NOISE_LEVELS[text] if text in NOISE_LEVELS else float(text)


def _key_values(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise SystemExit(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_shape(path):
    """A manifest (``.txt``/``.manifest``) or an ``.xyz`` with a sibling ``.normals``."""
    path = Path(path)
    if path.suffix == ".xyz":
        normals = path.with_suffix(".normals")
        return load_cloud(path, normals if normals.exists() else None, path.stem)
    return build_from_manifest(path.read_text())


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    if args.manifest:
        text = Path(args.manifest).read_text()
        from .data import specs_from_manifest
        shape, corruption = specs_from_manifest(text)
    else:
        shape = ShapeSpec(kind=args.kind, count=args.count, seed=root_seed(args.seed))
        corruption = CorruptionSpec(noise_sigma_frac=_noise_frac(args.noise), density=args.density,
                                    seed=root_seed(args.seed))
    cloud = corrupt(synth_shape(shape), corruption)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_xyz(out / "cloud.xyz", cloud)
    write_normals(out / "cloud.normals", cloud.normals)
    (out / "manifest.txt").write_text(format_manifest(manifest_values(shape, corruption)))
    print(f"wrote {len(cloud)} points to {out}")
    return 0


def cmd_train(args):
    text = Path(args.config).read_text() if args.config else ""
    overrides = _key_values(args.set)
    for flag in ("epochs", "queries_per_shape", "batch_size"):
        if getattr(args, flag) is not None:
            overrides[flag] = getattr(args, flag)
    run = run_config_from_text(text, RunConfig(), **overrides)
    run.seed = root_seed(args.seed if args.seed is not None else run.seed)
    clouds = [_load_shape(p) for p in args.shapes] if args.shapes else desk_training_set(run.seed)
    result = train(run, clouds, args.out_dir,
                   progress=lambda e, loss, lr: print(f"epoch {e} loss {loss:.6f} lr {lr:.3g}", flush=True))
    print(f"wrote {Path(args.out_dir) / CHECKPOINT} after {len(result.epoch_losses)} epochs")
    return 0


def cmd_estimate(args):
    cloud = _load_shape(args.input)
    queries = None
    if args.queries:
        queries = sample_queries(cloud, args.queries, root_seed(args.seed))
    normals = estimate(cloud, args.estimator, args.checkpoint, queries=queries, k=args.k)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_normals(out / "pred.normals", normals)
    if queries is not None:
        (out / "queries.idx").write_text("".join(f"{i}\n" for i in queries))
    print(f"wrote {len(normals)} normals to {out / 'pred.normals'}")
    return 0


def cmd_eval(args):
    if len(args.pred) != len(args.gt):
        raise SystemExit("--pred and --gt must be given the same number of times")
    preds = [read_normals(p) for p in args.pred]
    gts = [read_normals(g) for g in args.gt]
    if args.queries:
        gts = [g[np.loadtxt(q, dtype=np.int64, ndmin=1)] for g, q in zip(gts, args.queries)]
    thresholds = tuple(range(0, 91))
    if args.agg == "per-shape":
        out = Path(args.out_dir)
        for i, (p, g) in enumerate(zip(preds, gts)):
            report = evaluate(p, g, thresholds, out / f"shape{i}")
            print(f"shape {i} rmse_deg {report.rmse:.6f}")
        return 0
    report = evaluate(np.concatenate(preds), np.concatenate(gts), thresholds, args.out_dir)
    print(f"rmse_deg {report.rmse:.6f} pgp_20 {report.pgp_at(20):.6f}")
    return 0


def cmd_pgp(args):
    pgp, value = read_report_csv(args.csv)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pgp.svg").write_text(pgp_svg(pgp))
    print(f"rmse_deg {value:.6f}; wrote {out / 'pgp.svg'}")
    return 0


def cmd_bench(args):
    results = bench_mod.bench(args.estimator, args.points, args.repetitions, args.k,
                              args.workers, args.checkpoint, root_seed(args.seed))
    report = bench_mod.format_report(results)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report)
    sys.stdout.write(report)
    return 0


def cmd_gradcheck(args):
    if args.scale == "ops":
        worst = gc.ops_suite(seeds=args.seeds)
        failed = [name for name, err in worst.items() if not err < 1e-5]
        for name, err in sorted(worst.items()):
            print(f"{'FAIL' if name in failed else 'ok  '} {name:16s} {err:.3e}")
        return 1 if failed else 0
    report = gc.model_suite(seed=root_seed(args.seed))
    print(f"{'ok' if report.passed else 'FAIL'} model max_rel_error {report.max_rel_error:.3e}")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="pffnet", description="Point-cloud normal estimation toolkit.")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="sample a synthetic shape with analytic normals")
    s.add_argument("--kind", default="sphere", choices=["plane", "sphere", "cylinder", "torus", "box-edges", "quadric"])
    s.add_argument("--count", type=int, default=10000)
    s.add_argument("--noise", default="none", help="none|low|medium|high or a fraction of the bbox diagonal")
    s.add_argument("--density", default="uniform", choices=["uniform", "stripe", "gradient"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--manifest", help="re-run a manifest written by an earlier synth")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the network")
    s.add_argument("--config", help="key=value run/model config file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    s.add_argument("--shapes", nargs="*", help="manifests or .xyz files (default: the desk mix)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--queries-per-shape", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("estimate", help="predict normals for a cloud")
    s.add_argument("--input", required=True, help=".xyz file or manifest")
    s.add_argument("--estimator", default="pff", choices=["pff", "pca", "jet"])
    s.add_argument("--checkpoint")
    s.add_argument("--k", type=int, default=16, help="neighborhood size for pca/jet")
    s.add_argument("--queries", type=int, help="estimate only this many random points")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("eval", help="RMSE and PGP of predicted against ground-truth normals")
    s.add_argument("--pred", action="append", required=True)
    s.add_argument("--gt", action="append", required=True)
    s.add_argument("--queries", action="append", help="index file selecting gt rows")
    s.add_argument("--agg", default="pooled", choices=["pooled", "per-shape"])
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pgp", help="render pgp.svg from a pgp.csv")
    s.add_argument("--csv", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_pgp)

    s = sub.add_parser("bench", help="inference time in seconds per 100k points")
    s.add_argument("--estimator", default="pca", choices=["pff", "pca", "jet"])
    s.add_argument("--checkpoint")
    s.add_argument("--points", type=int, default=100_000)
    s.add_argument("--repetitions", type=int, default=3)
    s.add_argument("--k", type=int, default=16)
    s.add_argument("--workers", type=int, help="multi-worker count (default: all cores)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--scale", default="ops", choices=["ops", "model"])
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
