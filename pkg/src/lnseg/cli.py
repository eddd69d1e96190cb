"""Command line entry point: ``lns <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error,
3 numerical failure (NaN, divergence).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import subprocess
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .gg_data import DATASETS, DatasetError, export_png, generate_sample, mask_to_png, read_manifest, write_dataset
from .model import CheckpointError, VariantError, load_checkpoint, write_container
from .numerics import NumericalError, Rng

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Run metadata
# ---------------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _git_hash() -> str | None:
    try:
        out = subprocess.run(["git", "-C", str(Path(__file__).resolve().parent), "rev-parse", "HEAD"],
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


_OPEN_RUNS: list = []


class RunMetadata:
    """run.json written when a run starts and finalised when it ends."""

    def __init__(self, out_dir, subcommand: str, config: dict, inputs: dict):
        from .experiments import file_sha256

        self.path = Path(out_dir) / "run.json"
        self.data = {
            "tool": "lns",
            "version": __version__,
            "git_hash": _git_hash(),
            "subcommand": subcommand,
            "config": config,
            "inputs": {k: {"path": str(v), "sha256": file_sha256(v)} for k, v in inputs.items() if v and Path(v).is_file()},
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        self._write()
        _OPEN_RUNS.append(self)

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")

    def finish(self, status: str = "ok", **extra):
        self.data.update(status=status, finished=_now(), **extra)
        self._write()
        if self in _OPEN_RUNS:
            _OPEN_RUNS.remove(self)


def _fail_open_runs(exc: BaseException) -> None:
    while _OPEN_RUNS:
        run = _OPEN_RUNS.pop()
        try:
            run.finish(status="failed", error=f"{type(exc).__name__}: {exc}")
        except OSError:
            pass


def _seed(value: int) -> int:
    env = os.environ.get("LNS_SEED")
    if env is None or env == "":
        return int(value)
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"LNS_SEED must be an integer, got {env!r}") from exc


def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: invalid TOML ({exc})") from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(a) -> int:
    seed = _seed(a.seed)
    sizes = {"train": a.train, "val": a.val, "test": a.test}
    out = Path(a.out)
    meta = RunMetadata(out, "gen-data", {"dataset": a.dataset, "seed": seed, "sizes": sizes, "png": a.png}, {})
    manifest = write_dataset(out, a.dataset, seed, sizes, log=lambda m: print(m, file=sys.stderr))
    for i in range(min(a.png, sizes["test"])):
        export_png(generate_sample(a.dataset, "test", i, seed), out / "png")
    meta.finish(manifest=str(out / "manifest.json"))
    return EXIT_OK


def cmd_train(a) -> int:
    from .trainer import ConfigError, TrainConfig, stderr_progress, train

    raw = _load_toml(a.config)
    if a.out:
        raw["out_dir"] = a.out
    if a.iterations:
        raw["iterations"] = a.iterations
    if "seed" in raw or os.environ.get("LNS_SEED"):
        raw["seed"] = _seed(raw.get("seed", 0))
    try:
        cfg = TrainConfig.from_dict(raw)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    meta = RunMetadata(cfg.out_dir, "train", cfg.to_dict(), {"manifest": Path(cfg.data_dir) / "manifest.json"})
    summary = train(cfg, resume=a.resume, progress=None if a.quiet else stderr_progress)
    meta.finish(summary=summary)
    print(json.dumps(summary))
    return EXIT_OK


def _seg_config(a):
    from .lns import SegmentationConfig

    try:
        return SegmentationConfig(N=a.N, sigma=a.sigma, seed=_seed(a.seed), clusterer=a.clusterer, mode=a.mode,
                                  control_sigma=a.control_sigma)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_segment(a) -> int:
    from .experiments import evaluate, write_csv
    from .lns import DegenerateStackError

    cfg = _seg_config(a)
    if cfg.mode == "latent" and cfg.sigma == 0:
        raise DegenerateStackError("sigma = 0: every decoding is identical, so the difference stack is all zeros")
    model, _, _ = load_checkpoint(a.ckpt)
    out = Path(a.out)
    meta = RunMetadata(out, "segment", dict(cfg.to_dict(), split=a.split, limit=a.limit, dataset=a.dataset),
                       {"checkpoint": a.ckpt, "manifest": Path(a.dataset) / "manifest.json"})
    res = evaluate(model, a.dataset, cfg, a.split, limit=a.limit)
    write_container(out / "labels.bin", {"labels": res.labels}, {"split": a.split, **cfg.to_dict()})
    for r, lab in zip(res.rows, res.labels):
        mask_to_png(lab, out / "masks" / f"{a.split}_{r['index']:05d}.png")
    write_csv(out / "per_image.csv", res.rows, ["index", "K", "ari"])
    meta.finish(summary=res.summary)
    print(json.dumps(res.summary))
    return EXIT_OK


def cmd_evaluate(a) -> int:
    from .experiments import archive_masks, evaluate, write_csv
    from .lns import DegenerateStackError

    cfg = _seg_config(a)
    if cfg.mode == "latent" and cfg.sigma == 0:
        raise DegenerateStackError("sigma = 0: every decoding is identical, so the difference stack is all zeros")
    model, ck_meta, _ = load_checkpoint(a.ckpt)
    out = Path(a.out)
    meta = RunMetadata(out, "evaluate", dict(cfg.to_dict(), split=a.split, limit=a.limit, dataset=a.dataset),
                       {"checkpoint": a.ckpt, "manifest": Path(a.dataset) / "manifest.json"})
    res = evaluate(model, a.dataset, cfg, a.split, limit=a.limit)
    write_csv(out / "per_image.csv", res.rows, ["index", "K", "ari"])
    (out / "summary.json").write_text(json.dumps(res.summary, indent=2, sort_keys=True) + "\n")
    archive_masks(out / "masks.lnsc", res, {"dataset_dir": str(a.dataset), "split": a.split, **cfg.to_dict()})
    meta.finish(summary=res.summary)
    print(json.dumps(res.summary))
    return EXIT_OK


def cmd_sweep(a) -> int:
    from .experiments import ExperimentError, SweepSpec, sweep

    raw = _load_toml(a.spec)
    if a.out:
        raw["out_dir"] = a.out
    if "seg_seed" in raw or os.environ.get("LNS_SEED"):
        raw["seg_seed"] = _seed(raw.get("seg_seed", 0))
    try:
        spec = SweepSpec(**raw)
    except (TypeError, ExperimentError) as exc:
        raise UsageError(f"invalid sweep spec: {exc}") from exc
    inputs = {f"checkpoint_{i}": m.checkpoint for i, m in enumerate(spec.models)}
    meta = RunMetadata(spec.out_dir, "sweep", spec.to_dict(), inputs)
    res = sweep(spec, progress=None if a.quiet else (lambda m: print(m, file=sys.stderr, flush=True)))
    meta.finish(ftest=res["ftest"])
    return EXIT_OK


def cmd_compare(a) -> int:
    from .experiments import COMPARE_COLUMNS, compare_models, per_seed_means, read_csv, write_csv

    rows = []
    for p in a.summary:
        rows += read_csv(p)
    ra = per_seed_means(rows, a.a, a.mode, a.N)
    rb = per_seed_means(rows, a.b, a.mode, a.N)
    try:
        table = compare_models(ra, rb, alpha=a.alpha, m=a.m)
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc
    out = Path(a.out)
    meta = RunMetadata(out.parent, "compare", vars_to_dict(a), {f"summary_{i}": p for i, p in enumerate(a.summary)})
    write_csv(out, table, COMPARE_COLUMNS)
    meta.finish()
    return EXIT_OK


def cmd_theory(a) -> int:
    from .experiments import write_csv
    from . import theory_lab as tl

    rng = Rng(_seed(a.seed))
    out = Path(a.out)
    meta = RunMetadata(out.parent, "theory", vars_to_dict(a), {})
    if a.mode in ("proportional", "independent"):
        jac = tl.make_jacobian(a.mode, rng.stream("jacobian"), pixels=a.pixels, channels=a.channels, d=a.d)
        rows = []
        for n in a.Ns:
            rep = tl.run_linear_lns(jac, a.sigma, n, a.runs, rng.stream("runs", n), tol=a.tol, cluster=not a.no_cluster)
            rows.append(rep.summary())
        cols = ["mode", "sigma", "N", "runs", "tol", "same_part_inseparable", "cross_part_inseparable",
                "cross_part_inseparable_max", "same_part_co_clustered"]
    elif a.mode == "var-check":
        rows = [tl.var_check(a.sigma, a.draws, rng.stream("var"))]
        cols = list(rows[0])
    else:
        rows = []
        for ds in a.datasets:
            recs = [generate_sample(ds, "train", i, _seed(a.seed)) for i in range(a.samples)]
            imgs = np.stack([r.image for r in recs])
            masks = np.stack([r.mask for r in recs])
            refl = np.stack([r.reflectance for r in recs])
            parts = sorted({int(p) for m in masks[:20] for p in np.unique(m)})
            pairs = [(p, p) for p in parts] + [(p, q) for p in parts for q in parts if p < q]
            for pa, pb in pairs:
                try:
                    r = tl.covariance_pca_check(imgs, masks, pa, pb, reflectance=refl)
                except tl.TheoryError as exc:
                    rows.append({"dataset": ds, "part_a": pa, "part_b": pb, "error": str(exc)})
                    continue
                rows.append({"dataset": ds, "part_a": pa, "part_b": pb, "samples": r["samples"], "ratio": r["ratio"],
                             "max_abs_corr": max(abs(c) for c in r["correlation_per_channel"]) if r["correlation_per_channel"] else None,
                             "degenerate": r["degenerate"], "error": ""})
        cols = ["dataset", "part_a", "part_b", "samples", "ratio", "max_abs_corr", "degenerate", "error"]
    write_csv(out, rows, cols)
    meta.finish(rows=len(rows))
    return EXIT_OK


def cmd_plot(a) -> int:
    from .experiments import render_plots

    out = Path(a.out) if a.out else Path(a.results) / "plots"
    meta = RunMetadata(out, "plot", vars_to_dict(a), {})
    written = render_plots(a.results, out)
    meta.finish(written=[str(p) for p in written])
    return EXIT_OK


def vars_to_dict(a) -> dict:
    return {k: v for k, v in vars(a).items() if k != "func"}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_seg_args(p):
    p.add_argument("--ckpt", required=True, help="checkpoint file (.lnsc)")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--N", type=int, default=80, help="number of noisy decodings")
    p.add_argument("--sigma", type=float, default=0.001, help="latent noise std")
    p.add_argument("--mode", default="latent", choices=["latent", "control"])
    p.add_argument("--control-sigma", type=float, default=0.3235)
    p.add_argument("--clusterer", default="ward", choices=["ward", "complete", "kmeans"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None, help="only the first LIMIT images")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lns", description="Latent noise segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"lns {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a dataset")
    p.add_argument("--dataset", required=True, choices=DATASETS)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=30000)
    p.add_argument("--val", type=int, default=300)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--png", type=int, default=0, help="also export the first PNG test samples")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an AE or VAE from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override out_dir")
    p.add_argument("--iterations", type=int, default=None, help="override iterations")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment a dataset split, writing masks")
    _add_seg_args(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="segment and score a dataset split")
    _add_seg_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="noise sweep, sigma selection and evaluation from a TOML spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", default=None, help="override out_dir")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="Welch t-tests between two model variants")
    p.add_argument("--summary", nargs="+", required=True, help="summary.csv files from sweeps")
    p.add_argument("--a", default="AE")
    p.add_argument("--b", default="VAE")
    p.add_argument("--mode", default="latent", choices=["latent", "control"])
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--m", type=int, default=None, help="Bonferroni factor (default: datasets compared)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("theory", help="Monte-Carlo checks with linear decoders")
    p.add_argument("--mode", required=True, choices=["proportional", "independent", "var-check", "pca-check"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--Ns", type=int, nargs="+", default=[3, 9])
    p.add_argument("--runs", type=int, default=10000)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--pixels", type=int, default=16)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--no-cluster", action="store_true", help="skip the per-run Ward clustering")
    p.add_argument("--draws", type=int, default=100000)
    p.add_argument("--datasets", nargs="+", default=list(DATASETS))
    p.add_argument("--samples", type=int, default=2000)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("plot", help="render figures from a sweep directory")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    from .experiments import ExperimentError
    from .lns import DegenerateStackError
    from .trainer import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lns: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    limits = nullcontext()
    if args.threads is not None:
        if args.threads < 1:
            print("lns: error: --threads must be at least 1", file=sys.stderr)
            return EXIT_USAGE
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(limits=args.threads)
    try:
        with limits:
            return args.func(args)
    except (UsageError, ConfigError, DegenerateStackError, VariantError) as exc:
        _fail_open_runs(exc)
        print(f"lns: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        _fail_open_runs(exc)
        print(f"lns: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, ExperimentError, OSError, KeyError) as exc:
        _fail_open_runs(exc)
        print(f"lns: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
