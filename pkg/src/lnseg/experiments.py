"""Evaluation, noise sweeps, model comparison and figures.

All result tables are CSV with fixed column order and ``repr`` floats so a
rerun with the same checkpoint, dataset and configuration is byte-identical.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gg_data import PALETTE, read_manifest, read_split
from .lns import DegenerateStackError, SegmentationConfig, cluster_stack, control_samples, delta_stack, latent_decodings, noise_rng
from .metrics import adjusted_rand_index, bonferroni, f_test, summarize, welch_t
from .model import Model, load_checkpoint, write_container
from .numerics import NumericalError

DEFAULT_SIGMAS = tuple(float(s) for s in np.logspace(-4, 0, 13))
DEFAULT_NS = (2, 5, 10, 20, 40, 80)


class ExperimentError(ValueError):
    pass


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 22), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c)) for c in columns})


def read_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise ExperimentError(f"{path}: empty CSV")
            return list(reader)
    except (OSError, csv.Error, UnicodeDecodeError) as exc:
        raise ExperimentError(f"{path}: cannot read CSV ({exc})") from exc


def _num(x):
    return None if x in (None, "") else float(x)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    rows: list  # dicts: index, K, ari
    labels: np.ndarray  # (n, H, W) uint8
    summary: dict

    def aris(self) -> list:
        return [r["ari"] for r in self.rows]


def evaluate(model: Model, data_dir, config: SegmentationConfig, split: str = "test", limit: int | None = None,
             indices=None) -> EvalResult:
    """Segment every image of a split with the true K and score it by ARI."""
    data = read_split(data_dir, split)
    idx = np.arange(len(data)) if indices is None else np.asarray(indices)
    if limit is not None:
        idx = idx[:limit]
    rows, labels = [], []
    for i in idx:
        img, mask, k = data.images[i], data.masks[i], int(data.K[i])
        if config.mode == "control":
            stack = control_samples(model, img, config)
        else:
            if config.sigma == 0:
                raise DegenerateStackError("sigma = 0 gives an all-zero difference stack")
            stack = delta_stack(latent_decodings(model, img, config))
        lab, _ = cluster_stack(stack, k, config, noise_rng(config, img, "cluster"))
        rows.append({"index": int(i), "K": k, "ari": adjusted_rand_index(mask, lab)})
        labels.append(lab.astype(np.uint8))
    labels = np.stack(labels) if labels else np.zeros((0,) + data.masks.shape[1:], np.uint8)
    summary = summarize([r["ari"] for r in rows]) if rows else {"n": 0, "mean": None, "sem": None}
    return EvalResult(rows, labels, summary)


def evaluate_many(model: Model, data_dir, base: SegmentationConfig, sigmas, Ns, split="test", indices=None,
                  clusterers=("ward",), progress=None) -> list[dict]:
    """Mean ARI for every (clusterer, sigma, N) cell.

    Decodings are computed once per (image, sigma) at the largest N; smaller N
    reuse the leading draws, so cells differ only in N, exactly as separate
    runs with the same seed would.
    """
    data = read_split(data_dir, split)
    idx = np.arange(len(data)) if indices is None else np.asarray(indices)
    n_max = max(Ns)
    cells = {}
    for sigma in sigmas:
        cfg = SegmentationConfig(**{**base.to_dict(), "sigma": float(sigma), "N": n_max, "mode": "latent"})
        for i in idx:
            img, mask, k = data.images[i], data.masks[i], int(data.K[i])
            err = None
            try:
                if sigma <= 0:
                    raise DegenerateStackError("sigma must be positive")
                outs = latent_decodings(model, img, cfg)
            except (DegenerateStackError, NumericalError) as exc:
                outs, err = None, str(exc)
            for n in Ns:
                for cl in clusterers:
                    key = (cl, float(sigma), int(n))
                    cell = cells.setdefault(key, {"aris": [], "errors": []})
                    if outs is None:
                        cell["errors"].append(err)
                        continue
                    c2 = SegmentationConfig(**{**cfg.to_dict(), "N": int(n), "clusterer": cl})
                    try:
                        lab, _ = cluster_stack(delta_stack(outs[:n]), k, c2, noise_rng(c2, img, "cluster"))
                        cell["aris"].append(adjusted_rand_index(mask, lab))
                    except (DegenerateStackError, ValueError) as exc:
                        cell["errors"].append(str(exc))
            if progress:
                progress(sigma, int(i))
    out = []
    for (cl, sigma, n), cell in sorted(cells.items()):
        s = summarize(cell["aris"]) if cell["aris"] else {"n": 0, "mean": None, "sem": None}
        out.append({
            "clusterer": cl, "sigma": sigma, "N": n, "mean_ari": s["mean"], "sem": s["sem"], "n": s["n"],
            "errors": len(cell["errors"]), "error": cell["errors"][0] if cell["errors"] else "",
        })
    return out


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    checkpoint: str
    dataset_dir: str
    variant: str = ""
    dataset: str = ""
    seed: int = 0


@dataclass
class SweepSpec:
    models: list  # ModelSpec or dicts
    out_dir: str
    sigmas: list = field(default_factory=lambda: list(DEFAULT_SIGMAS))
    Ns: list = field(default_factory=lambda: [80])
    clusterers: list = field(default_factory=lambda: ["ward"])
    select_N: int = 80
    select_images: int = 100  # images used for picking the best sigma
    eval_Ns: list = field(default_factory=lambda: [5, 80])
    eval_images: int = 100
    seg_seed: int = 0
    control: bool = True
    control_sigma: float = 0.3235
    split: str = "test"

    def __post_init__(self):
        self.models = [m if isinstance(m, ModelSpec) else ModelSpec(**m) for m in self.models]
        if not self.models or not self.sigmas or not self.Ns or not self.clusterers:
            raise ExperimentError("sweep grids must be non-empty")
        if self.select_N not in self.Ns:
            self.Ns = sorted(set(self.Ns) | {self.select_N})

    def to_dict(self) -> dict:
        return asdict(self)


GRID_COLUMNS = ["variant", "seed", "dataset", "clusterer", "sigma", "N", "mean_ari", "sem", "n", "errors", "error"]
BEST_COLUMNS = ["variant", "seed", "dataset", "clusterer", "best_sigma", "select_mean_ari"]
EVAL_COLUMNS = ["variant", "seed", "dataset", "mode", "sigma", "N", "index", "K", "ari"]
SUMMARY_COLUMNS = ["variant", "seed", "dataset", "mode", "sigma", "N", "mean_ari", "sem", "n"]


def _model_info(ms: ModelSpec):
    model, meta, _ = load_checkpoint(ms.checkpoint)
    variant = ms.variant or meta.get("variant", "")
    dataset = ms.dataset or meta.get("dataset") or read_manifest(ms.dataset_dir).dataset
    return model, variant, dataset


def best_sigma(rows: list[dict], N: int) -> tuple[float | None, float | None]:
    """Sigma with the highest mean ARI at N (smallest sigma on ties)."""
    best = (None, None)
    for r in sorted(rows, key=lambda r: r["sigma"]):
        if r["N"] != N or r["mean_ari"] is None:
            continue
        if best[1] is None or r["mean_ari"] > best[1]:
            best = (r["sigma"], r["mean_ari"])
    return best


def sweep(spec: SweepSpec, progress=None) -> dict:
    """Noise sweep, best-sigma selection, final evaluation and control runs.

    Writes grid.csv, best_sigma.csv, per_image.csv, summary.csv and
    sigma_ftest.json under ``spec.out_dir``.
    """
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid, best_rows, per_image, summary = [], [], [], []
    for ms in spec.models:
        model, variant, dataset = _model_info(ms)
        tag = {"variant": variant, "seed": ms.seed, "dataset": dataset}
        base = SegmentationConfig(seed=spec.seg_seed)
        sel_idx = np.arange(spec.select_images)
        cells = evaluate_many(model, ms.dataset_dir, base, spec.sigmas, spec.Ns, spec.split, sel_idx, spec.clusterers,
                              progress=(lambda s, i: progress(f"{variant}/{dataset} sweep sigma={s:.3g} image={i}")) if progress else None)
        grid += [dict(tag, **c) for c in cells]
        for cl in spec.clusterers:
            mine = [c for c in cells if c["clusterer"] == cl]
            sigma, score = best_sigma(mine, spec.select_N)
            best_rows.append(dict(tag, clusterer=cl, best_sigma=sigma, select_mean_ari=score))
        sigma = next(b["best_sigma"] for b in best_rows if b["variant"] == variant and b["seed"] == ms.seed
                     and b["dataset"] == dataset and b["clusterer"] == spec.clusterers[0])
        eval_idx = np.arange(spec.eval_images)
        if sigma is not None:
            for n in spec.eval_Ns:
                cfg = SegmentationConfig(seed=spec.seg_seed, sigma=sigma, N=n, clusterer=spec.clusterers[0])
                res = evaluate(model, ms.dataset_dir, cfg, spec.split, indices=eval_idx)
                per_image += [dict(tag, mode="latent", sigma=sigma, N=n, **r) for r in res.rows]
                summary.append(dict(tag, mode="latent", sigma=sigma, N=n, mean_ari=res.summary["mean"],
                                    sem=res.summary["sem"], n=res.summary["n"]))
                if n == max(spec.eval_Ns):
                    archive_masks(out / f"masks_{variant}_{dataset}_s{ms.seed}.lnsc", res,
                                  dict(tag, dataset_dir=str(ms.dataset_dir), split=spec.split, sigma=sigma, N=n))
        if spec.control:
            cfg = SegmentationConfig(seed=spec.seg_seed, N=spec.select_N, mode="control", control_sigma=spec.control_sigma,
                                     clusterer=spec.clusterers[0])
            res = evaluate(model, ms.dataset_dir, cfg, spec.split, indices=eval_idx)
            per_image += [dict(tag, mode="control", sigma=spec.control_sigma, N=spec.select_N, **r) for r in res.rows]
            summary.append(dict(tag, mode="control", sigma=spec.control_sigma, N=spec.select_N,
                                mean_ari=res.summary["mean"], sem=res.summary["sem"], n=res.summary["n"]))
    write_csv(out / "grid.csv", grid, GRID_COLUMNS)
    write_csv(out / "best_sigma.csv", best_rows, BEST_COLUMNS)
    write_csv(out / "per_image.csv", per_image, EVAL_COLUMNS)
    write_csv(out / "summary.csv", summary, SUMMARY_COLUMNS)
    ftest = sigma_variance_test(best_rows)
    (out / "sigma_ftest.json").write_text(json.dumps(ftest, indent=2, sort_keys=True) + "\n")
    return {"grid": grid, "best": best_rows, "per_image": per_image, "summary": summary, "ftest": ftest}


def sigma_variance_test(best_rows: list[dict]) -> dict:
    """F-test of best-sigma spread, AE collection over VAE collection."""
    ae = [float(r["best_sigma"]) for r in best_rows if r["variant"] == "AE" and r["best_sigma"] not in (None, "")]
    vae = [float(r["best_sigma"]) for r in best_rows if r["variant"] == "VAE" and r["best_sigma"] not in (None, "")]
    res = {"ae_best_sigmas": ae, "vae_best_sigmas": vae, "F": None, "p": None, "error": ""}
    try:
        t = f_test(ae, vae)
        res.update(F=t.F if math.isfinite(t.F) else "inf", p=t.p, df1=t.df1, df2=t.df2)
    except ValueError as exc:
        res["error"] = str(exc)
    return res


# ---------------------------------------------------------------------------
# Model comparison
# ---------------------------------------------------------------------------

COMPARE_COLUMNS = ["dataset", "n_a", "n_b", "mean_a", "mean_b", "t", "df", "p", "p_bonferroni", "significant"]


def compare_models(results_a: dict, results_b: dict, alpha: float = 0.05, m: int | None = None) -> list[dict]:
    """Welch t-test per dataset on per-seed mean ARIs, Bonferroni corrected.

    ``results_a`` / ``results_b`` map dataset name to a list of per-seed means.
    ``m`` defaults to the number of datasets compared.
    """
    datasets = sorted(set(results_a) & set(results_b))
    if not datasets:
        raise ExperimentError("no dataset in common between the two result sets")
    m = len(datasets) if m is None else m
    rows = []
    for ds in datasets:
        a, b = results_a[ds], results_b[ds]
        if len(a) < 2 or len(b) < 2:
            raise ExperimentError(f"{ds}: need at least two seeds per model, got {len(a)} and {len(b)}")
        t = welch_t(a, b)
        rows.append({"dataset": ds, "n_a": len(a), "n_b": len(b), "mean_a": float(np.mean(a)), "mean_b": float(np.mean(b)),
                     "t": t.t, "df": t.df, "p": t.p})
    adj = bonferroni([r["p"] for r in rows], m)
    for r, pa in zip(rows, adj):
        r["p_bonferroni"] = float(pa)
        r["significant"] = bool(pa < alpha)
    return rows


def per_seed_means(summary_rows: list[dict], variant: str, mode: str = "latent", N: int | None = None) -> dict:
    """dataset -> list of per-seed mean ARIs from summary.csv rows."""
    out: dict = {}
    for r in summary_rows:
        if r["variant"] != variant or r["mode"] != mode:
            continue
        if N is not None and int(r["N"]) != N:
            continue
        if r["mean_ari"] in (None, ""):
            continue
        out.setdefault(r["dataset"], []).append(float(r["mean_ari"]))
    return out


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def _svg_bytes(fig) -> bytes:
    import matplotlib

    buf = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": "lnseg", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue().encode("utf-8")


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def sigma_plot(grid_rows: list[dict], path, N: int | None = None) -> None:
    """Mean ARI against sigma (log axis), one line per (variant, seed, dataset)."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    series: dict = {}
    for r in grid_rows:
        if N is not None and int(r["N"]) != N:
            continue
        if r["mean_ari"] in (None, ""):
            continue
        key = f'{r["variant"]} s{r["seed"]} {r["dataset"]}'
        series.setdefault(key, []).append((float(r["sigma"]), float(r["mean_ari"])))
    for key in sorted(series):
        pts = sorted(series[key])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=key)
    if series:
        ax.set_xscale("log")
        ax.legend(fontsize=6)
    ax.set_xlabel("sigma")
    ax.set_ylabel("mean ARI")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(_svg_bytes(fig))
    plt.close(fig)


def bar_plot(summary_rows: list[dict], path) -> None:
    """Mean ARI with SEM error bars per dataset, one bar group per (variant, mode, N)."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(7, 4))
    datasets = sorted({r["dataset"] for r in summary_rows})
    groups = sorted({(r["variant"], r["mode"], str(r["N"])) for r in summary_rows})
    width = 0.8 / max(len(groups), 1)
    for gi, g in enumerate(groups):
        xs, ys, es = [], [], []
        for di, ds in enumerate(datasets):
            vals = [r for r in summary_rows if (r["variant"], r["mode"], str(r["N"])) == g and r["dataset"] == ds
                    and r["mean_ari"] not in (None, "")]
            if not vals:
                continue
            xs.append(di + gi * width)
            ys.append(float(np.mean([float(v["mean_ari"]) for v in vals])))
            es.append(float(np.mean([_num(v["sem"]) or 0.0 for v in vals])))
        ax.bar(xs, ys, width=width, yerr=es, label=" ".join(g))
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(datasets))])
    ax.set_xticklabels(datasets, rotation=20, fontsize=7)
    ax.set_ylabel("mean ARI")
    ax.set_ylim(-0.2, 1.05)
    if groups:
        ax.legend(fontsize=6)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(_svg_bytes(fig))
    plt.close(fig)


def _colorize(mask: np.ndarray) -> np.ndarray:
    pal = np.asarray(PALETTE, dtype=np.uint8)
    return pal[np.asarray(mask) % len(pal)]


def montage(images: np.ndarray, masks: np.ndarray, preds: np.ndarray, path, cols: int = 10) -> tuple[int, int]:
    """PNG grid; every tile is image | ground truth | prediction. Returns (rows, cols)."""
    from PIL import Image

    n = len(images)
    if n == 0:
        raise ExperimentError("montage needs at least one image")
    cols = min(cols, n)
    rows = -(-n // cols)
    h, w = images.shape[1:3]
    canvas = np.full((rows * (h + 2), cols * (3 * w + 4), 3), 255, np.uint8)
    for k in range(n):
        r, c = divmod(k, cols)
        y, x = r * (h + 2), c * (3 * w + 4)
        canvas[y : y + h, x : x + w] = np.round(np.clip(images[k], 0, 1) * 255).astype(np.uint8)
        canvas[y : y + h, x + w : x + 2 * w] = _colorize(masks[k])
        canvas[y : y + h, x + 2 * w : x + 3 * w] = _colorize(preds[k])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path, format="PNG")
    return rows, cols


def render_plots(results_dir, out_dir=None) -> list[Path]:
    """Figures from a sweep directory: sigma curves, bar chart, mask montages."""
    res = Path(results_dir)
    out = Path(out_dir) if out_dir else res / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if (res / "grid.csv").exists():
        grid = read_csv(res / "grid.csv")
        for n in sorted({int(r["N"]) for r in grid}) or [None]:
            p = out / f"sigma_N{n}.svg"
            sigma_plot(grid, p, n)
            written.append(p)
        if not grid:
            p = out / "sigma.svg"
            sigma_plot([], p)
            written.append(p)
    if (res / "summary.csv").exists():
        p = out / "summary.svg"
        bar_plot(read_csv(res / "summary.csv"), p)
        written.append(p)
    for mpath in sorted(res.glob("masks_*.lnsc")):
        from .model import read_container

        tensors, meta = read_container(mpath)
        data = read_split(meta["dataset_dir"], meta.get("split", "test"))
        idx = tensors["index"].astype(np.int64)
        p = out / (mpath.stem + ".png")
        montage(data.images[idx], data.masks[idx], tensors["labels"], p)
        written.append(p)
    return written


def archive_masks(path, result: EvalResult, meta: dict) -> None:
    # the container stores f32 or u8; f32 holds indices exactly below 2**24
    idx = np.asarray([r["index"] for r in result.rows], dtype=np.float32)
    write_container(path, {"labels": result.labels, "index": idx}, meta)
