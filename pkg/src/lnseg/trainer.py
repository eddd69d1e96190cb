"""Training loop for the AE/VAE: Adam, uniform batch sampling, CSV log, checkpoints.

Every random draw is keyed by (seed, purpose, iteration), so a resumed run
replays exactly the batches and reparameterisation noise of an uninterrupted
one.
"""
from __future__ import annotations

import csv
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .gg_data import Split, read_manifest, read_split
from .model import GecoState, Model, load_checkpoint, loss_ae, loss_vae_geco, save_checkpoint, to_nchw

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

FULL_ITERATIONS = 1_100_000
DESK_ITERATIONS = 150_000
LOG_COLUMNS = ["iteration", "train_loss", "val_mse", "beta"]


class ConfigError(ValueError):
    pass


class TrainingDiverged(nx.NumericalError):
    pass


@dataclass
class TrainConfig:
    data_dir: str
    out_dir: str
    variant: str = "AE"
    iterations: int = DESK_ITERATIONS
    batch: int = 64
    lr: float = 5e-5
    seed: int = 0
    checkpoint_every: int = 5000
    val_every: int = 1000
    val_size: int = 300
    log_every: int = 10
    g_goal: float = 0.0006
    latent_dim: int = 15
    full_scale: bool = False  # 1.1e6 iterations when set

    def __post_init__(self):
        if self.full_scale:
            self.iterations = FULL_ITERATIONS
        if self.variant not in ("AE", "VAE"):
            raise ConfigError(f"variant must be AE or VAE, got {self.variant!r}")
        for name in ("iterations", "batch", "checkpoint_every", "val_every", "val_size", "log_every", "latent_dim"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        missing = {"data_dir", "out_dir"} - set(d)
        if missing:
            raise ConfigError(f"missing config keys: {', '.join(sorted(missing))}")
        return cls(**d)

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def batch_indices(n: int, batch: int, rng: nx.Rng) -> np.ndarray:
    if n <= 0:
        raise ValueError("cannot draw batches from an empty dataset")
    return rng.integers(0, n, size=batch)


def batch_iterator(images: np.ndarray, batch: int, seed: int, start: int = 0):
    """Yield (iteration, NCHW batch) forever, sampling uniformly with replacement."""
    n = len(images)
    if n == 0:
        raise ValueError("cannot draw batches from an empty dataset")
    base = nx.Rng(seed).stream("batch")
    it = start
    while True:
        idx = batch_indices(n, batch, base.stream(it))
        yield it, to_nchw(images[idx])
        it += 1


def validation_mse(model: Model, images: np.ndarray, chunk: int = 50) -> float:
    """Per-pixel MSE of deterministic reconstructions (VAE decodes the mean)."""
    total = 0.0
    for s in range(0, len(images), chunk):
        x = to_nchw(images[s : s + chunk])
        mu, _ = model.encode_batch(x)
        x_hat = model.decode_batch(mu)
        total += float(np.sum((x_hat.astype(np.float64) - x) ** 2))
    return total / images.size


def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [row for row in csv.DictReader(fh) if int(row["iteration"]) <= upto]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def train(config: TrainConfig, resume: bool = False, progress=None, train_data: Split | None = None) -> dict:
    """Run training; returns a summary dict. Writes under ``config.out_dir``:

    ``train_log.csv``, ``checkpoint.lnsc`` (rolling, with optimizer state) and
    ``final.lnsc``.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(config.data_dir)
    train_split = train_data if train_data is not None else read_split(config.data_dir, "train")
    if len(train_split) == 0:
        raise ValueError("training split is empty")
    val_images = None
    if "val" in manifest.files:
        val_images = read_split(config.data_dir, "val").images[: config.val_size]

    ckpt_path = out / "checkpoint.lnsc"
    log_path = out / "train_log.csv"
    meta_base = {"dataset": manifest.dataset, "seed": config.seed, "config": config.to_dict()}
    geco = GecoState(g_goal=config.g_goal) if config.variant == "VAE" else None

    if resume and ckpt_path.exists():
        model, meta, adam = load_checkpoint(ckpt_path, variant=config.variant)
        start = int(meta["iteration"])
        if geco is not None:
            geco = GecoState(**meta["geco"])
        rows = _read_log(log_path, start)
    else:
        model = Model.create(config.seed, config.variant, config.latent_dim)
        adam = nx.AdamState.for_params(model.params, lr=config.lr)
        start = 0
        rows = []

    def checkpoint(path: Path, it: int) -> None:
        meta = dict(meta_base, iteration=it)
        if geco is not None:
            meta["geco"] = geco.to_dict()
        save_checkpoint(model, meta, path, adam)

    fh = open(log_path, "w", newline="")
    writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
    writer.writeheader()
    writer.writerows(rows)

    def log_row(it, loss, val, beta):
        writer.writerow({"iteration": it, "train_loss": _fmt(loss), "val_mse": _fmt(val), "beta": _fmt(beta)})

    if start == 0 and val_images is not None:
        log_row(0, None, validation_mse(model, val_images), geco.beta if geco else None)

    eps_rng = nx.Rng(config.seed).stream("reparam")
    it = start
    last_val = None
    try:
        for it0, batch in batch_iterator(train_split.images, config.batch, config.seed, start):
            if it0 >= config.iterations:
                break
            it = it0 + 1
            if geco is None:
                loss, grads = loss_ae(model, batch)
                beta = None
            else:
                beta = geco.beta
                loss, grads, _ = loss_vae_geco(model, geco, batch, eps_rng.stream(it0))
            nx.adam_step(model.params, grads, adam)
            val = None
            if val_images is not None and (it % config.val_every == 0 or it == config.iterations):
                val = validation_mse(model, val_images)
                if not math.isfinite(val):
                    raise nx.NumericalError(f"validation MSE is not finite at iteration {it}")
                last_val = val
            if it % config.log_every == 0 or val is not None:
                log_row(it, loss, val, beta)
            if progress is not None and (it % config.log_every == 0):
                progress(it, loss, val, beta)
            if it % config.checkpoint_every == 0:
                fh.flush()
                checkpoint(ckpt_path, it)
    except nx.NumericalError as exc:
        fh.close()
        raise TrainingDiverged(
            f"training diverged near iteration {it}: {exc}; last good checkpoint kept at {ckpt_path}"
        ) from exc
    fh.close()
    checkpoint(ckpt_path, it)
    checkpoint(out / "final.lnsc", it)
    summary = {"iterations": it, "final_val_mse": last_val, "checkpoint": str(out / "final.lnsc")}
    if geco is not None:
        summary["beta"] = geco.beta
    return summary


def stderr_progress(it, loss, val, beta):
    msg = f"iter {it} loss {loss:.6g}"
    if val is not None:
        msg += f" val_mse {val:.6g}"
    if beta is not None:
        msg += f" beta {beta:.3g}"
    print(msg, file=sys.stderr, flush=True)
