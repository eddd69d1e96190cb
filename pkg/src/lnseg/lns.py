"""Latent Noise Segmentation and the noisy-reconstruction control.

Latent mode perturbs the encoder mean with small Gaussian noise N times,
decodes every perturbed code, and clusters pixels by the unit-normalised
vector of consecutive output differences (C*(N-1) values per pixel).

Control mode never touches the latent code: it adds Gaussian noise to the
deterministic reconstruction Dec(mu) in pixel space and clusters pixels by
their N noisy values.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .clustering import cluster, normalize_rows
from .model import Model
from .numerics import NumericalError, Rng

CONTROL_SIGMA = 0.3235
MODES = ("latent", "control")


class DegenerateStackError(ValueError):
    """Every difference vector is zero, so there is nothing to cluster."""


@dataclass
class SegmentationConfig:
    N: int = 80
    sigma: float = 0.001
    seed: int = 0
    clusterer: str = "ward"
    mode: str = "latent"
    control_sigma: float = CONTROL_SIGMA

    def __post_init__(self):
        if self.N < 2:
            raise ValueError(f"N must be at least 2, got {self.N}")
        if self.sigma < 0 or self.control_sigma < 0:
            raise ValueError("noise levels must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegmentationResult:
    labels: np.ndarray  # (H, W) int
    stack: np.ndarray  # (H, W, C, S) float64; S = N-1 differences or N noisy values
    zero_rows: int


def _image_key(image: np.ndarray) -> int:
    # noise depends on the image content too, so a batch of images never
    # shares one noise draw even under a single seed
    return zlib.crc32(np.ascontiguousarray(image, dtype=np.float32).tobytes())


def noise_rng(config: SegmentationConfig, image: np.ndarray, purpose: str) -> Rng:
    return Rng(config.seed).stream(purpose, _image_key(image))


def delta_stack(outputs: np.ndarray) -> np.ndarray:
    """(N, C, H, W) decodings -> (H, W, C, N-1) consecutive differences."""
    out = np.asarray(outputs, dtype=np.float64)
    return np.diff(out, axis=0).transpose(2, 3, 1, 0)


def features_from_stack(stack: np.ndarray) -> np.ndarray:
    """(H, W, C, S) -> (H*W, C*S) per-pixel rows."""
    h, w = stack.shape[:2]
    return stack.reshape(h * w, -1)


def cluster_stack(stack: np.ndarray, K: int, config: SegmentationConfig, rng: Rng) -> tuple[np.ndarray, int]:
    h, w = stack.shape[:2]
    feats, zero = normalize_rows(features_from_stack(stack))
    if zero.all():
        raise DegenerateStackError("all feature vectors are zero; increase sigma")
    labels = cluster(feats, K, config.clusterer, rng.stream("kmeans"))
    return labels.reshape(h, w), int(zero.sum())


def _encode_mean(model: Model, image: np.ndarray) -> np.ndarray:
    mu, _ = model.encode(image)
    if not np.all(np.isfinite(mu)):
        raise NumericalError("encoder produced non-finite values; the checkpoint is unusable")
    return mu


def latent_decodings(model: Model, image: np.ndarray, config: SegmentationConfig) -> np.ndarray:
    """Decode mu + xi_n for n = 1..N; returns (N, C, H, W) in the model dtype."""
    mu = _encode_mean(model, image)
    rng = noise_rng(config, image, "latent-noise")
    xi = np.stack([rng.stream(n).normal(mu.shape, 0.0, config.sigma) for n in range(config.N)])
    z = (mu[None, :].astype(np.float64) + xi).astype(mu.dtype)
    out = model.decode_batch(z)
    if not np.all(np.isfinite(out)):
        raise NumericalError("decoder produced non-finite values")
    return out


def segment(model: Model, image: np.ndarray, K: int, config: SegmentationConfig) -> SegmentationResult:
    """Segment one (H, W, C) image into K groups; dispatches on ``config.mode``."""
    if config.mode == "control":
        return segment_control(model, image, K, config)
    if config.sigma == 0:
        raise DegenerateStackError("sigma = 0 gives identical decodings and an all-zero difference stack")
    stack = delta_stack(latent_decodings(model, image, config))
    labels, zero = cluster_stack(stack, K, config, noise_rng(config, image, "cluster"))
    return SegmentationResult(labels, stack, zero)


def control_samples(model: Model, image: np.ndarray, config: SegmentationConfig) -> np.ndarray:
    """Dec(mu) plus pixel-space noise, N times; returns (H, W, C, N)."""
    mu = _encode_mean(model, image)
    recon = model.decode_batch(mu[None, :])[0].astype(np.float64)  # (C, H, W)
    rng = noise_rng(config, image, "pixel-noise")
    noisy = np.stack([recon + rng.stream(n).normal(recon.shape, 0.0, config.control_sigma) for n in range(config.N)])
    return noisy.transpose(2, 3, 1, 0)


def segment_control(model: Model, image: np.ndarray, K: int, config: SegmentationConfig) -> SegmentationResult:
    stack = control_samples(model, image, config)
    labels, zero = cluster_stack(stack, K, config, noise_rng(config, image, "cluster"))
    return SegmentationResult(labels, stack, zero)


def pca2d_diagnostic(stack: np.ndarray):
    """Project normalised per-pixel rows onto their top two principal components.

    Returns (coords (n, 2), explained variances (2,), rank_deficient flag).
    Missing components (rank < 2) are returned as zero columns.
    """
    feats, _ = normalize_rows(features_from_stack(np.asarray(stack, dtype=np.float64)))
    centered = feats - feats.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = s**2 / max(len(feats) - 1, 1)
    tol = max(centered.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    coords = np.zeros((len(feats), 2))
    explained = np.zeros(2)
    m = min(rank, 2)
    coords[:, :m] = centered @ vt[:m].T
    explained[:m] = var[:m]
    return coords, explained, rank < 2
