"""Monte-Carlo checks of the separability argument behind latent noise segmentation.

With a linear decoder Dec(z) = J z the consecutive output differences are
exactly J (xi_{n+1} - xi_n), so two pixels can only end up with positively
proportional feature vectors in every run if their Jacobian rows are
themselves proportional. Rows drawn independently become separable almost
surely, and the chance of an accidental alignment shrinks quickly with N.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import agglomerative, normalize_rows
from .numerics import Rng

MODES = ("proportional", "independent")


class TheoryError(ValueError):
    pass


@dataclass
class SyntheticJacobian:
    J: np.ndarray  # (pixels, channels, d)
    parts: np.ndarray  # (pixels,) part id per pixel
    mode: str

    @property
    def pixels(self) -> int:
        return self.J.shape[0]

    @property
    def channels(self) -> int:
        return self.J.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.J.shape[2]


def make_jacobian(mode: str, rng: Rng, pixels: int = 16, channels: int = 3, d: int = 8, n_parts: int = 2) -> SyntheticJacobian:
    """Proportional mode: every pixel of a part is a positive multiple r_p of one
    shared (channels, d) block. Independent mode: every pixel's block is i.i.d. N(0, 1)."""
    if mode not in MODES:
        raise TheoryError(f"mode must be one of {MODES}")
    parts = np.arange(pixels) * n_parts // pixels
    if mode == "independent":
        J = rng.stream("blocks").normal((pixels, channels, d))
    else:
        base = rng.stream("blocks").normal((n_parts, channels, d))
        scale = rng.stream("ratios").uniform(0.5, 2.0, pixels)
        J = scale[:, None, None] * base[parts]
    return SyntheticJacobian(J, parts, mode)


def linear_delta_stack(jac: SyntheticJacobian, sigma: float, N: int, rng: Rng, mu: np.ndarray | None = None) -> np.ndarray:
    """Run the decode-and-difference loop with Dec(z) = J z; returns (pixels, channels, N-1)."""
    if N < 2:
        raise TheoryError("N must be at least 2")
    d = jac.latent_dim
    mu = np.zeros(d) if mu is None else mu
    xi = rng.normal((N, d), 0.0, sigma)
    outputs = np.einsum("pcd,nd->npc", jac.J, mu[None, :] + xi)
    return np.diff(outputs, axis=0).transpose(1, 2, 0)


def pair_angles(features: np.ndarray) -> np.ndarray:
    """Angle in radians between every pair of rows (pixels x pixels)."""
    unit, _ = normalize_rows(features)
    # arccos of the dot product is ill-conditioned near 0; the chord is not
    chord = np.sqrt(np.sum((unit[:, None, :] - unit[None, :, :]) ** 2, axis=-1))
    return 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))


@dataclass
class SeparabilityReport:
    mode: str
    sigma: float
    N: int
    runs: int
    tol: float
    inseparable: np.ndarray  # (pixels, pixels) frequency in [0, 1]
    co_clustered: np.ndarray  # (pixels, pixels) frequency of sharing a Ward label
    parts: np.ndarray
    min_angle: np.ndarray = field(repr=False, default=None)  # smallest angle seen per pair

    def same_part(self) -> np.ndarray:
        m = self.parts[:, None] == self.parts[None, :]
        np.fill_diagonal(m, False)
        return m

    def cross_part(self) -> np.ndarray:
        return self.parts[:, None] != self.parts[None, :]

    def summary(self) -> dict:
        same, cross = self.same_part(), self.cross_part()
        return {
            "mode": self.mode,
            "sigma": self.sigma,
            "N": self.N,
            "runs": self.runs,
            "tol": self.tol,
            "same_part_inseparable": float(self.inseparable[same].mean()) if same.any() else None,
            "cross_part_inseparable": float(self.inseparable[cross].mean()),
            "cross_part_inseparable_max": float(self.inseparable[cross].max()),
            "same_part_co_clustered": float(self.co_clustered[same].mean()) if same.any() else None,
        }


def run_linear_lns(jac: SyntheticJacobian, sigma: float, N: int, runs: int, rng: Rng, tol: float = 1e-6,
                   cluster: bool = True) -> SeparabilityReport:
    """Repeat the linear pipeline ``runs`` times. A pixel pair counts as
    inseparable in a run when its feature vectors point the same way within
    ``tol`` radians. With ``cluster`` each run is also clustered by Ward into
    as many groups as there are parts."""
    if runs < 1:
        raise TheoryError("runs must be at least 1")
    p = jac.pixels
    k = int(jac.parts.max()) + 1
    insep = np.zeros((p, p))
    co = np.zeros((p, p))
    min_ang = np.full((p, p), np.inf)
    for r in range(runs):
        stack = linear_delta_stack(jac, sigma, N, rng.stream(r))
        feats = stack.reshape(p, -1)
        ang = pair_angles(feats)
        insep += ang <= tol
        np.minimum(min_ang, ang, out=min_ang)
        if cluster:
            unit, _ = normalize_rows(feats)
            labels = agglomerative(unit, min(k, p), "ward")
            co += labels[:, None] == labels[None, :]
    return SeparabilityReport(jac.mode, sigma, N, runs, tol, insep / runs, co / runs if cluster else co, jac.parts, min_ang)


def var_check(sigma: float, draws: int, rng: Rng, d: int = 1) -> dict:
    """Variance of single and summed consecutive noise differences.

    delta_n = xi_{n+1} - xi_n has variance 2 sigma^2; the telescoping sum
    delta_n + delta_{n+1} = xi_{n+2} - xi_n also has 2 sigma^2, not 4 sigma^2.
    """
    xi = rng.normal((draws, 3, d), 0.0, sigma)
    delta = np.diff(xi, axis=1)
    var_single = float(delta[:, 0].var(ddof=1))
    var_pair = float((delta[:, 0] + delta[:, 1]).var(ddof=1))
    cov = float(np.mean((delta[:, 0] - delta[:, 0].mean()) * (delta[:, 1] - delta[:, 1].mean())))
    target = 2.0 * sigma**2
    return {
        "sigma": sigma,
        "draws": draws,
        "var_delta": var_single,
        "var_delta_sum": var_pair,
        "cov_consecutive": cov,
        "ratio_delta": var_single / target,
        "ratio_delta_sum": var_pair / target,
    }


def part_pixel_values(images: np.ndarray, masks: np.ndarray, part_a: int, part_b: int, reflectance=None):
    """Per sample and channel, the values of two pixels drawn from the given parts.

    Same part: its first pixel in raster order and its last pixel (the last
    one with the same reflectance when ``reflectance`` maps are given, which
    keeps the pair ratio fixed for striped or graded parts). Different parts:
    the first pixel of each. Samples lacking a part are skipped. Returns two
    (n_samples, C) arrays.
    """
    va, vb = [], []
    refl = [None] * len(images) if reflectance is None else reflectance
    for img, m, r in zip(images, masks, refl):
        ia = np.flatnonzero(m.ravel() == part_a)
        ib = np.flatnonzero(m.ravel() == part_b)
        if ia.size == 0 or ib.size == 0:
            continue
        if part_a == part_b:
            if r is not None:
                rf = np.asarray(r).ravel()
                ia = ia[rf[ia] == rf[ia[0]]]
            if ia.size < 2:
                continue
            pa, pb = ia[0], ia[-1]
        else:
            pa, pb = ia[0], ib[0]
        flat = img.reshape(-1, img.shape[-1])
        va.append(flat[pa])
        vb.append(flat[pb])
    return np.asarray(va, dtype=np.float64), np.asarray(vb, dtype=np.float64)


def covariance_pca_check(images: np.ndarray, masks: np.ndarray, part_a: int, part_b: int, min_samples: int = 100,
                         reflectance=None) -> dict:
    """PCA of the 2-D point cloud (value at pixel a, value at pixel b), pooled over channels.

    A same-part pair lies on a line through the origin, so the second principal
    variance vanishes; pixels from independently lit parts fill the plane.
    """
    va, vb = part_pixel_values(images, masks, part_a, part_b, reflectance)
    if len(va) < min_samples:
        raise TheoryError(f"need at least {min_samples} samples containing both parts, got {len(va)}")
    pts = np.stack([va.ravel(), vb.ravel()], axis=1)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / (len(pts) - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    degenerate = bool(evals[0] <= 0)
    ratio = float(max(evals[1], 0.0) / evals[0]) if not degenerate else float("nan")
    corr = [float(np.corrcoef(va[:, c], vb[:, c])[0, 1]) for c in range(va.shape[1])] if not degenerate else []
    return {
        "samples": int(len(va)),
        "variances": evals.tolist(),
        "directions": evecs.T.tolist(),
        "ratio": ratio,
        "correlation_per_channel": corr,
        "degenerate": degenerate,
    }
