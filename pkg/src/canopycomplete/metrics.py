"""Scalar evaluation and loss quantities.

Chamfer distance, the multi-stage completion loss, adversarial and total
GAN losses, the 3D structural similarity score, best-of-N simulation
matching, and ordinary least squares with R^2. All pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud

PROB_CLAMP = 1e-7  # probabilities clamped to [PROB_CLAMP, 1 - PROB_CLAMP] before logs
_BRUTE_LIMIT = 4_000_000  # n*m above which nearest neighbors go through a KD-tree


def _points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("expected a non-empty (n, 3) point set")
    return pts


def _nearest_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from each point of a to its nearest point of b."""
    if len(a) * len(b) <= _BRUTE_LIMIT:
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return d2.min(axis=1)
    d, _ = cKDTree(b).query(a, k=1)
    return d * d


def chamfer_sq(a, b) -> float:
    """Symmetric mean-of-squared nearest-neighbor distances (m^2):
    mean over a of squared distance to b, plus the same with roles swapped."""
    pa, pb = _points(a), _points(b)
    return float(_nearest_sq(pa, pb).mean() + _nearest_sq(pb, pa).mean())


def chamfer_rms(a, b) -> float:
    """Root of chamfer_sq, in meters; reported alongside the raw value."""
    return float(np.sqrt(chamfer_sq(a, b)))


def completion_loss(fine, middle, coarse, gt, gt_mid, gt_coarse, alpha: float) -> float:
    """Multi-resolution completion loss: the fine-resolution chamfer term
    plus alpha-weighted middle and 2*alpha-weighted coarse terms. The
    ground-truth pyramids are FPS subsamples of gt."""
    return (
        chamfer_sq(fine, gt)
        + alpha * chamfer_sq(middle, gt_mid)
        + 2.0 * alpha * chamfer_sq(coarse, gt_coarse)
    )


def clamp_probability(p) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)


def adversarial_loss(d_real, d_fake) -> float:
    """Discriminator objective: sum(log d_real) + sum(log(1 - d_fake)).

    The discriminator maximizes this; probabilities are clamped away from
    {0, 1} before the logs.
    """
    d_real = clamp_probability(d_real)
    d_fake = clamp_probability(d_fake)
    if d_real.shape != d_fake.shape:
        raise ValueError("real/fake batches must have equal size")
    return float(np.log(d_real).sum() + np.log1p(-d_fake).sum())


def generator_adversarial_loss(d_fake, mode: str = "nonsaturating") -> float:
    """Generator-side adversarial term.

    "nonsaturating": -sum(log d_fake), the standard stabilized form.
    "minimax": sum(log(1 - d_fake)), the raw fake half of the
    discriminator objective (the generator minimizes it).
    """
    d_fake = clamp_probability(d_fake)
    if mode == "nonsaturating":
        return float(-np.log(d_fake).sum())
    if mode == "minimax":
        return float(np.log1p(-d_fake).sum())
    raise ValueError(f"unknown adversarial mode {mode!r}")


@dataclass(frozen=True)
class LossWeights:
    """Weights mixing the completion and adversarial terms; they must be
    non-negative and sum to 1."""

    alpha: float = 0.01
    lambda_com: float = 0.9
    lambda_adv: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_com < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be non-negative")
        if abs(self.lambda_com + self.lambda_adv - 1.0) > 1e-9:
            raise ValueError("lambda_com + lambda_adv must equal 1")


def total_loss(l_com: float, l_adv_generator_term: float, weights: LossWeights) -> float:
    """lambda_com * completion + lambda_adv * generator adversarial term."""
    return weights.lambda_com * l_com + weights.lambda_adv * l_adv_generator_term


@dataclass(frozen=True)
class Ssim3dConfig:
    eps: float = 1e-8
    k: int = 10
    feature: str = "mean_knn_distance"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.feature not in ("mean_knn_distance", "max_knn_distance"):
            raise ValueError(f"unknown feature kind {self.feature!r}")


def _local_feature(points: np.ndarray, cfg: Ssim3dConfig) -> np.ndarray:
    """Per-point local feature: mean (or max) distance to the k nearest
    neighbors within the same cloud, self excluded."""
    if len(points) < cfg.k + 1:
        raise ValueError(f"need at least k+1={cfg.k + 1} points, got {len(points)}")
    d, _ = cKDTree(points).query(points, k=cfg.k + 1)
    neigh = d[:, 1:]  # first column is the zero self-distance
    if cfg.feature == "mean_knn_distance":
        return neigh.mean(axis=1)
    return neigh.max(axis=1)


def ssim3d_error(x, y, cfg: Ssim3dConfig = Ssim3dConfig()) -> float:
    """Mean relative difference of local features across nearest-neighbor
    correspondences: for each p in y with nearest q in x,
    |F_x(q) - F_y(p)| / (max(|F_x(q)|, |F_y(p)|) + eps), per-point ratios
    clamped to [0, 1]."""
    px, py = _points(x), _points(y)
    fx = _local_feature(px, cfg)
    fy = _local_feature(py, cfg)
    _, q = cKDTree(px).query(py, k=1)
    fxq = fx[q]
    ratio = np.abs(fxq - fy) / (np.maximum(np.abs(fxq), np.abs(fy)) + cfg.eps)
    return float(np.clip(ratio, 0.0, 1.0).mean())


def ssim3d(x, y, cfg: Ssim3dConfig = Ssim3dConfig()) -> float:
    """Structural similarity in [0, 1]; 1 means identical local structure.

    Reported as 1 minus the relative-difference error so that higher is
    better; the raw error is available via :func:`ssim3d_error`.
    """
    return 1.0 - ssim3d_error(x, y, cfg)


def best_match_ssim(real, sims, cfg: Ssim3dConfig = Ssim3dConfig()):
    """Index and score of the simulated cloud most similar to the real one.

    Callers comparing against surface reconstructions should pre-filter
    each simulation to its surface points (occlusion labeling) first.
    """
    sims = list(sims)
    if not sims:
        raise ValueError("need at least one simulated cloud")
    best_idx, best_score = 0, -np.inf
    for i, sim in enumerate(sims):
        score = ssim3d(sim, real, cfg)
        if score > best_score:
            best_idx, best_score = i, score
    return best_idx, float(best_score)


def ols_fit_r2(x, y):
    """Least-squares line fit: returns (slope, intercept, r2).

    R^2 = 1 - SS_res/SS_tot, defined as 0 when y is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d sequences of equal length")
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx <= 0:
        raise ValueError("x has zero variance")
    slope = ((x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    ss_res = ((y - (slope * x + intercept)) ** 2).sum()
    ss_tot = ((y - ym) ** 2).sum()
    r2 = 0.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), float(r2)
