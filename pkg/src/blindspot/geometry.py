"""Embedding-space distances, 2-D projections, KDE, and K-L divergence.

The distance side: the k-NN distance of a test point is the mean of its
k smallest feature-space distances to the training set, and the
normalized variant standardizes features with training statistics and
divides by the root of the feature dimension so values are comparable
across extractors.

The divergence side: project train and test features jointly to 2-D
(PCA by default, exact t-SNE behind a flag), fit a Gaussian KDE with
per-dimension Scott's-rule bandwidths to each split, and integrate
p_train * log(p_train / p_test) on a midpoint grid over the bounding
box of all projected points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, ValidationError

__all__ = [
    "FeatureMatrix",
    "DensityModel",
    "PerClassKl",
    "knn_distance",
    "knn_distances",
    "standardized_mean_distance",
    "project_pca",
    "project_tsne",
    "kde_fit",
    "kl_divergence",
    "per_class_kl",
]


@dataclass(frozen=True)
class FeatureMatrix:
    """N feature rows with provenance tags (train/test, natural/adversarial)."""

    rows: np.ndarray
    source: str = ""
    extractor: str = ""

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise DimensionError(f"feature matrix must be 2-D, got shape {rows.shape}")
        if not np.isfinite(rows).all():
            raise ValidationError("feature matrix contains non-finite entries")
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.rows.shape[0]


def _rows(feats) -> np.ndarray:
    if isinstance(feats, FeatureMatrix):
        return feats.rows
    rows = np.asarray(feats, dtype=np.float64)
    if rows.ndim != 2:
        raise DimensionError(f"feature matrix must be 2-D, got shape {rows.shape}")
    return rows


def _distance_rows(diff: np.ndarray, p) -> np.ndarray:
    # Reduce the trailing feature axis with the requested norm.
    if p == 1:
        return np.sum(np.abs(diff), axis=-1)
    if p == 2:
        return np.sqrt(np.sum(diff * diff, axis=-1))
    if p == np.inf or p == "inf":
        return np.max(np.abs(diff), axis=-1)
    raise ValidationError(f"norm order must be 1, 2, or inf, got {p!r}")


def knn_distance(test_feat, train_feats, k: int = 5, p=2) -> float:
    """Mean distance to the k nearest training rows, ascending order.

    Equal distances are resolved by training index, which cannot change
    the mean but keeps the selected neighbor set reproducible.
    """
    train = _rows(train_feats)
    vec = np.asarray(test_feat, dtype=np.float64).reshape(-1)
    if vec.shape[0] != train.shape[1]:
        raise DimensionError(
            f"test vector has {vec.shape[0]} features, training rows have {train.shape[1]}"
        )
    n = train.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    dists = _distance_rows(train - vec, p)
    order = np.argsort(dists, kind="stable")
    return float(np.mean(dists[order[:k]]))


def knn_distances(test_feats, train_feats, k: int = 5, p=2) -> np.ndarray:
    """knn_distance for every test row, computed in memory-bounded chunks."""
    train = _rows(train_feats)
    test = _rows(test_feats)
    if test.shape[1] != train.shape[1]:
        raise DimensionError("train and test feature dimensions differ")
    n = train.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    chunk = max(1, int(2**23 // max(1, n * train.shape[1])))
    out = np.empty(test.shape[0])
    for start in range(0, test.shape[0], chunk):
        block = test[start : start + chunk]
        dists = _distance_rows(block[:, None, :] - train[None, :, :], p)
        dists.sort(axis=1)
        out[start : start + block.shape[0]] = dists[:, :k].mean(axis=1)
    return out


def standardized_mean_distance(train_feats, test_feats, k: int = 5, p=2) -> float:
    """Average k-NN distance in standardized units, scaled by 1/sqrt(d).

    Features are shifted and scaled by the TRAINING mean and standard
    deviation; zero-variance training dimensions are dropped from both
    sets with a warning, and d is the count of surviving dimensions.
    """
    train = _rows(train_feats)
    test = _rows(test_feats)
    if train.shape[1] != test.shape[1]:
        raise DimensionError("train and test feature dimensions differ")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    keep = std > 0.0
    if not keep.any():
        raise ValidationError("every feature dimension has zero training variance")
    if not keep.all():
        warnings.warn(
            f"dropping {int((~keep).sum())} zero-variance feature dimensions", stacklevel=2
        )
        train, test = train[:, keep], test[:, keep]
        mean, std = mean[keep], std[keep]
    train_z = (train - mean) / std
    test_z = (test - mean) / std
    d = train_z.shape[1]
    return float(np.mean(knn_distances(test_z, train_z, k=k, p=p)) / np.sqrt(d))


def project_pca(feats, dims: int = 2) -> np.ndarray:
    """Center and project onto the leading eigenvectors of the covariance.

    Components are ordered by descending eigenvalue; each eigenvector is
    flipped so its largest-magnitude entry is positive, fixing the sign
    ambiguity.
    """
    x = _rows(feats)
    n, d = x.shape
    if not 1 <= dims <= d:
        raise DimensionError(f"dims must be in [1, {d}], got {dims}")
    centered = x - x.mean(axis=0)
    cov = (centered.T @ centered) / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals, kind="stable")[::-1][:dims]
    basis = eigvecs[:, order]
    anchor = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[anchor, np.arange(dims)])
    signs[signs == 0] = 1.0
    return centered @ (basis * signs)


def _conditional_probabilities(sq_dists: np.ndarray, perplexity: float, tol: float = 1e-6):
    """Per-point Gaussian conditionals calibrated to the target perplexity.

    Binary-searches each point's precision until the conditional
    distribution's entropy (in bits) hits log2(perplexity) within tol.
    Returns the row-conditional matrix and the achieved entropies.
    """
    n = sq_dists.shape[0]
    target = np.log2(perplexity)
    cond = np.zeros((n, n))
    entropies = np.zeros(n)
    for i in range(n):
        d = np.delete(sq_dists[i], i)
        beta_lo, beta_hi = 0.0, np.inf
        beta = 1.0
        for _ in range(200):
            w = np.exp(-d * beta)
            total = w.sum()
            if total <= 0.0:
                entropy = 0.0
                prob = np.zeros_like(w)
            else:
                prob = w / total
                nz = prob > 0.0
                entropy = float(-(prob[nz] * np.log2(prob[nz])).sum())
            if abs(entropy - target) <= tol:
                break
            if entropy > target:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == np.inf else 0.5 * (beta + beta_hi)
            else:
                beta_hi = beta
                beta = beta / 2.0 if beta_lo == 0.0 else 0.5 * (beta + beta_lo)
        row = np.insert(prob, i, 0.0)
        cond[i] = row
        entropies[i] = entropy
    return cond, entropies


def project_tsne(
    feats,
    dims: int = 2,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
    return_trace: bool = False,
):
    """Exact O(N^2) t-SNE embedding, deterministic under seed.

    Standard schedule: early exaggeration x12 for the first 250
    iterations, momentum 0.5 switching to 0.8 at iteration 250,
    per-coordinate adaptive gains. Pass train and test rows together;
    separate embeddings would not share a density space.
    """
    x = _rows(feats)
    n = x.shape[0]
    if n > 20000:
        raise ValidationError(f"exact embedding is quadratic in N; {n} rows exceed 20000")
    if n < 4:
        raise ValidationError("need at least 4 rows")
    if not 0 < perplexity < (n - 1) / 3:
        raise ValidationError(
            f"perplexity must be in (0, {(n - 1) / 3}) for {n} rows, got {perplexity}"
        )
    if dims < 1:
        raise ValidationError("dims must be at least 1")

    sq_norms = np.sum(x * x, axis=1)
    sq_dists = np.maximum(sq_norms[:, None] + sq_norms[None, :] - 2.0 * (x @ x.T), 0.0)
    cond, _ = _conditional_probabilities(sq_dists, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-2, size=(n, dims))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    exaggeration_until = 250
    trace: list[float] = []

    for it in range(iterations):
        p_eff = p * 12.0 if it < exaggeration_until else p
        ysq = np.sum(y * y, axis=1)
        num = 1.0 / (1.0 + np.maximum(ysq[:, None] + ysq[None, :] - 2.0 * (y @ y.T), 0.0))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (p_eff - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)

        momentum = 0.5 if it < 250 else 0.8
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)

        if return_trace:
            trace.append(float(np.sum(p * (np.log(p) - np.log(q)))))

    return (y, trace) if return_trace else y


@dataclass(frozen=True)
class DensityModel:
    """Gaussian-kernel KDE over 2-D points with per-dimension bandwidths."""

    points: np.ndarray
    bandwidths: np.ndarray

    def __post_init__(self):
        if (self.bandwidths <= 0).any():
            raise ValidationError("bandwidths must be positive")

    def density(self, where: np.ndarray) -> np.ndarray:
        """Density at each query row."""
        q = np.atleast_2d(np.asarray(where, dtype=np.float64))
        z = (q[:, None, :] - self.points[None, :, :]) / self.bandwidths
        kernels = np.exp(-0.5 * np.sum(z * z, axis=2))
        norm = self.points.shape[0] * 2.0 * np.pi * self.bandwidths.prod()
        return kernels.sum(axis=1) / norm

    def density_grid(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Density on the outer grid xs x ys, factorized per dimension.

        The product kernel splits into two one-dimensional kernel
        matrices whose product over the sample axis gives every grid
        cell in one matrix multiply.
        """
        zx = (xs[:, None] - self.points[None, :, 0]) / self.bandwidths[0]
        zy = (ys[:, None] - self.points[None, :, 1]) / self.bandwidths[1]
        kx = np.exp(-0.5 * zx * zx)
        ky = np.exp(-0.5 * zy * zy)
        norm = self.points.shape[0] * 2.0 * np.pi * self.bandwidths.prod()
        return (kx @ ky.T) / norm


def kde_fit(points) -> DensityModel:
    """Gaussian KDE with Scott's-rule bandwidth h_i = sigma_i * N^(-1/6)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError(f"expected (N, 2) points, got shape {pts.shape}")
    n = pts.shape[0]
    if n < 2:
        raise ValidationError(f"need at least 2 points, got {n}")
    sigma = pts.std(axis=0, ddof=1)
    bandwidths = sigma * n ** (-1.0 / 6.0)
    flat = bandwidths < 1e-6
    if flat.any():
        warnings.warn("zero-variance dimension in KDE input, flooring bandwidth", stacklevel=2)
        bandwidths = np.where(flat, 1e-6, bandwidths)
    return DensityModel(points=pts.copy(), bandwidths=bandwidths)


def kl_divergence(
    train_density: DensityModel,
    test_density: DensityModel,
    grid: int = 256,
    strict_box: bool = False,
) -> float:
    """Midpoint-rule integral of p_train * log(p_train / p_test).

    The domain is the bounding box of all points from both densities,
    pushed out by 3 max-bandwidths to catch kernel tails unless
    strict_box asks for the tight box. Densities are floored at 1e-12
    inside the log.
    """
    if grid < 2:
        raise ValidationError("grid must be at least 2")
    all_points = np.vstack([train_density.points, test_density.points])
    lo = all_points.min(axis=0)
    hi = all_points.max(axis=0)
    if not strict_box:
        pad = 3.0 * max(train_density.bandwidths.max(), test_density.bandwidths.max())
        lo, hi = lo - pad, hi + pad
    span = hi - lo
    xs = lo[0] + (np.arange(grid) + 0.5) * span[0] / grid
    ys = lo[1] + (np.arange(grid) + 0.5) * span[1] / grid
    p = train_density.density_grid(xs, ys)
    q = test_density.density_grid(xs, ys)
    integrand = p * (np.log(np.maximum(p, 1e-12)) - np.log(np.maximum(q, 1e-12)))
    cell = span[0] / grid * span[1] / grid
    return float(integrand.sum() * cell)


@dataclass
class PerClassKl:
    """K-L divergence per class plus the average over computable classes."""

    values: dict[int, float]
    errors: dict[int, str]
    average: float


def per_class_kl(
    train_feats,
    train_labels,
    test_feats,
    test_labels,
    projection: str = "pca",
    grid: int = 256,
    strict_box: bool = False,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
    classes: Optional[Sequence[int]] = None,
) -> PerClassKl:
    """Project each class's train+test features jointly, then KDE + K-L.

    A class absent (or too small to fit) in either split contributes an
    error entry instead of failing the whole run.
    """
    if projection not in ("pca", "tsne"):
        raise ValidationError(f"projection must be pca or tsne, got {projection!r}")
    train = _rows(train_feats)
    test = _rows(test_feats)
    y_train = np.asarray(train_labels)
    y_test = np.asarray(test_labels)
    if train.shape[0] != y_train.shape[0] or test.shape[0] != y_test.shape[0]:
        raise ValidationError("feature and label counts differ")

    if classes is None:
        classes = sorted(set(y_train.tolist()) | set(y_test.tolist()))
    values: dict[int, float] = {}
    errors: dict[int, str] = {}
    for cls in classes:
        a = train[y_train == cls]
        b = test[y_test == cls]
        if a.shape[0] < 2 or b.shape[0] < 2:
            errors[int(cls)] = (
                f"class {cls} has {a.shape[0]} train and {b.shape[0]} test rows; need 2 of each"
            )
            continue
        joint = np.vstack([a, b])
        if projection == "pca":
            projected = project_pca(joint, dims=min(2, joint.shape[1]))
            if projected.shape[1] == 1:
                projected = np.column_stack([projected, np.zeros(projected.shape[0])])
        else:
            projected = project_tsne(
                joint, dims=2, perplexity=perplexity, iterations=iterations, seed=seed
            )
        split = a.shape[0]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p_train = kde_fit(projected[:split])
            p_test = kde_fit(projected[split:])
        values[int(cls)] = kl_divergence(p_train, p_test, grid=grid, strict_box=strict_box)
    average = float(np.mean(list(values.values()))) if values else float("nan")
    return PerClassKl(values=values, errors=errors, average=average)
