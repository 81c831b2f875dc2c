"""Experiment pipelines: distance-binned success, the transform grid,
and paired distance histograms.

These tie the trained model, the feature extractor, the attacks, and
the distance machinery together into the three report shapes the
project revolves around: success rate as a function of distance to the
training set, success rate across the scale-and-shift parameter grid,
and before/after distance histograms for a single transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attacks import CwOptions, _example_rng, _predict, attack_success, attack_suite
from .data import Dataset
from .errors import EmptyReportError, ValidationError
from .geometry import knn_distances
from .nn import Model, extract_features_batched
from .training import _frozen, _pgd, evaluate_accuracy
from .transform import TransformParams, param_grid, scale_shift, strict_threshold

__all__ = [
    "BinnedReport",
    "GridRow",
    "GridReport",
    "PairedHistograms",
    "bin_success_by_distance",
    "distance_binned_success",
    "blindspot_grid",
    "distance_shift_histograms",
    "pgd_attack_success_rate",
]


@dataclass
class BinnedReport:
    """Attack success rate per distance bin.

    Rates are defined (mask True) only for bins holding at least
    min_bin_count points; counts always partition the evaluated points.
    The per-point arrays are kept so downstream consumers can re-bin or
    correlate without re-attacking.
    """

    edges: np.ndarray
    counts: np.ndarray
    success_rates: np.ndarray
    mask: np.ndarray
    distances: np.ndarray
    successes: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def evaluated(self) -> int:
        return int(self.counts.sum())


def bin_success_by_distance(
    distances, successes, bins: int = 20, min_bin_count: int = 10, metadata: Optional[dict] = None
) -> BinnedReport:
    """Equal-width binning of per-point outcomes over [min, max] distance.

    The last bin is closed so the maximum-distance point is counted.
    """
    d = np.asarray(distances, dtype=np.float64)
    s = np.asarray(successes, dtype=bool)
    if d.shape != s.shape or d.ndim != 1:
        raise ValidationError("distances and successes must be matching 1-D arrays")
    if d.size == 0:
        raise EmptyReportError("no points to bin")
    if bins < 1:
        raise ValidationError("bins must be at least 1")
    lo, hi = float(d.min()), float(d.max())
    span = hi - lo
    if span == 0.0:
        edges = np.linspace(lo, lo + 1.0, bins + 1)
        idx = np.zeros(d.size, dtype=np.int64)
    else:
        edges = np.linspace(lo, hi, bins + 1)
        idx = np.minimum(((d - lo) / span * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    wins = np.bincount(idx, weights=s.astype(np.float64), minlength=bins)
    mask = counts >= min_bin_count
    rates = np.full(bins, np.nan)
    rates[mask] = wins[mask] / counts[mask]
    meta = dict(metadata or {})
    meta.setdefault("bins", bins)
    meta.setdefault("min_bin_count", min_bin_count)
    return BinnedReport(
        edges=edges, counts=counts, success_rates=rates, mask=mask,
        distances=d, successes=s, metadata=meta,
    )


def distance_binned_success(
    model: Model,
    extractor_model: Model,
    train_set: Dataset,
    test_subset: Dataset,
    k: int = 5,
    p=2,
    bins: int = 20,
    epsilon: float = 0.3,
    min_bin_count: int = 10,
    method: str = "cw",
    opts: Optional[CwOptions] = None,
    threads: int = 1,
    tap: str = "fc1",
) -> BinnedReport:
    """Attack the subset, then bin success by distance to the train set.

    The extractor model supplies the feature space for distances and
    may differ from the attacked model. Distances cover exactly the
    attacked (correctly classified) points.
    """
    suite = attack_suite(model, test_subset, [epsilon], opts=opts, method=method, threads=threads)
    if suite.attacked == 0:
        raise EmptyReportError("no correctly classified points to attack")
    train_feats = extract_features_batched(extractor_model, train_set.images, tap)
    test_feats = extract_features_batched(
        extractor_model, test_subset.images[suite.indices], tap
    )
    distances = knn_distances(test_feats, train_feats, k=k, p=p)
    successes = np.array([attack_success(r, epsilon) for r in suite.results])
    return bin_success_by_distance(
        distances, successes, bins=bins, min_bin_count=min_bin_count,
        metadata={
            "k": k, "p": str(p), "epsilon": epsilon, "method": method, "tap": tap,
            "attacked": suite.attacked,
        },
    )


@dataclass
class GridRow:
    params: TransformParams
    accuracy: float
    rate_at_epsilon: float
    rate_at_strict: float
    strict: float
    attacked: int
    error: str = ""


@dataclass
class GridReport:
    rows: list[GridRow]
    epsilon: float
    dataset_tag: str
    metadata: dict = field(default_factory=dict)


def blindspot_grid(
    model: Model,
    test_subset: Dataset,
    dataset_tag: str,
    epsilon: float,
    params: Optional[Sequence[TransformParams]] = None,
    method: str = "cw",
    opts: Optional[CwOptions] = None,
    threads: int = 1,
) -> GridReport:
    """Transform, re-evaluate, and re-attack for every parameter pair.

    Success is reported both at the plain threshold epsilon and at the
    stricter alpha*epsilon. A failing row records its error and the
    remaining rows still run.
    """
    pairs = list(params) if params is not None else param_grid(dataset_tag)
    rows: list[GridRow] = []
    for prm in pairs:
        strict = strict_threshold(prm, epsilon)
        try:
            transformed = Dataset(
                images=scale_shift(test_subset.images, prm),
                labels=test_subset.labels,
                split=test_subset.split,
            )
            accuracy = evaluate_accuracy(model, transformed)
            suite = attack_suite(
                model, transformed, [epsilon, strict], opts=opts, method=method, threads=threads
            )
            rows.append(
                GridRow(
                    params=prm,
                    accuracy=accuracy,
                    rate_at_epsilon=suite.success_rates[epsilon],
                    rate_at_strict=suite.success_rates[strict],
                    strict=strict,
                    attacked=suite.attacked,
                )
            )
        except Exception as exc:
            rows.append(
                GridRow(
                    params=prm, accuracy=float("nan"), rate_at_epsilon=float("nan"),
                    rate_at_strict=float("nan"), strict=strict, attacked=0, error=str(exc),
                )
            )
    return GridReport(
        rows=rows, epsilon=epsilon, dataset_tag=dataset_tag,
        metadata={"method": method, "subset_size": len(test_subset)},
    )


@dataclass
class PairedHistograms:
    """Distance histograms for a test set before and after a transform."""

    edges: np.ndarray
    original_counts: np.ndarray
    transformed_counts: np.ndarray
    overlap: float
    params: TransformParams
    metadata: dict = field(default_factory=dict)


def distance_shift_histograms(
    extractor: Model,
    train_set: Dataset,
    test_subset: Dataset,
    params: TransformParams,
    k: int = 5,
    p=2,
    bins: int = 20,
    tap: str = "fc1",
) -> PairedHistograms:
    """Distance-to-train histograms for original vs transformed images.

    Shared bin edges across both sets; the overlap coefficient is the
    summed minimum of the two normalized histograms (1 = identical).
    """
    train_feats = extract_features_batched(extractor, train_set.images, tap)
    orig_feats = extract_features_batched(extractor, test_subset.images, tap)
    trans_feats = extract_features_batched(
        extractor, scale_shift(test_subset.images, params), tap
    )
    d_orig = knn_distances(orig_feats, train_feats, k=k, p=p)
    d_trans = knn_distances(trans_feats, train_feats, k=k, p=p)
    lo = min(d_orig.min(), d_trans.min())
    hi = max(d_orig.max(), d_trans.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    original_counts, _ = np.histogram(d_orig, bins=edges)
    transformed_counts, _ = np.histogram(d_trans, bins=edges)
    overlap = float(
        np.minimum(
            original_counts / original_counts.sum(),
            transformed_counts / transformed_counts.sum(),
        ).sum()
    )
    return PairedHistograms(
        edges=edges, original_counts=original_counts, transformed_counts=transformed_counts,
        overlap=overlap, params=params,
        metadata={"k": k, "p": str(p), "bins": bins, "tap": tap},
    )


def pgd_attack_success_rate(
    model: Model,
    dataset: Dataset,
    epsilon: float,
    steps: int = 40,
    step_size: float = 0.01,
    seed: int = 0,
    batch_size: int = 256,
) -> float:
    """Fraction of correctly classified points that fixed-budget PGD flips.

    Random starts are derived per example from content hashes, so the
    rate does not depend on batch size or example order.
    """
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    with _frozen(model):
        preds = np.concatenate([
            _predict(model, dataset.images[i : i + batch_size])
            for i in range(0, len(dataset), batch_size)
        ])
        correct = np.flatnonzero(preds == dataset.labels)
        if correct.size == 0:
            raise EmptyReportError("no correctly classified points to attack")
        flipped = 0
        for start in range(0, correct.size, batch_size):
            idx = correct[start : start + batch_size]
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            x_start = np.empty_like(xb)
            for j, i in enumerate(idx):
                rng = _example_rng(dataset.images[i], dataset.labels[i], "pgd-rate", seed)
                x_start[j] = xb[j] + rng.uniform(-1.0, 1.0, size=xb[j].shape) * epsilon
            adv = _pgd(model, xb, yb, epsilon, step_size, steps, x_start=x_start)
            flipped += int((_predict(model, adv) != yb).sum())
    return flipped / correct.size
