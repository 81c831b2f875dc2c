"""Scale-and-shift transform x' = alpha*x + beta and its validity rule.

The constraint alpha/2 + |beta| <= 0.5 guarantees the output stays in
the valid pixel range for every input pixel, so the transform never
needs to clip. All parameter pairs in the published grids satisfy the
constraint exactly in floating point, including the boundary-tight
pairs where alpha*0.5 + |beta| equals 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = ["TransformParams", "scale_shift", "param_grid", "strict_threshold"]

_GRIDS = {
    "mnist": (
        (1.0, 0.0),
        (0.9, 0.0),
        (0.9, 0.05),
        (0.8, 0.0),
        (0.8, 0.1),
        (0.7, 0.0),
        (0.7, 0.15),
    ),
    "fashion": (
        (1.0, 0.0),
        (0.95, 0.0),
        (0.95, 0.025),
        (0.9, 0.0),
        (0.9, 0.05),
    ),
}


@dataclass(frozen=True)
class TransformParams:
    alpha: float
    beta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.alpha * 0.5 + abs(self.beta) > 0.5:
            raise ValidationError(
                f"alpha={self.alpha}, beta={self.beta} can push pixels out of range; "
                f"max |beta| for this alpha is {0.5 - self.alpha * 0.5:.6g}"
            )


def scale_shift(x, params: TransformParams) -> np.ndarray:
    """Apply x' = alpha*x + beta; the output needs no clipping."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and (arr.min() < -0.5 or arr.max() > 0.5):
        raise ValidationError("input pixels must lie in [-0.5, 0.5]")
    return params.alpha * arr + params.beta


def param_grid(dataset_tag: str) -> list[TransformParams]:
    """Published (alpha, beta) sweep for a dataset family."""
    try:
        pairs = _GRIDS[dataset_tag]
    except KeyError:
        raise ValidationError(
            f"unknown dataset tag {dataset_tag!r}, have {sorted(_GRIDS)}"
        ) from None
    return [TransformParams(alpha=a, beta=b) for a, b in pairs]


def strict_threshold(params: TransformParams, epsilon: float) -> float:
    """Success threshold scaled with the transform: alpha * epsilon."""
    return params.alpha * epsilon
