"""Skewness-adjusted outlier screening for phase-noise time series.

Phase noise per acquisition is bounded below by zero, so its distribution is
right-skewed and plain Tukey fences over-flag the upper tail. The adjusted
boxplot stretches the fences by exp(3 MC) upward and exp(-4 MC) downward,
where MC is the medcouple, a robust skewness measure in [-1, 1]. Screening
runs the boxplot first and then drops whatever remains above the 0.5 rad
visibility limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

FLAG_KEPT = "kept"
FLAG_BOXPLOT = "boxplot_outlier"
FLAG_INVISIBLE = "invisible"
_FLAGS = (FLAG_KEPT, FLAG_BOXPLOT, FLAG_INVISIBLE)

VISIBILITY_LIMIT_RAD = 0.5
QUARTILE_CONVENTION = "linear"  # interpolation= of numpy.quantile
_MIN_BOXPLOT_SIZE = 4


def medcouple(sample) -> float:
    """Robust skewness: median of h over distinct pairs x_i <= m <= x_j.

    h = ((x_j - m) - (m - x_i)) / (x_j - x_i) for x_i < x_j; pairs of distinct
    observations both equal to the median use the signum kernel on their rank
    within the tied block. Quadratic cost, which is fine at the few-hundred
    series lengths screened here.
    """
    y = np.sort(np.asarray(sample, dtype=np.float64))
    if y.ndim != 1 or y.size < 3:
        raise ValidationError("medcouple needs a flat sample of >= 3 values")
    if not np.all(np.isfinite(y)):
        raise ValidationError("medcouple sample contains non-finite values")
    if y[0] == y[-1]:
        return 0.0  # degenerate: all values identical
    n = y.size
    m = float(y[n // 2]) if n % 2 else float((y[n // 2 - 1] + y[n // 2]) / 2.0)
    below = y[y < m]
    above = y[y > m]
    ties = int(np.sum(y == m))
    parts = []
    if below.size and above.size:
        with np.errstate(invalid="ignore", divide="ignore"):
            grid = ((above[:, None] - m) - (m - below[None, :])) \
                / (above[:, None] - below[None, :])
        parts.append(grid.ravel())
    if ties:
        # every (below, m) pair gives -1, every (m, above) pair gives +1
        parts.append(np.full(ties * below.size, -1.0))
        parts.append(np.full(ties * above.size, 1.0))
        if ties > 1:
            a, b = np.triu_indices(ties, k=1)
            parts.append(np.sign(a + b - (ties - 1)).astype(np.float64))
    return float(np.median(np.concatenate(parts)))


@dataclass(frozen=True)
class BoxplotBounds:
    """Adjusted fences plus the skewness and convention they came from."""

    lower: float
    upper: float
    mc: float
    degenerate: bool
    quartile_convention: str = QUARTILE_CONVENTION

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def adjusted_fences(q1: float, q3: float, mc: float) -> tuple[float, float]:
    """Fence arithmetic: [Q1 - 1.5 e^(-4MC) IQR, Q3 + 1.5 e^(3MC) IQR].

    With MC = 0 this is exactly the Tukey rule.
    """
    iqr = q3 - q1
    return (q1 - 1.5 * math.exp(-4.0 * mc) * iqr,
            q3 + 1.5 * math.exp(3.0 * mc) * iqr)


def adjusted_boxplot_bounds(sample) -> BoxplotBounds:
    """Skewness-adjusted fences of a sample, quartiles by linear interpolation.

    Zero IQR collapses the interval to [Q1, Q3] and marks the result
    degenerate.
    """
    y = np.asarray(sample, dtype=np.float64)
    if y.ndim != 1 or y.size < _MIN_BOXPLOT_SIZE:
        raise ValidationError(
            f"adjusted boxplot needs >= {_MIN_BOXPLOT_SIZE} values")
    q1, q3 = np.quantile(y, [0.25, 0.75])
    iqr = q3 - q1
    if iqr == 0.0:
        return BoxplotBounds(float(q1), float(q3), 0.0, True)
    mc = medcouple(y)
    lower, upper = adjusted_fences(float(q1), float(q3), mc)
    return BoxplotBounds(lower, upper, mc, False)


@dataclass(frozen=True)
class NoiseSeries:
    """Per-acquisition phase-noise values with a screening flag each.

    short marks a series that had too few values for the boxplot stage.
    """

    acquisition_ids: tuple[str, ...]
    values: tuple[float, ...]
    flags: tuple[str, ...] = field(default=())
    short: bool = False

    def __post_init__(self):
        ids = tuple(str(a) for a in self.acquisition_ids)
        values = tuple(float(v) for v in self.values)
        flags = tuple(self.flags) if self.flags else (FLAG_KEPT,) * len(values)
        if len(ids) != len(values) or len(flags) != len(values):
            raise ValidationError("ids, values, and flags must align")
        if len(set(ids)) != len(ids):
            raise ValidationError("acquisition ids must be unique")
        for v in values:
            if not (math.isfinite(v) and v >= 0.0):
                raise ValidationError(f"phase noise must be finite and >= 0, got {v}")
        for f in flags:
            if f not in _FLAGS:
                raise ValidationError(f"unknown flag {f!r}")
        object.__setattr__(self, "acquisition_ids", ids)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "flags", flags)

    def __len__(self) -> int:
        return len(self.values)

    def kept_ids(self) -> tuple[str, ...]:
        return tuple(a for a, f in zip(self.acquisition_ids, self.flags)
                     if f == FLAG_KEPT)

    def kept_values(self) -> tuple[float, ...]:
        return tuple(v for v, f in zip(self.values, self.flags)
                     if f == FLAG_KEPT)

    def n_kept(self) -> int:
        return sum(1 for f in self.flags if f == FLAG_KEPT)


def screen_series(series: NoiseSeries,
                  visibility_limit: float = VISIBILITY_LIMIT_RAD) -> NoiseSeries:
    """Flag boxplot outliers, then values above the visibility limit.

    Pure function of the values, so screening twice changes nothing. Series
    shorter than the boxplot minimum get only the visibility cut and come
    back marked short.
    """
    values = series.values
    short = len(values) < _MIN_BOXPLOT_SIZE
    if short:
        flags = [FLAG_KEPT] * len(values)
    else:
        bounds = adjusted_boxplot_bounds(values)
        flags = [FLAG_KEPT if bounds.contains(v) else FLAG_BOXPLOT
                 for v in values]
    flags = [FLAG_INVISIBLE if f == FLAG_KEPT and v > visibility_limit else f
             for v, f in zip(values, flags)]
    return NoiseSeries(series.acquisition_ids, values, tuple(flags), short)
