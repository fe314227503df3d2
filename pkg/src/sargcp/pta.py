"""Point target analysis on single-look complex chips.

Sub-pixel peak localization works in two stages: ideal band-limited
interpolation of the complex chip by spectral zero padding, then a
six-parameter paraboloid least-squares fit on the 3x3 neighborhood of the
oversampled argmax. Signal-to-clutter ratio compares the refined peak power
against the mean power of an annulus well outside the main lobe, and the
phase noise follows as sigma_phi = 1/sqrt(2 SCR).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FlatPeakError, PeakOnBorderError, ValidationError
from .geometry import PixelCoord

DEFAULT_OVERSAMPLE = 32
DEFAULT_CHIP_SIZE = 32

# clutter annulus in original-pixel units, around the refined peak
_RING_INNER_PX = 8.0
_RING_OUTER_PX = 14.0
_CORE_HALF_PX = 2  # 5x5 main-lobe core is never clutter


@dataclass(frozen=True)
class SlcChip:
    """A square complex image patch cut around a candidate point target.

    first_line/first_sample give the full-image pixel of samples[0, 0] so
    refined peaks can be reported in absolute image coordinates.
    calibration is a linear power factor applied when converting to dB.
    """

    samples: np.ndarray
    first_line: int
    first_sample: int
    calibration: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.complex128)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValidationError("chip must be a square 2-D array")
        n = arr.shape[0]
        if n < 8 or n & (n - 1):
            raise ValidationError(f"chip side must be a power of two >= 8, got {n}")
        if not np.all(np.isfinite(arr.view(np.float64))):
            raise ValidationError("chip contains non-finite samples")
        if not (math.isfinite(self.calibration) and self.calibration > 0):
            raise ValidationError("calibration factor must be positive and finite")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def size(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class PtaResult:
    """Refined peak location and radiometric quality of one chip."""

    peak: PixelCoord
    peak_power_db: float
    clutter_power_db: float
    scr: float
    sigma_phi: float

    def __post_init__(self):
        if math.isinf(self.scr):
            if self.sigma_phi != 0.0 or not math.isinf(self.clutter_power_db):
                raise ValidationError("infinite SCR requires sigma_phi 0")
            return
        if self.scr < 0:
            raise ValidationError("scr must be >= 0")
        want_scr = 10.0 ** ((self.peak_power_db - self.clutter_power_db) / 10.0)
        if abs(self.scr - want_scr) > 1e-9 * max(1.0, want_scr):
            raise ValidationError("scr inconsistent with the power difference")
        want_phi = 1.0 / math.sqrt(2.0 * self.scr) if self.scr > 0 else math.inf
        if abs(self.sigma_phi - want_phi) > 1e-9 * max(1.0, want_phi):
            raise ValidationError("sigma_phi inconsistent with scr")


def oversample_complex(samples: np.ndarray, factor: int) -> np.ndarray:
    """Ideal band-limited interpolation by spectral zero padding.

    Output index (p, q) is the interpolant at original coordinates
    (p / factor, q / factor); original samples are reproduced exactly.
    """
    if factor < 1 or factor & (factor - 1):
        raise ValidationError(f"oversampling factor must be a power of two, got {factor}")
    arr = np.asarray(samples, dtype=np.complex128)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValidationError("oversampling input must be a square 2-D array")
    n = arr.shape[0]
    if n & (n - 1):
        raise ValidationError(f"side must be a power of two, got {n}")
    if factor == 1:
        return arr.copy()
    half = n // 2
    spec = np.fft.fftshift(np.fft.fft2(arr))  # bins -n/2 .. n/2-1
    # split the Nyquist row/column between -n/2 and +n/2 so the interpolant
    # of a real-valued chip stays real
    work = np.zeros((n + 1, n + 1), dtype=np.complex128)
    work[:n, :n] = spec
    work[n, :n] = spec[0, :]
    work[:n, n] = spec[:, 0]
    work[n, n] = spec[0, 0]
    work[0, :] *= 0.5
    work[n, :] *= 0.5
    work[:, 0] *= 0.5
    work[:, n] *= 0.5
    m = n * factor
    big = np.zeros((m, m), dtype=np.complex128)
    lo = m // 2 - half
    big[lo:lo + n + 1, lo:lo + n + 1] = work
    return np.fft.ifft2(np.fft.ifftshift(big)) * factor * factor


def oversample_chip(chip: SlcChip, factor: int = DEFAULT_OVERSAMPLE) -> np.ndarray:
    """Magnitude of the band-limited interpolant of the chip."""
    return np.abs(oversample_complex(chip.samples, factor))


def refine_peak(grid: np.ndarray) -> tuple[float, float, float]:
    """Fit a paraboloid around the argmax of an oversampled magnitude grid.

    Returns (row, col, value) with row/col in fractional grid cells. The fit
    is the full bivariate quadratic, least squares over the 3x3 neighborhood.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValidationError("peak grid must be 2-D")
    r0, c0 = np.unravel_index(int(np.argmax(g)), g.shape)
    if r0 == 0 or c0 == 0 or r0 == g.shape[0] - 1 or c0 == g.shape[1] - 1:
        raise PeakOnBorderError(f"grid maximum sits on the border at ({r0}, {c0})")
    patch = g[r0 - 1:r0 + 2, c0 - 1:c0 + 2].ravel()
    d = np.array([-1.0, 0.0, 1.0])
    rr = np.repeat(d, 3)
    cc = np.tile(d, 3)
    design = np.column_stack(
        [np.ones(9), rr, cc, rr * rr, rr * cc, cc * cc])
    coef, *_ = np.linalg.lstsq(design, patch, rcond=None)
    a, b, c, qrr, qrc, qcc = coef
    hess = np.array([[2.0 * qrr, qrc], [qrc, 2.0 * qcc]])
    det = hess[0, 0] * hess[1, 1] - hess[0, 1] * hess[1, 0]
    if not (hess[0, 0] < 0.0 and det > 0.0):
        raise FlatPeakError("peak neighborhood has no strict maximum")
    vr, vc = np.linalg.solve(hess, [-b, -c])
    if max(abs(vr), abs(vc)) > 1.0:
        raise FlatPeakError("fitted vertex falls outside the peak neighborhood")
    value = a + b * vr + c * vc + qrr * vr * vr + qrc * vr * vc + qcc * vc * vc
    return float(r0 + vr), float(c0 + vc), float(value)


def estimate_scr(chip: SlcChip, peak_row: float, peak_col: float,
                 peak_magnitude: float) -> tuple[float, float, float, float]:
    """Peak/clutter powers in dB plus SCR and the implied phase noise.

    peak_row/peak_col are chip-relative original-pixel coordinates; clutter
    is the mean power over the 8..14 px annulus around them.
    """
    n = chip.size
    rows, cols = np.mgrid[0:n, 0:n]
    dist = np.hypot(rows - peak_row, cols - peak_col)
    core = (np.abs(rows - round(peak_row)) <= _CORE_HALF_PX) & \
           (np.abs(cols - round(peak_col)) <= _CORE_HALF_PX)
    ring = (dist >= _RING_INNER_PX) & (dist <= _RING_OUTER_PX) & ~core
    if not ring.any():
        raise ValidationError("clutter annulus does not intersect the chip")
    peak_power = peak_magnitude * peak_magnitude * chip.calibration
    if peak_power <= 0.0:
        raise ValidationError("peak power must be positive")
    clutter_power = float(np.mean(np.abs(chip.samples[ring]) ** 2)) * chip.calibration
    p_peak_db = 10.0 * math.log10(peak_power)
    if clutter_power == 0.0:
        return p_peak_db, -math.inf, math.inf, 0.0
    p_clutter_db = 10.0 * math.log10(clutter_power)
    scr = 10.0 ** ((p_peak_db - p_clutter_db) / 10.0)
    sigma_phi = 1.0 / math.sqrt(2.0 * scr)
    return p_peak_db, p_clutter_db, scr, sigma_phi


def analyze_chip(chip: SlcChip, factor: int = DEFAULT_OVERSAMPLE) -> PtaResult:
    """Full chip analysis: oversample, refine the peak, rate the target."""
    grid = oversample_chip(chip, factor)
    row_os, col_os, magnitude = refine_peak(grid)
    row_px = row_os / factor
    col_px = col_os / factor
    p_peak_db, p_clutter_db, scr, sigma_phi = estimate_scr(
        chip, row_px, col_px, magnitude)
    peak = PixelCoord(chip.first_line + row_px, chip.first_sample + col_px)
    return PtaResult(peak, p_peak_db, p_clutter_db, scr, sigma_phi)
