"""Intensity standardization: z-score, White Stripe, Nyul and IAMLAB mode scaling.

Every method estimates its parameters from the in-mask (brain) voxels and
applies the resulting map to the whole volume, so background keeps its
relation to the tissue intensities.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from flairnorm import preprocess
from flairnorm.errors import (
    DegenerateHistogramError,
    EmptyTrainingSetError,
    MissingParamsError,
    ModeNotFoundError,
    NonMonotoneLandmarksError,
    NonPositiveModeError,
    ZeroSpreadError,
    ZeroVarianceError,
)
from flairnorm.volume import (
    DEFAULT_BINS,
    Histogram,
    Mask,
    Volume,
    compute_histogram,
    masked_stats,
    masked_values,
)

logger = logging.getLogger(__name__)

DEFAULT_LANDMARKS = (1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0)
DEFAULT_STANDARD_RANGE = (0.0, 100.0)
DEFAULT_REFERENCE_MODE = 0.75
DEFAULT_TAU = 0.05
DEFAULT_SMOOTH_BINS = 31
# fraction of the histogram range at the low end ignored by the mode search
BACKGROUND_GUARD = 0.02


class Method(str, enum.Enum):
    ORIGINAL = "original"
    ZSCORE = "zscore"
    WHITESTRIPE = "whitestripe"
    NYUL = "nyul"
    IAMLAB = "iamlab"


# --- mode detection -------------------------------------------------------


class ModeEstimate(NamedTuple):
    mode_intensity: float
    peak_bin: int
    smoothing_width: int


def find_histogram_mode(hist: Histogram, smooth_bins: int = DEFAULT_SMOOTH_BINS) -> ModeEstimate:
    """Locate the dominant histogram peak after moving-average smoothing.

    Bins in the bottom 2% of the intensity range are ignored. When several
    bins share the maximum, the highest-intensity run of tied bins wins and
    the centre of that run is reported, so a lone spike smoothed into a
    plateau still maps back to its own bin.
    """
    if smooth_bins < 1 or smooth_bins % 2 == 0:
        raise ValueError(f"smooth_bins must be odd and >= 1, got {smooth_bins}")
    counts = hist.counts
    # window sums rather than means: exact for integer counts
    smoothed = np.convolve(counts, np.ones(smooth_bins), mode="same")
    lo, hi = hist.edges[0], hist.edges[-1]
    eligible = hist.centers >= lo + BACKGROUND_GUARD * (hi - lo)
    if not eligible.any():
        raise DegenerateHistogramError("no bins above the background guard")
    smoothed = np.where(eligible, smoothed, -np.inf)
    peak = smoothed.max()
    if not peak > 0:
        raise DegenerateHistogramError("histogram is empty above the background guard")
    tied = np.flatnonzero(np.isclose(smoothed, peak, rtol=1e-12, atol=0.0))
    i = tied.size - 1
    while i > 0 and tied[i - 1] == tied[i] - 1:
        i -= 1
    k = (int(tied[i]) + int(tied[-1]) + 1) // 2
    mode = float(hist.centers[k])
    return ModeEstimate(mode, int(k), smooth_bins)


def volume_mode(
    volume: Volume, mask: Mask, bins: int = DEFAULT_BINS, smooth_bins: int = DEFAULT_SMOOTH_BINS
) -> ModeEstimate:
    """Mode of the whole-volume in-mask histogram (never computed per slice)."""
    try:
        hist = compute_histogram(volume, mask, bins=bins)
    except ValueError as exc:
        raise ModeNotFoundError(f"cannot build a histogram for mode detection: {exc}") from exc
    return find_histogram_mode(hist, smooth_bins)


# --- z-score and White Stripe --------------------------------------------


def _affine_standardize(volume: Volume, mean: float, std: float, method: str) -> Volume:
    if not std > 0:
        raise ZeroVarianceError(f"{method}: zero variance in the reference voxels")
    return volume.with_data((volume.data - mean) / std, f"standardized:{method}")


def zscore_normalize(volume: Volume, mask: Mask) -> Volume:
    stats = masked_stats(volume, mask)
    return _affine_standardize(volume, stats.mean, stats.std, "zscore")


def white_stripe(
    volume: Volume,
    mask: Mask,
    tau: float = DEFAULT_TAU,
    bins: int = DEFAULT_BINS,
    smooth_bins: int = DEFAULT_SMOOTH_BINS,
) -> np.ndarray:
    """Boolean array marking the stripe voxels around the dominant tissue mode.

    A voxel belongs to the stripe when its in-mask quantile lies in
    ``[F(mode) - tau, F(mode) + tau]``. Quantiles use the mid-distribution
    CDF, ``(#below + #at-or-below) / 2n``, so tied intensities share one
    quantile. Near either end the window slides inward so it always spans
    ``2 * tau`` of the quantile axis.
    """
    if not 0 < tau < 0.5:
        raise ValueError(f"tau must be in (0, 0.5), got {tau}")
    mode = volume_mode(volume, mask, bins, smooth_bins).mode_intensity
    ordered = np.sort(masked_values(volume, mask))

    def mid_cdf(x):
        below = np.searchsorted(ordered, x, side="left")
        at_or_below = np.searchsorted(ordered, x, side="right")
        return (below + at_or_below) / (2.0 * ordered.size)

    f_mode = float(mid_cdf(mode))
    q_lo = min(max(f_mode - tau, 0.0), 1.0 - 2.0 * tau)
    q_hi = q_lo + 2.0 * tau
    stripe = np.zeros(volume.dims, dtype=bool)
    u = mid_cdf(volume.data[mask.data])
    stripe[mask.data] = (u >= q_lo) & (u <= q_hi)
    return stripe


def whitestripe_normalize(
    volume: Volume,
    mask: Mask,
    tau: float = DEFAULT_TAU,
    bins: int = DEFAULT_BINS,
    smooth_bins: int = DEFAULT_SMOOTH_BINS,
) -> Volume:
    stripe = volume.data[white_stripe(volume, mask, tau, bins, smooth_bins)]
    if stripe.size < 2:
        raise ZeroVarianceError("white stripe holds fewer than 2 voxels")
    mean = float(stripe.mean())
    std = float(np.sqrt(np.mean((stripe - mean) ** 2)))
    return _affine_standardize(volume, mean, std, "whitestripe")


# --- Nyul -----------------------------------------------------------------


@dataclass(frozen=True)
class StandardScale:
    """Trained landmark set: percentile positions and their standard-scale targets."""

    landmark_percentiles: tuple[float, ...]
    standard_positions: tuple[float, ...]
    range: tuple[float, float] = DEFAULT_STANDARD_RANGE

    def __post_init__(self):
        pcts = tuple(float(p) for p in self.landmark_percentiles)
        pos = tuple(float(p) for p in self.standard_positions)
        s1, s2 = (float(r) for r in self.range)
        object.__setattr__(self, "landmark_percentiles", pcts)
        object.__setattr__(self, "standard_positions", pos)
        object.__setattr__(self, "range", (s1, s2))
        _check_percentiles(pcts)
        if len(pos) != len(pcts):
            raise ValueError("standard_positions and landmark_percentiles differ in length")
        if not all(b > a for a, b in zip(pos, pos[1:])):
            raise NonMonotoneLandmarksError(f"standard positions not strictly increasing: {pos}")
        if not s1 < s2:
            raise ValueError(f"invalid standard range {self.range}")
        tol = 1e-9 * (s2 - s1)
        if pos[0] < s1 - tol or pos[-1] > s2 + tol:
            raise ValueError("standard positions fall outside the standard range")

    def to_dict(self) -> dict:
        return {
            "landmark_percentiles": list(self.landmark_percentiles),
            "standard_positions": list(self.standard_positions),
            "range": list(self.range),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "StandardScale":
        return cls(
            landmark_percentiles=d["landmark_percentiles"],
            standard_positions=d["standard_positions"],
            range=tuple(d["range"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "StandardScale":
        return cls.from_dict(json.loads(text))


def _check_percentiles(pcts: Sequence[float]) -> None:
    if len(pcts) < 2:
        raise ValueError("need at least two landmarks")
    if not all(b > a for a, b in zip(pcts, pcts[1:])):
        raise ValueError(f"landmark percentiles must be strictly increasing: {pcts}")
    if pcts[0] < 0 or pcts[-1] > 100:
        raise ValueError("landmark percentiles must lie in [0, 100]")


def volume_landmarks(volume: Volume, mask: Mask, percentiles: Sequence[float]) -> np.ndarray:
    values = masked_values(volume, mask)
    if values.size == 0:
        raise ZeroSpreadError("mask is empty")
    landmarks = np.percentile(values, percentiles)
    if not landmarks[-1] > landmarks[0]:
        raise ZeroSpreadError("in-mask intensities have no spread between the outer landmarks")
    return landmarks


def nyul_train(
    training: Sequence[tuple[Volume, Mask]],
    landmark_percentiles: Sequence[float] = DEFAULT_LANDMARKS,
    standard_range: tuple[float, float] = DEFAULT_STANDARD_RANGE,
) -> StandardScale:
    """Average each volume's landmarks after mapping its outer landmarks onto the standard range."""
    if len(training) == 0:
        raise EmptyTrainingSetError("nyul_train needs at least one volume")
    pcts = tuple(float(p) for p in landmark_percentiles)
    _check_percentiles(pcts)
    s1, s2 = (float(r) for r in standard_range)
    mapped = []
    for volume, mask in training:
        q = volume_landmarks(volume, mask, pcts)
        mapped.append(s1 + (q - q[0]) / (q[-1] - q[0]) * (s2 - s1))
    # fsum: exact sum, so the result does not depend on training order
    positions = tuple(math.fsum(col) / len(mapped) for col in zip(*mapped))
    if not all(b > a for a, b in zip(positions, positions[1:])):
        raise NonMonotoneLandmarksError(f"averaged landmarks are not increasing: {positions}")
    return StandardScale(pcts, positions, (s1, s2))


def _piecewise_linear(x: np.ndarray, xp: np.ndarray, fp: np.ndarray) -> np.ndarray:
    keep = np.concatenate([[True], np.diff(xp) > 0])
    xp, fp = xp[keep], fp[keep]
    out = np.interp(x, xp, fp)
    lo_slope = (fp[1] - fp[0]) / (xp[1] - xp[0])
    hi_slope = (fp[-1] - fp[-2]) / (xp[-1] - xp[-2])
    below, above = x < xp[0], x > xp[-1]
    out[below] = fp[0] + (x[below] - xp[0]) * lo_slope
    out[above] = fp[-1] + (x[above] - xp[-1]) * hi_slope
    return out


def nyul_apply(volume: Volume, mask: Mask, scale: StandardScale) -> Volume:
    """Piecewise-linear map from the volume's own landmarks onto the trained scale."""
    q = volume_landmarks(volume, mask, scale.landmark_percentiles)
    out = _piecewise_linear(volume.data.ravel(), q, np.asarray(scale.standard_positions))
    return volume.with_data(out.reshape(volume.dims), "standardized:nyul")


# --- IAMLAB ---------------------------------------------------------------


def iamlab_normalize(
    volume: Volume,
    mask: Mask,
    reference_mode: float = DEFAULT_REFERENCE_MODE,
    bins: int = DEFAULT_BINS,
    smooth_bins: int = DEFAULT_SMOOTH_BINS,
) -> Volume:
    """Scale intensities so the in-mask histogram mode lands on ``reference_mode``."""
    if not reference_mode > 0:
        raise NonPositiveModeError(f"reference mode must be positive, got {reference_mode}")
    mode = volume_mode(volume, mask, bins, smooth_bins).mode_intensity
    if not mode > 0:
        raise NonPositiveModeError(f"detected mode {mode} is not positive")
    factor = reference_mode / mode
    logger.debug("iamlab: mode %.6g -> %.6g (factor %.6g)", mode, reference_mode, factor)
    return volume.with_data(volume.data * factor, "standardized:iamlab")


# --- pipeline -------------------------------------------------------------


@dataclass
class PipelineParams:
    reference_mode: float = DEFAULT_REFERENCE_MODE
    tau: float = DEFAULT_TAU
    sigma_mm: float = preprocess.DEFAULT_SIGMA_MM
    bins: int = DEFAULT_BINS
    smooth_bins: int = DEFAULT_SMOOTH_BINS
    scale: StandardScale | None = field(default=None)

    def to_dict(self) -> dict:
        d = {
            "reference_mode": self.reference_mode,
            "tau": self.tau,
            "sigma_mm": self.sigma_mm,
            "bins": self.bins,
            "smooth_bins": self.smooth_bins,
        }
        d["scale"] = None if self.scale is None else self.scale.to_dict()
        return d


def run_pipeline(
    volume: Volume, mask: Mask, method: Method | str, params: PipelineParams | None = None
) -> Volume:
    """Produce one of the five input variants: original or one of four standardizations.

    Only IAMLAB runs the median and bias-correction stages before scaling.
    """
    method = Method(method)
    params = params or PipelineParams()
    if method is Method.ORIGINAL:
        return volume
    if method is Method.ZSCORE:
        return zscore_normalize(volume, mask)
    if method is Method.WHITESTRIPE:
        return whitestripe_normalize(volume, mask, params.tau, params.bins, params.smooth_bins)
    if method is Method.NYUL:
        if params.scale is None:
            raise MissingParamsError("nyul needs a trained StandardScale")
        return nyul_apply(volume, mask, params.scale)
    denoised = preprocess.median_filter_3x3(volume)
    corrected = preprocess.bias_correct(denoised, mask, params.sigma_mm)
    return iamlab_normalize(corrected, mask, params.reference_mode, params.bins, params.smooth_bins)
