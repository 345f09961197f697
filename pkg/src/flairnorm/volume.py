"""Voxel-grid data model, masked statistics, histograms and patch geometry.

Arrays are indexed ``[x, y, z]``; flattening with ``order="F"`` gives the
x-fastest order used on disk by NIfTI-1.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from flairnorm.errors import (
    DegenerateRangeError,
    DimsMismatchError,
    EdgesMismatchError,
    EmptyListError,
    EmptyMaskError,
    InvalidOverlapError,
    NotNormalizedError,
)

logger = logging.getLogger(__name__)

DEFAULT_BINS = 256


def _as_3d(data: np.ndarray) -> np.ndarray:
    if data.ndim == 2:
        data = data[:, :, np.newaxis]
    if data.ndim != 3:
        raise ValueError(f"expected a 2D or 3D array, got shape {data.shape}")
    return data


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar image with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_unit: str = "arbitrary"

    def __post_init__(self):
        data = _as_3d(np.array(self.data, dtype=np.float64))
        if data.size == 0:
            raise ValueError("volume has no voxels")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains NaN or Inf")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxels(self) -> np.ndarray:
        """Flat view of the intensities in x-fastest order."""
        return self.data.ravel(order="F")

    def with_data(self, data: np.ndarray, intensity_unit: str | None = None) -> "Volume":
        return Volume(
            data,
            spacing=self.spacing,
            intensity_unit=self.intensity_unit if intensity_unit is None else intensity_unit,
        )


class MaskKind(str, enum.Enum):
    ICV = "ICV"
    WML = "WML"


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary mask; ``ICV`` for brain masks, ``WML`` for lesion masks."""

    data: np.ndarray
    kind: MaskKind = MaskKind.WML
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = _as_3d(np.asarray(self.data))
        if raw.dtype != bool:
            if not np.all((raw == 0) | (raw == 1)):
                raise ValueError("mask values must be exactly 0 or 1")
        data = raw.astype(bool, copy=True)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "kind", MaskKind(self.kind))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.data, other.data))

    __hash__ = None


def check_dims(a, b) -> None:
    if a.dims != b.dims:
        raise DimsMismatchError(f"dims differ: {a.dims} vs {b.dims}")


class MaskedStats(NamedTuple):
    mean: float
    std: float
    min: float
    max: float
    count: int


def masked_values(volume: Volume, mask: Mask) -> np.ndarray:
    check_dims(volume, mask)
    return volume.data[mask.data]


def masked_stats(volume: Volume, mask: Mask) -> MaskedStats:
    """Mean, population std, min, max and count of the in-mask voxels."""
    values = masked_values(volume, mask)
    if values.size < 2:
        raise EmptyMaskError(f"mask has {values.size} foreground voxels, need at least 2")
    mean = float(values.mean())
    std = float(np.sqrt(np.mean((values - mean) ** 2)))
    return MaskedStats(mean, std, float(values.min()), float(values.max()), int(values.size))


@dataclass(frozen=True, eq=False)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        edges = np.array(self.edges, dtype=np.float64)
        counts = np.array(self.counts, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2 or not np.all(np.diff(edges) > 0):
            raise ValueError("edges must be a strictly increasing 1D array")
        if counts.shape != (edges.size - 1,):
            raise ValueError("counts length must be len(edges) - 1")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if self.normalized and abs(counts.sum() - 1.0) > 1e-9:
            raise NotNormalizedError(f"normalized counts sum to {counts.sum()!r}")
        edges.flags.writeable = False
        counts.flags.writeable = False
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def bins(self) -> int:
        return self.counts.size

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def bin_width(self) -> float:
        """Mean bin width (exact for uniform edges)."""
        return float((self.edges[-1] - self.edges[0]) / self.bins)

    def normalize(self) -> "Histogram":
        total = self.counts.sum()
        if total <= 0:
            raise EmptyMaskError("cannot normalize an empty histogram")
        return Histogram(self.edges, self.counts / total, normalized=True)


def compute_histogram(
    volume: Volume,
    mask: Mask,
    bins: int = DEFAULT_BINS,
    range: tuple[float, float] | None = None,
    normalize: bool = False,
) -> Histogram:
    """Histogram of in-mask intensities.

    With ``range=None`` the range is the masked min/max. Values equal to the
    upper bound go to the last bin; values outside the range are dropped.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    values = masked_values(volume, mask)
    if values.size == 0:
        raise EmptyMaskError("mask is empty")
    if range is None:
        lo, hi = float(values.min()), float(values.max())
    else:
        lo, hi = float(range[0]), float(range[1])
    if not lo < hi:
        raise DegenerateRangeError(f"histogram range is degenerate: ({lo}, {hi})")
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    hist = Histogram(edges, counts)
    return hist.normalize() if normalize else hist


def mean_histogram(histograms: Sequence[Histogram]) -> Histogram:
    """Per-bin mean of normalized histograms sharing one bin grid."""
    if len(histograms) == 0:
        raise EmptyListError("no histograms given")
    edges = histograms[0].edges
    for h in histograms:
        if not np.array_equal(h.edges, edges):
            raise EdgesMismatchError("histograms do not share bin edges")
        if not h.normalized:
            raise NotNormalizedError("mean_histogram expects normalized histograms")
    stack = np.stack([h.counts for h in histograms])
    # sort per bin so the floating point sum does not depend on input order
    mean = np.sort(stack, axis=0).sum(axis=0) / len(histograms)
    return Histogram(edges, mean / mean.sum(), normalized=True)


@dataclass(frozen=True)
class PatchGrid:
    patch_size: tuple[int, int]
    stride: tuple[int, int]
    origins: list[tuple[int, int]] = field(default_factory=list)
    shape: tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return len(self.origins)

    def extract(self, image: np.ndarray) -> np.ndarray:
        """Cut the patches out of ``image``; edge-pads slices smaller than a patch."""
        image = np.asarray(image)
        if image.shape != self.shape:
            raise DimsMismatchError(f"slice shape {image.shape} != grid shape {self.shape}")
        ph, pw = self.patch_size
        pad = ((0, max(0, ph - image.shape[0])), (0, max(0, pw - image.shape[1])))
        if any(p[1] for p in pad):
            image = np.pad(image, pad, mode="edge")
        return np.stack([image[r : r + ph, c : c + pw] for r, c in self.origins])


def _axis_origins(n: int, size: int, stride: int) -> list[int]:
    if n <= size:
        return [0]
    origins = list(np.arange(0, n - size + 1, stride))
    if origins[-1] + size < n:
        origins.append(n - size)
    return [int(o) for o in origins]


def extract_patches(image: np.ndarray, patch_size: int = 64, overlap: float = 0.5) -> PatchGrid:
    """Patch layout for one 2D slice; the last patch on each axis is clamped to the border."""
    image = np.asarray(image)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ValueError("expected a non-empty 2D slice")
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    if not 0 <= overlap < 1:
        raise InvalidOverlapError(f"overlap must be in [0, 1), got {overlap}")
    stride = max(1, int(round(patch_size * (1 - overlap))))
    rows = _axis_origins(image.shape[0], patch_size, stride)
    cols = _axis_origins(image.shape[1], patch_size, stride)
    return PatchGrid(
        patch_size=(patch_size, patch_size),
        stride=(stride, stride),
        origins=[(r, c) for r in rows for c in cols],
        shape=tuple(image.shape),
    )


def lesion_load_ml(mask: Mask, spacing=None) -> float:
    """Lesion volume in mL. ``spacing`` defaults to the mask's own."""
    if mask.kind is not MaskKind.WML:
        raise ValueError("lesion load is defined for WML masks")
    sx, sy, sz = _check_spacing(mask.spacing if spacing is None else spacing)
    return mask.count * (sx * sy * sz) / 1000.0
