"""Segmentation and alignment metrics.

Overlap (DSC, extra fraction), surface distance (H95), volume difference
(AVD), lesion-wise detection (F1, recall), histogram KL divergence, plus the
per-volume record type and its CSV form.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from flairnorm.errors import (
    EdgesMismatchError,
    EmptyGroundTruthError,
    EmptyInputError,
    EmptyMaskError,
    NotNormalizedError,
)
from flairnorm.volume import (
    DEFAULT_BINS,
    Histogram,
    Mask,
    MaskKind,
    Volume,
    check_dims,
    compute_histogram,
    lesion_load_ml,
    masked_values,
    mean_histogram,
)

logger = logging.getLogger(__name__)

STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)
STRUCTURE_6 = ndimage.generate_binary_structure(3, 1)
DEFAULT_EPSILON = 1e-9


def _spacing(gt: Mask, spacing) -> tuple[float, float, float]:
    return tuple(float(s) for s in (gt.spacing if spacing is None else spacing))


# --- overlap and volume ---------------------------------------------------


def dsc(pred: Mask, gt: Mask) -> float:
    check_dims(pred, gt)
    total = pred.count + gt.count
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(pred.data & gt.data) / total


def extra_fraction(pred: Mask, gt: Mask) -> float:
    """False-positive voxels relative to the ground-truth size."""
    check_dims(pred, gt)
    if gt.count == 0:
        raise EmptyGroundTruthError("extra fraction is undefined for an empty ground truth")
    return np.count_nonzero(pred.data & ~gt.data) / gt.count


def avd(pred: Mask, gt: Mask, spacing=None) -> float:
    """Absolute volume difference in percent of the ground-truth volume."""
    check_dims(pred, gt)
    if gt.count == 0:
        raise EmptyGroundTruthError("AVD is undefined for an empty ground truth")
    sp = _spacing(gt, spacing)
    v_pred = lesion_load_ml(Mask(pred.data, MaskKind.WML, sp))
    v_gt = lesion_load_ml(Mask(gt.data, MaskKind.WML, sp))
    return 100.0 * abs(v_pred - v_gt) / v_gt


# --- surface distance -----------------------------------------------------


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background face-neighbour or on the grid edge."""
    eroded = ndimage.binary_erosion(mask, structure=STRUCTURE_6, border_value=0)
    return mask & ~eroded


def directed_surface_distances(src: Mask, dst: Mask, spacing=None) -> np.ndarray:
    """Distance in mm from every boundary voxel of ``src`` to the nearest boundary voxel of ``dst``."""
    sp = np.asarray(_spacing(dst, spacing))
    a = np.argwhere(boundary(src.data)) * sp
    b = np.argwhere(boundary(dst.data)) * sp
    dist, _ = cKDTree(b).query(a, k=1)
    return np.asarray(dist, dtype=np.float64)


def h95(pred: Mask, gt: Mask, spacing=None) -> float:
    """Symmetric 95th-percentile surface distance in mm."""
    check_dims(pred, gt)
    if pred.count == 0 or gt.count == 0:
        raise EmptyMaskError("H95 needs two non-empty masks")
    d_pg = directed_surface_distances(pred, gt, spacing)
    d_gp = directed_surface_distances(gt, pred, spacing)
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


# --- lesion-wise detection ------------------------------------------------


class Detection(NamedTuple):
    f1: float
    recall: float
    n_gt_lesions: int
    n_pred_lesions: int


def label_lesions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """26-connected component labels."""
    labels, n = ndimage.label(mask, structure=STRUCTURE_26)
    return labels, int(n)


def _hit_components(labels: np.ndarray, n: int, other: np.ndarray, min_overlap: float) -> int:
    if n == 0:
        return 0
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    overlap = np.bincount(labels[other].ravel(), minlength=n + 1)[1:]
    needed = np.maximum(1.0, min_overlap * sizes)
    return int(np.count_nonzero(overlap >= needed))


def lesion_detection(pred: Mask, gt: Mask, min_overlap: float = 0.0) -> Detection:
    """Lesion-wise F1 and recall.

    A lesion counts as found when it shares at least one voxel with the other
    mask, or ``min_overlap`` of its own voxels when that is larger.
    """
    check_dims(pred, gt)
    gt_labels, n_gt = label_lesions(gt.data)
    pred_labels, n_pred = label_lesions(pred.data)
    if n_gt == 0 and n_pred == 0:
        return Detection(1.0, 1.0, 0, 0)
    detected = _hit_components(gt_labels, n_gt, pred.data, min_overlap)
    true_pos = _hit_components(pred_labels, n_pred, gt.data, min_overlap)
    # no ground-truth lesions means none can be missed
    recall = detected / n_gt if n_gt else 1.0
    precision = true_pos / n_pred if n_pred else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return Detection(f1, recall, n_gt, n_pred)


# --- histogram alignment --------------------------------------------------


def kl_divergence(vol_hist: Histogram, ref_hist: Histogram, epsilon: float = DEFAULT_EPSILON) -> float:
    """KL(volume || reference) after epsilon smoothing and renormalization."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not np.array_equal(vol_hist.edges, ref_hist.edges):
        raise EdgesMismatchError("histograms do not share bin edges")
    if not (vol_hist.normalized and ref_hist.normalized):
        raise NotNormalizedError("kl_divergence expects normalized histograms")
    p = vol_hist.counts + epsilon
    q = ref_hist.counts + epsilon
    p /= p.sum()
    q /= q.sum()
    return max(0.0, float(np.sum(p * np.log(p / q))))


@dataclass(frozen=True)
class KlRecord:
    volume_id: str
    kl_divergence: float
    method: str = "original"

    def __post_init__(self):
        if not self.kl_divergence >= 0:
            raise ValueError("kl_divergence must be non-negative")


@dataclass
class AlignmentReport:
    method: str
    records: list[KlRecord]
    mean_kl: float
    histograms: dict[str, Histogram]
    mean_histogram: Histogram


def dataset_alignment_report(
    items: Sequence[tuple[str, Volume, Mask]],
    method: str = "original",
    bins: int = DEFAULT_BINS,
    epsilon: float = DEFAULT_EPSILON,
) -> AlignmentReport:
    """KL of every volume histogram against the dataset mean histogram.

    All histograms share one bin grid spanning the union of the masked
    intensity ranges. Results are ordered by volume id.
    """
    if len(items) < 2:
        raise EmptyInputError("alignment report needs at least two volumes")
    items = sorted(items, key=lambda it: it[0])
    ids = [vid for vid, _, _ in items]
    if len(set(ids)) != len(ids):
        raise ValueError("volume ids must be unique")
    values = [masked_values(vol, mask) for _, vol, mask in items]
    if any(v.size == 0 for v in values):
        raise EmptyMaskError("every volume needs a non-empty mask")
    lo = min(float(v.min()) for v in values)
    hi = max(float(v.max()) for v in values)
    hists = {
        vid: compute_histogram(vol, mask, bins=bins, range=(lo, hi), normalize=True)
        for vid, vol, mask in items
    }
    mean = mean_histogram([hists[v] for v in ids])
    records = [KlRecord(v, kl_divergence(hists[v], mean, epsilon), method) for v in ids]
    mean_kl = math.fsum(r.kl_divergence for r in records) / len(records)
    return AlignmentReport(method, records, mean_kl, hists, mean)


# --- evaluation records ---------------------------------------------------


class LLBin(str, enum.Enum):
    LT10 = "LT10"
    TEN_TO_25 = "TEN_TO_25"
    GE25 = "GE25"


LL_EDGES_ML = (10.0, 25.0)


def ll_bin(load_ml: float) -> LLBin:
    """Lesion-load category; lower edges are inclusive (10.0 mL is TEN_TO_25)."""
    if load_ml < LL_EDGES_ML[0]:
        return LLBin.LT10
    if load_ml < LL_EDGES_ML[1]:
        return LLBin.TEN_TO_25
    return LLBin.GE25


CSV_FIELDS = (
    "volume_id",
    "method",
    "dsc",
    "ef",
    "h95_mm",
    "avd_percent",
    "f1_lesion",
    "recall_lesion",
    "lesion_load_ml",
    "ll_bin",
)
METRIC_FIELDS = ("dsc", "ef", "h95_mm", "avd_percent", "f1_lesion", "recall_lesion", "lesion_load_ml")
UNIT_INTERVAL_FIELDS = ("dsc", "f1_lesion", "recall_lesion")


@dataclass
class EvalRecord:
    """Per-volume metrics. Undefined metrics are NaN with the reason in ``flags``."""

    volume_id: str
    method: str
    dsc: float
    ef: float
    h95_mm: float
    avd_percent: float
    f1_lesion: float
    recall_lesion: float
    lesion_load_ml: float
    ll_bin: LLBin
    flags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.ll_bin = LLBin(self.ll_bin)
        for name in METRIC_FIELDS:
            v = float(getattr(self, name))
            setattr(self, name, v)
            if math.isnan(v):
                if name not in self.flags:
                    raise ValueError(f"{name} is NaN without a flag")
                continue
            if v < 0 or (name in UNIT_INTERVAL_FIELDS and v > 1):
                raise ValueError(f"{name}={v} out of range")
        if ll_bin(self.lesion_load_ml) is not self.ll_bin:
            raise ValueError(f"ll_bin {self.ll_bin} inconsistent with {self.lesion_load_ml} mL")


def evaluate_pair(
    pred: Mask, gt: Mask, volume_id: str, method: str = "original", spacing=None, min_overlap: float = 0.0
) -> EvalRecord:
    """Run every metric on one prediction/ground-truth pair.

    Degenerate inputs (empty ground truth, empty prediction) do not raise;
    the affected metrics become NaN and are flagged with the error name.
    """
    check_dims(pred, gt)
    sp = _spacing(gt, spacing)
    flags: dict[str, str] = {}

    def guarded(name, fn):
        try:
            return fn()
        except (EmptyGroundTruthError, EmptyMaskError) as exc:
            flags[name] = "EmptyGroundTruth" if gt.count == 0 else type(exc).__name__.removesuffix("Error")
            return math.nan

    detection = lesion_detection(pred, gt, min_overlap)
    load = lesion_load_ml(Mask(gt.data, MaskKind.WML, sp))
    return EvalRecord(
        volume_id=volume_id,
        method=method,
        dsc=dsc(pred, gt),
        ef=guarded("ef", lambda: extra_fraction(pred, gt)),
        h95_mm=guarded("h95_mm", lambda: h95(pred, gt, sp)),
        avd_percent=guarded("avd_percent", lambda: avd(pred, gt, sp)),
        f1_lesion=detection.f1,
        recall_lesion=detection.recall,
        lesion_load_ml=load,
        ll_bin=ll_bin(load),
        flags=flags,
    )


def _fmt(v: float) -> str:
    return format(v, ".6g")


def write_records_csv(records: Iterable[EvalRecord], out) -> None:
    """Write records sorted by volume id. ``out`` is a path or a text stream."""
    rows = sorted(records, key=lambda r: (r.volume_id, r.method))
    if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
        with open(out, "w", newline="") as fh:
            write_records_csv(rows, fh)
        return
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in rows:
        cells = [r.volume_id, r.method]
        cells += [r.flags.get(name) or _fmt(getattr(r, name)) for name in METRIC_FIELDS]
        cells.append(r.ll_bin.value)
        writer.writerow(cells)


def read_records_csv(src) -> list[EvalRecord]:
    if isinstance(src, (str, bytes)) or hasattr(src, "__fspath__"):
        with open(src, newline="") as fh:
            return read_records_csv(fh)
    reader = csv.DictReader(src)
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    records = []
    for row in reader:
        flags = {}
        values = {}
        for name in METRIC_FIELDS:
            try:
                values[name] = float(row[name])
            except ValueError:
                flags[name] = row[name]
                values[name] = math.nan
        records.append(
            EvalRecord(volume_id=row["volume_id"], method=row["method"], ll_bin=row["ll_bin"], flags=flags, **values)
        )
    return records


def records_to_csv_text(records: Iterable[EvalRecord]) -> str:
    buf = io.StringIO()
    write_records_csv(records, buf)
    return buf.getvalue()


# --- stratified summary ---------------------------------------------------


class SummaryRow(NamedTuple):
    group: str
    metric: str
    mean: float
    std: float
    cov: float
    n: int
    flagged: bool


GROUP_KEYS = ("ll_bin", "scanner_tag", "method")


def stratified_summary(
    records: Sequence[EvalRecord],
    group_by: str = "ll_bin",
    metrics: Sequence[str] = ("dsc",),
    scanner_of: Mapping[str, str] | Callable[[str], str] | None = None,
) -> list[SummaryRow]:
    """Mean, population std and coefficient of variation per group and metric.

    ``scanner_tag`` grouping needs ``scanner_of`` to map volume ids to
    scanners. Groups with fewer than two values report std 0 and are flagged;
    a zero group mean gives CoV = NaN. Flagged (NaN) metric values are skipped.
    """
    if not records:
        raise EmptyInputError("no records to summarize")
    if group_by == "ll_bin":
        key = lambda r: r.ll_bin.value  # noqa: E731
        order = [b.value for b in LLBin]
    elif group_by == "method":
        key = lambda r: r.method  # noqa: E731
        order = None
    elif group_by == "scanner_tag":
        if scanner_of is None:
            raise ValueError("scanner_tag grouping needs scanner_of")
        lookup = scanner_of if callable(scanner_of) else scanner_of.__getitem__
        key = lambda r: str(lookup(r.volume_id))  # noqa: E731
        order = None
    else:
        raise ValueError(f"group_by must be one of {GROUP_KEYS}")
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(key(r), []).append(r)
    names = [g for g in order if g in groups] if order else sorted(groups)
    rows = []
    for g in names:
        for metric in metrics:
            vals = np.array([getattr(r, metric) for r in groups[g]], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            n = int(vals.size)
            if n == 0:
                rows.append(SummaryRow(g, metric, math.nan, math.nan, math.nan, 0, True))
                continue
            mean = float(vals.mean())
            std = float(np.sqrt(np.mean((vals - mean) ** 2))) if n >= 2 else 0.0
            cov = std / mean if mean != 0 else math.nan
            rows.append(SummaryRow(g, metric, mean, std, cov, n, n < 2))
    return rows


SUMMARY_FIELDS = ("group", "metric", "mean", "std", "cov", "n", "flagged")


def write_summary_csv(rows: Iterable[SummaryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_FIELDS)
        for r in rows:
            writer.writerow([r.group, r.metric, _fmt(r.mean), _fmt(r.std), _fmt(r.cov), r.n, int(r.flagged)])
