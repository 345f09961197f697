"""Command-line batch frontend.

Subcommands: ``normalize``, ``train-nyul``, ``evaluate``, ``ensemble`` and
``report``. Exit codes: 0 when everything succeeded, 1 on usage or fatal
errors, 2 when some files in a batch failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Sequence

from flairnorm import ensemble, metrics, nifti, standardize, stats
from flairnorm.errors import FlairNormError
from flairnorm.standardize import Method, PipelineParams, StandardScale
from flairnorm.volume import DEFAULT_BINS, MaskKind

logger = logging.getLogger("flairnorm")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2
NIFTI_SUFFIXES = (".nii.gz", ".nii", ".hdr", ".hdr.gz")
MASK_SUFFIX = "_mask"
REPORT_METRICS = ("dsc", "ef", "h95_mm", "avd_percent", "f1_lesion", "recall_lesion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FATAL, f"{self.prog}: error: {message}\n")


# --- file helpers ---------------------------------------------------------


def stem(path) -> str:
    name = Path(path).name
    for suffix in NIFTI_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(name).stem


def expand_inputs(paths: Iterable) -> list[Path]:
    """Files as given; directories expand to the NIfTI files they contain. Sorted."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(q for q in p.iterdir() if q.is_file() and q.name.endswith(NIFTI_SUFFIXES))
        else:
            out.append(p)
    return sorted(set(out))


def pair_masks(inputs: list[Path], mask_dir=None, pairs_file=None) -> list[tuple[Path, Path | None]]:
    """Pair every volume with its brain mask.

    A JSON ``{volume: mask}`` file wins; otherwise volume ``X`` pairs with
    ``X_mask.nii[.gz]`` in ``mask_dir`` or next to the volume.
    """
    if pairs_file:
        table = json.loads(Path(pairs_file).read_text())
        by_name = {str(Path(k)): Path(v) for k, v in table.items()}
        return [(p, by_name.get(str(p))) for p in inputs]
    out = []
    for p in inputs:
        folder = Path(mask_dir) if mask_dir else p.parent
        found = None
        for suffix in (".nii.gz", ".nii"):
            cand = folder / f"{stem(p)}{MASK_SUFFIX}{suffix}"
            if cand.exists():
                found = cand
                break
        out.append((p, found))
    return out


def _pairs(args) -> list[tuple[Path, Path | None]]:
    """(volume, mask) pairs sorted by volume path."""
    if args.masks:
        if len(args.masks) != len(args.inputs):
            raise UsageError(f"{len(args.inputs)} inputs but {len(args.masks)} masks")
        pairs = sorted(zip(map(Path, args.inputs), map(Path, args.masks)))
    else:
        inputs = [p for p in expand_inputs(args.inputs) if not stem(p).endswith(MASK_SUFFIX)]
        pairs = pair_masks(inputs, args.mask_dir, args.pairs)
    if not pairs:
        raise UsageError("no input volumes")
    return pairs


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(command: str, args, body: dict) -> dict:
    body = {"command": command, **body}
    if not args.reproducible:
        body["created"] = datetime.now(timezone.utc).isoformat()
    return body


def _map(fn: Callable, items: Sequence, jobs: int | None) -> list:
    """Apply ``fn`` to ``items``; results come back in input order whatever the worker count."""
    jobs = jobs or os.cpu_count() or 1
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _params(args) -> PipelineParams:
    scale = None
    if getattr(args, "scale", None):
        scale = StandardScale.from_json(Path(args.scale).read_text())
    return PipelineParams(
        reference_mode=args.reference_mode,
        tau=args.tau,
        sigma_mm=args.sigma_mm,
        bins=args.bins,
        smooth_bins=args.smooth_bins,
        scale=scale,
    )


# --- normalize ------------------------------------------------------------


def _normalize_one(job) -> dict:
    src, mask_path, out_path, method, params = job
    entry = {"input": str(src), "mask": None if mask_path is None else str(mask_path), "output": None}
    try:
        if mask_path is None:
            raise FileNotFoundError(f"no mask found for {src}")
        volume = nifti.read_nifti(src)
        mask = nifti.read_mask(mask_path, MaskKind.ICV)
        result = standardize.run_pipeline(volume, mask, method, params)
        dtype = "float32"
        if Method(method) is Method.ORIGINAL:
            # keep the stored type so the payload is unchanged where possible
            dtype = nifti.read_header(src).dtype_name
        try:
            nifti.write_nifti(result, out_path, datatype=dtype)
        except FlairNormError:
            nifti.write_nifti(result, out_path, datatype="float32")
        entry.update(output=str(out_path), status="ok", error=None)
    except (FlairNormError, OSError, ValueError) as exc:
        logger.error("%s: %s", src, exc)
        entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return entry


def cmd_normalize(args) -> int:
    pairs = _pairs(args)
    params = _params(args)
    method = Method(args.method)
    if method is Method.NYUL and params.scale is None:
        raise UsageError("--method nyul needs --scale (see train-nyul)")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [
        (src, mask, out_dir / f"{stem(src)}_{method.value}.nii.gz", method.value, params)
        for src, mask in pairs
    ]
    entries = _map(_normalize_one, jobs, args.jobs)
    manifest = _manifest("normalize", args, {"method": method.value, "params": params.to_dict(), "files": entries})
    _dump_json(manifest, out_dir / "manifest.json")
    failed = sum(e["status"] != "ok" for e in entries)
    logger.info("normalize: %d ok, %d failed", len(entries) - failed, failed)
    return EXIT_PARTIAL if failed else EXIT_OK


# --- train-nyul -----------------------------------------------------------


def cmd_train_nyul(args) -> int:
    pairs = _pairs(args)
    training, failed = [], []
    for src, mask_path in pairs:
        try:
            if mask_path is None:
                raise FileNotFoundError(f"no mask found for {src}")
            training.append((nifti.read_nifti(src), nifti.read_mask(mask_path, MaskKind.ICV)))
        except (FlairNormError, OSError, ValueError) as exc:
            logger.error("%s: %s", src, exc)
            failed.append(str(src))
    if not training:
        logger.error("train-nyul: no usable training volumes")
        return EXIT_FATAL
    scale = standardize.nyul_train(training, standard_range=tuple(args.standard_range))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(scale.to_json())
    return EXIT_PARTIAL if failed else EXIT_OK


# --- evaluate -------------------------------------------------------------


def _evaluate_one(job):
    vid, pred_path, gt_path, method, min_overlap = job
    try:
        gt = nifti.read_mask(gt_path)
        pred = nifti.read_mask(pred_path)
        return metrics.evaluate_pair(pred, gt, vid, method, gt.spacing, min_overlap), None
    except (FlairNormError, OSError, ValueError) as exc:
        return None, f"{vid}: {type(exc).__name__}: {exc}"


def cmd_evaluate(args) -> int:
    preds = {stem(p): p for p in expand_inputs(args.pred)}
    gts = {stem(p): p for p in expand_inputs(args.gt)}
    unpaired = sorted(set(preds) ^ set(gts))
    for vid in unpaired:
        print(f"unpaired: {vid}", file=sys.stderr)
    jobs = [(vid, preds[vid], gts[vid], args.method, args.min_overlap) for vid in sorted(set(preds) & set(gts))]
    results = _map(_evaluate_one, jobs, args.jobs)
    records = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    for e in errors:
        print(f"failed: {e}", file=sys.stderr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_records_csv(records, out)
    if records:
        rows = metrics.stratified_summary(records, "ll_bin", REPORT_METRICS)
        metrics.write_summary_csv(rows, out.with_name(stem(out) + "_summary.csv"))
    return EXIT_PARTIAL if unpaired or errors else EXIT_OK


# --- ensemble -------------------------------------------------------------


def cmd_ensemble(args) -> int:
    masks = [nifti.read_mask(p) for p in args.masks]
    fused = ensemble.majority_vote(masks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nifti.write_nifti(fused, out, datatype="uint8")
    return EXIT_OK


# --- report ---------------------------------------------------------------


def _standardize_one(job):
    vid, src, mask_path, method, params = job
    try:
        volume = nifti.read_nifti(src)
        mask = nifti.read_mask(mask_path, MaskKind.ICV)
        return vid, standardize.run_pipeline(volume, mask, method, params), mask, None
    except (FlairNormError, OSError, ValueError) as exc:
        return vid, None, None, f"{type(exc).__name__}: {exc}"


def _significance(eval_csvs: dict[str, str], paired: bool) -> list[dict]:
    if "original" not in eval_csvs:
        raise UsageError("--eval needs an entry for method 'original'")
    tables = {m: {r.volume_id: r for r in metrics.read_records_csv(p)} for m, p in eval_csvs.items()}
    base = tables["original"]
    results = []
    for method in sorted(m for m in tables if m != "original"):
        recs = tables[method]
        ids = sorted(set(recs) & set(base)) if paired else None
        for metric in REPORT_METRICS:
            if paired:
                pairs = [(getattr(recs[i], metric), getattr(base[i], metric)) for i in ids]
                pairs = [(a, b) for a, b in pairs if a == a and b == b]
                a = [p[0] for p in pairs]
                b = [p[1] for p in pairs]
            else:
                a = [getattr(recs[i], metric) for i in sorted(recs)]
                b = [getattr(base[i], metric) for i in sorted(base)]
                a = [v for v in a if v == v]
                b = [v for v in b if v == v]
            try:
                results.append(stats.compare_metric(a, b, metric, method, paired=paired))
            except FlairNormError as exc:
                results.append({"metric": metric, "method": method, "error": f"{type(exc).__name__}: {exc}"})
    return results


def _parse_eval(items: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--eval expects METHOD=CSV, got {item!r}")
        method, path = item.split("=", 1)
        out[method] = path
    return out


def cmd_report(args) -> int:
    pairs = _pairs(args)
    if len(pairs) < 2:
        raise UsageError("report needs at least two volumes")
    methods = [Method(m) for m in (args.method or [m.value for m in Method])]
    params = _params(args)
    eval_csvs = _parse_eval(args.eval)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    notes = {}
    failures = []
    missing = [str(src) for src, m in pairs if m is None]
    failures += [{"input": s, "error": "no mask found"} for s in missing]
    pairs = [(s, m) for s, m in pairs if m is not None]

    if Method.NYUL in methods and params.scale is None:
        training = [(nifti.read_nifti(s), nifti.read_mask(m, MaskKind.ICV)) for s, m in pairs]
        params.scale = standardize.nyul_train(training)
        notes["nyul_scale"] = "trained on the report inputs"

    kl_rows, summary_rows, hist_rows = [], [], []
    for method in methods:
        jobs = [(stem(s), s, m, method.value, params) for s, m in pairs]
        results = _map(_standardize_one, jobs, args.jobs)
        items = []
        for vid, vol, mask, err in results:
            if err is None:
                items.append((vid, vol, mask))
            else:
                failures.append({"input": vid, "method": method.value, "error": err})
        if len(items) < 2:
            failures.append({"method": method.value, "error": "fewer than two volumes standardized"})
            continue
        rep = metrics.dataset_alignment_report(items, method.value, bins=args.bins)
        kl_rows += [(method.value, r.volume_id, r.kl_divergence) for r in rep.records]
        summary_rows.append((method.value, rep.mean_kl, len(rep.records)))
        for vid, hist in rep.histograms.items():
            for i in range(hist.bins):
                hist_rows.append((method.value, vid, i, hist.edges[i], hist.edges[i + 1], hist.counts[i]))

    with open(out_dir / "kl.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "volume_id", "kl"))
        w.writerows((m, v, format(k, ".6g")) for m, v, k in kl_rows)
    with open(out_dir / "kl_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "mean_kl", "n"))
        w.writerows((m, format(k, ".6g"), n) for m, k, n in summary_rows)
    with open(out_dir / "histograms.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "volume_id", "bin", "lower_edge", "upper_edge", "count"))
        w.writerows((m, v, i, format(lo, ".10g"), format(hi, ".10g"), format(c, ".10g")) for m, v, i, lo, hi, c in hist_rows)
    if eval_csvs:
        _dump_json(_significance(eval_csvs, args.paired), out_dir / "significance.json")
    manifest = _manifest(
        "report",
        args,
        {
            "methods": [m.value for m in methods],
            "params": params.to_dict(),
            "inputs": [str(s) for s, _ in pairs],
            "failures": failures,
            "notes": notes,
        },
    )
    _dump_json(manifest, out_dir / "manifest.json")
    return EXIT_PARTIAL if failures else EXIT_OK


# --- argument parsing -----------------------------------------------------


def _add_pairing(p):
    p.add_argument("inputs", nargs="+", help="volume files or directories")
    p.add_argument("--masks", nargs="+", help="brain masks in the same order as the inputs")
    p.add_argument("--mask-dir", help="folder holding X_mask.nii[.gz] for each input X")
    p.add_argument("--pairs", help="JSON file mapping volume paths to mask paths")


def _add_method_params(p):
    p.add_argument("--reference-mode", type=float, default=standardize.DEFAULT_REFERENCE_MODE)
    p.add_argument("--tau", type=float, default=standardize.DEFAULT_TAU)
    p.add_argument("--sigma-mm", type=float, default=standardize.preprocess.DEFAULT_SIGMA_MM)
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--smooth-bins", type=int, default=standardize.DEFAULT_SMOOTH_BINS)
    p.add_argument("--scale", help="trained Nyul scale JSON")


def _add_common(p):
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--reproducible", action="store_true", help="omit timestamps from manifests")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flairnorm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("normalize", help="standardize volumes")
    _add_pairing(p)
    p.add_argument("--method", required=True, choices=[m.value for m in Method])
    _add_method_params(p)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("train-nyul", help="train a Nyul standard scale")
    _add_pairing(p)
    p.add_argument("--standard-range", type=float, nargs=2, default=standardize.DEFAULT_STANDARD_RANGE)
    p.add_argument("--out", required=True, help="scale JSON path")
    _add_common(p)
    p.set_defaults(func=cmd_train_nyul)

    p = sub.add_parser("evaluate", help="segmentation metrics for prediction/ground-truth pairs")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--method", default="original", help="method tag written to the CSV")
    p.add_argument("--min-overlap", type=float, default=0.0, help="lesion detection overlap fraction")
    p.add_argument("--out", required=True, help="results CSV path")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="majority vote over masks")
    p.add_argument("masks", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("report", help="KL alignment, histograms and significance tests")
    _add_pairing(p)
    p.add_argument("--method", action="append", choices=[m.value for m in Method], help="repeatable; default all")
    _add_method_params(p)
    p.add_argument("--eval", action="append", metavar="METHOD=CSV", help="evaluation CSV per method")
    p.add_argument("--paired", action="store_true", help="paired instead of Welch t-tests")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_report)
    return parser


def setup_logging() -> None:
    level = os.environ.get("FLAIRNORM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, FlairNormError, OSError, ValueError) as exc:
        print(f"flairnorm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
