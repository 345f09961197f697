import csv
import gzip
import json

import numpy as np
import pytest

from flairnorm import cli
from flairnorm.ensemble import majority_vote
from flairnorm.metrics import dsc, read_records_csv
from flairnorm.nifti import read_mask, read_nifti, write_nifti
from flairnorm.standardize import StandardScale, nyul_train, volume_landmarks, volume_mode
from flairnorm.volume import Mask, MaskKind, compute_histogram


def run(*argv):
    return cli.main([str(a) for a in argv])


def volumes(root):
    return sorted(p for p in (root / "vols").glob("sub*.nii.gz") if "_mask" not in p.name)


class TestHelpers:
    def test_stem(self):
        assert cli.stem("a/b/sub01.nii.gz") == "sub01"
        assert cli.stem("sub01.nii") == "sub01"
        assert cli.stem("sub01_mask.hdr") == "sub01_mask"

    def test_pairing(self, phantom_dir):
        pairs = cli.pair_masks(volumes(phantom_dir))
        assert all(m.name == f"{cli.stem(v)}_mask.nii.gz" for v, m in pairs)

    def test_pairs_file(self, phantom_dir, tmp_path):
        v = volumes(phantom_dir)
        table = tmp_path / "pairs.json"
        table.write_text(json.dumps({str(v[0]): str(v[1].with_name("sub01_mask.nii.gz"))}))
        pairs = cli.pair_masks(v[:2], pairs_file=table)
        assert pairs[0][1].name == "sub01_mask.nii.gz" and pairs[1][1] is None


class TestNormalize:
    def test_original_payload_identical(self, phantom_dir, tmp_path):
        src = volumes(phantom_dir)[0]
        out = tmp_path / "out"
        assert run("normalize", src, "--method", "original", "--out", out, "--jobs", 1) == 0
        result = out / "sub00_original.nii.gz"
        a = gzip.decompress(src.read_bytes())
        b = gzip.decompress(result.read_bytes())
        assert a[352:] == b[352:]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["method"] == "original"
        assert manifest["files"][0]["status"] == "ok"
        assert "created" in manifest

    def test_iamlab_batch_modes(self, phantom_dir, tmp_path):
        out = tmp_path / "out"
        code = run("normalize", phantom_dir / "vols", "--method", "iamlab", "--out", out, "--jobs", 2)
        assert code == 0
        outputs = sorted(out.glob("*_iamlab.nii.gz"))
        assert len(outputs) == 4
        for path in outputs:
            vol = read_nifti(path)
            mask = read_mask(phantom_dir / "vols" / path.name.replace("_iamlab", "_mask"), MaskKind.ICV)
            width = compute_histogram(vol, mask).bin_width
            assert abs(volume_mode(vol, mask).mode_intensity - 0.75) <= width

    def test_missing_mask_partial(self, phantom_dir, tmp_path):
        (phantom_dir / "vols" / "sub02_mask.nii.gz").unlink()
        out = tmp_path / "out"
        code = run("normalize", phantom_dir / "vols", "--method", "zscore", "--out", out, "--jobs", 1)
        assert code == 2
        files = json.loads((out / "manifest.json").read_text())["files"]
        status = {cli.stem(f["input"]): f["status"] for f in files}
        assert status == {"sub00": "ok", "sub01": "ok", "sub02": "failed", "sub03": "ok"}
        assert not (out / "sub02_zscore.nii.gz").exists()

    def test_explicit_masks_kept_in_given_order(self, phantom_dir, tmp_path):
        v = volumes(phantom_dir)
        masks = [p.with_name(cli.stem(p) + "_mask.nii.gz") for p in v]
        out = tmp_path / "out"
        code = run("normalize", v[1], v[0], "--masks", masks[1], masks[0], "--method", "zscore", "--out", out, "--jobs", 1)
        assert code == 0
        files = json.loads((out / "manifest.json").read_text())["files"]
        assert [cli.stem(f["input"]) for f in files] == ["sub00", "sub01"]
        assert all(cli.stem(f["mask"]) == cli.stem(f["input"]) + "_mask" for f in files)

    def test_nyul_requires_scale(self, phantom_dir, tmp_path):
        assert run("normalize", phantom_dir / "vols", "--method", "nyul", "--out", tmp_path / "o") == 1

    def test_bad_usage_exit_1(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("normalize", "x.nii", "--method", "bogus", "--out", tmp_path)
        assert exc.value.code == 1


class TestTrainNyul:
    def test_single_and_deterministic(self, phantom_dir, tmp_path):
        src = volumes(phantom_dir)[0]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run("train-nyul", src, "--out", a) == 0
        assert run("train-nyul", src, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()
        scale = StandardScale.from_json(a.read_text())
        vol = read_nifti(src)
        mask = read_mask(src.with_name("sub00_mask.nii.gz"), MaskKind.ICV)
        assert scale == nyul_train([(vol, mask)])
        q = volume_landmarks(vol, mask, scale.landmark_percentiles)
        np.testing.assert_allclose(scale.standard_positions, (q - q[0]) / (q[-1] - q[0]) * 100, atol=1e-12)

    def test_scaled_copy(self, phantom_dir, tmp_path):
        src = volumes(phantom_dir)[0]
        vol = read_nifti(src)
        copy = tmp_path / "copy.nii.gz"
        write_nifti(vol.with_data(vol.data * 2.0), copy)
        (tmp_path / "copy_mask.nii.gz").write_bytes(src.with_name("sub00_mask.nii.gz").read_bytes())
        run("train-nyul", src, "--out", tmp_path / "one.json")
        run("train-nyul", src, copy, "--masks", src.with_name("sub00_mask.nii.gz"), tmp_path / "copy_mask.nii.gz", "--out", tmp_path / "two.json")
        one = StandardScale.from_json((tmp_path / "one.json").read_text())
        two = StandardScale.from_json((tmp_path / "two.json").read_text())
        np.testing.assert_allclose(two.standard_positions, one.standard_positions, atol=1e-9, rtol=0)

    def test_then_normalize(self, phantom_dir, tmp_path):
        scale = tmp_path / "scale.json"
        assert run("train-nyul", phantom_dir / "vols", "--out", scale) == 0
        out = tmp_path / "out"
        assert run("normalize", phantom_dir / "vols", "--method", "nyul", "--scale", scale, "--out", out, "--jobs", 1) == 0
        assert len(list(out.glob("*_nyul.nii.gz"))) == 4


class TestEvaluate:
    def test_self_evaluation(self, phantom_dir, tmp_path):
        out = tmp_path / "res.csv"
        assert run("evaluate", "--pred", phantom_dir / "gt", "--gt", phantom_dir / "gt", "--out", out, "--jobs", 1) == 0
        recs = read_records_csv(out)
        assert len(recs) == 4 and all(r.dsc == 1.0 for r in recs)
        summary = list(csv.DictReader(open(tmp_path / "res_summary.csv")))
        assert {row["metric"] for row in summary} >= {"dsc", "h95_mm"}

    def test_matches_metric_ops(self, phantom_dir, tmp_path):
        out = tmp_path / "res.csv"
        assert run("evaluate", "--pred", phantom_dir / "pred", "--gt", phantom_dir / "gt", "--method", "iamlab", "--out", out) == 0
        for r in read_records_csv(out):
            p = read_mask(phantom_dir / "pred" / f"{r.volume_id}.nii.gz")
            g = read_mask(phantom_dir / "gt" / f"{r.volume_id}.nii.gz")
            assert r.method == "iamlab"
            assert r.dsc == float(format(dsc(p, g), ".6g"))

    def test_empty_gt_flagged(self, tmp_path):
        (tmp_path / "p").mkdir()
        (tmp_path / "g").mkdir()
        bits = np.zeros((4, 4, 4), bool)
        bits[1, 1, 1] = True
        write_nifti(Mask(bits), tmp_path / "p" / "a.nii.gz")
        write_nifti(Mask(np.zeros((4, 4, 4), bool)), tmp_path / "g" / "a.nii.gz")
        assert run("evaluate", "--pred", tmp_path / "p", "--gt", tmp_path / "g", "--out", tmp_path / "r.csv") == 0
        text = (tmp_path / "r.csv").read_text()
        assert "EmptyGroundTruth" in text

    def test_unpaired(self, phantom_dir, tmp_path, capsys):
        (phantom_dir / "pred" / "sub03.nii.gz").unlink()
        code = run("evaluate", "--pred", phantom_dir / "pred", "--gt", phantom_dir / "gt", "--out", tmp_path / "r.csv")
        assert code == 2
        assert "unpaired: sub03" in capsys.readouterr().err
        assert len(read_records_csv(tmp_path / "r.csv")) == 3


class TestEnsemble:
    def test_identical(self, phantom_dir, tmp_path):
        m = phantom_dir / "gt" / "sub00.nii.gz"
        assert run("ensemble", m, m, m, "--out", tmp_path / "f.nii.gz") == 0
        assert read_mask(tmp_path / "f.nii.gz") == read_mask(m)

    def test_random_five(self, tmp_path):
        rng = np.random.default_rng(4)
        masks = [Mask(rng.random((8, 8, 8)) < 0.5) for _ in range(5)]
        paths = []
        for i, m in enumerate(masks):
            paths.append(tmp_path / f"m{i}.nii")
            write_nifti(m, paths[-1])
        assert run("ensemble", *paths, "--out", tmp_path / "f.nii") == 0
        assert np.array_equal(read_mask(tmp_path / "f.nii").data, majority_vote(masks).data)

    def test_one_mask(self, phantom_dir, tmp_path):
        assert run("ensemble", phantom_dir / "gt" / "sub00.nii.gz", "--out", tmp_path / "f.nii") == 1


class TestReport:
    def test_outputs(self, phantom_dir, tmp_path):
        out = tmp_path / "rep"
        args = ["report", phantom_dir / "vols", "--out", out, "--jobs", 1, "--bins", 64]
        assert run(*args) == 0
        summary = {r["method"]: float(r["mean_kl"]) for r in csv.DictReader(open(out / "kl_summary.csv"))}
        assert set(summary) == {"original", "zscore", "whitestripe", "nyul", "iamlab"}
        assert summary["original"] > summary["iamlab"]
        rows = list(csv.DictReader(open(out / "histograms.csv")))
        assert len(rows) == 64 * 4 * 5
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["notes"]["nyul_scale"] == "trained on the report inputs"

    def test_identical_volumes(self, phantom_dir, tmp_path):
        src = volumes(phantom_dir)[0]
        mask = src.with_name("sub00_mask.nii.gz")
        for name in ("a", "b"):
            (tmp_path / f"{name}.nii.gz").write_bytes(src.read_bytes())
            (tmp_path / f"{name}_mask.nii.gz").write_bytes(mask.read_bytes())
        out = tmp_path / "rep"
        assert run("report", tmp_path / "a.nii.gz", tmp_path / "b.nii.gz", "--out", out, "--jobs", 1) == 0
        for row in csv.DictReader(open(out / "kl_summary.csv")):
            assert float(row["mean_kl"]) == 0.0

    def test_significance(self, phantom_dir, tmp_path):
        run("evaluate", "--pred", phantom_dir / "pred", "--gt", phantom_dir / "gt", "--out", tmp_path / "o.csv")
        run("evaluate", "--pred", phantom_dir / "gt", "--gt", phantom_dir / "gt", "--method", "iamlab", "--out", tmp_path / "i.csv")
        out = tmp_path / "rep"
        code = run(
            "report", phantom_dir / "vols", "--method", "iamlab", "--method", "original",
            "--eval", f"original={tmp_path / 'o.csv'}", "--eval", f"iamlab={tmp_path / 'i.csv'}",
            "--out", out, "--jobs", 1,
        )
        assert code == 0
        sig = json.loads((out / "significance.json").read_text())
        assert {s["metric"] for s in sig} == set(cli.REPORT_METRICS)
        assert all(s["method"] == "iamlab" for s in sig)

    def test_needs_two(self, phantom_dir, tmp_path):
        assert run("report", volumes(phantom_dir)[0], "--out", tmp_path / "r") == 1


def test_log_env(monkeypatch, phantom_dir, tmp_path, capsys):
    monkeypatch.setenv("FLAIRNORM_LOG", "INFO")
    import logging

    logging.getLogger().handlers.clear()
    run("normalize", volumes(phantom_dir)[0], "--method", "zscore", "--out", tmp_path / "o", "--jobs", 1)
    assert "normalize: 1 ok" in capsys.readouterr().err
    logging.getLogger().handlers.clear()
    logging.getLogger().setLevel(logging.WARNING)
