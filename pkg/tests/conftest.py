import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import phantoms  # noqa: E402
from flairnorm.nifti import write_nifti  # noqa: E402
from flairnorm.volume import Mask, MaskKind, Volume  # noqa: E402

SCANNER_GAINS = [0.6, 1.0, 1.5, 1.9]
SCANNER_OFFSETS = [-12.0, 5.0, 15.0, -3.0]


@pytest.fixture
def phantom_dir(tmp_path):
    """Four float32 phantom scans with brain masks plus lesion ground truth and predictions."""
    vols = tmp_path / "vols"
    gt = tmp_path / "gt"
    pred = tmp_path / "pred"
    for d in (vols, gt, pred):
        d.mkdir()
    rng = np.random.default_rng(77)
    for i, (g, o) in enumerate(zip(SCANNER_GAINS, SCANNER_OFFSETS)):
        v, icv, wml = phantoms.brain_phantom(seed=i, gain=g, offset=o)
        name = f"sub{i:02d}"
        write_nifti(Volume(v.data.astype(np.float32), v.spacing), vols / f"{name}.nii.gz")
        write_nifti(icv, vols / f"{name}_mask.nii.gz")
        write_nifti(wml, gt / f"{name}.nii.gz")
        noisy = wml.data ^ (rng.random(wml.dims) < 0.002)
        write_nifti(Mask(noisy, MaskKind.WML, wml.spacing), pred / f"{name}.nii.gz")
    return tmp_path


# --- acceptance summary ----------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, list[bool]] = {}
ACCEPTANCE_TITLES: dict[int, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker:
            number, title = marker.args
            ACCEPTANCE_TITLES[number] = title
            ACCEPTANCE_RESULTS.setdefault(number, [])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and (report.when == "call" or (report.when == "setup" and not report.passed)):
        ACCEPTANCE_RESULTS[marker.args[0]].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        results = ACCEPTANCE_RESULTS[number]
        status = "PASS" if results and all(results) else ("NOT RUN" if not results else "FAIL")
        terminalreporter.write_line(f"criterion {number:2d} {status:7s} {ACCEPTANCE_TITLES[number]}")
