"""Acceptance gate: one test per release criterion.

Each test prints a single pass/fail line so the criteria can be audited
from the pytest -s output; failures raise with the offending detail.
"""

import subprocess
import sys
import time

import pytest

from voxgeo import selftest


def _run(label, check, budget_s=None):
    t = time.time()
    try:
        detail = check()
    except Exception as exc:
        print(f"[FAIL] {label}: {type(exc).__name__}: {exc}")
        raise
    elapsed = time.time() - t
    if budget_s is not None and elapsed > budget_s:
        print(f"[FAIL] {label}: took {elapsed:.1f}s (budget {budget_s}s)")
        pytest.fail(f"{label} exceeded the {budget_s}s budget")
    print(f"[PASS] {label} ({elapsed:.1f}s): {detail}")


def test_criterion_01_sdm_exactness():
    _run("criterion 1: SDM exact vs brute force + Lipschitz",
         selftest.check_sdm_exactness, budget_s=10.0)


def test_criterion_02_gating_band():
    _run("criterion 2: gating band and tau monotonicity",
         selftest.check_gating_band)


def test_criterion_03_gradients():
    _run("criterion 3: analytic gradients vs finite differences",
         selftest.check_gradients, budget_s=30.0)


def test_criterion_04_awp_gap():
    _run("criterion 4: AWP reduces to scaled GAP", selftest.check_awp_gap_reduction)


def test_criterion_05_losses():
    _run("criterion 5: loss closed forms + deep supervision",
         selftest.check_losses)


def test_criterion_06_metric_oracles():
    _run("criterion 6: HD95/ASSD equal brute force", selftest.check_metrics_oracle)


def test_criterion_07_stitcher():
    _run("criterion 7: stitching commutes with a voxelwise model",
         selftest.check_stitcher_commutation)


def test_criterion_08_clinical_phantom():
    _run("criterion 8: phantom proximity accuracy",
         selftest.check_clinical_phantom)


def test_criterion_09_io_roundtrip():
    _run("criterion 9: bitwise I/O round trips", selftest.check_io_roundtrip)


def test_criterion_10_cli_selftest():
    t = time.time()
    proc = subprocess.run([sys.executable, "-m", "voxgeo.cli", "selftest"],
                          capture_output=True, text=True, timeout=300)
    elapsed = time.time() - t
    ok = proc.returncode == 0 and "FAIL" not in proc.stdout
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] criterion 10: voxgeo selftest exit={proc.returncode} "
          f"in {elapsed:.1f}s")
    assert ok, proc.stdout + proc.stderr
    assert elapsed < 300.0
