"""Acceptance gates: each analytic claim vs an independent simulation.

Every test drives one check from :mod:`samlab.harness.verify` and prints a
single PASS/FAIL line with the measured value and its tolerance, so running
``pytest -s tests/test_acceptance.py`` doubles as a readable scorecard.
Checks with a wall-clock budget are timed here as well.
"""
import importlib
import time

verify_mod = importlib.import_module("samlab.harness.verify")


def _run(check, budget=None):
    start = time.perf_counter()
    res = check()
    elapsed = time.perf_counter() - start
    verdict = "PASS" if res.passed else "FAIL"
    print(f"{verdict} {res.name}: measured={res.measured} "
          f"tolerance={res.tolerance} ({elapsed:.2f}s)")
    assert res.passed, f"{res.name}: {res.detail}"
    if budget is not None:
        assert elapsed < budget, (
            f"{res.name} took {elapsed:.1f}s, budget {budget:.0f}s")
    return res


def test_two_cycle_amplitude_grid_matches_formula():
    _run(verify_mod.check_two_cycle_amplitude_grid, budget=10.0)


def test_sharp_curvature_cancellation_shrinks_hover():
    _run(verify_mod.check_sharp_curvature_cancellation, budget=10.0)


def test_envelope_amplification_ratio_is_exact():
    _run(verify_mod.check_envelope_amplification_ratio)


def test_whitening_reproduces_direct_recursion():
    _run(verify_mod.check_whitening_equivalence, budget=5.0)


def test_step_rules_transfer_to_matrix_recursion():
    _run(verify_mod.check_step_rule_recursion_transfer)


def test_escape_contrast_across_step_rules():
    _run(verify_mod.check_sharp_well_escape_contrast, budget=5.0)


def test_shared_noise_reveals_path_contrast():
    _run(verify_mod.check_shared_noise_path_contrast, budget=30.0)


def test_noise_damping_matches_stationary_stats():
    _run(verify_mod.check_noise_damping_statistics, budget=10.0)


def test_selection_occupancy_decays_with_curvature():
    _run(verify_mod.check_selection_occupancy_decay, budget=60.0)


def test_learner_recovers_known_preconditioner():
    _run(verify_mod.check_preconditioner_learner_oracle, budget=10.0)


def test_gradient_checks_pass_everywhere():
    _run(verify_mod.check_analytic_gradient_checks)


def test_verify_reruns_are_byte_identical(tmp_path):
    ok_a, path_a = verify_mod.verify(tmp_path / "first")
    ok_b, path_b = verify_mod.verify(tmp_path / "second")
    identical = path_a.read_bytes() == path_b.read_bytes()
    verdict = "PASS" if (ok_a and ok_b and identical) else "FAIL"
    print(f"{verdict} rerun_determinism: measured="
          f"{'byte-identical' if identical else 'mismatch'} "
          f"tolerance=identical report bytes across fresh runs")
    assert ok_a and ok_b, "verify reported a failing check"
    assert identical, "report.json differs between two fresh verify runs"
