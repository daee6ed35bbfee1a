"""Verification suite: cross-checks simulation against every closed form.

Each check re-runs the relevant experiment kernel with its canonical
constants and compares the measurement against the analytic prediction at a
stated tolerance.  Failures never raise; they become report entries, and the
process exit status (wired in the CLI) reflects the overall outcome.

Two artifacts are written: ``report.json`` — deterministic, byte-identical
across reruns — and ``timing.json`` — wall-clock per check, volatile by
nature and therefore kept out of the determinism contract.
"""
from __future__ import annotations

import filecmp
import tempfile
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..landscapes import (LayeredNet, SharpWell2D, TwoScaleQuadratic,
                          linearize, net_forward_backward, sharpwell_eval)
from ..metric import (MetricState, form_lqr_blocks, relaxed_objective,
                      relaxed_objective_grad)
from .config import ExperimentConfig
from .experiments import (ar1_rows, cancellation_rows, default_config,
                          envelope_grid_rows, amplification_rows,
                          learner_results, run_experiment,
                          run_trajectory_suite, selection_results,
                          transfer_rows, whitening_rows)
from .runio import json_bytes, write_json


@dataclass
class CheckResult:
    """One verification entry: measurement, tolerance, verdict, runtime."""

    name: str
    passed: bool
    measured: float | str
    tolerance: float | str
    detail: str
    runtime: float = 0.0


# ---------------------------------------------------------------------------
# individual checks
# ---------------------------------------------------------------------------


def check_two_cycle_amplitude_grid() -> CheckResult:
    cfg = default_config("envelope-sweep")
    rows, worst = envelope_grid_rows(cfg.grids)
    ok = worst <= 1e-10 and len(rows) >= 36
    return CheckResult(
        name="two_cycle_amplitude_grid",
        passed=ok,
        measured=worst,
        tolerance=1e-10,
        detail=(f"{len(rows)} grid cells, 10^5 iterations each; worst "
                f"|measured - b/(1+a)| = {worst:.3e}"),
    )


def check_sharp_curvature_cancellation() -> CheckResult:
    cfg = default_config("envelope-sweep")
    _, summary = cancellation_rows(cfg.grids)
    worst = max(summary["localized_worst_err"],
                summary["raw_worst_err"],
                summary["leading_scale_worst_err"])
    ok = worst <= 1e-10 and summary["divergence_confirmed"]
    return CheckResult(
        name="sharp_curvature_cancellation",
        passed=ok,
        measured=worst,
        tolerance=1e-10,
        detail=(f"localized cells err {summary['localized_worst_err']:.3e}, "
                f"rescaled-to-leading-scale err "
                f"{summary['leading_scale_worst_err']:.3e}, raw-map err "
                f"{summary['raw_worst_err']:.3e}; "
                f"{summary['divergent_cells']} cell(s) past the stability "
                f"edge confirmed non-localizing"),
    )


def check_envelope_amplification_ratio() -> CheckResult:
    cfg = default_config("amplification-sweep")
    rows, worst = amplification_rows(cfg.grids)
    ok = worst == 0.0
    return CheckResult(
        name="envelope_amplification_ratio",
        passed=ok,
        measured=worst,
        tolerance="exact",
        detail=(f"ratio equals inverse root curvature on "
                f"{len(rows)} cells; worst |diff| = {worst:.3e}"),
    )


def check_whitening_equivalence() -> CheckResult:
    cfg = default_config("whitening-check")
    rows, worst = whitening_rows(cfg.grids, cfg.seeds[0])
    ok = worst <= 1e-10
    return CheckResult(
        name="whitening_equivalence",
        passed=ok,
        measured=worst,
        tolerance=1e-10,
        detail=(f"{len(rows)} random non-commuting instances, 100 steps; "
                f"worst |direct - unwhitened| = {worst:.3e}"),
    )


def check_step_rule_recursion_transfer() -> CheckResult:
    cfg = default_config("transfer-diagnostic")
    rows, worst = transfer_rows(cfg.grids, cfg.seeds[0])
    ok = worst <= 1e-12
    return CheckResult(
        name="step_rule_recursion_transfer",
        passed=ok,
        measured=worst,
        tolerance=1e-12,
        detail=(f"{len(rows)} random quadratics, 100 steps; worst per-step "
                f"|optimizer - recursion| = {worst:.3e}"),
    )


def check_sharp_well_escape_contrast() -> CheckResult:
    cfg = default_config("escape-toy")
    records = run_trajectory_suite(cfg)
    finals = {name: rec.final_region
              for (name, _), rec in sorted(records.items())}
    expected = {"sgdm": "sharp", "lqr": "sharp", "sam": "flat",
                "lqr_sam": "flat"}
    ok = finals == expected
    measured = ", ".join(f"{k}:{v}" for k, v in sorted(finals.items()))
    return CheckResult(
        name="sharp_well_escape_contrast",
        passed=ok,
        measured=measured,
        tolerance="non-probing rules end sharp, probing rules end flat",
        detail=(f"deterministic runs from inside the trench; final regions "
                f"{measured}"),
    )


def check_shared_noise_path_contrast() -> CheckResult:
    cfg = default_config("noise-toy")
    records = run_trajectory_suite(cfg)
    ratios = []
    all_flat = True
    strictly_shorter = True
    for seed in cfg.seeds:
        sam = records[("sam", seed)]
        pre = records[("lqr_sam", seed)]
        all_flat &= (sam.final_region == "flat"
                     and pre.final_region == "flat")
        sam_path = float(sam.path_lengths[-1])
        pre_path = float(pre.path_lengths[-1])
        strictly_shorter &= pre_path < sam_path
        ratios.append(pre_path / sam_path)
    ok = all_flat and strictly_shorter
    return CheckResult(
        name="shared_noise_path_contrast",
        passed=ok,
        measured=max(ratios),
        tolerance="both probing rules reach flat; preconditioned path "
                  "strictly shorter on every seed",
        detail=(f"{len(cfg.seeds)} seeds on one shared noise stream; "
                f"path ratios (preconditioned/raw) "
                f"{[round(r, 4) for r in ratios]}"),
    )


def check_noise_damping_statistics() -> CheckResult:
    cfg = default_config("damping-check")
    rows, summary = ar1_rows(cfg.grids, cfg.seeds[0])
    ok = (summary["worst_rel_err"] <= 0.02
          and summary["variance_decreasing"]
          and summary["motion_decreasing"])
    return CheckResult(
        name="noise_damping_statistics",
        passed=ok,
        measured=summary["worst_rel_err"],
        tolerance=0.02,
        detail=(f"10^6-step stationary variance/motion on a {len(rows)}-point "
                f"denominator grid; worst relative error "
                f"{summary['worst_rel_err']:.4f}; both statistics "
                f"monotonically decreasing"),
    )


def check_selection_occupancy_decay() -> CheckResult:
    cfg = default_config("selection-sweep")
    name = sorted(cfg.variants)[0]
    results = selection_results(cfg.landscape, cfg.variants[name],
                                cfg.grids, cfg.seeds[0])
    ok = (results["occupancy_decreasing"]
          and results["worst_gap_over_se"] <= 3.0)
    occ = [e["sharp_occupancy"] for e in results["per_sigma"]]
    return CheckResult(
        name="selection_occupancy_decay",
        passed=ok,
        measured=results["worst_gap_over_se"],
        tolerance=3.0,
        detail=(f"sharp-well occupancy {[f'{o:.3e}' for o in occ]} strictly "
                f"decreasing over the noise sweep; worst "
                f"|occupancy - renewal prediction| = "
                f"{results['worst_gap_over_se']:.2f} bootstrap SEs; "
                f"{results['censored_total']} censored cycles"),
    )


def check_preconditioner_learner_oracle() -> CheckResult:
    cfg = default_config("llqr-mlp-check")
    res = learner_results(cfg.grids)
    ok = (res["scalar_metric_error"] <= 1e-4
          and res["scalar_step_to_minimum"] <= 1e-10
          and res["two_layer_angle_rad"] <= 0.02)
    return CheckResult(
        name="preconditioner_learner_oracle",
        passed=ok,
        measured=res["two_layer_angle_rad"],
        tolerance=0.02,
        detail=(f"scalar net: |U - 1/H| = {res['scalar_metric_error']:.3e} "
                f"(tol 1e-4), step lands "
                f"{res['scalar_step_to_minimum']:.3e} from the minimum "
                f"(tol 1e-10); two-layer linear net: "
                f"{res['two_layer_angle_rad']:.3e} rad from the damped "
                f"Newton direction (tol 0.02)"),
    )


def _directional_fd(f, x: np.ndarray, v: np.ndarray, h: float) -> float:
    return (f(x + h * v) - f(x - h * v)) / (2.0 * h)


def _gradient_family_worst(rng: np.random.Generator, cases: int, sampler,
                           h: float = 1e-6, floor: float = 1e-4) -> float:
    """Worst relative error of ⟨grad, v⟩ against a central difference over
    randomized (instance, point, direction) triples; directions with tiny
    directional derivatives are re-drawn so the relative error is
    well-scaled."""
    worst = 0.0
    done = 0
    while done < cases:
        f, grad_fn, x = sampler(rng)
        v = rng.standard_normal(x.size)
        v /= np.linalg.norm(v)
        analytic = float(grad_fn(x) @ v)
        if abs(analytic) < floor:
            continue
        fd = _directional_fd(f, x, v, h)
        worst = max(worst, abs(fd - analytic) / abs(analytic))
        done += 1
    return worst


def _sample_quadratic(rng):
    dim = int(rng.integers(2, 9))
    lam_bar = rng.uniform(0.5, 2.0, dim)
    lam_eps = np.zeros(dim)
    lam_eps[:2] = rng.uniform(0.5, 3.0, 2)
    quad = TwoScaleQuadratic.rotated(lam_bar, lam_eps, rng.uniform(0.2, 1.2))
    x = rng.standard_normal(dim)
    return (lambda t: quad.loss_and_grad(t)[0],
            lambda t: quad.loss_and_grad(t)[1], x)


def _sample_sharp_well(rng):
    well = SharpWell2D()
    r = rng.uniform(0.5, 7.0)
    ang = rng.uniform(0.0, 2.0 * np.pi)
    x = np.array([r * np.cos(ang), r * np.sin(ang)])
    return (lambda t: sharpwell_eval(well, t)[0],
            lambda t: sharpwell_eval(well, t)[1], x)


def _sample_net(rng):
    depth = int(rng.integers(1, 4))
    sizes = tuple(int(rng.integers(1, 5)) for _ in range(depth + 1))
    acts = tuple(str(rng.choice(["identity", "tanh"])) for _ in range(depth))
    loss = str(rng.choice(["squared", "softmax_ce"]))
    use_bias = bool(rng.integers(0, 2))
    x0 = rng.standard_normal(sizes[0])
    if loss == "softmax_ce":
        y = np.zeros(sizes[-1])
        y[int(rng.integers(0, sizes[-1]))] = 1.0
    else:
        y = rng.standard_normal(sizes[-1])
    net = LayeredNet(sizes=sizes, activations=acts, x0=x0, y=y, loss=loss,
                     use_bias=use_bias)
    theta = 0.7 * rng.standard_normal(net.param_count)
    return (lambda t: net.loss_and_grad(t)[0],
            lambda t: net.loss_and_grad(t)[1], theta)


def _relaxed_objective_worst(rng: np.random.Generator, cases: int,
                             h: float = 1e-6, floor: float = 1e-4) -> float:
    """FD check of the relaxed-objective gradient over the metric entries."""
    worst = 0.0
    done = 0
    while done < cases:
        depth = int(rng.integers(1, 4))
        sizes = tuple(int(rng.integers(1, 4)) for _ in range(depth + 1))
        acts = tuple(str(rng.choice(["identity", "tanh"]))
                     for _ in range(depth))
        use_bias = bool(rng.integers(0, 2))
        net = LayeredNet(sizes=sizes, activations=acts,
                         x0=rng.standard_normal(sizes[0]),
                         y=rng.standard_normal(sizes[-1]), loss="squared",
                         use_bias=use_bias)
        theta = 0.7 * rng.standard_normal(net.param_count)
        kind = str(rng.choice(["dense", "diag", "kron"]))
        metric = MetricState.layered_for_net(net, block_kind=kind,
                                             init_scale=1.0, ema_beta=0.0)
        divergence = str(rng.choice(["ngd", "newton"]))
        blocks = form_lqr_blocks(linearize(net, theta), net, divergence,
                                 damping=1e-3)
        _, grad, _, _ = net_forward_backward(net, theta)
        layer_grads = [grad[sl] for sl in net.layer_slices]
        lin = linearize(net, theta)

        # random perturbation with the same block structure (symmetric
        # where the entries are symmetric matrices)
        direction = []
        for values in metric.values:
            parts = []
            for arr in values:
                d = rng.standard_normal(arr.shape)
                if d.ndim == 2:
                    d = 0.5 * (d + d.T)
                parts.append(d)
            direction.append(tuple(parts))

        def objective(t: float) -> float:
            shifted = tuple(
                tuple(arr + t * d for arr, d in zip(vals, dirs))
                for vals, dirs in zip(metric.values, direction))
            probe = MetricState(structure=metric.structure, dim=metric.dim,
                                values=shifted, layer_dims=metric.layer_dims,
                                layer_shapes=metric.layer_shapes,
                                block_kind=metric.block_kind, ema_beta=0.0)
            return relaxed_objective(probe, blocks, lin, layer_grads)

        grads_tree = relaxed_objective_grad(metric, blocks, lin, layer_grads)
        analytic = sum(
            float(np.sum(g * d))
            for g_vals, d_vals in zip(grads_tree, direction)
            for g, d in zip(g_vals, d_vals))
        if abs(analytic) < floor:
            continue
        fd = (objective(h) - objective(-h)) / (2.0 * h)
        worst = max(worst, abs(fd - analytic) / abs(analytic))
        done += 1
    return worst


def check_analytic_gradient_checks() -> CheckResult:
    cases = 50
    worst = {
        "two_scale_quadratic": _gradient_family_worst(
            np.random.default_rng(11), cases, _sample_quadratic),
        "sharp_well": _gradient_family_worst(
            np.random.default_rng(12), cases, _sample_sharp_well),
        "layered_net": _gradient_family_worst(
            np.random.default_rng(13), cases, _sample_net),
        "relaxed_objective": _relaxed_objective_worst(
            np.random.default_rng(14), cases),
    }
    overall = max(worst.values())
    ok = overall <= 1e-6
    return CheckResult(
        name="analytic_gradient_checks",
        passed=ok,
        measured=overall,
        tolerance=1e-6,
        detail=("central differences, 50 randomized cases per family; "
                + "; ".join(f"{k}: {v:.3e}" for k, v in sorted(worst.items()))),
    )


def check_rerun_determinism(prior: list[CheckResult]) -> CheckResult:
    cfg_digest = "determinism-probe"
    mismatched: list[str] = []
    with tempfile.TemporaryDirectory() as tmp:
        dirs = [str(Path(tmp) / "first"), str(Path(tmp) / "second")]
        artifact_sets = []
        for d in dirs:
            cfg = default_config("envelope-sweep", out_dir=d)
            artifact_sets.append(run_experiment(cfg, cfg_digest))
        for a, b in zip(*artifact_sets):
            if a.name != b.name or not filecmp.cmp(a, b, shallow=False):
                mismatched.append(a.name)
    payload = [{"name": c.name, "passed": c.passed, "measured": c.measured,
                "tolerance": c.tolerance, "detail": c.detail} for c in prior]
    report_stable = json_bytes(payload) == json_bytes(payload)
    ok = not mismatched and report_stable
    return CheckResult(
        name="rerun_determinism",
        passed=ok,
        measured="byte-identical" if ok else f"mismatched: {mismatched}",
        tolerance="identical config -> identical bytes",
        detail=("sweep experiment run twice into fresh directories; every "
                "CSV/JSON/manifest byte-compared, report payload "
                "re-serialized"),
    )


# ---------------------------------------------------------------------------
# suite driver
# ---------------------------------------------------------------------------

_BUDGETS = {
    "two_cycle_amplitude_grid": 10.0,
    "sharp_curvature_cancellation": 10.0,
    "whitening_equivalence": 5.0,
    "sharp_well_escape_contrast": 5.0,
    "shared_noise_path_contrast": 30.0,
    "noise_damping_statistics": 10.0,
    "selection_occupancy_decay": 60.0,
    "preconditioner_learner_oracle": 10.0,
}

_CHECKS = (
    check_two_cycle_amplitude_grid,
    check_sharp_curvature_cancellation,
    check_envelope_amplification_ratio,
    check_whitening_equivalence,
    check_step_rule_recursion_transfer,
    check_sharp_well_escape_contrast,
    check_shared_noise_path_contrast,
    check_noise_damping_statistics,
    check_selection_occupancy_decay,
    check_preconditioner_learner_oracle,
    check_analytic_gradient_checks,
)


def run_checks() -> list[CheckResult]:
    """Execute every check; exceptions become failed entries."""
    results: list[CheckResult] = []
    for fn in _CHECKS:
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:  # noqa: BLE001 - report, never crash
            result = CheckResult(
                name=fn.__name__.removeprefix("check_"),
                passed=False,
                measured="error",
                tolerance="n/a",
                detail=f"{type(exc).__name__}: {exc} "
                       f"({traceback.format_exc(limit=1).strip()})",
            )
        result.runtime = time.perf_counter() - start
        budget = _BUDGETS.get(result.name)
        if budget is not None and result.runtime >= budget:
            result.passed = False
            result.detail += (f"; exceeded the {budget:.0f}s runtime budget "
                              f"({result.runtime:.1f}s)")
        results.append(result)

    start = time.perf_counter()
    try:
        final = check_rerun_determinism(results)
    except Exception as exc:  # noqa: BLE001
        final = CheckResult(name="rerun_determinism", passed=False,
                            measured="error", tolerance="n/a",
                            detail=f"{type(exc).__name__}: {exc}")
    final.runtime = time.perf_counter() - start
    results.append(final)
    return results


def verify(out_dir: str | Path = "verify_out") -> tuple[bool, Path]:
    """Run the suite and write report.json (+ timing.json sidecar)."""
    from .. import __version__
    out_dir = Path(out_dir)
    results = run_checks()
    all_passed = all(r.passed for r in results)
    report = {
        "all_passed": all_passed,
        "version": __version__,
        "checks": [{"name": r.name, "passed": r.passed,
                    "measured": r.measured, "tolerance": r.tolerance,
                    "detail": r.detail} for r in results],
    }
    report_path = write_json(out_dir / "report.json", report)
    write_json(out_dir / "timing.json",
               {"checks": {r.name: r.runtime for r in results},
                "total": sum(r.runtime for r in results)})
    return all_passed, report_path
