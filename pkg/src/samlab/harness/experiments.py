"""Experiment registry: tag → runner, plus the compute kernels they share.

Each runner takes a validated config and an output directory, computes its
results, and emits CSV/JSON artifacts through :mod:`runio` so that reruns
with identical configs are byte-identical.  The compute kernels are separate
functions because the verification suite re-executes them directly against
the closed-form predictions, without going through the filesystem.

The worker-pool path (``--jobs``) dispatches independent (variant, seed)
units to processes; aggregation always folds results in sorted key order,
never completion order.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.signal import lfilter

from .. import numkit
from ..analysis import (Ar1Params, ScalarModeParams, ar1_stationary_stats,
                        hovering_envelope, matrix_recursion_step,
                        occupation_mass, two_cycle_amplitude, unwhiten,
                        vanilla_envelope, whiten, whitened_step)
from ..landscapes import (LayeredNet, SharpWell2D, TwoScaleQuadratic,
                          net_forward_backward)
from ..metric import (InnerSolverConfig, MetricState, apply_metric,
                      learn_preconditioner)
from ..optimizers import OptimizerConfig, OptimizerState, step
from ..stochsim import (NoiseSchedule, RegenerativeConfig, WellSpec,
                        regenerative_simulate, run_noisy_trajectory)
from .config import ConfigError, ExperimentConfig, config_from_mapping
from .runio import write_csv, write_json, write_manifest

# ---------------------------------------------------------------------------
# spec builders
# ---------------------------------------------------------------------------


def build_landscape(spec: Mapping[str, Any]):
    """Resolve a landscape section to a live object (or None)."""
    kind = spec.get("kind", "none")
    if kind == "none":
        return None
    if kind == "sharp_well":
        return SharpWell2D(
            lambda_flat=float(spec.get("lambda_flat", 0.01)),
            ring_depth=float(spec.get("ring_depth", 2.0)),
            ring_radius=float(spec.get("ring_radius", 5.0)),
            ring_width=float(spec.get("ring_width", 0.15)),
        )
    if kind == "two_scale_diagonal":
        return TwoScaleQuadratic.diagonal(spec["lam_bar"], spec["lam_eps"])
    if kind == "two_scale_rotated":
        return TwoScaleQuadratic.rotated(spec["lam_bar"], spec["lam_eps"],
                                         float(spec["angle"]))
    if kind == "two_wells":
        probs = spec.get("entry_probs", (0.5, 0.5))
        return (
            WellSpec(name="flat", entry_prob=float(probs[0]), curvature=0.0,
                     exit_radius=float(spec["flat_exit_radius"])),
            WellSpec(name="sharp", entry_prob=float(probs[1]),
                     curvature=float(spec["sharp_curvature"]),
                     exit_radius=float(spec["sharp_exit_radius"])),
        )
    raise ConfigError(f"unknown landscape kind {kind!r}")


def build_metric(spec: Mapping[str, Any], dim: int,
                 landscape=None) -> MetricState:
    """Resolve a metric section against a parameter dimension."""
    kind = spec.get("kind", "identity")
    if kind in ("identity", "none"):
        return MetricState.identity(dim)
    if kind == "scaled_identity":
        return MetricState.scaled_identity(dim, float(spec["scale"]))
    if kind == "diagonal":
        return MetricState.diagonal(np.asarray(spec["entries"], dtype=float))
    if kind == "from_average":
        if not isinstance(landscape, TwoScaleQuadratic):
            raise ConfigError(
                "metric kind 'from_average' needs a two-scale quadratic")
        return MetricState.from_quadratic(landscape)
    raise ConfigError(f"unknown metric kind {kind!r}")


def build_optimizer(spec: Mapping[str, Any]) -> OptimizerConfig:
    """Resolve one variant section to an optimizer config."""
    kwargs = {"rule": spec["rule"], "lr": float(spec["lr"])}
    for key in ("rho", "momentum", "fsam_lambda", "weight_decay", "eps_norm"):
        if key in spec:
            kwargs[key] = float(spec[key])
    for key in ("fsam_transport",):
        if key in spec:
            kwargs[key] = spec[key]
    for key in ("noise_pre_transport",):
        if key in spec:
            kwargs[key] = bool(spec[key])
    try:
        return OptimizerConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid optimizer variant: {exc}") from exc


# ---------------------------------------------------------------------------
# scalar-map envelopes (grid + sharp-component sweep)
# ---------------------------------------------------------------------------


def iterate_scalar_grid(a: np.ndarray, b: np.ndarray, z0: float, steps: int,
                        tail_fraction: float = 0.1) -> np.ndarray:
    """Tail max |z| of z' = a·z − b·sign(z), vectorized over grid cells.

    Elementwise identical to ``analysis.scalar_map_iterate`` followed by
    ``analysis.measured_envelope``; this form exists so a hundred grid cells
    iterate in one pass.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    z = np.full(a.shape, float(z0))
    tail_start = int(np.floor(steps * (1.0 - tail_fraction)))
    envelope = np.zeros(a.shape)
    for t in range(1, steps + 1):
        z = a * z - b * np.sign(z)
        if t >= tail_start:
            np.maximum(envelope, np.abs(z), out=envelope)
    return envelope


def envelope_grid_rows(grids: Mapping[str, Any]) -> tuple[list, float]:
    """Measured vs predicted two-cycle amplitude over the stable grid."""
    etas = [float(v) for v in grids["eta"]]
    rhos = [float(v) for v in grids["rho"]]
    mus = [float(v) for v in grids["mu"]]
    lams = [float(v) for v in grids["lam_bar"]]
    steps = int(grids.get("map_steps", 100_000))
    z0 = float(grids.get("z0", 1.0))
    tail = float(grids.get("tail_fraction", 0.1))

    params = [ScalarModeParams(eta=e, rho=r, mu=m, lam_bar=lb)
              for e in etas for r in rhos for m in mus for lb in lams]
    a = np.array([p.a for p in params])
    b = np.array([p.b for p in params])
    measured = iterate_scalar_grid(a, b, z0, steps, tail)

    rows, worst = [], 0.0
    for p, av, bv, mv in zip(params, a, b, measured):
        predicted = two_cycle_amplitude(p)
        err = abs(float(mv) - predicted)
        worst = max(worst, err)
        rows.append((p.eta, p.rho, p.mu, p.lam_bar, float(av), float(bv),
                     float(mv), predicted, err))
    return rows, worst


def cancellation_rows(grids: Mapping[str, Any]) -> tuple[list, dict]:
    """Sweep the sharp-component curvature at fixed average curvature.

    For each cell the preconditioned map (a = 1−ημ, b = ηρμ/√λ̄) and the
    raw map (a = 1−ηλ, b = ηρλ) are iterated and compared against their
    closed forms; localizing cells additionally have the measured envelope
    rescaled by (2−ημ)/(ημ), which should land exactly on ρ/√λ̄.  The
    divergent cell documents loss of localization instead.
    """
    eta = float(grids.get("cancel_eta", 0.01))
    rho = float(grids.get("cancel_rho", 0.1))
    lam_bar = float(grids.get("cancel_lam_bar", 1.0))
    lam_eps = [float(v) for v in grids.get("lam_eps", (0.0, 1.0, 100.0, 10_000.0))]
    steps = int(grids.get("map_steps", 100_000))
    div_steps = int(grids.get("divergence_steps", 2000))
    z0 = float(grids.get("z0", 1.0))
    tail = float(grids.get("tail_fraction", 0.1))
    threshold = float(grids.get("divergence_threshold", 1e6))

    rows = []
    summary = {"localized_worst_err": 0.0, "leading_scale_worst_err": 0.0,
               "raw_worst_err": 0.0, "divergent_cells": 0,
               "divergence_confirmed": True}
    for le in lam_eps:
        lam = lam_bar + le
        mu = lam / lam_bar
        a_pre = 1.0 - eta * mu
        b_pre = eta * rho * mu / np.sqrt(lam_bar)
        a_raw = 1.0 - eta * lam
        b_raw = eta * rho * lam
        localized = abs(a_pre) < 1.0
        if localized:
            m_pre = float(iterate_scalar_grid(np.array([a_pre]),
                                              np.array([b_pre]),
                                              z0, steps, tail)[0])
            m_raw = float(iterate_scalar_grid(np.array([a_raw]),
                                              np.array([b_raw]),
                                              z0, steps, tail)[0])
            p_pre = b_pre / (1.0 + a_pre)
            p_raw = b_raw / (1.0 + a_raw)
            scale_err = abs(m_pre * (2.0 - eta * mu) / (eta * mu)
                            - rho / np.sqrt(lam_bar))
            summary["localized_worst_err"] = max(
                summary["localized_worst_err"], abs(m_pre - p_pre))
            summary["raw_worst_err"] = max(
                summary["raw_worst_err"], abs(m_raw - p_raw))
            summary["leading_scale_worst_err"] = max(
                summary["leading_scale_worst_err"], scale_err)
        else:
            # the iterate is expected to blow up here; overflow to inf is
            # the documented outcome, not an anomaly
            with np.errstate(over="ignore"):
                m_pre = float(iterate_scalar_grid(np.array([a_pre]),
                                                  np.array([b_pre]),
                                                  z0, div_steps, tail)[0])
                m_raw = float(iterate_scalar_grid(np.array([a_raw]),
                                                  np.array([b_raw]),
                                                  z0, div_steps, tail)[0])
            p_pre = float("nan")
            p_raw = float("nan")
            scale_err = float("nan")
            summary["divergent_cells"] += 1
            if not (m_pre > threshold and m_raw > threshold):
                summary["divergence_confirmed"] = False
        rows.append((le, mu, a_pre, m_pre, p_pre,
                     abs(m_pre - p_pre) if localized else float("nan"),
                     scale_err, a_raw, m_raw, p_raw,
                     abs(m_raw - p_raw) if localized else float("nan"),
                     localized))
    return rows, summary


def amplification_rows(grids: Mapping[str, Any]) -> tuple[list, float]:
    """Envelope ratio vs the inverse-root-curvature prediction."""
    rho = float(grids.get("rho", 0.1))
    lams = [float(v) for v in grids["lam_bar_eps"]]
    rows, worst = [], 0.0
    for lam in lams:
        hov = hovering_envelope(rho, lam)
        van = vanilla_envelope(rho)
        ratio = hov / van
        predicted = lam ** -0.5
        diff = abs(ratio - predicted)
        worst = max(worst, diff)
        rows.append((lam, hov, van, ratio, predicted, diff))
    return rows, worst


# ---------------------------------------------------------------------------
# randomized quadratic instances (whitening + step-rule transfer)
# ---------------------------------------------------------------------------


def _random_two_scale(rng: np.random.Generator,
                      grids: Mapping[str, Any]) -> TwoScaleQuadratic:
    dim = int(rng.integers(int(grids.get("dim_min", 2)),
                           int(grids.get("dim_max", 8)) + 1))
    lb_lo, lb_hi = (float(v) for v in grids.get("lam_bar_range", (0.5, 2.0)))
    le_lo, le_hi = (float(v) for v in grids.get("lam_eps_range", (0.5, 3.0)))
    n_sharp = min(int(grids.get("sharp_coords", 2)), dim)
    lam_bar = rng.uniform(lb_lo, lb_hi, dim)
    lam_eps = np.zeros(dim)
    lam_eps[:n_sharp] = rng.uniform(le_lo, le_hi, n_sharp)
    angle = rng.uniform(float(grids.get("angle_min", 0.2)),
                        float(grids.get("angle_max", 1.2)))
    return TwoScaleQuadratic.rotated(lam_bar, lam_eps, angle)


def whitening_rows(grids: Mapping[str, Any], seed: int) -> tuple[list, float]:
    """Direct displacement recursion vs whitened recursion, per instance.

    The step size is set per instance to 0.05 divided by the largest
    perceived sharpness, keeping every run in the contractive descent phase;
    at the hovering floor the probe term's local Jacobian exceeds one and
    mathematically identical recursions drift apart in floating point.
    """
    rng = np.random.default_rng(seed)
    n = int(grids.get("instances", 20))
    steps = int(grids.get("steps", 100))
    rho = float(grids.get("rho", 1e-4))
    eta_scale = float(grids.get("eta_scale", 0.05))
    rows, worst = [], 0.0
    for k in range(n):
        quad = _random_two_scale(rng, grids)
        a_mat = quad.normalized_curvature
        mu_max = float(numkit.sym_eig(a_mat).eigenvalues[-1])
        eta = eta_scale / mu_max
        u = MetricState.from_quadratic(quad)
        e = rng.standard_normal(quad.dim)
        y = whiten(quad, e.copy())
        dev = 0.0
        for _ in range(steps):
            e = matrix_recursion_step(quad, u, eta, rho, e)
            y = whitened_step(a_mat, eta, rho, y)
            dev = max(dev, float(np.max(np.abs(e - unwhiten(quad, y)))))
        worst = max(worst, dev)
        rows.append((k, quad.dim, eta, dev))
    return rows, worst


def transfer_rows(grids: Mapping[str, Any], seed: int) -> tuple[list, float]:
    """Optimizer iterates vs the closed-form displacement recursion.

    Runs the metric probe-and-transport rule on random quadratics and
    replays the recursion alongside; also tallies the mean squared dual
    gradient norm gᵀUg, the quantity the guarantee for the relaxed
    preconditioner objective is stated in.
    """
    rng = np.random.default_rng(seed)
    n = int(grids.get("instances", 20))
    steps = int(grids.get("steps", 100))
    rho = float(grids.get("rho", 0.1))
    eta_scale = float(grids.get("eta_scale", 0.9))
    rows, worst = [], 0.0
    for k in range(n):
        quad = _random_two_scale(rng, grids)
        mu_max = float(numkit.sym_eig(quad.normalized_curvature).eigenvalues[-1])
        eta = eta_scale / mu_max
        u = MetricState.from_quadratic(quad)
        opt = OptimizerConfig(rule="lqr_sam", lr=eta, rho=rho)
        state = OptimizerState.zeros(quad.dim)
        theta = rng.standard_normal(quad.dim)
        e = theta.copy()
        dev = 0.0
        sq_dual = 0.0
        for _ in range(steps):
            res = step(opt, state, u, quad, theta)
            theta, state = res.theta, res.state
            e = matrix_recursion_step(quad, u, eta, rho, e)
            dev = max(dev, float(np.max(np.abs(theta - e))))
            sq_dual += res.grad_dual_norm ** 2
        worst = max(worst, dev)
        rows.append((k, quad.dim, eta, dev, sq_dual / steps))
    return rows, worst


# ---------------------------------------------------------------------------
# trajectory toys (sharp-well escape, shared-noise path comparison)
# ---------------------------------------------------------------------------


def _resolve_start(grids: Mapping[str, Any],
                   landscape: SharpWell2D) -> np.ndarray:
    start = grids.get("start", "ring-min")
    if isinstance(start, str):
        if start != "ring-min":
            raise ConfigError(f"unknown start spec {start!r}")
        return np.array([landscape.ring_min_radius, 0.0])
    return np.asarray([float(v) for v in start], dtype=float)


def _trajectory_unit(args):
    """Worker: one (variant, seed) trajectory run.  Top-level for pickling."""
    (landscape_spec, metric_spec, variant_spec, grids, seed, horizon) = args
    landscape = build_landscape(landscape_spec)
    metric = build_metric(metric_spec, 2)
    opt = build_optimizer(variant_spec)
    theta0 = _resolve_start(grids, landscape)
    schedule = NoiseSchedule(seed=seed,
                             variance=float(grids.get("noise_variance", 0.0)),
                             dim=2)
    stride = int(grids.get("snapshot_stride", 1))
    return run_noisy_trajectory(landscape, opt, metric, theta0, schedule,
                                horizon, region_fn=landscape.region,
                                snapshot_stride=stride)


def run_trajectory_suite(cfg: ExperimentConfig,
                         jobs: int = 1) -> dict[tuple[str, int], Any]:
    """All (variant, seed) trajectory records, keyed and sorted."""
    horizon = int(cfg.horizons.get("steps", 1))
    keys = sorted((name, seed) for name in cfg.variants for seed in cfg.seeds)
    units = [(dict(cfg.landscape), dict(cfg.metric),
              dict(cfg.variants[name]), dict(cfg.grids), seed, horizon)
             for name, seed in keys]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_trajectory_unit, units))
    else:
        records = [_trajectory_unit(u) for u in units]
    return dict(zip(keys, records))


def _write_trajectory_csv(path: Path, record) -> Path:
    header = ["step", "x", "y", "loss", "grad_norm", "grad_dual_norm",
              "probe_norm", "path_length", "region"]
    snap_lookup = {int(s): record.snapshots[i]
                   for i, s in enumerate(record.snapshot_steps)}
    rows = []
    for i, t in enumerate(record.steps):
        snap = snap_lookup.get(int(t))
        x, y = (float(snap[0]), float(snap[1])) if snap is not None else ("", "")
        rows.append((int(t), x, y, float(record.losses[i]),
                     float(record.grad_norms[i]), float(record.dual_norms[i]),
                     float(record.probe_norms[i]),
                     float(record.path_lengths[i]), record.regions[i]))
    return write_csv(path, header, rows)


def _trajectory_summary(records: dict[tuple[str, int], Any]) -> list[dict]:
    out = []
    for (name, seed), rec in sorted(records.items()):
        out.append({
            "variant": name,
            "seed": seed,
            "sigma_sq": rec.meta.get("sigma_sq", 0.0),
            "exit_step": rec.exit_step,
            "path_length": float(rec.path_lengths[-1]),
            "final_region": rec.final_region,
            "final_radius": float(np.linalg.norm(rec.final_theta)),
        })
    return out


def run_escape_toy(cfg: ExperimentConfig, out_dir: Path,
                   jobs: int = 1) -> list[Path]:
    records = run_trajectory_suite(cfg, jobs)
    for rec in records.values():
        rec.meta["sigma_sq"] = float(cfg.grids.get("noise_variance", 0.0))
    artifacts = []
    for (name, seed), rec in sorted(records.items()):
        suffix = f"_{name}" if len(cfg.seeds) == 1 else f"_{name}_seed{seed}"
        artifacts.append(_write_trajectory_csv(
            out_dir / f"trajectory{suffix}.csv", rec))
    artifacts.append(write_json(out_dir / "summary.json",
                                {"runs": _trajectory_summary(records)}))
    return artifacts


def run_noise_toy(cfg: ExperimentConfig, out_dir: Path,
                  jobs: int = 1) -> list[Path]:
    return run_escape_toy(cfg, out_dir, jobs)


# ---------------------------------------------------------------------------
# noise-driven linear mode (stationary variance / motion)
# ---------------------------------------------------------------------------


def ar1_rows(grids: Mapping[str, Any], seed: int) -> tuple[list, dict]:
    """Simulated vs predicted stationary statistics on a shared stream."""
    eta = float(grids.get("eta", 0.1))
    lam = float(grids.get("lam", 1.0))
    tau_sq = float(grids.get("tau_sq", 1.0))
    d_grid = [float(v) for v in grids.get("d", (1.0, 2.0, 4.0))]
    steps = int(grids.get("steps", 1_000_000))
    burn = int(grids.get("burn_in", 10_000))
    sched = NoiseSchedule(seed=seed, variance=tau_sq, dim=1)
    xi = sched.noise_block(0, steps + burn)[:, 0]
    rows = []
    worst = 0.0
    variances, motions = [], []
    for d in d_grid:
        p = Ar1Params(eta=eta, lam=lam, d=d, tau_sq=tau_sq)
        var_th, mot_th = ar1_stationary_stats(p)
        a = 1.0 - eta * lam / d
        z = lfilter([-eta / d], [1.0, -a], xi)[burn:]
        var_m = float(np.mean(z * z))
        mot_m = float(np.mean(np.diff(z) ** 2))
        ev = abs(var_m - var_th) / var_th
        em = abs(mot_m - mot_th) / mot_th
        worst = max(worst, ev, em)
        variances.append(var_m)
        motions.append(mot_m)
        rows.append((d, var_th, var_m, ev, mot_th, mot_m, em))
    summary = {
        "worst_rel_err": worst,
        "variance_decreasing": bool(np.all(np.diff(variances) < 0)),
        "motion_decreasing": bool(np.all(np.diff(motions) < 0)),
    }
    return rows, summary


def run_damping_check(cfg: ExperimentConfig, out_dir: Path,
                      jobs: int = 1) -> list[Path]:
    rows, summary = ar1_rows(cfg.grids, cfg.seeds[0])
    header = ["d", "variance_predicted", "variance_measured",
              "variance_rel_err", "motion_predicted", "motion_measured",
              "motion_rel_err"]
    return [write_csv(out_dir / "ar1.csv", header, rows),
            write_json(out_dir / "summary.json", summary)]


# ---------------------------------------------------------------------------
# regenerative two-well selection
# ---------------------------------------------------------------------------


def bootstrap_mass_gap(stats, entry_probs: np.ndarray, n_boot: int,
                       boot_seed: int) -> float:
    """SE of (measured sharp occupancy − renewal-reward prediction) under
    cycle resampling."""
    rng = np.random.default_rng(boot_seed)
    n = stats.cycle_steps.size
    n_wells = entry_probs.size
    gaps = np.empty(n_boot)
    for b in range(n_boot):
        ix = rng.integers(0, n, n)
        wells, steps_b = stats.cycle_wells[ix], stats.cycle_steps[ix]
        occ = np.array([steps_b[wells == m].sum() for m in range(n_wells)],
                       dtype=float)
        tau = np.array([steps_b[wells == m].mean()
                        if np.any(wells == m) else np.nan
                        for m in range(n_wells)])
        if np.any(np.isnan(tau)) or occ.sum() == 0:
            gaps[b] = np.nan
            continue
        occ /= occ.sum()
        gaps[b] = occ[-1] - occupation_mass(entry_probs, tau)[-1]
    return float(np.nanstd(gaps))


def selection_results(landscape_spec: Mapping[str, Any],
                      variant_spec: Mapping[str, Any],
                      grids: Mapping[str, Any], seed: int) -> dict:
    """Occupancy sweep over noise scales with renewal-reward comparison."""
    wells = build_landscape(landscape_spec)
    if not (isinstance(wells, tuple) and
            all(isinstance(w, WellSpec) for w in wells)):
        raise ConfigError("selection sweep needs a two-well landscape")
    opt = build_optimizer(variant_spec)
    sigmas = [float(v) for v in grids.get("sigma", (1e-2, 1e-3, 1e-4))]
    cycles = int(grids.get("cycles", 400))
    max_steps = int(grids.get("max_steps_per_cycle", 300_000))
    n_boot = int(grids.get("bootstrap_resamples", 200))
    boot_seed = int(grids.get("bootstrap_seed", 123))
    entry_probs = np.array([w.entry_prob for w in wells])

    per_sigma = []
    for sigma in sigmas:
        reg = RegenerativeConfig(wells=wells, noise_scale=sigma,
                                 cycles=cycles, max_steps_per_cycle=max_steps,
                                 seed=seed)
        st = regenerative_simulate(reg, opt)
        predicted = occupation_mass(entry_probs, st.mean_exit_times)
        se = bootstrap_mass_gap(st, entry_probs, n_boot, boot_seed)
        gap = float(st.occupancy[-1] - predicted[-1])
        per_sigma.append({
            "sigma": sigma,
            "stats": st,
            "predicted_mass": predicted,
            "sharp_occupancy": float(st.occupancy[-1]),
            "sharp_predicted": float(predicted[-1]),
            "gap": gap,
            "bootstrap_se": se,
            "gap_over_se": abs(gap) / se if se > 0 else 0.0,
            "censored_total": int(st.censored.sum()),
        })
    occ = [entry["sharp_occupancy"] for entry in per_sigma]
    return {
        "per_sigma": per_sigma,
        "occupancy_decreasing": bool(np.all(np.diff(occ) < 0)),
        "worst_gap_over_se": max(e["gap_over_se"] for e in per_sigma),
        "censored_total": sum(e["censored_total"] for e in per_sigma),
    }


def run_selection_sweep(cfg: ExperimentConfig, out_dir: Path,
                        jobs: int = 1) -> list[Path]:
    name = sorted(cfg.variants)[0]
    results = selection_results(cfg.landscape, cfg.variants[name], cfg.grids,
                                cfg.seeds[0])
    header = ["sigma", "well", "entry_prob", "visits", "mean_exit_steps",
              "mean_path_length", "occupancy", "predicted_mass", "censored"]
    rows = []
    for entry in results["per_sigma"]:
        st = entry["stats"]
        for m, wname in enumerate(st.well_names):
            rows.append((entry["sigma"], wname, float(st.entry_probs[m]),
                         int(st.exit_times[m].size),
                         float(st.mean_exit_times[m]),
                         float(st.mean_path_lengths[m]),
                         float(st.occupancy[m]),
                         float(entry["predicted_mass"][m]),
                         int(st.censored[m])))
    summary = {
        "occupancy_decreasing": results["occupancy_decreasing"],
        "worst_gap_over_se": results["worst_gap_over_se"],
        "censored_total": results["censored_total"],
        "per_sigma": [{k: entry[k] for k in
                       ("sigma", "sharp_occupancy", "sharp_predicted", "gap",
                        "bootstrap_se", "gap_over_se", "censored_total")}
                      for entry in results["per_sigma"]],
    }
    return [write_csv(out_dir / "selection.csv", header, rows),
            write_json(out_dir / "summary.json", summary)]


# ---------------------------------------------------------------------------
# preconditioner-learner oracle checks
# ---------------------------------------------------------------------------


def learner_results(grids: Mapping[str, Any]) -> dict:
    """Scalar-net exactness and the two-layer angle to damped Newton.

    The two-layer target is built at a near-zero residual: with a nonzero
    residual the relaxed objective's minimizer is the damped Gauss-Newton
    direction, which only coincides with damped Newton when the residual
    term of the Hessian is negligible against the damping.
    """
    # scalar linear net: curvature x² = 4, exact inverse 0.25, minimum at 1
    net1 = LayeredNet(sizes=(1, 1), activations=("identity",),
                      x0=np.array([2.0]), y=np.array([2.0]), loss="squared",
                      use_bias=False)
    theta1 = np.array([2.0])
    cfg1 = InnerSolverConfig(
        inner_steps=int(grids.get("scalar_inner_steps", 400)),
        inner_lr=float(grids.get("scalar_inner_lr", 0.02)),
        momentum=float(grids.get("scalar_momentum", 0.9)),
        damping=0.0)
    st1 = learn_preconditioner(MetricState.dense(np.eye(1), ema_beta=0.0),
                               net1, theta1, "ngd", cfg1)
    u_val = float(st1.values[0][0, 0])
    _, g1, _, _ = net_forward_backward(net1, theta1)
    theta_plus = theta1 - apply_metric(st1, g1)
    scalar_u_err = abs(u_val - 0.25)
    scalar_step_err = abs(float(theta_plus[0]) - 1.0)

    # two-layer linear net, residual far below the damping scale
    rng = np.random.default_rng(int(grids.get("two_layer_seed", 5)))
    w1 = rng.standard_normal((3, 2))
    w2 = rng.standard_normal((2, 3))
    x0 = np.array([0.8, -0.5])
    resid = float(grids.get("residual_scale", 1e-6)) * np.array([0.6, 0.8])
    net2 = LayeredNet(sizes=(2, 3, 2), activations=("identity", "identity"),
                      x0=x0, y=w2 @ (w1 @ x0) - resid, loss="squared",
                      use_bias=False)
    theta2 = np.concatenate([w1.ravel(), w2.ravel()])
    _, g2, _, _ = net_forward_backward(net2, theta2)

    fd = float(grids.get("fd_step", 1e-6))
    n = theta2.size
    hess = np.empty((n, n))
    for j in range(n):
        tp, tm = theta2.copy(), theta2.copy()
        tp[j] += fd
        tm[j] -= fd
        hess[:, j] = (net_forward_backward(net2, tp)[1]
                      - net_forward_backward(net2, tm)[1]) / (2.0 * fd)
    hess = 0.5 * (hess + hess.T)
    damping = float(grids.get("two_layer_damping", 1e-3))
    newton_dir = np.linalg.solve(hess + damping * np.eye(n), g2)

    cfg2 = InnerSolverConfig(
        inner_steps=int(grids.get("two_layer_steps", 5000)),
        inner_lr=float(grids.get("two_layer_lr", 1e12)),
        momentum=float(grids.get("two_layer_momentum", 0.95)),
        damping=damping)
    st2 = learn_preconditioner(
        MetricState.layered_for_net(net2, block_kind="dense", ema_beta=0.0),
        net2, theta2, "newton", cfg2)
    update = apply_metric(st2, g2)
    cosang = float(update @ newton_dir
                   / (np.linalg.norm(update) * np.linalg.norm(newton_dir)))
    angle = float(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return {
        "scalar_metric_error": scalar_u_err,
        "scalar_step_to_minimum": scalar_step_err,
        "two_layer_angle_rad": angle,
    }


def run_llqr_mlp_check(cfg: ExperimentConfig, out_dir: Path,
                       jobs: int = 1) -> list[Path]:
    results = learner_results(cfg.grids)
    rows = [(k, v) for k, v in sorted(results.items())]
    return [write_csv(out_dir / "learner.csv", ["check", "measured"], rows),
            write_json(out_dir / "summary.json", results)]


# ---------------------------------------------------------------------------
# remaining runners
# ---------------------------------------------------------------------------


def run_envelope_sweep(cfg: ExperimentConfig, out_dir: Path,
                       jobs: int = 1) -> list[Path]:
    grid_rows, worst = envelope_grid_rows(cfg.grids)
    sweep_rows, sweep_summary = cancellation_rows(cfg.grids)
    a1 = write_csv(out_dir / "envelope_grid.csv",
                   ["eta", "rho", "mu", "lam_bar", "a", "b", "measured",
                    "predicted", "abs_err"], grid_rows)
    a2 = write_csv(out_dir / "cancellation.csv",
                   ["lam_eps", "mu", "pre_a", "pre_measured", "pre_predicted",
                    "pre_abs_err", "leading_scale_err", "raw_a",
                    "raw_measured", "raw_predicted", "raw_abs_err",
                    "localized"], sweep_rows)
    a3 = write_json(out_dir / "summary.json",
                    {"grid_cells": len(grid_rows),
                     "grid_worst_abs_err": worst,
                     "cancellation": sweep_summary})
    return [a1, a2, a3]


def run_amplification_sweep(cfg: ExperimentConfig, out_dir: Path,
                            jobs: int = 1) -> list[Path]:
    rows, worst = amplification_rows(cfg.grids)
    return [write_csv(out_dir / "amplification.csv",
                      ["lam_bar_eps", "preconditioned_envelope",
                       "raw_envelope", "ratio", "predicted", "abs_diff"],
                      rows),
            write_json(out_dir / "summary.json",
                       {"worst_abs_diff": worst, "cells": len(rows)})]


def run_whitening_check(cfg: ExperimentConfig, out_dir: Path,
                        jobs: int = 1) -> list[Path]:
    rows, worst = whitening_rows(cfg.grids, cfg.seeds[0])
    return [write_csv(out_dir / "whitening.csv",
                      ["instance", "dim", "eta", "max_abs_dev"], rows),
            write_json(out_dir / "summary.json",
                       {"worst_abs_dev": worst, "instances": len(rows)})]


def run_transfer_diagnostic(cfg: ExperimentConfig, out_dir: Path,
                            jobs: int = 1) -> list[Path]:
    rows, worst = transfer_rows(cfg.grids, cfg.seeds[0])
    return [write_csv(out_dir / "transfer.csv",
                      ["instance", "dim", "eta", "max_step_dev",
                       "mean_sq_dual_norm"], rows),
            write_json(out_dir / "summary.json",
                       {"worst_step_dev": worst, "instances": len(rows)})]


RUNNERS = {
    "escape-toy": run_escape_toy,
    "noise-toy": run_noise_toy,
    "envelope-sweep": run_envelope_sweep,
    "amplification-sweep": run_amplification_sweep,
    "whitening-check": run_whitening_check,
    "damping-check": run_damping_check,
    "selection-sweep": run_selection_sweep,
    "llqr-mlp-check": run_llqr_mlp_check,
    "transfer-diagnostic": run_transfer_diagnostic,
}


def run_experiment(cfg: ExperimentConfig, config_digest: str,
                   jobs: int = 1) -> list[Path]:
    """Execute one experiment and write its manifest."""
    from .. import __version__
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = RUNNERS[cfg.tag](cfg, out_dir, jobs)
    write_manifest(out_dir, cfg.tag, cfg.seeds, config_digest, artifacts,
                   __version__)
    return artifacts + [out_dir / "manifest.json"]


# ---------------------------------------------------------------------------
# canonical experiment definitions (mirrored by configs/*.toml)
# ---------------------------------------------------------------------------

_ESCAPE_VARIANTS = {
    "sgdm": {"rule": "sgdm", "lr": 6.75e-4, "momentum": 0.9},
    "lqr": {"rule": "lqr", "lr": 6.75e-4},
    "sam": {"rule": "sam", "lr": 6.75e-4, "rho": 0.6},
    "lqr_sam": {"rule": "lqr_sam", "lr": 6.75e-4, "rho": 0.6},
}

_NOISE_VARIANTS = {
    "sgdm": {"rule": "sgdm", "lr": 1e-3, "momentum": 0.9},
    "lqr": {"rule": "lqr", "lr": 1e-3},
    "sam": {"rule": "sam", "lr": 1e-3, "rho": 1.0},
    "lqr_sam": {"rule": "lqr_sam", "lr": 1e-3, "rho": 1.0},
}

DEFAULTS: dict[str, dict] = {
    "escape-toy": {
        "tag": "escape-toy",
        "seeds": [0],
        "landscape": {"kind": "sharp_well", "lambda_flat": 0.01,
                      "ring_depth": 2.0, "ring_radius": 5.0,
                      "ring_width": 0.15},
        "metric": {"kind": "scaled_identity", "scale": 25.0},
        "variants": _ESCAPE_VARIANTS,
        "horizons": {"steps": 20_000},
        "grids": {"start": [4.8, 0.0], "noise_variance": 0.0,
                  "snapshot_stride": 1},
    },
    "noise-toy": {
        "tag": "noise-toy",
        "seeds": [0, 1, 2, 3, 4],
        "landscape": {"kind": "sharp_well", "lambda_flat": 4.0,
                      "ring_depth": 12.0, "ring_radius": 5.0,
                      "ring_width": 0.15},
        "metric": {"kind": "scaled_identity", "scale": 0.25},
        "variants": _NOISE_VARIANTS,
        "horizons": {"steps": 4000},
        "grids": {"start": "ring-min", "noise_variance": 1e-9,
                  "snapshot_stride": 1},
    },
    "envelope-sweep": {
        "tag": "envelope-sweep",
        "seeds": [0],
        "variants": {"llqr_sam": {"rule": "lqr_sam", "lr": 0.01},
                     "sam": {"rule": "sam", "lr": 0.01}},
        "grids": {"eta": [0.001, 0.003, 0.01], "rho": [0.05, 0.1, 0.2],
                  "mu": [1.0, 2.0, 4.0, 8.0], "lam_bar": [0.5, 1.0, 2.0],
                  "map_steps": 100_000, "tail_fraction": 0.1, "z0": 1.0,
                  "cancel_eta": 0.01, "cancel_rho": 0.1,
                  "cancel_lam_bar": 1.0,
                  "lam_eps": [0.0, 1.0, 100.0, 10_000.0],
                  "divergence_steps": 2000, "divergence_threshold": 1e6},
    },
    "amplification-sweep": {
        "tag": "amplification-sweep",
        "seeds": [0],
        "variants": {"llqr_sam": {"rule": "lqr_sam", "lr": 0.01},
                     "sam": {"rule": "sam", "lr": 0.01}},
        "grids": {"rho": 0.1, "lam_bar_eps": [1.0, 0.04, 0.01]},
    },
    "whitening-check": {
        "tag": "whitening-check",
        "seeds": [0],
        "variants": {"llqr_sam": {"rule": "lqr_sam", "lr": 0.01}},
        "grids": {"instances": 20, "dim_min": 2, "dim_max": 8, "steps": 100,
                  "rho": 1e-4, "eta_scale": 0.05,
                  "lam_bar_range": [0.5, 2.0], "lam_eps_range": [0.5, 3.0],
                  "sharp_coords": 2, "angle_min": 0.2, "angle_max": 1.2},
    },
    "damping-check": {
        "tag": "damping-check",
        "seeds": [0],
        "variants": {"llqr": {"rule": "lqr", "lr": 0.1}},
        "grids": {"eta": 0.1, "lam": 1.0, "tau_sq": 1.0, "d": [1.0, 2.0, 4.0],
                  "steps": 1_000_000, "burn_in": 10_000},
    },
    "selection-sweep": {
        "tag": "selection-sweep",
        "seeds": [0],
        "landscape": {"kind": "two_wells", "flat_exit_radius": 1.732e-3,
                      "sharp_curvature": 100.0, "sharp_exit_radius": 0.5,
                      "entry_probs": [0.5, 0.5]},
        "variants": {"sam": {"rule": "sam", "lr": 0.1, "rho": 0.1}},
        "grids": {"sigma": [1e-2, 1e-3, 1e-4], "cycles": 400,
                  "max_steps_per_cycle": 300_000, "bootstrap_resamples": 200,
                  "bootstrap_seed": 123},
    },
    "llqr-mlp-check": {
        "tag": "llqr-mlp-check",
        "seeds": [0],
        "variants": {"llqr": {"rule": "lqr", "lr": 1.0}},
        "grids": {"scalar_inner_steps": 400, "scalar_inner_lr": 0.02,
                  "scalar_momentum": 0.9, "two_layer_seed": 5,
                  "two_layer_steps": 5000, "two_layer_lr": 1e12,
                  "two_layer_momentum": 0.95, "two_layer_damping": 1e-3,
                  "residual_scale": 1e-6, "fd_step": 1e-6},
    },
    "transfer-diagnostic": {
        "tag": "transfer-diagnostic",
        "seeds": [0],
        "variants": {"llqr_sam": {"rule": "lqr_sam", "lr": 0.01}},
        "grids": {"instances": 20, "dim_min": 2, "dim_max": 6, "steps": 100,
                  "rho": 0.1, "eta_scale": 0.9, "lam_bar_range": [0.5, 2.0],
                  "lam_eps_range": [0.5, 3.0], "sharp_coords": 2,
                  "angle_min": 0.2, "angle_max": 1.2},
    },
}


def default_config(tag: str, out_dir: str | None = None) -> ExperimentConfig:
    """The canonical config for a tag (what configs/<tag>.toml encodes)."""
    if tag not in DEFAULTS:
        raise ConfigError(f"unknown experiment tag {tag!r}")
    raw = {k: v for k, v in DEFAULTS[tag].items()}
    if out_dir is not None:
        raw = dict(raw, out_dir=out_dir)
    return config_from_mapping(raw)
