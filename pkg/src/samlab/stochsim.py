"""Noise schedules, noisy trajectories, and regenerative well-hopping.

The noise source is counter-based: each Gaussian draw is a pure function of
(seed, step, coordinate), computed by integer hashing plus the inverse normal
CDF.  Two optimizer variants given the same schedule therefore consume
bit-identical noise at every step — no state to advance, nothing to keep in
sync — which is what makes paired path-length comparisons meaningful.

``run_noisy_trajectory`` drives any step rule over any landscape while
logging losses, gradient norms, probe sizes, cumulative path length, region
tags and the first exit from a starting region.  ``regenerative_simulate``
implements the well-hopping idealization: repeatedly draw a well, start near
its floor, run noisy probe-and-step dynamics until the iterate leaves the
well's exit radius, and tally exit times and occupancy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .metric import MetricState
from .optimizers import OptimizerConfig, OptimizerState, step

# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(x: np.ndarray) -> np.ndarray:
    """Full-avalanche 64-bit mixer (splitmix64 finalizer)."""
    x = (x + _GOLDEN) & _U64
    x ^= x >> np.uint64(30)
    x = (x * _MIX1) & _U64
    x ^= x >> np.uint64(27)
    x = (x * _MIX2) & _U64
    x ^= x >> np.uint64(31)
    return x


def counter_uniform(seed: int, t, dim: int) -> np.ndarray:
    """Uniform(0,1) draws indexed by (seed, step, coordinate).

    ``t`` may be a scalar step or an array of steps; the result has one row
    per step and one column per coordinate, values strictly inside (0,1).
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.uint64))
    coords = np.arange(dim, dtype=np.uint64)
    base = _mix64(np.full(1, seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64))
    h = _mix64(base ^ t_arr)[:, None]
    h = _mix64(h ^ coords[None, :])
    u = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return u if np.ndim(t) else u[0]


@dataclass(frozen=True)
class NoiseSchedule:
    """Deterministic Gaussian stream: variance per coordinate, keyed by
    (seed, step).  Variance 0 yields exact zero vectors."""

    seed: int
    variance: float
    dim: int

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"variance must be nonnegative, got {self.variance}")
        if self.dim < 1:
            raise ValueError(f"dimension must be >= 1, got {self.dim}")

    def noise_at(self, t: int) -> np.ndarray:
        if t < 0:
            raise ValueError(f"step index must be nonnegative, got {t}")
        if self.variance == 0.0:
            return np.zeros(self.dim)
        u = counter_uniform(self.seed, t, self.dim)
        return np.sqrt(self.variance) * ndtri(u)

    def noise_block(self, t0: int, steps: int) -> np.ndarray:
        """Rows t0..t0+steps−1 of the stream as a (steps, dim) array."""
        if self.variance == 0.0:
            return np.zeros((steps, self.dim))
        u = counter_uniform(self.seed, np.arange(t0, t0 + steps), self.dim)
        return np.sqrt(self.variance) * ndtri(u)


def noise_at(s: NoiseSchedule, t: int) -> np.ndarray:
    return s.noise_at(t)


def subseed(seed: int, *indices: int) -> int:
    """Derive an independent stream seed from a base seed and indices."""
    h = np.full(1, seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)
    for ix in indices:
        h = _mix64(h ^ np.uint64(ix & 0xFFFFFFFFFFFFFFFF))
    return int(h[0])


# ---------------------------------------------------------------------------
# noisy trajectories
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    """Columnar per-step log of one run.

    ``snapshots`` holds the parameter vector every ``snapshot_stride`` steps
    (rows aligned with ``snapshot_steps``); scalars are logged every step.
    ``exit_step`` is the first step index whose region differs from the
    starting region, or None if the run never left it.
    """

    steps: np.ndarray
    losses: np.ndarray
    grad_norms: np.ndarray
    dual_norms: np.ndarray
    probe_norms: np.ndarray
    path_lengths: np.ndarray
    regions: tuple[str, ...]
    snapshot_steps: np.ndarray
    snapshots: np.ndarray
    final_theta: np.ndarray
    final_region: str
    exit_step: int | None
    meta: dict = field(default_factory=dict)


def run_noisy_trajectory(landscape, cfg: OptimizerConfig, U: MetricState,
                         theta0: np.ndarray, schedule: NoiseSchedule,
                         horizon: int, region_fn=None,
                         snapshot_stride: int = 1,
                         meta: dict | None = None) -> TrajectoryRecord:
    """Run one rule for ``horizon`` steps with schedule noise on the update.

    The noise row for step t is drawn unconditionally, so any two rules on
    the same schedule consume the same stream.  If ``region_fn`` is given,
    each visited point is classified and the first departure from the
    starting region is recorded.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if snapshot_stride < 1:
        raise ValueError("snapshot_stride must be >= 1")
    theta = np.array(theta0, dtype=float)
    if theta.shape != (schedule.dim,):
        raise ValueError(
            f"start shape {theta.shape} vs schedule dimension {schedule.dim}")
    state = OptimizerState.zeros(theta.size)

    losses = np.empty(horizon)
    grad_norms = np.empty(horizon)
    dual_norms = np.empty(horizon)
    probe_norms = np.empty(horizon)
    path_lengths = np.empty(horizon)
    regions: list[str] = []
    snap_steps: list[int] = []
    snaps: list[np.ndarray] = []

    start_region = region_fn(theta) if region_fn else ""
    exit_step = None
    path = 0.0
    for t in range(horizon):
        if t % snapshot_stride == 0:
            snap_steps.append(t)
            snaps.append(theta.copy())
        res = step(cfg, state, U, landscape, theta,
                   update_noise=schedule.noise_at(t))
        path += float(np.linalg.norm(res.theta - theta))
        theta, state = res.theta, res.state
        losses[t] = res.loss
        grad_norms[t] = res.grad_norm
        dual_norms[t] = res.grad_dual_norm
        probe_norms[t] = res.probe_norm
        path_lengths[t] = path
        if region_fn:
            tag = region_fn(theta)
            regions.append(tag)
            if exit_step is None and tag != start_region:
                exit_step = t
        else:
            regions.append("")

    return TrajectoryRecord(
        steps=np.arange(horizon),
        losses=losses,
        grad_norms=grad_norms,
        dual_norms=dual_norms,
        probe_norms=probe_norms,
        path_lengths=path_lengths,
        regions=tuple(regions),
        snapshot_steps=np.asarray(snap_steps),
        snapshots=np.asarray(snaps),
        final_theta=theta,
        final_region=regions[-1],
        exit_step=exit_step,
        meta=dict(meta or {}),
    )


# ---------------------------------------------------------------------------
# regenerative well-hopping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IsotropicWell:
    """Loss ½·curvature·|e|² around a well floor at the origin; curvature 0
    models a flat well where only noise moves the iterate."""

    curvature: float
    dim: int

    def loss_and_grad(self, e: np.ndarray) -> tuple[float, np.ndarray]:
        g = self.curvature * e
        return 0.5 * float(e @ g), g


@dataclass(frozen=True)
class WellSpec:
    """One well of the regenerative cycle model."""

    name: str
    entry_prob: float
    curvature: float
    exit_radius: float

    def __post_init__(self):
        if not (0.0 <= self.entry_prob <= 1.0):
            raise ValueError("entry probability must lie in [0,1]")
        if self.curvature < 0:
            raise ValueError("curvature must be nonnegative")
        if self.exit_radius <= 0:
            raise ValueError("exit radius must be positive")


@dataclass(frozen=True)
class RegenerativeConfig:
    """Wells, noise scale, cycle budget and the stream seed."""

    wells: tuple[WellSpec, ...]
    noise_scale: float
    cycles: int
    max_steps_per_cycle: int
    seed: int
    dim: int = 1

    def __post_init__(self):
        if not self.wells:
            raise ValueError("need at least one well")
        total = sum(w.entry_prob for w in self.wells)
        if abs(total - 1.0) > 1e-8:
            raise ValueError(f"entry probabilities sum to {total}, not 1")
        if self.noise_scale < 0:
            raise ValueError("noise scale must be nonnegative")
        if self.cycles < 1 or self.max_steps_per_cycle < 1:
            raise ValueError("cycles and max_steps_per_cycle must be >= 1")
        if self.dim < 1:
            raise ValueError("dimension must be >= 1")


@dataclass
class ExitStats:
    """Per-well exit statistics plus the raw per-cycle record.

    Occupancy counts every simulated step, censored cycles included; exit
    time means exclude censored cycles (their count is reported).
    """

    well_names: tuple[str, ...]
    entry_probs: np.ndarray
    exit_times: tuple[np.ndarray, ...]
    mean_exit_times: np.ndarray
    mean_path_lengths: np.ndarray
    occupancy: np.ndarray
    censored: np.ndarray
    cycle_wells: np.ndarray
    cycle_steps: np.ndarray
    cycle_censored: np.ndarray


def _run_flat_cycle(schedule: NoiseSchedule, eta: float, start: np.ndarray,
                    radius: float, max_steps: int) -> tuple[int, float, bool]:
    """Pure random walk e ← e − η·ξ until |e| ≥ radius; vectorized."""
    block = 4096
    e0 = start
    t0 = 0
    drift = np.zeros_like(e0)
    path = 0.0
    while t0 < max_steps:
        n = min(block, max_steps - t0)
        xi = schedule.noise_block(t0, n)
        walk = e0 + drift - eta * np.cumsum(xi, axis=0)
        hits = np.nonzero(np.linalg.norm(walk, axis=1) >= radius)[0]
        steplens = eta * np.linalg.norm(xi, axis=1)
        if hits.size:
            k = int(hits[0])
            return t0 + k + 1, path + float(np.sum(steplens[: k + 1])), False
        drift = walk[-1] - e0
        path += float(np.sum(steplens))
        t0 += n
    return max_steps, path, True


def _run_well_cycle(well: WellSpec, opt_cfg: OptimizerConfig,
                    schedule: NoiseSchedule, start: np.ndarray,
                    max_steps: int) -> tuple[int, float, bool]:
    if well.curvature == 0.0:
        return _run_flat_cycle(schedule, opt_cfg.lr, start, well.exit_radius,
                               max_steps)
    landscape = IsotropicWell(curvature=well.curvature, dim=start.size)
    ident = MetricState.identity(start.size)
    state = OptimizerState.zeros(start.size)
    theta = start.copy()
    path = 0.0
    for t in range(max_steps):
        res = step(opt_cfg, state, ident, landscape, theta,
                   update_noise=schedule.noise_at(t))
        path += float(np.linalg.norm(res.theta - theta))
        theta, state = res.theta, res.state
        if float(np.linalg.norm(theta)) >= well.exit_radius:
            return t + 1, path, False
    return max_steps, path, True


def regenerative_simulate(cfg: RegenerativeConfig,
                          opt_cfg: OptimizerConfig) -> ExitStats:
    """Cycle the well-hopping model and tally exits and occupancy.

    Each cycle: draw a well from the entry distribution, start at a Gaussian
    offset of scale σ from its floor, run the configured rule with gradient
    noise of scale σ until the exit radius is crossed (or the step cap hits,
    which counts as censored).  All randomness comes from counter streams
    derived from the config seed, so reruns are bit-identical.
    """
    n_wells = len(cfg.wells)
    probs = np.array([w.entry_prob for w in cfg.wells])
    cum = np.cumsum(probs)
    var = cfg.noise_scale**2

    cycle_wells = np.empty(cfg.cycles, dtype=int)
    cycle_steps = np.empty(cfg.cycles, dtype=int)
    cycle_paths = np.empty(cfg.cycles)
    cycle_cens = np.zeros(cfg.cycles, dtype=bool)

    for c in range(cfg.cycles):
        u = float(counter_uniform(subseed(cfg.seed, 0xC0), c, 1)[0])
        widx = int(np.searchsorted(cum, u, side="left"))
        widx = min(widx, n_wells - 1)
        offs_sched = NoiseSchedule(seed=subseed(cfg.seed, 0x0F, c),
                                   variance=var, dim=cfg.dim)
        start = offs_sched.noise_at(0)
        drive = NoiseSchedule(seed=subseed(cfg.seed, 0xD0, c),
                              variance=var, dim=cfg.dim)
        steps, path, censored = _run_well_cycle(
            cfg.wells[widx], opt_cfg, drive, start, cfg.max_steps_per_cycle)
        cycle_wells[c] = widx
        cycle_steps[c] = steps
        cycle_paths[c] = path
        cycle_cens[c] = censored

    exit_times, means, paths, cens = [], [], [], []
    for m in range(n_wells):
        mask = cycle_wells == m
        if not np.any(mask):
            raise RuntimeError(
                f"well {cfg.wells[m].name!r} was never entered over "
                f"{cfg.cycles} cycles; increase the cycle budget"
            )
        clean = mask & ~cycle_cens
        if not np.any(clean):
            raise RuntimeError(
                f"every visit to well {cfg.wells[m].name!r} was censored; "
                "raise max_steps_per_cycle"
            )
        exit_times.append(cycle_steps[clean].astype(float))
        means.append(float(np.mean(cycle_steps[clean])))
        paths.append(float(np.mean(cycle_paths[clean])))
        cens.append(int(np.sum(mask & cycle_cens)))

    total = float(np.sum(cycle_steps))
    occupancy = np.array(
        [np.sum(cycle_steps[cycle_wells == m]) / total for m in range(n_wells)]
    )
    return ExitStats(
        well_names=tuple(w.name for w in cfg.wells),
        entry_probs=probs,
        exit_times=tuple(np.asarray(e) for e in exit_times),
        mean_exit_times=np.array(means),
        mean_path_lengths=np.array(paths),
        occupancy=occupancy,
        censored=np.array(cens),
        cycle_wells=cycle_wells,
        cycle_steps=cycle_steps,
        cycle_censored=cycle_cens,
    )
