"""Closed-form predictions for probe-and-step descent on quadratics.

With the metric fixed to the inverse of the average curvature, the dynamics
of the displacement from the minimum decouple along eigendirections into the
one-dimensional map

    z' = a·z − b·sign(z),   a = 1 − η·μ,   b = η·ρ·μ/sqrt(λ̄),

where μ is the perceived sharpness (total over average curvature) and λ̄ the
average curvature of that direction.  This module implements the map, its
limiting two-cycle amplitude b/(1+a), the hovering envelope ρ/sqrt(λ̄), the
basin-escape test, the full matrix recursion the map descends from, the
whitened form of that recursion, stationary statistics of the noise-driven
linear (AR(1)) model, and the renewal-reward occupation mass for well-hopping
simulations.

Everything here is exact arithmetic on model parameters; the simulation
modules exist to confirm these numbers, not the other way around.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .landscapes import TwoScaleQuadratic
from .metric import MetricState, realize

# Matches the optimizers' probe skip rule: below this gradient norm the
# probe term is dropped.
EPS_NORM = 1e-12


# ---------------------------------------------------------------------------
# scalar mode
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarModeParams:
    """One eigendirection of the metric-probe dynamics.

    ``mu`` is the perceived sharpness (≥ 1), ``lam_bar`` the average
    curvature along the direction.  Derived map coefficients: a = 1 − η·μ
    (contraction) and b = η·ρ·μ/sqrt(λ̄) (probe kick).
    """

    eta: float
    mu: float
    rho: float
    lam_bar: float

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"step size must be positive, got {self.eta}")
        if self.mu < 1:
            raise ValueError(f"perceived sharpness must be >= 1, got {self.mu}")
        if self.rho < 0:
            raise ValueError(f"probe radius must be nonnegative, got {self.rho}")
        if self.lam_bar <= 0:
            raise ValueError(
                f"average curvature must be positive, got {self.lam_bar}")

    @property
    def a(self) -> float:
        return 1.0 - self.eta * self.mu

    @property
    def b(self) -> float:
        return self.eta * self.rho * self.mu / np.sqrt(self.lam_bar)


def scalar_map_iterate(p: ScalarModeParams, z0: float, steps: int) -> np.ndarray:
    """Iterate z' = a·z − b·sign(z) for ``steps`` steps; returns z_0..z_steps.

    sign(0) = 0, so the origin is the map's unique fixed point.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    a, b = p.a, p.b
    out = np.empty(steps + 1)
    out[0] = z = float(z0)
    for t in range(1, steps + 1):
        z = a * z - b * np.sign(z)
        out[t] = z
    return out


def two_cycle_amplitude(p: ScalarModeParams) -> float:
    """Limiting oscillation amplitude b/(1+a) = ηρμ/((2−ημ)·sqrt(λ̄)).

    Valid in the contraction regime a ∈ [0, 1); a < 0 (overshooting steps)
    is rejected as outside the analysis regime.
    """
    a = p.a
    if a < 0:
        raise ValueError(
            f"two-cycle amplitude needs a = 1−ημ in [0,1); got a = {a:.6g} "
            f"(η·μ = {p.eta * p.mu:.6g} > 1)"
        )
    return p.b / (1.0 + a)


def hovering_envelope(rho: float, lam_bar: float) -> float:
    """First-order hovering scale ρ/sqrt(λ̄) around a minimum.

    Depends only on the probe radius and the average curvature — not on the
    localized sharp component.
    """
    if lam_bar <= 0:
        raise ValueError(f"average curvature must be positive, got {lam_bar}")
    return rho / np.sqrt(lam_bar)


def vanilla_envelope(rho: float) -> float:
    """Euclidean-probe hovering scale: ρ in every direction."""
    return float(rho)


def amplification_ratio(lam_bar_eps: float) -> float:
    """Metric-over-Euclidean envelope ratio 1/sqrt(λ̄_ε) in a pothole
    direction with average curvature λ̄_ε."""
    if lam_bar_eps <= 0:
        raise ValueError(
            f"average curvature must be positive, got {lam_bar_eps}")
    return 1.0 / np.sqrt(lam_bar_eps)


@dataclass(frozen=True)
class PotholeSpec:
    """A localized sharp trap: basin radius plus the two curvature scales.

    ``lam_eps`` (the localized sharpness) is carried for bookkeeping but
    deliberately plays no role in the escape test.
    """

    lam_bar_eps: float
    lam_eps: float
    r_eps: float

    def __post_init__(self):
        if self.lam_bar_eps <= 0:
            raise ValueError("average curvature must be positive")
        if self.lam_eps < 0:
            raise ValueError("localized sharpness must be nonnegative")
        if self.r_eps <= 0:
            raise ValueError("basin radius must be positive")


def escape_predicate(rho: float, pothole: PotholeSpec) -> bool:
    """True when the hovering envelope overshoots the basin radius.

    The envelope ρ/sqrt(λ̄_ε) is set by the average curvature alone, so the
    localized sharpness of the trap cannot rescue it.
    """
    return hovering_envelope(rho, pothole.lam_bar_eps) > pothole.r_eps


# ---------------------------------------------------------------------------
# full and whitened recursions
# ---------------------------------------------------------------------------


def _as_matrix(U, dim: int) -> np.ndarray:
    if isinstance(U, MetricState):
        return realize(U)
    U = np.asarray(U, dtype=float)
    if U.shape != (dim, dim):
        raise ValueError(f"metric shape {U.shape} vs dimension {dim}")
    return U


def matrix_recursion_step(q: TwoScaleQuadratic, U, eta: float, rho: float,
                          e_t: np.ndarray) -> np.ndarray:
    """One step of the exact displacement recursion

        e' = (I − ηUH)e − ηρ·UHUH·e / sqrt(eᵀHUHe),

    dropping the probe term when the gradient He is below the norm floor
    (the optimizers' skip rule).

    Evaluated in probe-then-recompute form — displace by ρ·Ug/|g|_U, take
    the gradient there, transport — which is the same expression but
    rounds identically to the step rule it predicts.
    """
    e_t = np.asarray(e_t, dtype=float)
    if e_t.shape != (q.dim,):
        raise ValueError(f"state shape {e_t.shape} vs dimension {q.dim}")
    u = _as_matrix(U, q.dim)
    h = q.h
    g = h @ e_t
    ug = u @ g
    dual = np.sqrt(max(float(g @ ug), 0.0))
    if rho != 0.0 and dual > EPS_NORM:
        g_probe = h @ (e_t + (rho / dual) * ug)
    else:
        g_probe = h @ e_t
    return e_t - eta * (u @ g_probe)


def whiten(q: TwoScaleQuadratic, e: np.ndarray) -> np.ndarray:
    """Change of variables y = H̄^(1/2) e."""
    e = np.asarray(e, dtype=float)
    if e.shape != (q.dim,):
        raise ValueError(f"state shape {e.shape} vs dimension {q.dim}")
    return numkit.spd_sqrt(q.hbar) @ e


def unwhiten(q: TwoScaleQuadratic, y: np.ndarray) -> np.ndarray:
    """Inverse change of variables e = H̄^(-1/2) y."""
    y = np.asarray(y, dtype=float)
    if y.shape != (q.dim,):
        raise ValueError(f"state shape {y.shape} vs dimension {q.dim}")
    return numkit.spd_inv_sqrt(q.hbar) @ y


def whitened_step(A: np.ndarray, eta: float, rho: float,
                  y_t: np.ndarray) -> np.ndarray:
    """One step of the whitened recursion y' = (I − ηA)y − ηρ·A²y/|Ay|.

    A is the normalized curvature I + H̄^(-1/2)·H_ε·H̄^(-1/2); its
    eigenvalues are the perceived sharpness ratios.
    """
    A = numkit.check_symmetric(A, "normalized curvature")
    y_t = np.asarray(y_t, dtype=float)
    ay = A @ y_t
    out = y_t - eta * ay
    nrm = float(np.linalg.norm(ay))
    if nrm > EPS_NORM:
        out = out - (eta * rho / nrm) * (A @ ay)
    return out


# ---------------------------------------------------------------------------
# noise-driven linear model and well occupation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ar1Params:
    """Noise-driven linear mode z' = (1 − ηλ/d)z − (η/d)ξ, ξ ~ N(0, τ²).

    ``d`` is the effective metric denominator along the mode; stationarity
    requires d > ηλ/2.
    """

    eta: float
    lam: float
    d: float
    tau_sq: float

    def __post_init__(self):
        if min(self.eta, self.lam, self.d) <= 0 or self.tau_sq < 0:
            raise ValueError("eta, lam, d must be positive; tau_sq >= 0")
        if self.d <= 0.5 * self.eta * self.lam:
            raise ValueError(
                f"stationarity requires d > ηλ/2 = "
                f"{0.5 * self.eta * self.lam:.6g}, got d = {self.d}"
            )


def ar1_stationary_stats(p: Ar1Params) -> tuple[float, float]:
    """(stationary variance, mean squared one-step motion).

    Variance ητ²/(λ(2d − ηλ)) and motion 2η²τ²/(d(2d − ηλ)); both shrink as
    the metric denominator d grows, which is the damping effect of a metric
    that exceeds unity along noisy flat directions.
    """
    denom = 2.0 * p.d - p.eta * p.lam
    variance = p.eta * p.tau_sq / (p.lam * denom)
    motion = 2.0 * p.eta**2 * p.tau_sq / (p.d * denom)
    return variance, motion


def occupation_mass(nu, mean_exit_times) -> np.ndarray:
    """Long-run fraction of time spent in each well under regenerative
    cycling: mass_m = ν_m·τ̄_m / Σ_ℓ ν_ℓ·τ̄_ℓ (renewal-reward)."""
    nu = np.asarray(nu, dtype=float)
    tau = np.asarray(mean_exit_times, dtype=float)
    if nu.shape != tau.shape or nu.ndim != 1 or nu.size == 0:
        raise ValueError("need matching nonempty entry/exit-time vectors")
    if np.any(nu < 0) or abs(float(np.sum(nu)) - 1.0) > 1e-8:
        raise ValueError("entry probabilities must form a probability vector")
    if np.any(tau <= 0):
        raise ValueError("mean exit times must be positive")
    weighted = nu * tau
    return weighted / float(np.sum(weighted))


def measured_envelope(trajectory: np.ndarray, tail_fraction: float = 0.1) -> float:
    """Operational limsup: max |z| over the trailing fraction of a run."""
    trajectory = np.asarray(trajectory, dtype=float)
    if not (0.0 < tail_fraction <= 1.0):
        raise ValueError("tail_fraction must lie in (0, 1]")
    start = int(np.floor(trajectory.size * (1.0 - tail_fraction)))
    start = min(start, trajectory.size - 1)
    return float(np.max(np.abs(trajectory[start:])))
