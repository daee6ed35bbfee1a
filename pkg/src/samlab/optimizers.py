"""Step rules under study.

Every rule is a special case of one template: optionally probe a worst-case
point by stepping a fixed radius along the (metric-transported) gradient
direction, re-evaluate the gradient there, transport it, then apply weight
decay and classical momentum.

    sgdm            no probe, identity transport
    lqr             no probe, learned-metric transport
    sam             Euclidean probe, identity transport
    lqr_sam         metric probe, metric transport
    lqr_probe_sam   metric probe, identity transport
    fsam            probe along the EMA-filtered gradient, transport per config

Rules are deterministic; any stochasticity is injected by the caller as an
additive noise vector on the update gradient (before or after transport,
per config).  Setting the probe radius to zero reduces every rule exactly to
its probe-free counterpart.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metric import MetricState, apply_metric, dual_norm

RULES = ("sgdm", "lqr", "sam", "lqr_sam", "lqr_probe_sam", "fsam")

# Rules whose probe direction and transport use the learned metric.
_METRIC_PROBE = ("lqr_sam", "lqr_probe_sam")


@dataclass(frozen=True)
class OptimizerConfig:
    """Rule identity and hyperparameters for one run."""

    rule: str
    lr: float
    rho: float = 0.0
    momentum: float = 0.0
    fsam_lambda: float = 0.9
    weight_decay: float = 0.0
    eps_norm: float = 1e-12
    # fsam only: transport the probe gradient through the metric, or not
    fsam_transport: str = "metric"
    # where caller-injected update noise lands relative to the transport
    noise_pre_transport: bool = False

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; choose from {RULES}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.rho < 0:
            raise ValueError(f"probe radius must be nonnegative, got {self.rho}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0,1), got {self.momentum}")
        if not (0.0 <= self.fsam_lambda < 1.0):
            raise ValueError(
                f"fsam_lambda must lie in [0,1), got {self.fsam_lambda}")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.eps_norm <= 0:
            raise ValueError("gradient-norm floor must be positive")
        if self.fsam_transport not in ("metric", "identity"):
            raise ValueError(
                f"fsam_transport must be 'metric' or 'identity', "
                f"got {self.fsam_transport!r}")


@dataclass
class OptimizerState:
    """Mutable per-run accumulators (momentum buffer, gradient EMA, step)."""

    momentum_buf: np.ndarray
    grad_ema: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "OptimizerState":
        return cls(momentum_buf=np.zeros(dim), grad_ema=np.zeros(dim))


@dataclass(frozen=True)
class StepResult:
    """One accepted step plus the diagnostics the trajectory log wants."""

    theta: np.ndarray
    state: OptimizerState
    loss: float
    grad_norm: float
    grad_dual_norm: float
    probe_norm: float


def sam_perturbation(g: np.ndarray, U: MetricState, rho: float,
                     eps_norm: float = 1e-12) -> np.ndarray:
    """Probe offset rho·Ug/sqrt(gᵀUg), or zero when the gradient is tiny.

    The offset lies on the metric sphere: εᵀU⁻¹ε = ρ² whenever it is
    nonzero.  With an identity metric this is the familiar Euclidean
    normalization ρ·g/|g|.
    """
    g = np.asarray(g, dtype=float)
    if rho == 0.0:
        return np.zeros_like(g)
    nrm = dual_norm(U, g)
    if nrm <= eps_norm:
        return np.zeros_like(g)
    return (rho / nrm) * apply_metric(U, g)


def _check_finite(loss: float, grad: np.ndarray, t: int, where: str) -> None:
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise RuntimeError(
            f"non-finite loss or gradient at step {t} ({where}); run aborted"
        )


def step(cfg: OptimizerConfig, state: OptimizerState, U: MetricState,
         landscape, theta: np.ndarray,
         update_noise: np.ndarray | None = None) -> StepResult:
    """Advance one optimizer step on ``landscape`` from ``theta``.

    The metric is read-only here; refreshing it between steps is the
    caller's business.  ``update_noise``, when given, is added to the update
    gradient (after transport by default), identically caller-controlled so
    that different rules can consume one shared noise schedule.
    """
    theta = np.asarray(theta, dtype=float)
    loss, g = landscape.loss_and_grad(theta)
    _check_finite(loss, g, state.t, "base point")

    identity = MetricState.identity(theta.size)
    if cfg.rule in _METRIC_PROBE:
        probe_metric, probe_dir = U, g
    elif cfg.rule == "sam":
        probe_metric, probe_dir = identity, g
    elif cfg.rule == "fsam":
        probe_metric = U if cfg.fsam_transport == "metric" else identity
        probe_dir = g - cfg.fsam_lambda * state.grad_ema
    else:
        probe_metric, probe_dir = None, None

    if probe_metric is None:
        eps = np.zeros_like(g)
        g_used = g
    else:
        eps = sam_perturbation(probe_dir, probe_metric, cfg.rho, cfg.eps_norm)
        probe_loss, g_used = landscape.loss_and_grad(theta + eps)
        _check_finite(probe_loss, g_used, state.t, "probe point")

    if update_noise is not None and cfg.noise_pre_transport:
        g_used = g_used + update_noise

    if cfg.rule in ("lqr", "lqr_sam") or (
            cfg.rule == "fsam" and cfg.fsam_transport == "metric"):
        update = apply_metric(U, g_used)
    else:
        update = g_used if g_used is not g else g.copy()

    if update_noise is not None and not cfg.noise_pre_transport:
        update = update + update_noise

    if cfg.weight_decay:
        update = update + cfg.weight_decay * theta

    buf = cfg.momentum * state.momentum_buf + update
    theta_next = theta - cfg.lr * buf

    ema = state.grad_ema
    if cfg.rule == "fsam":
        ema = cfg.fsam_lambda * state.grad_ema + (1.0 - cfg.fsam_lambda) * g

    return StepResult(
        theta=theta_next,
        state=OptimizerState(momentum_buf=buf, grad_ema=ema, t=state.t + 1),
        loss=loss,
        grad_norm=float(np.linalg.norm(g)),
        grad_dual_norm=dual_norm(U, g),
        probe_norm=float(np.linalg.norm(eps)),
    )
