"""Step rules: probe geometry, reductions, momentum, noise injection."""
import numpy as np
import pytest

from samlab.landscapes import TwoScaleQuadratic
from samlab.metric import MetricState, apply_metric, dual_norm, realize
from samlab.optimizers import (RULES, OptimizerConfig, OptimizerState,
                               StepResult, sam_perturbation, step)


def _quad(seed=0, dim=3):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((dim, dim))
    hbar = m @ m.T + dim * np.eye(dim)
    heps = np.diag(np.concatenate([[7.0], np.zeros(dim - 1)]))
    return TwoScaleQuadratic(hbar=hbar, heps=heps)


def _spd_metric(seed=0, dim=3):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((dim, dim))
    return MetricState.dense(m @ m.T + np.eye(dim))


def test_config_validation():
    with pytest.raises(ValueError, match="unknown rule"):
        OptimizerConfig(rule="adam", lr=0.1)
    with pytest.raises(ValueError, match="learning rate"):
        OptimizerConfig(rule="sgdm", lr=0.0)
    with pytest.raises(ValueError, match="probe radius"):
        OptimizerConfig(rule="sam", lr=0.1, rho=-0.1)
    with pytest.raises(ValueError, match="momentum"):
        OptimizerConfig(rule="sgdm", lr=0.1, momentum=1.0)
    with pytest.raises(ValueError, match="fsam_lambda"):
        OptimizerConfig(rule="fsam", lr=0.1, fsam_lambda=1.5)
    with pytest.raises(ValueError, match="weight decay"):
        OptimizerConfig(rule="sgdm", lr=0.1, weight_decay=-1.0)
    with pytest.raises(ValueError, match="floor"):
        OptimizerConfig(rule="sgdm", lr=0.1, eps_norm=0.0)
    with pytest.raises(ValueError, match="fsam_transport"):
        OptimizerConfig(rule="fsam", lr=0.1, fsam_transport="both")


def test_every_rule_is_constructible():
    for rule in RULES:
        OptimizerConfig(rule=rule, lr=0.1, rho=0.1)


# ---------------------------------------------------------------------------
# probe geometry
# ---------------------------------------------------------------------------


def test_perturbation_lies_on_the_metric_sphere():
    rng = np.random.default_rng(1)
    for seed in range(5):
        u = _spd_metric(seed=seed, dim=4)
        g = rng.standard_normal(4)
        rho = 0.3
        eps = sam_perturbation(g, u, rho)
        radius_sq = float(eps @ np.linalg.solve(realize(u), eps))
        assert radius_sq == pytest.approx(rho**2, rel=1e-10)


def test_perturbation_euclidean_case():
    g = np.array([3.0, 4.0])
    eps = sam_perturbation(g, MetricState.identity(2), 0.5)
    np.testing.assert_allclose(eps, 0.5 * g / 5.0, rtol=1e-15)
    assert np.linalg.norm(eps) == pytest.approx(0.5, rel=1e-15)


def test_perturbation_zero_radius_and_tiny_gradient():
    u = _spd_metric(seed=2)
    g = np.ones(3)
    np.testing.assert_array_equal(sam_perturbation(g, u, 0.0), np.zeros(3))
    tiny = 1e-16 * np.ones(3)
    np.testing.assert_array_equal(sam_perturbation(tiny, u, 0.5), np.zeros(3))


def test_perturbation_aligns_with_transported_gradient():
    u = _spd_metric(seed=3)
    g = np.array([1.0, -0.5, 2.0])
    eps = sam_perturbation(g, u, 0.7)
    transported = apply_metric(u, g)
    cos = eps @ transported / (np.linalg.norm(eps)
                               * np.linalg.norm(transported))
    assert cos == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# zero-radius reductions
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("probing,plain", [
    ("sam", "sgdm"),
    ("lqr_sam", "lqr"),
    ("lqr_probe_sam", "sgdm"),
])
def test_zero_probe_radius_reduces_to_plain_rule(probing, plain):
    quad = _quad(seed=4)
    u = _spd_metric(seed=5)
    theta = np.array([1.0, -2.0, 0.5])
    kwargs = dict(lr=0.05, momentum=0.4)
    a = step(OptimizerConfig(rule=probing, rho=0.0, **kwargs),
             OptimizerState.zeros(3), u, quad, theta)
    b = step(OptimizerConfig(rule=plain, **kwargs),
             OptimizerState.zeros(3), u, quad, theta)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert a.probe_norm == 0.0


def test_zero_radius_fsam_matches_metric_transport_rule():
    quad = _quad(seed=6)
    u = _spd_metric(seed=7)
    theta = np.array([0.3, 1.0, -1.0])
    a = step(OptimizerConfig(rule="fsam", lr=0.05, rho=0.0),
             OptimizerState.zeros(3), u, quad, theta)
    b = step(OptimizerConfig(rule="lqr", lr=0.05),
             OptimizerState.zeros(3), u, quad, theta)
    np.testing.assert_array_equal(a.theta, b.theta)


# ---------------------------------------------------------------------------
# update semantics
# ---------------------------------------------------------------------------


def test_plain_step_matches_hand_formula():
    quad = _quad(seed=8)
    theta = np.array([1.0, 0.0, -1.0])
    cfg = OptimizerConfig(rule="sgdm", lr=0.1)
    res = step(cfg, OptimizerState.zeros(3), MetricState.identity(3), quad,
               theta)
    np.testing.assert_allclose(res.theta, theta - 0.1 * (quad.h @ theta),
                               rtol=1e-15)
    assert isinstance(res, StepResult)
    assert res.grad_norm == pytest.approx(np.linalg.norm(quad.h @ theta))


def test_momentum_accumulates_over_two_steps():
    quad = _quad(seed=9)
    theta0 = np.array([1.0, 2.0, -0.5])
    cfg = OptimizerConfig(rule="sgdm", lr=0.1, momentum=0.9)
    r1 = step(cfg, OptimizerState.zeros(3), MetricState.identity(3), quad,
              theta0)
    r2 = step(cfg, r1.state, MetricState.identity(3), quad, r1.theta)
    g0 = quad.h @ theta0
    g1 = quad.h @ r1.theta
    np.testing.assert_allclose(r2.theta, r1.theta - 0.1 * (0.9 * g0 + g1),
                               rtol=1e-14)
    assert r2.state.t == 2


def test_weight_decay_adds_parameter_pull():
    quad = _quad(seed=10)
    theta = np.array([2.0, -1.0, 0.5])
    cfg = OptimizerConfig(rule="sgdm", lr=0.1, weight_decay=0.01)
    res = step(cfg, OptimizerState.zeros(3), MetricState.identity(3), quad,
               theta)
    expected = theta - 0.1 * (quad.h @ theta + 0.01 * theta)
    np.testing.assert_allclose(res.theta, expected, rtol=1e-14)


def test_probing_step_reevaluates_at_the_probe_point():
    quad = _quad(seed=11)
    theta = np.array([1.0, 1.0, 1.0])
    rho = 0.2
    cfg = OptimizerConfig(rule="sam", lr=0.05, rho=rho)
    res = step(cfg, OptimizerState.zeros(3), MetricState.identity(3), quad,
               theta)
    g = quad.h @ theta
    eps = rho * g / np.linalg.norm(g)
    expected = theta - 0.05 * (quad.h @ (theta + eps))
    np.testing.assert_allclose(res.theta, expected, rtol=1e-14)
    assert res.probe_norm == pytest.approx(rho, rel=1e-12)


def test_metric_probe_and_transport_step():
    quad = _quad(seed=12)
    u = _spd_metric(seed=13)
    um = realize(u)
    theta = np.array([0.5, -1.5, 1.0])
    rho = 0.3
    cfg = OptimizerConfig(rule="lqr_sam", lr=0.02, rho=rho)
    res = step(cfg, OptimizerState.zeros(3), u, quad, theta)
    g = quad.h @ theta
    eps = rho * (um @ g) / np.sqrt(g @ um @ g)
    expected = theta - 0.02 * (um @ (quad.h @ (theta + eps)))
    np.testing.assert_allclose(res.theta, expected, rtol=1e-12)
    assert res.grad_dual_norm == pytest.approx(dual_norm(u, g), rel=1e-15)


def test_metric_probe_with_identity_transport():
    quad = _quad(seed=14)
    u = _spd_metric(seed=15)
    um = realize(u)
    theta = np.array([1.0, 0.2, -0.7])
    cfg = OptimizerConfig(rule="lqr_probe_sam", lr=0.02, rho=0.3)
    res = step(cfg, OptimizerState.zeros(3), u, quad, theta)
    g = quad.h @ theta
    eps = 0.3 * (um @ g) / np.sqrt(g @ um @ g)
    expected = theta - 0.02 * (quad.h @ (theta + eps))
    np.testing.assert_allclose(res.theta, expected, rtol=1e-12)


def test_filtered_probe_uses_the_gradient_ema():
    quad = _quad(seed=16)
    theta0 = np.array([1.0, -1.0, 2.0])
    lam = 0.5
    cfg = OptimizerConfig(rule="fsam", lr=0.05, rho=0.2, fsam_lambda=lam,
                          fsam_transport="identity")
    r1 = step(cfg, OptimizerState.zeros(3), MetricState.identity(3), quad,
              theta0)
    g0 = quad.h @ theta0
    np.testing.assert_allclose(r1.state.grad_ema, (1 - lam) * g0, rtol=1e-15)

    r2 = step(cfg, r1.state, MetricState.identity(3), quad, r1.theta)
    g1 = quad.h @ r1.theta
    probe_dir = g1 - lam * r1.state.grad_ema
    eps = 0.2 * probe_dir / np.linalg.norm(probe_dir)
    expected = r1.theta - 0.05 * (quad.h @ (r1.theta + eps))
    np.testing.assert_allclose(r2.theta, expected, rtol=1e-12)


def test_noise_injection_point_is_configurable():
    quad = _quad(seed=17)
    u = _spd_metric(seed=18)
    um = realize(u)
    theta = np.array([1.0, 0.5, -0.5])
    noise = np.array([0.1, -0.2, 0.3])
    g = quad.h @ theta
    post = step(OptimizerConfig(rule="lqr", lr=0.1),
                OptimizerState.zeros(3), u, quad, theta, update_noise=noise)
    np.testing.assert_allclose(post.theta, theta - 0.1 * (um @ g + noise),
                               rtol=1e-13)
    pre = step(OptimizerConfig(rule="lqr", lr=0.1, noise_pre_transport=True),
               OptimizerState.zeros(3), u, quad, theta, update_noise=noise)
    np.testing.assert_allclose(pre.theta, theta - 0.1 * (um @ (g + noise)),
                               rtol=1e-13)


def test_injection_point_is_irrelevant_under_identity_transport():
    quad = _quad(seed=19)
    theta = np.array([0.4, -0.4, 1.2])
    noise = np.array([0.05, 0.05, -0.1])
    ident = MetricState.identity(3)
    post = step(OptimizerConfig(rule="sgdm", lr=0.1),
                OptimizerState.zeros(3), ident, quad, theta,
                update_noise=noise)
    pre = step(OptimizerConfig(rule="sgdm", lr=0.1, noise_pre_transport=True),
               OptimizerState.zeros(3), ident, quad, theta,
               update_noise=noise)
    np.testing.assert_array_equal(post.theta, pre.theta)


def test_step_is_deterministic():
    quad = _quad(seed=20)
    u = _spd_metric(seed=21)
    theta = np.array([0.9, 0.1, -1.1])
    cfg = OptimizerConfig(rule="lqr_sam", lr=0.03, rho=0.4, momentum=0.5)
    a = step(cfg, OptimizerState.zeros(3), u, quad, theta)
    b = step(cfg, OptimizerState.zeros(3), u, quad, theta)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert a.loss == b.loss


def test_nonfinite_evaluation_aborts():
    class _Blowup:
        def loss_and_grad(self, theta):
            return np.inf, np.zeros_like(theta)

    cfg = OptimizerConfig(rule="sgdm", lr=0.1)
    with pytest.raises(RuntimeError, match="non-finite"):
        step(cfg, OptimizerState.zeros(2), MetricState.identity(2), _Blowup(),
             np.zeros(2))
