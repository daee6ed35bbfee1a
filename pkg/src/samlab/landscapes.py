"""Analytic loss surfaces.

Three families, all with exact gradients:

- ``TwoScaleQuadratic``: a quadratic whose curvature splits into a smooth
  positive-definite average part plus a positive-semidefinite localized sharp
  part.  Everything about its descent dynamics is computable in closed form,
  which is what the analysis module exploits.
- ``SharpWell2D``: a two-dimensional flat bowl with a deep, narrow circular
  trench.  The trench is a sharp trap for plain descent; the toy escape
  experiments run on this surface.
- ``LayeredNet``: a small feed-forward network bundled with its input, target
  and loss, exposing the per-layer linearization that the metric learner
  consumes.

Losses are plain functions of a flat float64 parameter vector; landscapes are
immutable after construction and safe to share across workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp, softmax

from . import numkit

_PSD_TOL = 1e-10
# Frobenius threshold under which the two curvature factors are recorded as
# sharing an eigenbasis.
_COMMUTE_TOL = 1e-10
# Below this radius the ring surface's radial direction is undefined; the
# gradient is 0 there by symmetry.
_RADIUS_FLOOR = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# two-scale quadratic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoScaleQuadratic:
    """Quadratic loss ½ θᵀHθ with H split as average + sharp parts.

    ``hbar`` must be symmetric positive definite, ``heps`` symmetric positive
    semidefinite.  ``commuting`` records whether the two parts share an
    eigenbasis (Frobenius commutator below 1e-10); it is computed, not chosen.
    """

    hbar: np.ndarray
    heps: np.ndarray
    commuting: bool = field(init=False)

    def __post_init__(self):
        hbar = numkit.check_symmetric(self.hbar, "hbar")
        heps = numkit.check_symmetric(self.heps, "heps")
        if hbar.shape != heps.shape:
            raise ValueError(
                f"curvature shapes differ: {hbar.shape} vs {heps.shape}"
            )
        lo_bar = numkit.sym_eig(hbar).eigenvalues[0]
        if lo_bar <= numkit.SPD_FLOOR:
            raise ValueError(
                f"average curvature must be positive definite; smallest "
                f"eigenvalue {lo_bar:.6e}"
            )
        lo_eps = numkit.sym_eig(heps).eigenvalues[0]
        if lo_eps < -_PSD_TOL:
            raise ValueError(
                f"sharp curvature must be positive semidefinite; smallest "
                f"eigenvalue {lo_eps:.6e}"
            )
        object.__setattr__(self, "hbar", _frozen(hbar))
        object.__setattr__(self, "heps", _frozen(heps))
        comm = numkit.commutator_norm(hbar, heps)
        object.__setattr__(self, "commuting", bool(comm <= _COMMUTE_TOL))

    @property
    def dim(self) -> int:
        return self.hbar.shape[0]

    @cached_property
    def h(self) -> np.ndarray:
        """Total curvature H."""
        return _frozen(self.hbar + self.heps)

    @cached_property
    def normalized_curvature(self) -> np.ndarray:
        """A = I + hbar^(-1/2) heps hbar^(-1/2); eigenvalues are the
        perceived sharpness ratios total/average, direction by direction."""
        w = numkit.spd_inv_sqrt(self.hbar)
        a = np.eye(self.dim) + w @ self.heps @ w
        return _frozen(0.5 * (a + a.T))

    def perceived_sharpness(self) -> np.ndarray:
        """Ascending eigenvalues of the normalized curvature (all >= 1)."""
        return numkit.sym_eig(self.normalized_curvature).eigenvalues

    def loss_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        return quad_eval(self, theta)

    @classmethod
    def diagonal(cls, lam_bar, lam_eps) -> "TwoScaleQuadratic":
        """Commuting instance from per-direction curvatures."""
        lam_bar = np.atleast_1d(np.asarray(lam_bar, dtype=float))
        lam_eps = np.atleast_1d(np.asarray(lam_eps, dtype=float))
        if lam_bar.shape != lam_eps.shape:
            raise ValueError("curvature lists must have equal length")
        return cls(hbar=np.diag(lam_bar), heps=np.diag(lam_eps))

    @classmethod
    def rotated(cls, lam_bar, lam_eps, angle: float,
                plane: tuple[int, int] = (0, 1)) -> "TwoScaleQuadratic":
        """Non-commuting instance: the sharp part's eigenbasis is rotated by
        ``angle`` radians in the given coordinate plane."""
        lam_bar = np.atleast_1d(np.asarray(lam_bar, dtype=float))
        lam_eps = np.atleast_1d(np.asarray(lam_eps, dtype=float))
        if lam_bar.shape != lam_eps.shape:
            raise ValueError("curvature lists must have equal length")
        r = givens_rotation(lam_bar.size, plane[0], plane[1], angle)
        heps = r @ np.diag(lam_eps) @ r.T
        return cls(hbar=np.diag(lam_bar), heps=0.5 * (heps + heps.T))


def givens_rotation(dim: int, i: int, j: int, angle: float) -> np.ndarray:
    """Plane rotation by ``angle`` in coordinates (i, j) of R^dim."""
    if not (0 <= i < dim and 0 <= j < dim and i != j):
        raise ValueError(f"invalid rotation plane ({i},{j}) for dim {dim}")
    r = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    r[i, i] = c
    r[j, j] = c
    r[i, j] = -s
    r[j, i] = s
    return r


def quad_eval(q: TwoScaleQuadratic, theta: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss ½ θᵀHθ and exact gradient Hθ."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (q.dim,):
        raise ValueError(
            f"parameter shape {theta.shape} does not match dimension {q.dim}"
        )
    grad = q.h @ theta
    return 0.5 * float(theta @ grad), grad


# ---------------------------------------------------------------------------
# flat bowl with a sharp circular trench
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SharpWell2D:
    """Rotationally symmetric surface: a gentle bowl plus a narrow Gaussian
    trench at radius ``ring_radius``.

    Radial profile: f(r) = ½·lambda_flat·r² − ring_depth·exp(−(r−r₀)²/(2w²)).
    Construction verifies that the trench actually carves a strict local
    minimum out of the bowl; too-shallow parameter choices are rejected.
    """

    lambda_flat: float = 0.01
    ring_depth: float = 2.0
    ring_radius: float = 5.0
    ring_width: float = 0.15

    def __post_init__(self):
        if min(self.lambda_flat, self.ring_depth, self.ring_radius,
               self.ring_width) <= 0:
            raise ValueError("all surface parameters must be positive")
        # Touch the critical radii so bad parameter sets fail loudly here.
        self.ring_min_radius

    # -- radial profile -----------------------------------------------------

    def radial_loss(self, r):
        z = (r - self.ring_radius) / self.ring_width
        return 0.5 * self.lambda_flat * r**2 - self.ring_depth * np.exp(-0.5 * z**2)

    def radial_slope(self, r):
        z = (r - self.ring_radius) / self.ring_width
        gauss = self.ring_depth * np.exp(-0.5 * z**2)
        return self.lambda_flat * r + gauss * (r - self.ring_radius) / self.ring_width**2

    def radial_curvature(self, r):
        z = (r - self.ring_radius) / self.ring_width
        gauss = self.ring_depth * np.exp(-0.5 * z**2)
        return self.lambda_flat + gauss * (1.0 - z**2) / self.ring_width**2

    @cached_property
    def _critical_radii(self) -> tuple[float, float]:
        """(inner ridge radius, ring minimum radius) from the radial slope."""
        lo = 1e-9
        hi = self.ring_radius + 8.0 * self.ring_width
        grid = np.linspace(lo, hi, 4097)
        slopes = self.radial_slope(grid)
        roots = []
        for k in range(grid.size - 1):
            if slopes[k] * slopes[k + 1] < 0:
                roots.append(brentq(self.radial_slope, grid[k], grid[k + 1],
                                    xtol=1e-14, rtol=8.9e-16))
        minima = [r for r in roots if self.radial_curvature(r) > 0]
        maxima = [r for r in roots if self.radial_curvature(r) < 0]
        if not minima or not maxima:
            raise ValueError(
                "trench too shallow: radial profile has no interior local "
                f"minimum (depth {self.ring_depth}, width {self.ring_width}, "
                f"flat curvature {self.lambda_flat})"
            )
        ring_min = min(minima, key=lambda r: abs(r - self.ring_radius))
        ridges = [r for r in maxima if r < ring_min]
        if not ridges:
            raise ValueError(
                "no ridge between the origin and the trench minimum; the "
                "trench does not separate a flat basin"
            )
        return max(ridges), ring_min

    @property
    def ring_min_radius(self) -> float:
        """Radius of the trench's local minimum."""
        return self._critical_radii[1]

    @property
    def inner_ridge_radius(self) -> float:
        """Radius of the local maximum separating bowl from trench."""
        return self._critical_radii[0]

    @property
    def basin_radius(self) -> float:
        """Distance from the trench minimum to the nearer radial ridge."""
        return self.ring_min_radius - self.inner_ridge_radius

    @property
    def ring_curvature(self) -> float:
        """Radial curvature at the trench minimum."""
        return float(self.radial_curvature(self.ring_min_radius))

    # -- 2-D surface ---------------------------------------------------------

    def loss_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        return sharpwell_eval(self, theta)

    def hess(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        r = float(np.linalg.norm(theta))
        if r < _RADIUS_FLOOR:
            return self.radial_curvature(0.0) * np.eye(2)
        u = theta / r
        proj = np.outer(u, u)
        return (self.radial_curvature(r) * proj
                + (self.radial_slope(r) / r) * (np.eye(2) - proj))

    def region(self, theta: np.ndarray) -> str:
        """Classify a point: 'flat' bowl, 'sharp' trench band, or 'neither'.

        The trench band extends one basin radius to each side of the ring
        minimum; everything inside the ridge is the flat basin; everything
        beyond the band is outside both.
        """
        r = float(np.linalg.norm(np.asarray(theta, dtype=float)))
        if r < self.inner_ridge_radius:
            return "flat"
        if r <= self.ring_min_radius + self.basin_radius:
            return "sharp"
        return "neither"


def sharpwell_eval(w: SharpWell2D, theta: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and exact gradient of the trench surface at a 2-vector."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (2,):
        raise ValueError(f"expected a 2-vector, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("non-finite parameter vector")
    r = float(np.linalg.norm(theta))
    loss = float(w.radial_loss(r))
    if r < _RADIUS_FLOOR:
        return loss, np.zeros(2)
    return loss, (w.radial_slope(r) / r) * theta


# ---------------------------------------------------------------------------
# layered feed-forward network
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("identity", "tanh")
_LOSSES = ("squared", "softmax_ce")


def _act(tag: str, p: np.ndarray) -> np.ndarray:
    return np.tanh(p) if tag == "tanh" else p


def _act_deriv(tag: str, p: np.ndarray) -> np.ndarray:
    if tag == "tanh":
        t = np.tanh(p)
        return 1.0 - t * t
    return np.ones_like(p)


def _act_curv(tag: str, p: np.ndarray) -> np.ndarray:
    """Elementwise second derivative of the activation."""
    if tag == "tanh":
        t = np.tanh(p)
        return -2.0 * t * (1.0 - t * t)
    return np.zeros_like(p)


def terminal_loss(kind: str, x: np.ndarray, y: np.ndarray):
    """(value, gradient, curvature) of the output-space loss at x."""
    if kind == "squared":
        r = x - y
        return 0.5 * float(r @ r), r, np.eye(x.size)
    # softmax cross-entropy against a target distribution y
    p = softmax(x)
    value = float(logsumexp(x) - y @ x)
    return value, p - y, np.diag(p) - np.outer(p, p)


@dataclass(frozen=True)
class LayeredNet:
    """Feed-forward net x_{i+1} = act_i(W_i x_i + b_i) with fixed input,
    target and terminal loss.

    Parameters live in one flat vector segmented per layer as
    [row-major W_i, then b_i]; ``layer_slices`` gives the segmentation.
    """

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    x0: np.ndarray
    y: np.ndarray
    loss: str = "squared"
    use_bias: bool = True

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"need at least one layer, got sizes {sizes}")
        acts = tuple(self.activations)
        if len(acts) != len(sizes) - 1:
            raise ValueError(
                f"{len(sizes) - 1} layers but {len(acts)} activation tags"
            )
        for a in acts:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.loss not in _LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        x0 = np.asarray(self.x0, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x0.shape != (sizes[0],):
            raise ValueError(f"input shape {x0.shape} vs width {sizes[0]}")
        if y.shape != (sizes[-1],):
            raise ValueError(f"target shape {y.shape} vs width {sizes[-1]}")
        if self.loss == "softmax_ce":
            if np.any(y < 0) or abs(float(np.sum(y)) - 1.0) > 1e-8:
                raise ValueError(
                    "softmax cross-entropy target must be a probability vector"
                )
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "x0", _frozen(x0))
        object.__setattr__(self, "y", _frozen(y))

    @property
    def depth(self) -> int:
        return len(self.sizes) - 1

    @cached_property
    def layer_slices(self) -> tuple[slice, ...]:
        out, start = [], 0
        for i in range(self.depth):
            n_out, n_in = self.sizes[i + 1], self.sizes[i]
            stop = start + n_out * n_in + (n_out if self.use_bias else 0)
            out.append(slice(start, stop))
            start = stop
        return tuple(out)

    @property
    def layer_shapes(self) -> tuple[tuple[int, int, bool], ...]:
        """Per-layer (fan-out, fan-in, has-bias) triples."""
        return tuple((self.sizes[i + 1], self.sizes[i], self.use_bias)
                     for i in range(self.depth))

    @property
    def param_count(self) -> int:
        return self.layer_slices[-1].stop

    def split_params(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.param_count,):
            raise ValueError(
                f"parameter shape {theta.shape}, expected ({self.param_count},)"
            )
        out = []
        for i, sl in enumerate(self.layer_slices):
            n_out, n_in = self.sizes[i + 1], self.sizes[i]
            seg = theta[sl]
            w = seg[: n_out * n_in].reshape(n_out, n_in)
            b = seg[n_out * n_in:] if self.use_bias else None
            out.append((w, b))
        return out

    def pack_params(self, layers) -> np.ndarray:
        parts = []
        for w, b in layers:
            parts.append(np.asarray(w, dtype=float).ravel())
            if b is not None:
                parts.append(np.asarray(b, dtype=float).ravel())
        theta = np.concatenate(parts)
        if theta.size != self.param_count:
            raise ValueError("layer shapes do not match this net")
        return theta

    def forward(self, theta: np.ndarray):
        """States x_0..x_N and preactivations p_0..p_{N−1}."""
        states = [np.array(self.x0)]
        preacts = []
        for i, (w, b) in enumerate(self.split_params(theta)):
            p = w @ states[-1]
            if b is not None:
                p = p + b
            preacts.append(p)
            states.append(_act(self.activations[i], p))
        return states, preacts

    def loss_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        loss, grad, _, _ = net_forward_backward(self, theta)
        return loss, grad

    @classmethod
    def random(cls, sizes, activation: str = "tanh", loss: str = "squared",
               seed: int = 0, use_bias: bool = True) -> "LayeredNet":
        """Random instance: Gaussian input, hidden layers with the given
        activation, linear output layer, random target."""
        rng = np.random.default_rng(seed)
        sizes = tuple(int(s) for s in sizes)
        acts = tuple([activation] * (len(sizes) - 2) + ["identity"])
        x0 = rng.standard_normal(sizes[0])
        if loss == "softmax_ce":
            y = np.zeros(sizes[-1])
            y[rng.integers(sizes[-1])] = 1.0
        else:
            y = rng.standard_normal(sizes[-1])
        return cls(sizes=sizes, activations=acts, x0=x0, y=y, loss=loss,
                   use_bias=use_bias)

    def random_params(self, seed: int = 0, scale: float | None = None) -> np.ndarray:
        """Gaussian parameters with per-layer 1/sqrt(fan-in) scaling."""
        rng = np.random.default_rng(seed)
        layers = []
        for i in range(self.depth):
            n_out, n_in = self.sizes[i + 1], self.sizes[i]
            s = scale if scale is not None else 1.0 / np.sqrt(n_in)
            w = s * rng.standard_normal((n_out, n_in))
            b = s * rng.standard_normal(n_out) if self.use_bias else None
            layers.append((w, b))
        return self.pack_params(layers)


def net_forward_backward(n: LayeredNet, theta: np.ndarray):
    """Loss, flat parameter gradient, states, and per-state adjoints.

    Adjoints[i] is the derivative of the loss with respect to x_i; the
    metric learner uses them to assemble curvature blocks.
    """
    states, preacts = n.forward(theta)
    layers = n.split_params(theta)
    loss, grad_out, _ = terminal_loss(n.loss, states[-1], n.y)
    adjoints = [None] * (n.depth + 1)
    adjoints[n.depth] = grad_out
    layer_grads = [None] * n.depth
    a = grad_out
    for i in range(n.depth - 1, -1, -1):
        w = layers[i][0]
        s = _act_deriv(n.activations[i], preacts[i]) * a
        dw = np.outer(s, states[i]).ravel()
        layer_grads[i] = np.concatenate([dw, s]) if n.use_bias else dw
        a = w.T @ s
        adjoints[i] = a
    grad = np.concatenate(layer_grads)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise RuntimeError("non-finite loss or gradient in network evaluation")
    return loss, grad, states, adjoints


@dataclass(frozen=True)
class Linearization:
    """First-order layer dynamics at an evaluation point.

    a_mats[i] maps a state perturbation through layer i; b_mats[i] maps that
    layer's parameter perturbation into the next state.  States and
    preactivations record the evaluation point.
    """

    a_mats: tuple[np.ndarray, ...]
    b_mats: tuple[np.ndarray, ...]
    states: tuple[np.ndarray, ...]
    preacts: tuple[np.ndarray, ...]
    theta: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.a_mats)

    def rollout(self, layer_deltas) -> np.ndarray:
        """Propagate per-layer parameter perturbations to the output state."""
        dx = np.zeros(self.a_mats[0].shape[1])
        for i in range(self.depth):
            dx = self.a_mats[i] @ dx + self.b_mats[i] @ layer_deltas[i]
        return dx


def linearize(n: LayeredNet, theta: np.ndarray) -> Linearization:
    """Exact per-layer Jacobians of the forward pass at theta."""
    states, preacts = n.forward(theta)
    a_mats, b_mats = [], []
    for i, (w, _) in enumerate(n.split_params(theta)):
        d = _act_deriv(n.activations[i], preacts[i])
        a_mats.append(d[:, None] * w)
        b_pre = np.kron(np.eye(n.sizes[i + 1]), states[i][None, :])
        if n.use_bias:
            b_pre = np.hstack([b_pre, np.eye(n.sizes[i + 1])])
        b_mats.append(d[:, None] * b_pre)
    return Linearization(
        a_mats=tuple(_frozen(a) for a in a_mats),
        b_mats=tuple(_frozen(b) for b in b_mats),
        states=tuple(_frozen(x) for x in states),
        preacts=tuple(_frozen(p) for p in preacts),
        theta=_frozen(theta),
    )


def activation_curvature(n: LayeredNet, preact: np.ndarray, layer: int) -> np.ndarray:
    """Second derivative of layer ``layer``'s activation at a preactivation."""
    return _act_curv(n.activations[layer], preact)
