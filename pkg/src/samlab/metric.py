"""Structured inverse preconditioners and the trajectory-relaxation learner.

A ``MetricState`` holds a symmetric positive definite operator U in one of
four parameterizations — identity, one global diagonal, one global dense
matrix, or per-layer blocks (dense, diagonal, or Kronecker-factored) aligned
with a layered network's parameter segmentation.  U is applied to gradients
(``apply_metric``) and defines the dual gradient norm sqrt(gᵀUg)
(``dual_norm``).  States are frozen: optimizer steps between refreshes see
bit-identical outputs.

The learner treats the network's linearized forward pass as a linear
control system: layer-i parameter tweaks δθ_i = −U_i g_i steer the output
perturbation through the per-layer Jacobians, and U is fit by descending a
quadratic-plus-linear objective built from terminal loss curvature plus a
step-size penalty on the tweaks (``relaxed_objective``).  Refreshes happen on
a cadence and are smoothed by an exponential moving average, with spectral
bounds enforced at every refresh.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit
from .landscapes import (LayeredNet, Linearization, activation_curvature,
                         linearize, net_forward_backward, terminal_loss)

logger = logging.getLogger(__name__)

STRUCTURES = ("identity", "diagonal", "dense", "layered")
BLOCK_KINDS = ("dense", "diag", "kron")
DIVERGENCES = ("ngd", "newton")

# Relative slack when deciding whether an inner-solver step decreased the
# objective; guards against flagging pure roundoff as an increase.
_DESCENT_SLACK = 1e-12
# Tolerance below which a slightly negative quadratic form is attributed to
# roundoff rather than a corrupted state.
_QUAD_FORM_SLACK = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


def _tree_map(f, *trees):
    """Apply f leafwise over identically shaped nested tuples of arrays."""
    head = trees[0]
    if isinstance(head, tuple):
        return tuple(_tree_map(f, *parts) for parts in zip(*trees))
    return f(*trees)


def _tree_freeze(tree):
    return _tree_map(_frozen, tree)


# ---------------------------------------------------------------------------
# metric state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricState:
    """A structured SPD inverse preconditioner with refresh bookkeeping.

    ``values`` is a nested tuple of arrays whose layout depends on
    ``structure``: () for identity, (diag,) for diagonal, (matrix,) for
    dense, and a per-layer tuple of block tuples for layered — one (P_i,P_i)
    matrix or (P_i,) diagonal per layer, or (out-factor, in-factor,
    bias-diagonal-or-empty) for Kronecker blocks.  ``layer_shapes`` carries
    the (fan-out, fan-in, has-bias) triples needed to reshape layer
    gradients for Kronecker application.
    """

    structure: str
    dim: int
    values: tuple = ()
    layer_dims: tuple[int, ...] | None = None
    layer_shapes: tuple[tuple[int, int, bool], ...] | None = None
    block_kind: str = "dense"
    ema_beta: float = 0.95
    cadence: int = 500
    step_counter: int = 0
    u_min: float = 1e-6
    u_max: float = 1e6

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown metric structure {self.structure!r}")
        if self.structure == "layered":
            if self.block_kind not in BLOCK_KINDS:
                raise ValueError(f"unknown block kind {self.block_kind!r}")
            if self.layer_dims is None:
                raise ValueError("layered structure requires layer_dims")
            if sum(self.layer_dims) != self.dim:
                raise ValueError("layer_dims do not sum to dim")
            if self.block_kind == "kron" and self.layer_shapes is None:
                raise ValueError("kron blocks require layer_shapes")
        if not (0.0 <= self.ema_beta < 1.0):
            raise ValueError(f"ema_beta must lie in [0,1), got {self.ema_beta}")
        if self.cadence < 1:
            raise ValueError(f"cadence must be >= 1, got {self.cadence}")
        if not (0 < self.u_min < self.u_max):
            raise ValueError("need 0 < u_min < u_max")
        object.__setattr__(self, "values", _tree_freeze(self.values))
        _check_value_shapes(self)

    # -- constructors --------------------------------------------------------

    @classmethod
    def identity(cls, dim: int, **meta) -> "MetricState":
        return cls(structure="identity", dim=dim, values=(), **meta)

    @classmethod
    def scaled_identity(cls, dim: int, scale: float, **meta) -> "MetricState":
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        return cls(structure="diagonal", dim=dim,
                   values=(np.full(dim, float(scale)),), **meta)

    @classmethod
    def diagonal(cls, entries, **meta) -> "MetricState":
        v = np.asarray(entries, dtype=float)
        return cls(structure="diagonal", dim=v.size, values=(v,), **meta)

    @classmethod
    def dense(cls, matrix, **meta) -> "MetricState":
        m = numkit.check_symmetric(matrix, "metric matrix")
        return cls(structure="dense", dim=m.shape[0], values=(m,), **meta)

    @classmethod
    def from_quadratic(cls, quad, **meta) -> "MetricState":
        """The average-geometry inverse: U = (average curvature)^(-1)."""
        return cls.dense(numkit.spd_inv(quad.hbar), **meta)

    @classmethod
    def layered_for_net(cls, net: LayeredNet, block_kind: str = "dense",
                        init_scale: float = 1.0, **meta) -> "MetricState":
        """Identity-times-scale initialization matching a net's layers."""
        if init_scale <= 0:
            raise ValueError("init_scale must be positive")
        dims = tuple(sl.stop - sl.start for sl in net.layer_slices)
        shapes = net.layer_shapes
        blocks = []
        for (m, n, has_bias), p in zip(shapes, dims):
            if block_kind == "dense":
                blocks.append((init_scale * np.eye(p),))
            elif block_kind == "diag":
                blocks.append((np.full(p, init_scale),))
            elif block_kind == "kron":
                root = np.sqrt(init_scale)
                bias = np.full(m, init_scale) if has_bias else np.zeros(0)
                blocks.append((root * np.eye(m), root * np.eye(n), bias))
            else:
                raise ValueError(f"unknown block kind {block_kind!r}")
        return cls(structure="layered", dim=sum(dims), values=tuple(blocks),
                   layer_dims=dims, layer_shapes=shapes,
                   block_kind=block_kind, **meta)


def _check_value_shapes(state: MetricState) -> None:
    s = state.structure
    if s == "identity":
        if state.values != ():
            raise ValueError("identity metric carries no values")
    elif s == "diagonal":
        (v,) = state.values
        if v.shape != (state.dim,):
            raise ValueError(f"diagonal shape {v.shape} vs dim {state.dim}")
    elif s == "dense":
        (m,) = state.values
        if m.shape != (state.dim, state.dim):
            raise ValueError(f"dense shape {m.shape} vs dim {state.dim}")
    else:
        if len(state.values) != len(state.layer_dims):
            raise ValueError("one value block per layer required")
        for k, (block, p) in enumerate(zip(state.values, state.layer_dims)):
            if state.block_kind == "dense":
                (m,) = block
                ok = m.shape == (p, p)
            elif state.block_kind == "diag":
                (v,) = block
                ok = v.shape == (p,)
            else:
                o, a, b = block
                mm, nn, has_bias = state.layer_shapes[k]
                ok = (o.shape == (mm, mm) and a.shape == (nn, nn)
                      and b.shape == ((mm,) if has_bias else (0,)))
            if not ok:
                raise ValueError(f"layer {k} block shape mismatch")


def _split_by_layers(state: MetricState, g: np.ndarray) -> list[np.ndarray]:
    out, start = [], 0
    for p in state.layer_dims:
        out.append(g[start:start + p])
        start += p
    return out


def _apply_layer_block(state: MetricState, k: int, g: np.ndarray) -> np.ndarray:
    block = state.values[k]
    if state.block_kind == "dense":
        return block[0] @ g
    if state.block_kind == "diag":
        return block[0] * g
    o, a, bias = block
    m, n, has_bias = state.layer_shapes[k]
    gw = g[: m * n].reshape(m, n)
    out_w = (o @ gw @ a).ravel()
    if has_bias:
        return np.concatenate([out_w, bias * g[m * n:]])
    return out_w


def apply_metric(U: MetricState, g: np.ndarray) -> np.ndarray:
    """U·g respecting the block structure."""
    g = np.asarray(g, dtype=float)
    if g.shape != (U.dim,):
        raise ValueError(f"gradient shape {g.shape} vs metric dim {U.dim}")
    if U.structure == "identity":
        return g.copy()
    if U.structure == "diagonal":
        return U.values[0] * g
    if U.structure == "dense":
        return U.values[0] @ g
    parts = [_apply_layer_block(U, k, gk)
             for k, gk in enumerate(_split_by_layers(U, g))]
    return np.concatenate(parts)


def dual_norm(U: MetricState, g: np.ndarray) -> float:
    """sqrt(gᵀUg); rejects negative quadratic forms as corrupted state."""
    g = np.asarray(g, dtype=float)
    val = float(g @ apply_metric(U, g))
    if val < -_QUAD_FORM_SLACK * (1.0 + float(g @ g)):
        raise ValueError(
            f"negative quadratic form {val:.6e}: metric state is not "
            "positive definite"
        )
    return float(np.sqrt(max(val, 0.0)))


def realize(U: MetricState) -> np.ndarray:
    """The full dense matrix U (small problems and tests only)."""
    if U.structure == "identity":
        return np.eye(U.dim)
    if U.structure == "diagonal":
        return np.diag(U.values[0])
    if U.structure == "dense":
        return np.array(U.values[0])
    out = np.zeros((U.dim, U.dim))
    start = 0
    for k, p in enumerate(U.layer_dims):
        if U.block_kind == "dense":
            blk = np.array(U.values[k][0])
        elif U.block_kind == "diag":
            blk = np.diag(U.values[k][0])
        else:
            o, a, bias = U.values[k]
            blk_w = np.kron(o, a)
            blk = np.zeros((p, p))
            blk[: blk_w.shape[0], : blk_w.shape[0]] = blk_w
            if bias.size:
                blk[blk_w.shape[0]:, blk_w.shape[0]:] = np.diag(bias)
        out[start:start + p, start:start + p] = blk
        start += p
    return out


def extreme_eigenvalues(U: MetricState) -> tuple[float, float]:
    """(smallest, largest) eigenvalue of the realized operator."""
    if U.structure == "identity":
        return 1.0, 1.0
    lo, hi = np.inf, -np.inf

    def _fold(vals):
        nonlocal lo, hi
        lo = min(lo, float(np.min(vals)))
        hi = max(hi, float(np.max(vals)))

    if U.structure == "diagonal":
        _fold(U.values[0])
    elif U.structure == "dense":
        _fold(numkit.sym_eig(U.values[0]).eigenvalues)
    else:
        for k in range(len(U.layer_dims)):
            block = U.values[k]
            if U.block_kind == "dense":
                _fold(numkit.sym_eig(block[0]).eigenvalues)
            elif U.block_kind == "diag":
                _fold(block[0])
            else:
                o, a, bias = block
                eo = numkit.sym_eig(o).eigenvalues
                ea = numkit.sym_eig(a).eigenvalues
                _fold(np.outer(eo, ea))
                if bias.size:
                    _fold(bias)
    return lo, hi


def tick(U: MetricState) -> MetricState:
    """Advance the refresh counter by one optimizer step."""
    return replace(U, step_counter=U.step_counter + 1)


def due_for_refresh(U: MetricState) -> bool:
    return U.step_counter % U.cadence == 0


# -- spectral clamping -------------------------------------------------------


def _clamp_sym(m: np.ndarray, lo: float, hi: float):
    dec = numkit.sym_eig(m)
    if dec.eigenvalues[0] >= lo and dec.eigenvalues[-1] <= hi:
        return m, False
    vals = np.clip(dec.eigenvalues, lo, hi)
    v = dec.eigenvectors
    out = (v * vals) @ v.T
    return 0.5 * (out + out.T), True


def _clamp_vec(v: np.ndarray, lo: float, hi: float):
    if np.all(v >= lo) and np.all(v <= hi):
        return v, False
    return np.clip(v, lo, hi), True


def clamp_to_bounds(U: MetricState) -> tuple[MetricState, bool]:
    """Project every block's spectrum into [u_min, u_max].

    Returns the (possibly unchanged) state and whether anything moved.
    Blocks already inside the bounds are kept bit-identical.
    """
    lo, hi = U.u_min, U.u_max
    changed = False
    if U.structure == "identity":
        return U, False
    if U.structure == "diagonal":
        v, c = _clamp_vec(U.values[0], lo, hi)
        return (replace(U, values=(v,)) if c else U), c
    if U.structure == "dense":
        m, c = _clamp_sym(U.values[0], lo, hi)
        return (replace(U, values=(m,)) if c else U), c
    blocks = []
    root_lo, root_hi = np.sqrt(lo), np.sqrt(hi)
    for k in range(len(U.layer_dims)):
        block = U.values[k]
        if U.block_kind == "dense":
            m, c = _clamp_sym(block[0], lo, hi)
            blocks.append((m,))
        elif U.block_kind == "diag":
            m, c = _clamp_vec(block[0], lo, hi)
            blocks.append((m,))
        else:
            o, co = _clamp_sym(block[0], root_lo, root_hi)
            a, ca = _clamp_sym(block[1], root_lo, root_hi)
            if block[2].size:
                b, cb = _clamp_vec(block[2], lo, hi)
            else:
                b, cb = block[2], False
            blocks.append((o, a, b))
            c = co or ca or cb
        changed = changed or c
    return (replace(U, values=tuple(blocks)) if changed else U), changed


def ema_update(old: MetricState, fresh: MetricState, beta: float) -> MetricState:
    """Entrywise convex combination beta·old + (1−beta)·fresh.

    Structure tags must match.  The result is re-projected into the spectral
    bounds; if that moves anything, a warning is logged.
    """
    if not (0.0 <= beta <= 1.0):
        raise ValueError(f"beta must lie in [0,1], got {beta}")
    for attr in ("structure", "dim", "layer_dims", "block_kind"):
        if getattr(old, attr) != getattr(fresh, attr):
            raise ValueError(
                f"metric structure mismatch in EMA: {attr} differs "
                f"({getattr(old, attr)!r} vs {getattr(fresh, attr)!r})"
            )
    mixed = _tree_map(lambda a, b: beta * a + (1.0 - beta) * b,
                      old.values, fresh.values)
    out = replace(old, values=mixed)
    out, changed = clamp_to_bounds(out)
    if changed:
        logger.warning(
            "metric eigenvalues clamped into [%.1e, %.1e] after EMA refresh",
            out.u_min, out.u_max,
        )
    return out


# ---------------------------------------------------------------------------
# learner: blocks, relaxed objective, inner solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LqrBlocks:
    """Quadratic cost pieces for the layerwise control problem.

    ``q_inter[i]`` (or None for zero) weights the state perturbation entering
    layer i; ``q_terminal`` and ``lin_terminal`` are the output-loss curvature
    and gradient; ``r_damping`` scales the identity penalty on per-layer
    parameter tweaks.  Mixed state-parameter cost terms are identically zero
    in both supported divergences and are not represented.
    """

    q_inter: tuple
    q_terminal: np.ndarray
    lin_terminal: np.ndarray
    r_damping: float
    divergence: str


def form_lqr_blocks(lin: Linearization, net: LayeredNet, divergence: str,
                    damping: float = 1e-3) -> LqrBlocks:
    """Assemble cost blocks at the linearization point.

    "ngd" uses the exact output-loss curvature as the only quadratic cost;
    "newton" additionally pulls each hidden activation's second derivative
    back onto the layer's input state, weighted by the loss adjoint.
    """
    tag = divergence.lower()
    if tag not in DIVERGENCES:
        raise ValueError(f"unknown divergence {divergence!r}")
    if damping < 0:
        raise ValueError(f"damping must be nonnegative, got {damping}")
    x_out = lin.states[-1]
    _, grad_out, hess_out = terminal_loss(net.loss, x_out, net.y)
    q_inter = [None] * net.depth
    if tag == "newton":
        _, _, _, adjoints = net_forward_backward(net, lin.theta)
        layers = net.split_params(lin.theta)
        for i in range(1, net.depth):
            curv = activation_curvature(net, lin.preacts[i], i)
            weights = adjoints[i + 1] * curv
            if np.any(weights):
                w = layers[i][0]
                q_inter[i] = w.T @ (weights[:, None] * w)
    return LqrBlocks(
        q_inter=tuple(q_inter),
        q_terminal=_frozen(hess_out),
        lin_terminal=_frozen(grad_out),
        r_damping=float(damping),
        divergence=tag,
    )


def _layer_deltas(U: MetricState, layer_grads) -> list[np.ndarray]:
    """Per-layer parameter tweaks δθ_i = −U_i g_i."""
    if U.structure == "layered":
        return [-_apply_layer_block(U, k, g) for k, g in enumerate(layer_grads)]
    full = np.concatenate(layer_grads)
    transported = apply_metric(U, full)
    out, start = [], 0
    for g in layer_grads:
        out.append(-transported[start:start + g.size])
        start += g.size
    return out


def relaxed_objective(U: MetricState, blocks: LqrBlocks, lin: Linearization,
                      layer_grads) -> float:
    """Linear-plus-quadratic objective of the tweak rollout induced by U."""
    deltas = _layer_deltas(U, layer_grads)
    j = 0.0
    dx = np.zeros(lin.a_mats[0].shape[1])
    for i in range(lin.depth):
        q = blocks.q_inter[i]
        if q is not None:
            j += 0.5 * float(dx @ q @ dx)
        j += 0.5 * blocks.r_damping * float(deltas[i] @ deltas[i])
        dx = lin.a_mats[i] @ dx + lin.b_mats[i] @ deltas[i]
    j += float(blocks.lin_terminal @ dx)
    j += 0.5 * float(dx @ blocks.q_terminal @ dx)
    return j


def relaxed_objective_grad(U: MetricState, blocks: LqrBlocks,
                           lin: Linearization, layer_grads):
    """Gradient of the relaxed objective over U's parameterized entries.

    One forward rollout plus one backward adjoint sweep.  The returned tree
    mirrors ``U.values``; symmetric-matrix entries receive the symmetrized
    gradient (off-diagonal pairs move together).
    """
    deltas = _layer_deltas(U, layer_grads)
    dxs = [np.zeros(lin.a_mats[0].shape[1])]
    for i in range(lin.depth):
        dxs.append(lin.a_mats[i] @ dxs[i] + lin.b_mats[i] @ deltas[i])
    p = blocks.lin_terminal + blocks.q_terminal @ dxs[-1]
    tweak_grads = [None] * lin.depth
    for i in range(lin.depth - 1, -1, -1):
        tweak_grads[i] = blocks.r_damping * deltas[i] + lin.b_mats[i].T @ p
        p = lin.a_mats[i].T @ p
        if blocks.q_inter[i] is not None:
            p = p + blocks.q_inter[i] @ dxs[i]

    def _sym(m):
        return 0.5 * (m + m.T)

    if U.structure == "identity":
        return ()
    if U.structure == "diagonal":
        q = np.concatenate(tweak_grads)
        g = np.concatenate(layer_grads)
        return (-(q * g),)
    if U.structure == "dense":
        q = np.concatenate(tweak_grads)
        g = np.concatenate(layer_grads)
        return (-_sym(np.outer(q, g)),)
    out = []
    for k, (q, g) in enumerate(zip(tweak_grads, layer_grads)):
        if U.block_kind == "dense":
            out.append((-_sym(np.outer(q, g)),))
        elif U.block_kind == "diag":
            out.append((-(q * g),))
        else:
            o, a, _ = U.values[k]
            m, n, has_bias = U.layer_shapes[k]
            qw = q[: m * n].reshape(m, n)
            gw = g[: m * n].reshape(m, n)
            d_o = -_sym(qw @ a @ gw.T)
            d_a = -_sym(gw.T @ o @ qw)
            d_b = -(q[m * n:] * g[m * n:]) if has_bias else np.zeros(0)
            out.append((d_o, d_a, d_b))
    return tuple(out)


@dataclass(frozen=True)
class InnerSolverConfig:
    """Heavy-ball settings for the metric refresh."""

    inner_steps: int = 50
    inner_lr: float = 1e-3
    momentum: float = 0.9
    damping: float = 1e-3

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.inner_lr <= 0:
            raise ValueError(f"inner_lr must be positive, got {self.inner_lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0,1), got {self.momentum}")
        if self.damping < 0:
            raise ValueError(f"damping must be nonnegative, got {self.damping}")


def learn_preconditioner(state: MetricState, net: LayeredNet,
                         theta: np.ndarray, divergence: str,
                         cfg: InnerSolverConfig) -> MetricState:
    """One cadence refresh: descend the relaxed objective, then smooth.

    Warm-starts from the current values, runs up to ``inner_steps``
    heavy-ball iterations with a monotone-descent guard (step size halved
    and momentum reset on an objective increase, at most 10 halvings — if
    the guard still fails, the incoming state is returned unchanged with a
    logged warning), then applies the EMA and re-projects into the spectral
    bounds.
    """
    if state.structure == "identity":
        raise ValueError("identity metric has no entries to learn")
    _, grad, _, _ = net_forward_backward(net, theta)
    layer_grads = [grad[sl] for sl in net.layer_slices]
    lin = linearize(net, theta)
    blocks = form_lqr_blocks(lin, net, divergence, cfg.damping)

    values = state.values
    velocity = _tree_map(np.zeros_like, values)
    current = replace(state, values=values)
    j_curr = relaxed_objective(current, blocks, lin, layer_grads)
    alpha = cfg.inner_lr

    for _ in range(cfg.inner_steps):
        grads = relaxed_objective_grad(current, blocks, lin, layer_grads)
        accepted = False
        for attempt in range(11):
            vel_try = _tree_map(lambda v, g: cfg.momentum * v - alpha * g,
                                velocity, grads)
            vals_try = _tree_map(np.add, values, vel_try)
            trial = replace(state, values=vals_try)
            j_try = relaxed_objective(trial, blocks, lin, layer_grads)
            if j_try <= j_curr + _DESCENT_SLACK * (1.0 + abs(j_curr)):
                accepted = True
                break
            alpha *= 0.5
            velocity = _tree_map(np.zeros_like, velocity)
        if not accepted:
            logger.warning(
                "inner solver could not decrease the relaxed objective "
                "(last J=%.6e); keeping the previous metric", j_curr,
            )
            return state
        values, velocity, current, j_curr = vals_try, vel_try, trial, j_try

    return ema_update(state, current, state.ema_beta)
