"""Energy functions for two-layer sparse coding and the generic chain form.

Three concrete models are provided:

* sparse reconstruction (lasso):
      0.5 * ||x - W z||^2 + alpha * |z|_1
* invariant pooling over accumulated code magnitudes w (nonnegative code u):
      alpha * sum_i w_i * exp(-(A u)_i) + beta * |u|_1
* unified two-layer model over a short frame sequence x_1..x_T:
      0.5 * sum_t ||x_t - W z_t||^2
      + alpha * sum_{t,i} |z_{t,i}| * (1 + exp(-(A u)_i)) / 2
      + beta * |u|_1

Note that the pooling factor differs between the split and the unified
model (pure exponential vs. logistic-style (1 + exp(-v))/2); with the
logistic form, u = 0 leaves the lasso penalty unchanged instead of
doubling it.  The two are deliberately distinct factor kinds.

All three are instances of one chain energy over layer codes z_1..z_n:

    E(z_1, ..., z_n) = sum_{a=0}^{n} <g_a(z_a), e_{a+1}(z_{a+1})>

with the conventions g_0 = 1 and e_{n+1} = 1.  Each smooth factor e_a is
continuously differentiable with Lipschitz gradient and evaluates to a
scalar or to a vector of per-component values; each nonsmooth factor g_a
is an elementwise weighted absolute value; <., .> sums the elementwise
product after broadcasting.  A boundary between adjacent layers may carry
several (g, e) pairs, which is how uncoupled (separable) multi-layer
instances are expressed.

Layer codes are handled internally as 2-D arrays of shape
(n_rep, dim) so that a batch of frames sharing one dictionary forms a
single layer.  Public helpers accept 1-D vectors where n_rep == 1.

Everything in this module is immutable after construction and safe to
evaluate concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dictionary",
    "SparseCodingProblem",
    "InvariantProblem",
    "UnifiedProblem",
    "QuadraticReconstruction",
    "ExpModulation",
    "LogisticModulation",
    "ConstantSmooth",
    "WeightedL1",
    "ConstantPenalty",
    "LayerSpec",
    "HierarchicalEnergy",
    "DimensionMismatch",
    "normalize_columns",
    "eval_sparse_energy",
    "accumulate_codes",
    "eval_invariant_energy",
    "eval_unified_energy",
    "eval_hierarchical_energy",
    "grad_smooth_layer",
    "sparse_coding_energy",
    "invariant_energy",
    "unified_energy",
]


class DimensionMismatch(ValueError):
    """Raised when an operand's dimensions do not match the model's."""


def _check_dim(name, got, expected, against):
    if got != expected:
        raise DimensionMismatch(
            f"{name} has dimension {got} but {against} expects {expected}"
        )


def normalize_columns(M):
    """Rescale every column of ``M`` to unit Euclidean norm.

    Columns with vanishing norm are returned unchanged.
    """
    M = np.asarray(M, dtype=np.float64)
    norms = np.linalg.norm(M, axis=0)
    safe = np.where(norms > 0.0, norms, 1.0)
    return M / safe


def _as_rows(x):
    """View ``x`` as a 2-D (n_rep, dim) float array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :]
    if x.ndim == 2:
        return x
    raise DimensionMismatch(f"expected a vector or a stack of vectors, got ndim={x.ndim}")


@dataclass(frozen=True, eq=False)
class Dictionary:
    """A dense basis matrix with one column per code unit.

    ``data`` has shape (input_dim, code_dim).  Learning keeps every column
    at unit Euclidean norm; ``nonneg`` marks matrices whose entries are
    constrained to stay >= 0 (the pooling matrix).  Construction does not
    force unit columns because derived objects (e.g. a dictionary
    restricted to observed pixels) legitimately break them.
    """

    data: np.ndarray
    nonneg: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionMismatch(f"dictionary must be a matrix, got ndim={data.ndim}")
        if not np.all(np.isfinite(data)):
            raise ValueError("dictionary entries must be finite")
        if self.nonneg and np.any(data < 0.0):
            raise ValueError("nonneg dictionary contains negative entries")
        object.__setattr__(self, "data", data)

    @property
    def input_dim(self):
        return self.data.shape[0]

    @property
    def code_dim(self):
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class SparseCodingProblem:
    """Lasso instance: 0.5 * ||x - W z||^2 + alpha * |z|_1.

    ``x`` may be a single input vector or a stack of rows sharing W, in
    which case the reconstruction term sums over rows.
    """

    W: Dictionary
    x: np.ndarray
    alpha: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        _check_dim("input x", _as_rows(x).shape[1], self.W.input_dim, "dictionary W")
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "x", x)


@dataclass(frozen=True, eq=False)
class InvariantProblem:
    """Pooling instance: alpha * sum_i z*_i exp(-(A u)_i) + beta * |u|_1, u >= 0."""

    A: Dictionary
    z_star: np.ndarray
    alpha: float
    beta: float

    def __post_init__(self):
        z_star = np.asarray(self.z_star, dtype=np.float64).ravel()
        _check_dim("accumulated code z*", z_star.shape[0], self.A.input_dim, "pooling matrix A")
        if np.any(z_star < 0.0):
            raise ValueError("accumulated code z* must be nonnegative")
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        object.__setattr__(self, "z_star", z_star)


@dataclass(frozen=True, eq=False)
class UnifiedProblem:
    """Joint two-layer instance over a sequence of frames."""

    W: Dictionary
    A: Dictionary
    frames: np.ndarray
    alpha: float
    beta: float

    def __post_init__(self):
        frames = _as_rows(self.frames)
        if frames.shape[0] < 1:
            raise ValueError("need at least one frame")
        _check_dim("frame", frames.shape[1], self.W.input_dim, "dictionary W")
        _check_dim("pooling input", self.A.input_dim, self.W.code_dim, "dictionary W code layer")
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        object.__setattr__(self, "frames", frames)


# ---------------------------------------------------------------------------
# smooth factors
# ---------------------------------------------------------------------------


class QuadraticReconstruction:
    """Smooth factor e(z) = 0.5 * sum_t ||x_t - W z_t||^2 (scalar valued)."""

    scalar_valued = True
    out_dim = None

    def __init__(self, W, x):
        if not isinstance(W, Dictionary):
            W = Dictionary(W)
        x = _as_rows(x)
        _check_dim("input x", x.shape[1], W.input_dim, "dictionary W")
        self.W = W
        self.x = x

    @property
    def in_shape(self):
        return (self.x.shape[0], self.W.code_dim)

    def linear(self, z):
        return z @ self.W.data.T

    def value(self, lin):
        r = lin - self.x
        return 0.5 * float(np.vdot(r, r))

    def grad(self, z, lin, pool):
        # pool is the scalar weight contributed by the upstream nonsmooth factor
        return pool * ((lin - self.x) @ self.W.data)

    def bregman_gap(self, z, cand, lin, lin_cand, pool):
        # e(cand) - e(z) - <cand - z, grad(z)> reduces to a pure curvature
        # term in the linear image, which avoids cancellation
        dl = lin_cand - lin
        return 0.5 * pool * float(np.vdot(dl, dl))


class _Modulation:
    """Common machinery for the exponential pooling factors."""

    scalar_valued = False
    _scale = 1.0  # derivative scale of the elementwise map

    def __init__(self, A, alpha, weights=None):
        if not isinstance(A, Dictionary):
            A = Dictionary(A)
        if not alpha > 0.0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64).ravel()
            _check_dim("weights", weights.shape[0], A.input_dim, "pooling matrix A")
            if np.any(weights < 0.0):
                raise ValueError("modulation weights must be nonnegative")
        self.A = A
        self.alpha = float(alpha)
        self.weights = weights

    @property
    def in_shape(self):
        return (1, self.A.code_dim)

    @property
    def out_dim(self):
        return self.A.input_dim

    def linear(self, u):
        return u @ self.A.data.T

    def _w(self):
        return 1.0 if self.weights is None else self.weights

    def grad(self, u, lin, pool):
        c = self._scale * self.alpha * pool * self._w() * np.exp(-lin[0])
        return -(c[None, :] @ self.A.data)

    def bregman_gap(self, u, cand, lin, lin_cand, pool):
        # sum_i c_i * exp(-q_i) * (exp(-dq_i) - 1 + dq_i), each term >= 0
        c = self._scale * self.alpha * pool * self._w() * np.exp(-lin[0])
        dq = lin_cand[0] - lin[0]
        return float(np.sum(c * (np.expm1(-dq) + dq)))


class ExpModulation(_Modulation):
    """Smooth factor e(u)_i = alpha * w_i * exp(-(A u)_i), one entry per pooled unit.

    Used by the separately trained pooling layer, where ``weights`` holds
    the accumulated magnitudes of the lower-layer code.
    """

    _scale = 1.0

    def value(self, lin):
        return self.alpha * self._w() * np.exp(-lin[0])


class LogisticModulation(_Modulation):
    """Smooth factor e(u)_i = alpha * w_i * (1 + exp(-(A u)_i)) / 2.

    The unified model's penalty modulator: it equals alpha at u = 0 and
    decays toward alpha / 2 as pooled units activate.
    """

    _scale = 0.5

    def value(self, lin):
        return self.alpha * self._w() * 0.5 * (1.0 + np.exp(-lin[0]))


class ConstantSmooth:
    """Constant smooth factor (no gradient, no linear product)."""

    scalar_valued = True
    out_dim = None
    in_shape = None

    def __init__(self, value=1.0):
        self.c = float(value)

    def linear(self, z):
        return None

    def value(self, lin):
        return self.c

    def grad(self, z, lin, pool):
        return np.zeros_like(z)

    def bregman_gap(self, z, cand, lin, lin_cand, pool):
        return 0.0


# ---------------------------------------------------------------------------
# nonsmooth factors
# ---------------------------------------------------------------------------


class WeightedL1:
    """Nonsmooth factor g(z) = weight * |z|, taken elementwise."""

    const = False

    def __init__(self, weight):
        if weight < 0.0:
            raise ValueError(f"L1 weight must be nonnegative, got {weight}")
        self.weight = float(weight)

    def value(self, z):
        return self.weight * np.abs(z)

    def pool(self, z, vector):
        """Contract g(z) down to the pairing arity of the partner factor."""
        if vector:
            return self.weight * np.abs(z).sum(axis=0)
        return self.weight * float(np.abs(z).sum())


class ConstantPenalty:
    """Constant stand-in for g (contributes no nonsmooth term)."""

    const = True

    def __init__(self, value=1.0):
        self.c = float(value)

    def value(self, z):
        return self.c

    def pool(self, z, vector):
        return self.c


_CONST_G = ConstantPenalty(1.0)
_CONST_E = ConstantSmooth(1.0)


# ---------------------------------------------------------------------------
# the chain energy
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One layer of the chain: its smooth factor, its penalty, and its sign.

    ``coupled`` controls whether this layer's penalty is modulated by the
    next layer's smooth factor (the chain coupling) or paired with a
    constant, in which case the next layer's smooth factor is also paired
    with a constant and the boundary carries two independent terms.
    ``shape`` must be given explicitly when ``smooth`` is constant.
    """

    smooth: object
    penalty: object
    nonneg: bool = False
    coupled: bool = True
    shape: tuple | None = None

    def resolved_shape(self):
        if self.smooth.in_shape is not None:
            if self.shape is not None and tuple(self.shape) != self.smooth.in_shape:
                raise DimensionMismatch(
                    f"layer shape {self.shape} conflicts with smooth factor "
                    f"shape {self.smooth.in_shape}"
                )
            return self.smooth.in_shape
        if self.shape is None:
            raise ValueError("a layer with a constant smooth factor needs an explicit shape")
        return tuple(self.shape)


class HierarchicalEnergy:
    """Chain energy E = sum_a <g_a(z_a), e_{a+1}(z_{a+1})> with g_0 = e_{n+1} = 1.

    Layers are indexed 0..n-1.  Boundary b (0..n) carries the factor pairs
    coupling layer b-1 (nonsmooth side) to layer b (smooth side); virtual
    constants close both ends.
    """

    def __init__(self, layers):
        layers = tuple(layers)
        if len(layers) < 1:
            raise ValueError("need at least one layer")
        self.layers = layers
        self.shapes = [spec.resolved_shape() for spec in layers]
        n = len(layers)
        boundaries = []
        for b in range(n + 1):
            g = layers[b - 1].penalty if b >= 1 else _CONST_G
            e = layers[b].smooth if b < n else _CONST_E
            if b >= 1 and b < n and not layers[b - 1].coupled:
                pairs = [(g, _CONST_E), (_CONST_G, e)]
            else:
                pairs = [(g, e)]
            for pg, pe in pairs:
                if not pg.const and pe.out_dim is not None:
                    _check_dim(
                        f"layer {b - 1} code", self.shapes[b - 1][1], pe.out_dim,
                        f"layer {b} smooth factor",
                    )
            boundaries.append(pairs)
        self._boundaries = boundaries

    @property
    def n_layers(self):
        return len(self.layers)

    def zeros(self):
        return [np.zeros(shape) for shape in self.shapes]

    def check_state(self, zs):
        if len(zs) != self.n_layers:
            raise DimensionMismatch(
                f"state has {len(zs)} layers but the energy has {self.n_layers}"
            )
        out = []
        for a, z in enumerate(zs):
            z = _as_rows(z)
            if z.shape != self.shapes[a]:
                raise DimensionMismatch(
                    f"layer {a} code has shape {z.shape} but the energy expects {self.shapes[a]}"
                )
            out.append(z)
        return out

    # -- evaluation ---------------------------------------------------------

    def linearize(self, zs):
        return [spec.smooth.linear(z) for spec, z in zip(self.layers, zs)]

    def _pair_value(self, g, e, z_g, lin_e):
        ev = e.value(lin_e)
        if np.ndim(ev) == 0:
            return g.pool(z_g, vector=False) * float(ev) if z_g is not None else float(ev) * g.c
        pool = g.pool(z_g, vector=True) if z_g is not None else g.c
        return float(np.sum(pool * ev))

    def energy(self, zs, lins=None):
        """Total energy at the state ``zs`` (list of per-layer codes)."""
        zs = self.check_state(zs)
        if lins is None:
            lins = self.linearize(zs)
        total = 0.0
        n = self.n_layers
        for b, pairs in enumerate(self._boundaries):
            z_g = zs[b - 1] if b >= 1 else None
            lin_e = lins[b] if b < n else None
            for g, e in pairs:
                total += self._pair_value(g, e, z_g, lin_e)
        return total

    def _smooth_pairs(self, a):
        """(g, e) pairs at boundary ``a`` whose e is layer a's own smooth factor."""
        return [(g, e) for g, e in self._boundaries[a] if not isinstance(e, ConstantSmooth)]

    def _pool_for(self, g, e, zs, a):
        z_prev = zs[a - 1] if a >= 1 else None
        if z_prev is None:
            return g.c
        return g.pool(z_prev, vector=not e.scalar_valued)

    def layer_smooth_value(self, a, zs, lins):
        """The smooth part of the energy that depends on layer ``a``."""
        total = 0.0
        for g, e in self._smooth_pairs(a):
            pool = self._pool_for(g, e, zs, a)
            ev = e.value(lins[a])
            total += pool * float(ev) if e.scalar_valued else float(np.sum(pool * ev))
        return total

    def layer_smooth_from(self, a, zs, lin_cand):
        """Same as :meth:`layer_smooth_value` at a candidate linear image."""
        total = 0.0
        for g, e in self._smooth_pairs(a):
            pool = self._pool_for(g, e, zs, a)
            ev = e.value(lin_cand)
            total += pool * float(ev) if e.scalar_valued else float(np.sum(pool * ev))
        return total

    def layer_grad(self, a, zs, lins=None):
        """Gradient of the layer-``a`` smooth part with respect to z_a."""
        if not 0 <= a < self.n_layers:
            raise IndexError(f"layer index {a} out of range for {self.n_layers} layers")
        zs = self.check_state(zs)
        if lins is None:
            lins = self.linearize(zs)
        grad = np.zeros(self.shapes[a])
        for g, e in self._smooth_pairs(a):
            pool = self._pool_for(g, e, zs, a)
            grad = grad + e.grad(zs[a], lins[a], pool)
        return grad

    def layer_bregman_gap(self, a, zs, cand, lins, lin_cand):
        gap = 0.0
        for g, e in self._smooth_pairs(a):
            pool = self._pool_for(g, e, zs, a)
            gap += e.bregman_gap(zs[a], cand, lins[a], lin_cand, pool)
        return gap

    def layer_threshold(self, a, zs, lins):
        """Shrinkage threshold (before division by L) for layer ``a``.

        Sums w * e_next over the boundary-(a+1) pairs whose nonsmooth side
        is this layer's penalty; broadcastable against z_a.
        """
        tau = 0.0
        n = self.n_layers
        for g, e in self._boundaries[a + 1]:
            if g.const:
                continue
            if isinstance(e, ConstantSmooth):
                tau = tau + g.weight * e.c
            else:
                ev = e.value(lins[a + 1]) if a + 1 < n else e.value(None)
                tau = tau + g.weight * ev
        return np.asarray(tau, dtype=np.float64)

    def layer_penalty_value(self, a, zs, lins):
        """The nonsmooth part of the energy that depends on layer ``a``."""
        tau = self.layer_threshold(a, zs, lins)
        return float(np.sum(tau * np.abs(zs[a])))


# ---------------------------------------------------------------------------
# concrete evaluations
# ---------------------------------------------------------------------------


def eval_sparse_energy(problem, z):
    """Evaluate 0.5 * ||x - W z||^2 + alpha * |z|_1."""
    z = _as_rows(z)
    x = _as_rows(problem.x)
    _check_dim("code z", z.shape[1], problem.W.code_dim, "dictionary W")
    _check_dim("code z rows", z.shape[0], x.shape[0], "input stack")
    r = z @ problem.W.data.T - x
    return 0.5 * float(np.vdot(r, r)) + problem.alpha * float(np.abs(z).sum())


def accumulate_codes(codes):
    """Elementwise sum of code magnitudes across a list of codes.

    The result is the nonnegative pooled drive that the invariant layer
    models; it is invariant to sign flips of any input entry.
    """
    if len(codes) == 0:
        raise ValueError("cannot accumulate an empty list of codes")
    stacked = np.stack([np.asarray(c, dtype=np.float64) for c in codes])
    return np.abs(stacked).sum(axis=0)


def eval_invariant_energy(problem, u):
    """Evaluate alpha * sum_i z*_i exp(-(A u)_i) + beta * |u|_1."""
    u = np.asarray(u, dtype=np.float64).ravel()
    _check_dim("code u", u.shape[0], problem.A.code_dim, "pooling matrix A")
    drive = problem.A.data @ u
    first = problem.alpha * float(np.sum(problem.z_star * np.exp(-drive)))
    return first + problem.beta * float(np.abs(u).sum())


def eval_unified_energy(problem, z_frames, u):
    """Evaluate the joint two-layer energy at per-frame codes and pooled code."""
    z = _as_rows(z_frames)
    _check_dim("code z", z.shape[1], problem.W.code_dim, "dictionary W")
    _check_dim("frame codes", z.shape[0], problem.frames.shape[0], "frame stack")
    u = np.asarray(u, dtype=np.float64).ravel()
    _check_dim("code u", u.shape[0], problem.A.code_dim, "pooling matrix A")
    r = z @ problem.W.data.T - problem.frames
    recon = 0.5 * float(np.vdot(r, r))
    gate = 0.5 * (1.0 + np.exp(-(problem.A.data @ u)))
    penalty = problem.alpha * float(np.sum(np.abs(z).sum(axis=0) * gate))
    return recon + penalty + problem.beta * float(np.abs(u).sum())


def eval_hierarchical_energy(h, zs):
    """Evaluate a chain energy at the given per-layer codes."""
    return h.energy(zs)


def grad_smooth_layer(h, zs, a):
    """Gradient of the smooth part of layer ``a`` (0-based) of a chain energy."""
    return h.layer_grad(a, zs)


# ---------------------------------------------------------------------------
# embeddings of the concrete models into the chain form
# ---------------------------------------------------------------------------


def sparse_coding_energy(problem):
    """Lasso as a 1-layer chain."""
    return HierarchicalEnergy([
        LayerSpec(
            smooth=QuadraticReconstruction(problem.W, problem.x),
            penalty=WeightedL1(problem.alpha),
        )
    ])


def invariant_energy(problem):
    """Invariant pooling as a 1-layer chain with a nonnegative code."""
    return HierarchicalEnergy([
        LayerSpec(
            smooth=ExpModulation(problem.A, problem.alpha, weights=problem.z_star),
            penalty=WeightedL1(problem.beta),
            nonneg=True,
        )
    ])


def unified_energy(problem):
    """The joint two-layer model as a 2-layer chain.

    Layer 0 holds the per-frame codes with a unit-weight L1 penalty whose
    per-component threshold is modulated by the layer-1 smooth factor
    alpha * (1 + exp(-(A u))) / 2; layer 1 carries the beta L1 penalty and
    the nonnegativity constraint.
    """
    return HierarchicalEnergy([
        LayerSpec(
            smooth=QuadraticReconstruction(problem.W, problem.frames),
            penalty=WeightedL1(1.0),
        ),
        LayerSpec(
            smooth=LogisticModulation(problem.A, problem.alpha),
            penalty=WeightedL1(problem.beta),
            nonneg=True,
        ),
    ])
