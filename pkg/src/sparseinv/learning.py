"""Dictionary learning and model-level inference.

Training alternates exact-ish inference of the codes with a stochastic
gradient step on the dictionaries at those codes held fixed, projecting
every column back to unit norm after each step (and clamping the pooling
matrix at zero).  Three regimes:

* ``train_sparse_coding``: the reconstruction dictionary W alone.
* ``train_invariant``: the pooling matrix A on accumulated code
  magnitudes, with W (optionally) carried along from the first stage.
* ``train_unified``: W and A jointly on frame sequences through the
  two-layer energy.

Training is a sequential loop over samples; with a fixed seed, data and
options the resulting model is bitwise reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .energy import (
    Dictionary,
    InvariantProblem,
    SparseCodingProblem,
    UnifiedProblem,
    invariant_energy,
    normalize_columns,
    sparse_coding_energy,
    unified_energy,
)
from .solver import SolverOptions, solve_hierarchical, solve_invariant, solve_lasso

__all__ = [
    "TrainOptions",
    "Model",
    "TrainingError",
    "MODEL_KINDS",
    "init_dictionary",
    "train_sparse_coding",
    "train_invariant",
    "train_unified",
    "sparse_codes",
    "infer_split",
    "infer_unified",
    "inpaint",
    "save_model",
    "load_model",
    "export_model_csv",
]

MODEL_KINDS = ("split-layer1", "split-layer2", "unified")

# truncated per-sample inference for the convex split solves
_SPLIT_INFER = SolverOptions(max_iter=200, tol=1e-6, momentum="fista")
# joint two-layer inference runs without momentum: the product energy is
# nonconvex and the plain sweep is the variant with a descent guarantee
_UNIFIED_INFER = SolverOptions(max_iter=200, tol=1e-6, momentum="none")


class TrainingError(RuntimeError):
    """Inference failed during training; carries the offending sample index."""


@dataclass(frozen=True)
class TrainOptions:
    """Training knobs.

    The step size decays as learning_rate / (1 + k / lr_decay) with k the
    update counter.  ``infer`` overrides the per-sample inference options
    for every solve; when None, split solves use FISTA and joint unified
    inference uses the momentum-free sweep (both truncated at 200
    iterations, tol 1e-6).
    """

    learning_rate: float = 0.1
    lr_decay: float = 10000.0
    epochs: int = 1
    batch: int = 1
    seed: int = 0
    infer: SolverOptions | None = None

    def __post_init__(self):
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if not self.lr_decay > 0.0:
            raise ValueError("lr_decay must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")


@dataclass(frozen=True, eq=False)
class Model:
    """A trained model: dictionaries plus the sparsity weights.

    ``kind`` records the training regime; split-layer1 models carry no
    pooling matrix.
    """

    kind: str
    W: Dictionary | None
    A: Dictionary | None
    alpha: float
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.W is not None and self.A is not None:
            if self.A.input_dim != self.W.code_dim:
                raise ValueError(
                    f"pooling matrix expects {self.A.input_dim} code units "
                    f"but W has {self.W.code_dim}"
                )

    @property
    def code_dim(self):
        return self.W.code_dim

    @property
    def inv_dim(self):
        return self.A.code_dim


def init_dictionary(rng, input_dim, code_dim, nonneg=False):
    """Unit-norm columns drawn from the standard normal (absolute values
    when nonnegative)."""
    data = rng.standard_normal((input_dim, code_dim))
    if nonneg:
        data = np.abs(data)
    return Dictionary(normalize_columns(data), nonneg=nonneg)


def _project(data, grad, rate, nonneg):
    """Gradient step then column projection; zero-norm columns keep their
    previous direction."""
    new = data - rate * grad
    if nonneg:
        new = np.maximum(new, 0.0)
    norms = np.linalg.norm(new, axis=0)
    dead = norms <= 1e-12
    if np.any(dead):
        new[:, dead] = data[:, dead]
        norms = np.linalg.norm(new, axis=0)
    return new / norms


def _rate(opts, k):
    return opts.learning_rate / (1.0 + k / opts.lr_decay)


def _infer_opts(opts, unified):
    if opts.infer is not None:
        return opts.infer
    return _UNIFIED_INFER if unified else _SPLIT_INFER


def _batches(n, size):
    for start in range(0, n, size):
        yield range(start, min(start + size, n))


def train_sparse_coding(samples, code_dim, alpha, opts=None, on_epoch=None):
    """Learn the reconstruction dictionary W on a sample array (n, dim).

    Per sample: infer the lasso code, step W along the negative
    reconstruction gradient at that code, renormalize the columns.
    """
    opts = opts or TrainOptions()
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("samples must be a nonempty (n, dim) array")
    iopts = _infer_opts(opts, unified=False)
    rng = np.random.default_rng(opts.seed)
    W = init_dictionary(rng, samples.shape[1], code_dim)

    k = 0
    for epoch in range(opts.epochs):
        for batch in _batches(samples.shape[0], opts.batch):
            grad = np.zeros_like(W.data)
            for i in batch:
                x = samples[i]
                try:
                    z, _ = solve_lasso(SparseCodingProblem(W, x, alpha), iopts)
                except Exception as exc:
                    raise TrainingError(f"inference failed at sample {i}: {exc}") from exc
                grad += np.outer(W.data @ z - x, z)
            W = Dictionary(_project(W.data, grad / len(batch), _rate(opts, k), False))
            k += 1
        if on_epoch is not None:
            on_epoch(epoch, Model("split-layer1", W=W, A=None, alpha=alpha))
    return Model("split-layer1", W=W, A=None, alpha=alpha)


def train_invariant(code_samples, inv_dim, alpha, beta, opts=None, W=None,
                    on_epoch=None):
    """Learn the pooling matrix A on accumulated code magnitudes (n, code_dim).

    Per sample: infer the nonnegative pooled code u, step A along the
    negative energy gradient  dE/dA_ij = -alpha z*_i exp(-(A u)_i) u_j,
    clamp at zero, renormalize the columns.  ``W`` is carried into the
    returned model unchanged.
    """
    opts = opts or TrainOptions()
    codes = np.asarray(code_samples, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise ValueError("code_samples must be a nonempty (n, code_dim) array")
    if np.any(codes < 0.0):
        raise ValueError("accumulated codes must be nonnegative")
    iopts = _infer_opts(opts, unified=False)
    rng = np.random.default_rng(opts.seed)
    A = init_dictionary(rng, codes.shape[1], inv_dim, nonneg=True)

    k = 0
    for epoch in range(opts.epochs):
        for batch in _batches(codes.shape[0], opts.batch):
            grad = np.zeros_like(A.data)
            for i in batch:
                z_star = codes[i]
                try:
                    u, _ = solve_invariant(InvariantProblem(A, z_star, alpha, beta), iopts)
                except Exception as exc:
                    raise TrainingError(f"inference failed at sample {i}: {exc}") from exc
                grad += -alpha * np.outer(z_star * np.exp(-(A.data @ u)), u)
            A = Dictionary(_project(A.data, grad / len(batch), _rate(opts, k), True),
                           nonneg=True)
            k += 1
        if on_epoch is not None:
            on_epoch(epoch, Model("split-layer2", W=W, A=A, alpha=alpha, beta=beta))
    return Model("split-layer2", W=W, A=A, alpha=alpha, beta=beta)


def train_unified(sequences, code_dim, inv_dim, alpha, beta, opts=None,
                  on_epoch=None):
    """Learn W and A jointly on frame sequences (n, n_t, dim).

    Per sequence: jointly infer the per-frame codes and the pooled code
    through the two-layer energy, then step both dictionaries at those
    codes and project.
    """
    opts = opts or TrainOptions()
    seqs = np.asarray(sequences, dtype=np.float64)
    if seqs.ndim == 2:
        seqs = seqs[:, None, :]
    if seqs.ndim != 3 or seqs.shape[0] == 0:
        raise ValueError("sequences must be a nonempty (n, n_t, dim) array")
    iopts = _infer_opts(opts, unified=True)
    rng = np.random.default_rng(opts.seed)
    W = init_dictionary(rng, seqs.shape[2], code_dim)
    A = init_dictionary(rng, code_dim, inv_dim, nonneg=True)

    k = 0
    for epoch in range(opts.epochs):
        for batch in _batches(seqs.shape[0], opts.batch):
            grad_W = np.zeros_like(W.data)
            grad_A = np.zeros_like(A.data)
            for i in batch:
                frames = seqs[i]
                problem = UnifiedProblem(W, A, frames, alpha, beta)
                try:
                    state, _ = solve_hierarchical(unified_energy(problem), None, iopts)
                except Exception as exc:
                    raise TrainingError(f"inference failed at sample {i}: {exc}") from exc
                z, u = state.z[0], state.z[1][0]
                grad_W += (z @ W.data.T - frames).T @ z
                pooled = np.abs(z).sum(axis=0)
                grad_A += -0.5 * alpha * np.outer(pooled * np.exp(-(A.data @ u)), u)
            rate = _rate(opts, k)
            W = Dictionary(_project(W.data, grad_W / len(batch), rate, False))
            A = Dictionary(_project(A.data, grad_A / len(batch), rate, True), nonneg=True)
            k += 1
        if on_epoch is not None:
            on_epoch(epoch, Model("unified", W=W, A=A, alpha=alpha, beta=beta))
    return Model("unified", W=W, A=A, alpha=alpha, beta=beta)


# ---------------------------------------------------------------------------
# model-level inference
# ---------------------------------------------------------------------------


def sparse_codes(W, X, alpha, opts=None, chunk=256):
    """Lasso codes for every row of X, solved in chunks; returns (n, code_dim)."""
    X = np.asarray(X, dtype=np.float64)
    opts = opts or SolverOptions(max_iter=400, tol=1e-8, momentum="fista")
    out = np.zeros((X.shape[0], W.code_dim))
    for rows in _batches(X.shape[0], chunk):
        idx = list(rows)
        z, _ = solve_lasso(SparseCodingProblem(W, X[idx], alpha), opts)
        out[idx] = z
    return out


def infer_split(model, x, opts=None):
    """Split-stack inference: lasso codes, accumulate magnitudes, pool.

    ``x`` is one input vector or a stack of frames.  Returns (z, u) where
    z matches the shape of ``x``; u is None when the model has no pooling
    matrix.
    """
    iopts = opts or _SPLIT_INFER
    z, _ = solve_lasso(SparseCodingProblem(model.W, x, model.alpha), iopts)
    if model.A is None:
        return z, None
    z_star = np.abs(np.atleast_2d(z)).sum(axis=0)
    u, _ = solve_invariant(InvariantProblem(model.A, z_star, model.alpha, model.beta), iopts)
    return z, u


def infer_unified(model, frames, opts=None):
    """Joint two-layer inference; returns (per-frame codes, pooled code)."""
    if model.A is None:
        raise ValueError("unified inference needs a pooling matrix")
    iopts = opts or _UNIFIED_INFER
    problem = UnifiedProblem(model.W, model.A, frames, model.alpha, model.beta)
    state, _ = solve_hierarchical(unified_energy(problem), None, iopts)
    z = state.z[0]
    if np.asarray(frames).ndim == 1:
        z = z[0]
    return z, state.z[1][0]


def inpaint(model, x, mask, opts=None):
    """Reconstruct ``x`` from its observed pixels only.

    ``mask`` is True on observed pixels.  The reconstruction term of the
    model energy is restricted to the observed rows while the code
    penalties (and the pooled layer, for unified models) are unchanged;
    the returned vector is the full reconstruction W z.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    mask = np.asarray(mask, dtype=bool).ravel()
    if mask.shape != x.shape:
        raise ValueError(f"mask shape {mask.shape} does not match input {x.shape}")
    if not mask.any():
        raise ValueError("mask hides every pixel; nothing to condition on")
    W_obs = Dictionary(model.W.data[mask])
    x_obs = x[mask]
    if model.kind == "unified":
        iopts = opts or _UNIFIED_INFER
        problem = UnifiedProblem(W_obs, model.A, x_obs[None, :], model.alpha, model.beta)
        state, _ = solve_hierarchical(unified_energy(problem), None, iopts)
        z = state.z[0][0]
    else:
        iopts = opts or _SPLIT_INFER
        z, _ = solve_lasso(SparseCodingProblem(W_obs, x_obs, model.alpha), iopts)
    return model.W.data @ z


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"SINVMODL"
_VERSION = 1
_KIND_CODES = {kind: i + 1 for i, kind in enumerate(MODEL_KINDS)}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def _pack_matrix(d):
    head = struct.pack("<IIB", d.data.shape[0], d.data.shape[1], int(d.nonneg))
    return head + np.ascontiguousarray(d.data, dtype="<f8").tobytes()


def save_model(model, path):
    """Write the model as a little-endian binary container.

    Layout: magic, version, kind, presence flags, alpha, beta, then each
    present matrix as (rows, cols, nonneg flag, row-major float64 data).
    """
    flags = (1 if model.W is not None else 0) | (2 if model.A is not None else 0)
    blob = _MAGIC + struct.pack(
        "<HBBdd", _VERSION, _KIND_CODES[model.kind], flags, model.alpha, model.beta
    )
    if model.W is not None:
        blob += _pack_matrix(model.W)
    if model.A is not None:
        blob += _pack_matrix(model.A)
    with open(path, "wb") as fh:
        fh.write(blob)


def _unpack_matrix(blob, offset, what):
    head = struct.calcsize("<IIB")
    if offset + head > len(blob):
        raise ValueError(f"model file truncated in {what} header")
    rows, cols, nonneg = struct.unpack_from("<IIB", blob, offset)
    offset += head
    nbytes = rows * cols * 8
    if offset + nbytes > len(blob):
        raise ValueError(
            f"model file truncated in {what} data: expected {nbytes} bytes "
            f"for a {rows}x{cols} matrix"
        )
    data = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=offset)
    return Dictionary(data.reshape(rows, cols).copy(), nonneg=bool(nonneg)), offset + nbytes


def load_model(path):
    """Read a model container written by :func:`save_model`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) or blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic {blob[:8]!r})")
    offset = len(_MAGIC)
    head = struct.calcsize("<HBBdd")
    if len(blob) < offset + head:
        raise ValueError(f"{path}: truncated model header")
    version, kind_code, flags, alpha, beta = struct.unpack_from("<HBBdd", blob, offset)
    offset += head
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    if kind_code not in _KIND_NAMES:
        raise ValueError(f"{path}: unknown model kind code {kind_code}")
    W = A = None
    if flags & 1:
        W, offset = _unpack_matrix(blob, offset, "W")
    if flags & 2:
        A, offset = _unpack_matrix(blob, offset, "A")
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after matrices")
    return Model(_KIND_NAMES[kind_code], W=W, A=A, alpha=alpha, beta=beta)


def export_model_csv(model, out_dir):
    """Write each present matrix as a CSV file next to the binary container."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if model.W is not None:
        np.savetxt(out / "W.csv", model.W.data, delimiter=",", fmt="%.17g")
        written.append(out / "W.csv")
    if model.A is not None:
        np.savetxt(out / "A.csv", model.A.data, delimiter=",", fmt="%.17g")
        written.append(out / "A.csv")
    return written
