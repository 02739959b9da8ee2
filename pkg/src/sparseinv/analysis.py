"""Analysis of trained models: unit grouping, Gabor fits, edge-response
maps, orientation purity on the line world, and convergence-rate checks
on solver traces."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .datagen import ToyConfig, edge_stimulus, toy_patches
from .energy import InvariantProblem, SparseCodingProblem
from .solver import SolverOptions, solve_invariant, solve_lasso

__all__ = [
    "GaborFit",
    "ResponseMap",
    "grouping_report",
    "gabor_patch",
    "fit_gabor",
    "response_maps",
    "response_map",
    "tuning_width",
    "width_summary",
    "region_overlap",
    "orientation_purity",
    "verify_rate",
    "filter_mosaic",
    "grouping_mosaic",
]

_RESP_INFER = SolverOptions(max_iter=400, tol=1e-8, momentum="fista")

DEFAULT_B = np.linspace(-10.0, 10.0, 41)
DEFAULT_THETA = np.linspace(0.0, np.pi, 36, endpoint=False)


@dataclass(frozen=True)
class GaborFit:
    """Fitted Gabor parameters plus the relative squared fit error."""

    center: tuple
    orientation: float
    frequency: float
    phase: float
    sigma: tuple
    amplitude: float
    residual: float


@dataclass(frozen=True, eq=False)
class ResponseMap:
    """One unit's response magnitude on a (distance, orientation) grid."""

    grid: np.ndarray
    b_samples: np.ndarray
    theta_samples: np.ndarray
    unit_id: int
    kind: str


# ---------------------------------------------------------------------------
# grouping
# ---------------------------------------------------------------------------


def grouping_report(model, top_k=9):
    """Rank, per pooled unit, the code units by connection weight.

    Returns a list over pooled units of [(code unit, weight), ...] sorted
    by descending weight with ties broken by ascending unit index.
    """
    if model.A is None:
        raise ValueError("grouping needs a model with a pooling matrix")
    A = model.A.data
    if top_k > A.shape[0]:
        warnings.warn(
            f"top_k={top_k} exceeds the {A.shape[0]} code units; clamping",
            stacklevel=2,
        )
        top_k = A.shape[0]
    report = []
    for j in range(A.shape[1]):
        order = np.lexsort((np.arange(A.shape[0]), -A[:, j]))
        report.append([(int(i), float(A[i, j])) for i in order[:top_k]])
    return report


# ---------------------------------------------------------------------------
# gabor fitting
# ---------------------------------------------------------------------------


def gabor_patch(size, center, orientation, frequency, phase, sigma, amplitude=1.0):
    """Render a Gabor on a size x size grid with centered pixel coordinates.

    ``center`` is (x0, y0) in the same centered coordinates, sigma the
    (along, across) envelope widths, frequency in cycles per pixel.
    """
    c = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    xx, yy = np.meshgrid(c, c)
    dx = xx - center[0]
    dy = yy - center[1]
    xr = dx * np.cos(orientation) + dy * np.sin(orientation)
    yr = -dx * np.sin(orientation) + dy * np.cos(orientation)
    envelope = np.exp(-(xr * xr) / (2.0 * sigma[0] ** 2) - (yr * yr) / (2.0 * sigma[1] ** 2))
    return amplitude * envelope * np.cos(2.0 * np.pi * frequency * xr + phase)


def _gabor_params_patch(size, params):
    x0, y0, theta, freq, phase, sx, sy, amp = params
    return gabor_patch(size, (x0, y0), theta, freq, phase, (sx, sy), amp)


def fit_gabor(filt):
    """Fit a Gabor to a filter by coarse grid search plus local refinement.

    The grid scans orientation, frequency and phase with the center seeded
    at the filter's energy centroid and the amplitude solved in closed
    form; the best cell seeds a bounded least-squares refinement of all
    parameters.  The residual is ||filter - fit||^2 / ||filter||^2.
    """
    filt = np.asarray(filt, dtype=np.float64)
    size = filt.shape[0]
    norm2 = float(np.vdot(filt, filt))
    if norm2 <= 0.0:
        raise ValueError("cannot fit a Gabor to an all-zero filter")

    c = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    xx, yy = np.meshgrid(c, c)
    w = filt * filt
    x0 = float(np.sum(xx * w) / np.sum(w))
    y0 = float(np.sum(yy * w) / np.sum(w))

    best = None
    thetas = np.linspace(0.0, np.pi, 16, endpoint=False)
    freqs = np.geomspace(0.04, 0.45, 8)
    phases = np.array([0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi])
    for theta in thetas:
        for freq in freqs:
            sig = max(1.2, 0.35 / freq)
            for phase in phases:
                g = gabor_patch(size, (x0, y0), theta, freq, phase, (sig, sig))
                gg = float(np.vdot(g, g))
                if gg <= 0.0:
                    continue
                amp = float(np.vdot(filt, g)) / gg
                res = norm2 - amp * amp * gg  # ||filt - amp g||^2 by orthogonal projection
                if best is None or res < best[0]:
                    best = (res, (x0, y0, theta, freq, phase, sig, sig, amp))

    half = size / 2.0
    lower = [-half, -half, best[1][2] - np.pi / 2, 0.01, -2.0 * np.pi, 0.3, 0.3, -np.inf]
    upper = [half, half, best[1][2] + np.pi / 2, 0.6, 4.0 * np.pi, float(size), float(size), np.inf]
    x0v = np.clip(np.asarray(best[1], dtype=np.float64), lower, upper)

    scale = np.sqrt(norm2)

    def residuals(p):
        return (_gabor_params_patch(size, p) - filt).ravel() / scale

    sol = optimize.least_squares(residuals, x0v, bounds=(lower, upper), max_nfev=400)
    x0, y0, theta, freq, phase, sx, sy, amp = sol.x
    if amp < 0.0:
        amp = -amp
        phase += np.pi
    residual = float(np.sum(sol.fun ** 2))
    return GaborFit(
        center=(float(x0), float(y0)),
        orientation=float(np.mod(theta, np.pi)),
        frequency=float(freq),
        phase=float(np.mod(phase, 2.0 * np.pi)),
        sigma=(float(sx), float(sy)),
        amplitude=float(amp),
        residual=residual,
    )


# ---------------------------------------------------------------------------
# edge-response maps
# ---------------------------------------------------------------------------


def _response_tensors(model, k, b_samples, theta_samples, opts, want_invariant):
    """Response magnitudes of every unit over the stimulus grid.

    Returns (simple, invariant) with shapes (nb, ntheta, code_dim) and
    (nb, ntheta, inv_dim); the invariant tensor is None when not wanted.
    Both layers use the split pipeline (codes, then pooled code on their
    magnitudes).  A failed inference leaves NaN at its grid point.
    """
    size = int(round(np.sqrt(model.W.input_dim)))
    if size * size != model.W.input_dim:
        raise ValueError("model input is not a square patch")
    opts = opts or _RESP_INFER
    nb, nt = len(b_samples), len(theta_samples)
    simple = np.full((nb, nt, model.W.code_dim), np.nan)
    invariant = None
    if want_invariant:
        if model.A is None:
            raise ValueError("invariant responses need a model with a pooling matrix")
        invariant = np.full((nb, nt, model.A.code_dim), np.nan)
    for it, theta in enumerate(theta_samples):
        for ib, b in enumerate(b_samples):
            x = edge_stimulus(b, theta, k, size).ravel()
            try:
                z, _ = solve_lasso(SparseCodingProblem(model.W, x, model.alpha), opts)
            except Exception:
                continue
            simple[ib, it] = np.abs(z)
            if invariant is not None:
                try:
                    u, _ = solve_invariant(
                        InvariantProblem(model.A, np.abs(z), model.alpha, model.beta), opts
                    )
                except Exception:
                    continue
                invariant[ib, it] = u
    return simple, invariant


def response_maps(model, kind, unit_ids=None, k=1.0, b_samples=None,
                  theta_samples=None, opts=None):
    """Response maps of selected units to the parametric edge.

    ``kind`` is "simple" (code magnitudes) or "invariant" (pooled code).
    Every grid point is an independent inference, so the result does not
    depend on evaluation order.
    """
    if kind not in ("simple", "invariant"):
        raise ValueError(f"kind must be 'simple' or 'invariant', got {kind!r}")
    b = DEFAULT_B if b_samples is None else np.asarray(b_samples, dtype=np.float64)
    th = DEFAULT_THETA if theta_samples is None else np.asarray(theta_samples, dtype=np.float64)
    simple, invariant = _response_tensors(model, k, b, th, opts,
                                          want_invariant=(kind == "invariant"))
    tensor = simple if kind == "simple" else invariant
    if unit_ids is None:
        unit_ids = range(tensor.shape[2])
    return [
        ResponseMap(grid=tensor[:, :, j].copy(), b_samples=b.copy(),
                    theta_samples=th.copy(), unit_id=int(j), kind=kind)
        for j in unit_ids
    ]


def response_map(model, kind, unit_id, k=1.0, b_samples=None, theta_samples=None,
                 opts=None):
    """Response map of one unit; see :func:`response_maps`."""
    return response_maps(model, kind, [unit_id], k, b_samples, theta_samples, opts)[0]


def tuning_width(rmap, level=0.5):
    """Width of the unit's above-half-peak response range in edge distance.

    Measured at the unit's best orientation as the total measure of the b
    samples whose response exceeds ``level`` times the unit's peak.
    Returns NaN for a unit that never responds.
    """
    grid = rmap.grid
    if not np.any(np.nan_to_num(grid) > 0.0):
        return float("nan")
    peak = np.nanmax(grid)
    it = int(np.nanargmax(np.nanmax(grid, axis=0)))
    col = np.nan_to_num(grid[:, it])
    db = float(np.median(np.diff(rmap.b_samples))) if len(rmap.b_samples) > 1 else 1.0
    return float(np.count_nonzero(col > level * peak)) * db


def width_summary(model, k=1.0, b_samples=None, theta_samples=None, opts=None,
                  active_frac=0.01):
    """Median position-tuning widths of both layers and their ratio.

    A unit counts as active when its peak response reaches ``active_frac``
    of the strongest peak of its own layer.  Returns a dict with the
    per-layer widths, medians, and the invariant/simple median ratio.
    """
    b = DEFAULT_B if b_samples is None else np.asarray(b_samples, dtype=np.float64)
    th = DEFAULT_THETA if theta_samples is None else np.asarray(theta_samples, dtype=np.float64)
    simple, invariant = _response_tensors(model, k, b, th, opts, want_invariant=True)

    def layer_widths(tensor, kind):
        peaks = np.nanmax(np.nan_to_num(tensor), axis=(0, 1))
        floor = active_frac * peaks.max() if peaks.max() > 0 else np.inf
        widths = {}
        for j in range(tensor.shape[2]):
            if peaks[j] >= floor and peaks[j] > 0.0:
                rmap = ResponseMap(tensor[:, :, j], b, th, j, kind)
                widths[j] = tuning_width(rmap)
        return widths

    sw = layer_widths(simple, "simple")
    iw = layer_widths(invariant, "invariant")
    med_s = float(np.median(list(sw.values()))) if sw else float("nan")
    med_i = float(np.median(list(iw.values()))) if iw else float("nan")
    ratio = med_i / med_s if sw and iw and med_s > 0 else float("nan")
    return {
        "simple_widths": sw,
        "invariant_widths": iw,
        "median_simple": med_s,
        "median_invariant": med_i,
        "ratio": ratio,
    }


def region_overlap(maps, level=0.5):
    """Mean pairwise Jaccard overlap of above-half-peak response regions.

    Units that never respond are skipped; fewer than two responsive units
    give 0.
    """
    regions = []
    for m in maps:
        grid = np.nan_to_num(m.grid)
        peak = grid.max()
        if peak > 0.0:
            regions.append(grid > level * peak)
    if len(regions) < 2:
        return 0.0
    total = 0.0
    count = 0
    for i in range(len(regions)):
        for j in range(i + 1, len(regions)):
            union = np.logical_or(regions[i], regions[j]).sum()
            inter = np.logical_and(regions[i], regions[j]).sum()
            total += inter / union if union else 0.0
            count += 1
    return total / count


# ---------------------------------------------------------------------------
# line-world grouping quality
# ---------------------------------------------------------------------------


def orientation_purity(model, toy_cfg=None, n_eval=1000, rng=None, opts=None,
                       active_freq=0.05):
    """How cleanly the pooled units separate line orientations.

    Draws ``n_eval`` fresh line-world patches, infers the pooled code for
    each, and calls a unit active when it fires on more than
    ``active_freq`` of them.  A unit's purity is the fraction of its total
    activation mass spent on its best orientation (1.0 = perfectly
    orientation-selective).  Returns (active unit ids, purity per active
    unit, activation frequency per unit).
    """
    if model.A is None:
        raise ValueError("purity needs a model with a trained pooling matrix")
    toy_cfg = toy_cfg or ToyConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    opts = opts or _RESP_INFER
    patches, orientations, _ = toy_patches(toy_cfg, n_eval, rng)
    X = patches.reshape(n_eval, -1)

    U = np.zeros((n_eval, model.A.code_dim))
    for i in range(n_eval):
        z, _ = solve_lasso(SparseCodingProblem(model.W, X[i], model.alpha), opts)
        u, _ = solve_invariant(
            InvariantProblem(model.A, np.abs(z), model.alpha, model.beta), opts
        )
        U[i] = u

    freq = (U > 1e-12).mean(axis=0)
    active = np.flatnonzero(freq > active_freq)
    purities = []
    for j in active:
        mass = U[:, j].sum()
        per_orient = [U[orientations == o, j].sum() for o in range(toy_cfg.n_orientations)]
        purities.append(float(max(per_orient) / mass) if mass > 0 else 0.0)
    return active, np.asarray(purities), freq


# ---------------------------------------------------------------------------
# convergence-rate verification
# ---------------------------------------------------------------------------


def verify_rate(trace, E_star, L, z0_dist, kind):
    """Check a solver trace against its worst-case energy-gap bound.

    ``kind`` "fista" checks E_k - E* <= 2 L d^2 / (k+1)^2 and "ista"
    checks E_k - E* <= L d^2 / (2k), exhaustively for every recorded
    sweep.  Returns (holds, worst ratio of gap to bound).  ``E_star`` must
    come from an independent, higher-accuracy solve; a reference above the
    trace minimum is rejected.
    """
    if kind not in ("ista", "fista"):
        raise ValueError(f"kind must be 'ista' or 'fista', got {kind!r}")
    energies = np.asarray(trace.energies, dtype=np.float64)
    if energies.size < 2:
        raise ValueError("trace records no sweeps")
    lowest = float(energies.min())
    if E_star > lowest + 1e-9 * max(1.0, abs(E_star)):
        raise ValueError(
            f"bad reference: E*={E_star!r} exceeds the trace minimum {lowest!r}"
        )
    d2 = z0_dist * z0_dist
    worst = 0.0
    for k in range(1, energies.size):
        gap = max(energies[k] - E_star, 0.0)
        bound = 2.0 * L * d2 / (k + 1.0) ** 2 if kind == "fista" else L * d2 / (2.0 * k)
        if bound == 0.0:
            if gap > 0.0:
                return False, float("inf")
            continue
        worst = max(worst, gap / bound)
    return worst <= 1.0, worst


# ---------------------------------------------------------------------------
# filter mosaics
# ---------------------------------------------------------------------------


def filter_mosaic(filters, ncols=None, pad=1):
    """Arrange filters (n, h, w) into one grid image, each min-max scaled."""
    filters = np.asarray(filters, dtype=np.float64)
    n, h, w = filters.shape
    if ncols is None:
        ncols = int(np.ceil(np.sqrt(n)))
    nrows = int(np.ceil(n / ncols))
    out = np.full((nrows * (h + pad) + pad, ncols * (w + pad) + pad), 0.5)
    for i in range(n):
        f = filters[i]
        lo, hi = f.min(), f.max()
        tile = (f - lo) / (hi - lo) if hi > lo else np.full_like(f, 0.5)
        r, c = divmod(i, ncols)
        out[pad + r * (h + pad): pad + r * (h + pad) + h,
            pad + c * (w + pad): pad + c * (w + pad) + w] = tile
    return out


def grouping_mosaic(model, top_k=9):
    """Per pooled unit, its strongest code filters side by side (one row each)."""
    size = int(round(np.sqrt(model.W.input_dim)))
    report = grouping_report(model, top_k)
    rows = []
    for ranked in report:
        tiles = [model.W.data[:, i].reshape(size, size) for i, _ in ranked]
        rows.append(filter_mosaic(np.stack(tiles), ncols=len(tiles)))
    heights = {r.shape[0] for r in rows}
    assert len(heights) == 1
    return np.vstack(rows)
