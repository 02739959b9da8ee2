"""Command-line front end.

Subcommands: toy | train | responses | bench | inpaint.  Every run reads
an optional flat key=value config file, applies command-line overrides,
and writes CSV tables (plus PGM mosaics and PNG figures) under --out.
Exit codes: 0 = ran and the run's acceptance check passed, 1 = ran but
the check failed, 2 = configuration or input error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import analysis, datagen, figures, learning
from .datagen import ToyConfig
from .energy import InvariantProblem, SparseCodingProblem
from .learning import Model, TrainOptions, inpaint, load_model, save_model
from .solver import SolverOptions, solve_invariant, solve_lasso

__all__ = ["RunConfig", "ConfigError", "main"]


class ConfigError(ValueError):
    """Bad configuration or unusable input (exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of the experiment commands, with desk-scale defaults."""

    seed: int = 0
    out: str = "out"
    mode: str = "split"            # split | unified
    threads: int = 1
    figures: bool = True
    # toy line world
    size: int = 20
    n_orientations: int = 4
    n_positions: int = 10
    line_prob: float = 0.2
    # model dimensions (desk scale; --paper_scale switches to 400/100)
    code_dim: int = 100
    inv_dim: int = 25
    paper_scale: bool = False
    alpha: float = 0.5
    beta: float = 0.3
    # training
    learning_rate: float = 0.1
    lr_decay: float = 10000.0
    epochs: int = 1
    batch: int = 1
    n_samples: int = 4000
    n_eval: int = 1000
    # inference
    infer_max_iter: int = 200
    infer_tol: float = 1e-6
    momentum: str = "fista"
    momentum_cap: float = 0.9
    L0: float = 1.0
    eta: float = 2.0
    # imagery and sequence extraction
    window: int = 20
    n_t: int = 3
    mag_lo: float = 1.0
    mag_hi: float = 2.0
    n_sequences: int = 3000
    image_size: int = 128
    n_images: int = 30
    gaussian_width: int = 9
    contrast_cutoff: float = 0.01
    input: str = ""                # directory or file of PGM images; empty = synthetic
    model: str = ""                # model file to load (responses/inpaint) or resume from
    model_out: str = "model.sinv"
    # response maps
    units: int = 30
    b_min: float = -10.0
    b_max: float = 10.0
    b_steps: int = 41
    theta_steps: int = 36
    edge_freq: float = 1.0
    beta_sweep: str = ""           # e.g. "0.5,0.3,0.2,0.1"
    width_ratio_min: float = 1.5
    # bench
    bench_instances: int = 100
    bench_iters: int = 500
    bench_pairs: int = 1000
    # inpainting
    mask_ratio: float = 0.3
    n_holdout: int = 200

    def validate(self):
        if self.mode not in ("split", "unified"):
            raise ConfigError(f"mode must be split or unified, got {self.mode!r}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.momentum not in ("none", "fista", "capped"):
            raise ConfigError(f"momentum must be none, fista or capped, got {self.momentum!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative (0 = evaluate untrained)")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")
        return self


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_HELP = {
    "seed": "root seed; every output is a pure function of seed and config",
    "out": "output directory",
    "mode": "training regime: split (two stages) or unified (joint energy)",
    "threads": "worker hint; the current implementation runs sequentially",
    "figures": "also render PNG figures next to the CSV/PGM outputs",
    "size": "toy patch side length",
    "n_orientations": "toy line orientations (4 canonical ones supported)",
    "n_positions": "parallel line positions per orientation",
    "line_prob": "independent probability of each line in a toy patch",
    "code_dim": "number of code (simple) units",
    "inv_dim": "number of pooled (invariant) units",
    "paper_scale": "use the 400/100 unit dimensions instead of the desk scale",
    "alpha": "code sparsity weight",
    "beta": "pooled-code sparsity weight",
    "learning_rate": "initial SGD step size",
    "lr_decay": "step decays as rate/(1 + k/lr_decay)",
    "epochs": "training passes over the data (0 = untrained baseline)",
    "batch": "samples per dictionary update (1 = pure stochastic)",
    "n_samples": "training patches for the toy/inpaint corpora",
    "n_eval": "fresh patches for the purity evaluation",
    "infer_max_iter": "per-sample inference sweep budget",
    "infer_tol": "per-sample inference stop tolerance",
    "momentum": "extra-point schedule for convex solves: none, fista, capped",
    "momentum_cap": "cap for momentum=capped",
    "L0": "initial curvature estimate for backtracking",
    "eta": "backtracking multiplier (> 1)",
    "window": "extraction window side length",
    "n_t": "frames per extracted sequence",
    "mag_lo": "minimum window displacement per frame (px)",
    "mag_hi": "maximum window displacement per frame (px)",
    "n_sequences": "number of extracted training sequences",
    "image_size": "side length of synthetic source images",
    "n_images": "number of synthetic source images",
    "gaussian_width": "width of the local mean/contrast Gaussian (px)",
    "contrast_cutoff": "contrast floor as a fraction of the global std",
    "input": "directory or file of PGM images (empty = synthetic imagery)",
    "model": "model file to load, or to resume training from",
    "model_out": "file name for the trained model (under --out)",
    "units": "units sampled into the response CSVs (0 = none)",
    "b_min": "smallest edge distance in the response grid",
    "b_max": "largest edge distance in the response grid",
    "b_steps": "edge-distance samples",
    "theta_steps": "edge-orientation samples over [0, pi)",
    "edge_freq": "spatial frequency of the edge stimulus",
    "beta_sweep": "comma list of betas to retrain the pooling layer with",
    "width_ratio_min": "required invariant/simple median width ratio",
    "bench_instances": "instances per benchmark family",
    "bench_iters": "recorded sweeps per benchmark solve",
    "bench_pairs": "sampled point pairs for the descent inequality",
    "mask_ratio": "fraction of pixels hidden from the inpainter",
    "n_holdout": "held-out patches for the inpainting comparison",
}

_SUBCOMMAND_DEFAULTS = {
    # the toy world needs fewer units than the texture models
    "toy": {"code_dim": 60, "inv_dim": 12, "epochs": 2, "learning_rate": 0.05},
    "inpaint": {"code_dim": 60, "inv_dim": 12, "epochs": 2, "learning_rate": 0.05,
                "n_samples": 2500},
}


def _parse_value(key, raw):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind in ("bool", bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config_file(path):
    """Read a flat key=value file with # comments into a dict."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def _resolve_config(args, command):
    cfg = RunConfig()
    if command in _SUBCOMMAND_DEFAULTS:
        cfg = replace(cfg, **_SUBCOMMAND_DEFAULTS[command])
    if getattr(args, "config", None):
        cfg = replace(cfg, **parse_config_file(args.config))
    overrides = {
        key: getattr(args, key)
        for key in _FIELDS
        if getattr(args, key, None) is not None
    }
    cfg = replace(cfg, **overrides)
    if cfg.paper_scale:
        untouched = "code_dim" not in overrides and "inv_dim" not in overrides
        if untouched:
            cfg = replace(cfg, code_dim=400, inv_dim=100)
    return cfg.validate()


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_config(cfg, out):
    lines = [f"{f.name}={_fmt(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    (out / "config_used.txt").write_text("\n".join(lines) + "\n")


def _outdir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out)
    return out


def _train_opts(cfg, seed):
    infer = SolverOptions(
        max_iter=cfg.infer_max_iter, tol=cfg.infer_tol, L0=cfg.L0, eta=cfg.eta,
        momentum=cfg.momentum, momentum_cap=cfg.momentum_cap,
    )
    return TrainOptions(
        learning_rate=cfg.learning_rate, lr_decay=cfg.lr_decay,
        epochs=max(cfg.epochs, 1), batch=cfg.batch, seed=seed, infer=None,
    ), infer


def _toy_cfg(cfg):
    try:
        return ToyConfig(size=cfg.size, n_orientations=cfg.n_orientations,
                         n_positions=cfg.n_positions, line_prob=cfg.line_prob)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _seeds(cfg, n):
    return np.random.SeedSequence(cfg.seed).spawn(n)


def _save_filters_outputs(out, model, cfg, stem="filters"):
    size = int(round(np.sqrt(model.W.input_dim)))
    filters = model.W.data.T.reshape(-1, size, size)
    mosaic = analysis.filter_mosaic(filters)
    datagen.write_pgm(out / f"{stem}.pgm", mosaic)
    if cfg.figures:
        figures.save_mosaic_png(out / f"{stem}.png", mosaic, title="code filters")


def _train_toy_model(cfg, patches, train_seed):
    topts, _ = _train_opts(cfg, train_seed)
    if cfg.mode == "unified":
        return learning.train_unified(patches[:, None, :], cfg.code_dim, cfg.inv_dim,
                                      cfg.alpha, cfg.beta, topts)
    stage1 = learning.train_sparse_coding(patches, cfg.code_dim, cfg.alpha, topts)
    codes = learning.sparse_codes(stage1.W, patches, cfg.alpha)
    return learning.train_invariant(np.abs(codes), cfg.inv_dim, cfg.alpha, cfg.beta,
                                    topts, W=stage1.W)


def _untrained_model(cfg, d, seed):
    rng = np.random.default_rng(seed)
    W = learning.init_dictionary(rng, d, cfg.code_dim)
    A = learning.init_dictionary(rng, cfg.code_dim, cfg.inv_dim, nonneg=True)
    kind = "unified" if cfg.mode == "unified" else "split-layer2"
    return Model(kind, W=W, A=A, alpha=cfg.alpha, beta=cfg.beta)


# ---------------------------------------------------------------------------
# toy
# ---------------------------------------------------------------------------


def cmd_toy(cfg):
    out = _outdir(cfg)
    toy = _toy_cfg(cfg)
    data_ss, train_ss, eval_ss = _seeds(cfg, 3)
    patches, _, _ = datagen.toy_patches(toy, cfg.n_samples, np.random.default_rng(data_ss))
    X = patches.reshape(cfg.n_samples, -1)

    if cfg.epochs == 0:
        model = _untrained_model(cfg, X.shape[1], train_ss)
    else:
        model = _train_toy_model(cfg, X, train_ss)

    active, purities, freq = analysis.orientation_purity(
        model, toy, cfg.n_eval, np.random.default_rng(eval_ss)
    )

    _save_filters_outputs(out, model, cfg)
    grouping = analysis.grouping_report(model, top_k=min(9, cfg.code_dim))
    rows = [
        (j, rank, unit, weight)
        for j, ranked in enumerate(grouping)
        for rank, (unit, weight) in enumerate(ranked)
    ]
    _write_csv(out / "grouping.csv", ["invariant_unit", "rank", "simple_unit", "weight"], rows)
    gm = analysis.grouping_mosaic(model, top_k=min(9, cfg.code_dim))
    datagen.write_pgm(out / "grouping.pgm", gm)
    if cfg.figures:
        figures.save_mosaic_png(out / "grouping.png", gm,
                                title="strongest code filters per pooled unit")

    purity_by_unit = dict(zip(active.tolist(), purities.tolist()))
    _write_csv(out / "purity.csv", ["unit", "activation_frequency", "active", "purity"],
               [(j, freq[j], int(j in purity_by_unit), purity_by_unit.get(j, float("nan")))
                for j in range(len(freq))])

    passed = len(active) == 4 and bool(np.all(purities >= 0.9))
    _write_csv(out / "summary.csv",
               ["mode", "n_active", "min_purity", "passed"],
               [(cfg.mode, len(active), float(purities.min()) if len(purities) else float("nan"),
                 int(passed))])
    if cfg.figures:
        figures.save_purity_png(out / "purity.png", freq, active, purities)
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_images(cfg, rng):
    if cfg.input:
        path = Path(cfg.input)
        if path.is_dir():
            files = sorted(path.glob("*.pgm"))
        else:
            files = [path]
        if not files:
            raise ConfigError(f"no PGM images found under {cfg.input}")
        images = [datagen.read_pgm(f) for f in files]
    else:
        images = [
            datagen.gen_texture_image(cfg.image_size, cfg.image_size, rng)
            for _ in range(cfg.n_images)
        ]
    return [datagen.preprocess(img, cfg.gaussian_width, cfg.contrast_cutoff)
            for img in images]


def _extract_corpus(cfg, images, rng):
    seqs = np.zeros((cfg.n_sequences, cfg.n_t, cfg.window * cfg.window))
    for i in range(cfg.n_sequences):
        img = images[int(rng.integers(len(images)))]
        seq = datagen.extract_sequence(img, cfg.window, cfg.n_t,
                                       (cfg.mag_lo, cfg.mag_hi), rng)
        seqs[i] = seq.frames.reshape(cfg.n_t, -1)
    return seqs


def _train_texture_model(cfg, seqs, train_seed):
    topts, _ = _train_opts(cfg, train_seed)
    if cfg.mode == "unified":
        return learning.train_unified(seqs, cfg.code_dim, cfg.inv_dim,
                                      cfg.alpha, cfg.beta, topts)
    frames = seqs.reshape(-1, seqs.shape[2])
    stage1 = learning.train_sparse_coding(frames, cfg.code_dim, cfg.alpha, topts)
    z_star = np.zeros((seqs.shape[0], cfg.code_dim))
    for i in range(seqs.shape[0]):
        codes = learning.sparse_codes(stage1.W, seqs[i], cfg.alpha)
        z_star[i] = np.abs(codes).sum(axis=0)
    return learning.train_invariant(z_star, cfg.inv_dim, cfg.alpha, cfg.beta,
                                    topts, W=stage1.W)


def cmd_train(cfg):
    out = _outdir(cfg)
    data_ss, train_ss = _seeds(cfg, 2)
    rng = np.random.default_rng(data_ss)
    try:
        images = _load_images(cfg, rng)
        seqs = _extract_corpus(cfg, images, rng)
    except (OSError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"cannot build the training corpus: {exc}") from exc

    if cfg.model:
        base = load_model(cfg.model)  # resume: keep dictionaries, continue the loop
        topts, _ = _train_opts(cfg, train_ss)
        if base.kind == "unified":
            model = learning.train_unified(seqs, base.code_dim, base.inv_dim,
                                           base.alpha, base.beta, topts)
        else:
            model = _train_texture_model(cfg, seqs, train_ss)
    else:
        model = _train_texture_model(cfg, seqs, train_ss)

    save_model(model, out / cfg.model_out)
    learning.export_model_csv(model, out)
    _save_filters_outputs(out, model, cfg)
    _write_csv(out / "train_summary.csv",
               ["mode", "code_dim", "inv_dim", "alpha", "beta", "n_sequences"],
               [(cfg.mode, model.code_dim, model.inv_dim, model.alpha, model.beta,
                 seqs.shape[0])])
    return 0


# ---------------------------------------------------------------------------
# responses
# ---------------------------------------------------------------------------


def _response_grid(cfg):
    b = np.linspace(cfg.b_min, cfg.b_max, cfg.b_steps)
    theta = np.linspace(0.0, np.pi, cfg.theta_steps, endpoint=False)
    return b, theta


def _map_rows(maps):
    rows = []
    for m in maps:
        for ib, b in enumerate(m.b_samples):
            for it, th in enumerate(m.theta_samples):
                rows.append((m.unit_id, b, th, m.grid[ib, it]))
    return rows


def cmd_responses(cfg):
    out = _outdir(cfg)
    if not cfg.model:
        raise ConfigError("responses needs --model pointing at a trained model file")
    try:
        model = load_model(cfg.model)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load model: {exc}") from exc
    if model.W is None or model.A is None:
        raise ConfigError("responses needs a model with both dictionaries")

    b, theta = _response_grid(cfg)
    summary = analysis.width_summary(model, cfg.edge_freq, b, theta)

    pick = np.random.default_rng(_seeds(cfg, 1)[0])
    for kind, dim in (("simple", model.code_dim), ("invariant", model.inv_dim)):
        n_pick = min(cfg.units, dim)
        ids = sorted(pick.choice(dim, size=n_pick, replace=False).tolist()) if n_pick else []
        maps = analysis.response_maps(model, kind, ids, cfg.edge_freq, b, theta)
        _write_csv(out / f"responses_{kind}.csv",
                   ["unit", "b", "theta", "response"], _map_rows(maps))
        if cfg.figures:
            figures.save_response_panel_png(out / f"responses_{kind}.png", maps,
                                            title=f"{kind} unit responses")

    width_rows = [("simple", j, w) for j, w in sorted(summary["simple_widths"].items())]
    width_rows += [("invariant", j, w) for j, w in sorted(summary["invariant_widths"].items())]
    _write_csv(out / "widths.csv", ["kind", "unit", "width"], width_rows)
    _write_csv(out / "width_summary.csv",
               ["median_simple", "median_invariant", "ratio", "required_ratio"],
               [(summary["median_simple"], summary["median_invariant"],
                 summary["ratio"], cfg.width_ratio_min)])

    trend_ok = True
    if cfg.beta_sweep:
        betas = [float(tok) for tok in cfg.beta_sweep.split(",") if tok.strip()]
        trend_ok = _beta_sweep(cfg, model, betas, b, theta, out)

    ratio = summary["ratio"]
    ratio_ok = not np.isfinite(ratio) or ratio >= cfg.width_ratio_min
    return 0 if (ratio_ok and trend_ok) else 1


def _beta_sweep(cfg, model, betas, b, theta, out):
    """Retrain the pooling layer at each beta and track the region overlap."""
    data_ss, train_ss = _seeds(cfg, 2)
    rng = np.random.default_rng(data_ss)
    images = _load_images(cfg, rng)
    seqs = _extract_corpus(cfg, images, rng)
    z_star = np.zeros((seqs.shape[0], model.code_dim))
    for i in range(seqs.shape[0]):
        codes = learning.sparse_codes(model.W, seqs[i], model.alpha)
        z_star[i] = np.abs(codes).sum(axis=0)

    topts, _ = _train_opts(cfg, train_ss)
    rows = []
    overlaps = []
    for beta in sorted(betas, reverse=True):
        swept = learning.train_invariant(z_star, cfg.inv_dim, model.alpha, beta,
                                         topts, W=model.W)
        maps = analysis.response_maps(swept, "invariant", None, cfg.edge_freq, b, theta)
        responsive = [m for m in maps if np.nan_to_num(m.grid).max() > 0]
        overlap = analysis.region_overlap(maps)
        overlaps.append(overlap)
        rows.append((beta, len(responsive), overlap))
        if cfg.figures:
            figures.save_response_panel_png(out / f"responses_beta_{beta:g}.png", maps,
                                            title=f"pooled responses, beta={beta:g}")
    trend_ok = bool(np.all(np.diff(overlaps) >= -1e-12))
    _write_csv(out / "betasweep_overlap.csv",
               ["beta", "responsive_units", "mean_overlap"], rows)
    _write_csv(out / "betasweep_summary.csv", ["nondecreasing"], [(int(trend_ok),)])
    if cfg.figures:
        figures.save_curve_png(out / "betasweep_overlap.png", overlaps,
                               "sweep index (decreasing beta)", "mean region overlap")
    return trend_ok


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _random_lasso(rng, max_rows=32, max_cols=64):
    from .energy import Dictionary, normalize_columns

    d = int(rng.integers(8, max_rows + 1))
    m = int(rng.integers(d, max_cols + 1))
    W = Dictionary(normalize_columns(rng.standard_normal((d, m))))
    support = rng.choice(m, size=max(1, m // 8), replace=False)
    z_true = np.zeros(m)
    z_true[support] = rng.standard_normal(support.size)
    x = W.data @ z_true + 0.1 * rng.standard_normal(d)
    alpha = float(0.2 * np.abs(W.data.T @ x).max())
    return SparseCodingProblem(W, x, alpha)


def _random_invariant(rng):
    from .energy import Dictionary, normalize_columns

    m = int(rng.integers(8, 33))
    p = int(rng.integers(4, 17))
    A = Dictionary(normalize_columns(np.abs(rng.standard_normal((m, p)))), nonneg=True)
    z_star = np.abs(rng.standard_normal(m)) * (rng.random(m) < 0.5)
    return InvariantProblem(A, z_star, alpha=0.5, beta=0.3)


def _random_separable(rng):
    from .energy import HierarchicalEnergy, LayerSpec, QuadraticReconstruction, WeightedL1
    from .energy import normalize_columns

    layers = []
    for _ in range(2):
        d = int(rng.integers(6, 17))
        m = int(rng.integers(d, 25))
        W = normalize_columns(rng.standard_normal((d, m)))
        x = W @ (rng.standard_normal(m) * (rng.random(m) < 0.3)) + 0.1 * rng.standard_normal(d)
        alpha = float(0.2 * np.abs(W.T @ x).max())
        layers.append(LayerSpec(QuadraticReconstruction(W, x), WeightedL1(alpha),
                                coupled=False))
    # the last layer's coupling flag is ignored (virtual constant above)
    return HierarchicalEnergy(layers)


def _random_unified(rng):
    from .energy import Dictionary, UnifiedProblem, normalize_columns, unified_energy

    d = int(rng.integers(6, 17))
    m = int(rng.integers(d, 25))
    p = int(rng.integers(3, 9))
    W = Dictionary(normalize_columns(rng.standard_normal((d, m))))
    A = Dictionary(normalize_columns(np.abs(rng.standard_normal((m, p)))), nonneg=True)
    frames = rng.standard_normal((int(rng.integers(1, 4)), d))
    return unified_energy(UnifiedProblem(W, A, frames, alpha=0.5, beta=0.3))


def cmd_bench(cfg):
    from .solver import check_descent_lemma, shared_backtrack_L, solve_hierarchical
    from .energy import sparse_coding_energy, invariant_energy

    out = _outdir(cfg)
    ss = _seeds(cfg, 4)
    run_opts = SolverOptions(max_iter=cfg.bench_iters, tol=0.0, momentum="fista")
    ista_opts = SolverOptions(max_iter=cfg.bench_iters, tol=0.0, momentum="none")
    ref_opts = SolverOptions(max_iter=20 * cfg.bench_iters, tol=0.0, momentum="fista")

    all_ok = True

    # rate families: lasso and the pooling problem, with and without momentum
    rate_rows = []
    gap_curves = {"fista": [], "ista": []}
    rng = np.random.default_rng(ss[0])
    for i in range(cfg.bench_instances):
        family = "lasso" if i % 2 == 0 else "pooling"
        problem = _random_lasso(rng) if family == "lasso" else _random_invariant(rng)
        h = (sparse_coding_energy if family == "lasso" else invariant_energy)(problem)
        ref_state, ref_trace = solve_hierarchical(h, None, ref_opts)
        e_star = min(ref_trace.energies)
        d0 = float(np.sqrt(sum(np.vdot(z, z) for z in ref_state.z)))
        for kind, opts in (("fista", run_opts), ("ista", ista_opts)):
            state, trace = solve_hierarchical(h, None, opts)
            L = max(state.L)
            e_star_k = min(e_star, min(trace.energies))
            holds, worst = analysis.verify_rate(trace, e_star_k, L, d0, kind)
            rate_rows.append((i, family, kind, L, worst, int(holds)))
            all_ok = all_ok and holds
            gaps = np.maximum(np.asarray(trace.energies[1:]) - e_star_k, 0.0)
            gap_curves[kind].append(gaps)
    _write_csv(out / "rates.csv",
               ["instance", "family", "kind", "L", "worst_ratio", "holds"], rate_rows)

    # descent inequality on the convex families
    lemma_rows = []
    rng = np.random.default_rng(ss[1])
    n_pairs = cfg.bench_pairs
    for i in range(n_pairs):
        if i % 2 == 0:
            h = sparse_coding_energy(_random_lasso(rng))
        else:
            h = _random_separable(rng)
        zs = [rng.standard_normal(s) for s in h.shapes]
        z_hat = [rng.standard_normal(s) for s in h.shapes]
        L = shared_backtrack_L(h, zs)
        holds, slack = check_descent_lemma(h, zs, z_hat, L)
        lemma_rows.append((i, h.n_layers, L, slack, int(holds)))
        all_ok = all_ok and holds
    _write_csv(out / "descent_lemma.csv",
               ["pair", "n_layers", "L", "slack", "holds"], lemma_rows)

    # monotone sweeps without momentum, convex and nonconvex
    mono_rows = []
    rng = np.random.default_rng(ss[2])
    mono_opts = SolverOptions(max_iter=100, tol=0.0, momentum="none")
    for i in range(cfg.bench_instances):
        convex = i % 2 == 0
        h = _random_separable(rng) if convex else _random_unified(rng)
        _, trace = solve_hierarchical(h, None, mono_opts)
        increases = float(np.max(np.diff(trace.energies))) if len(trace.energies) > 1 else 0.0
        ok = increases <= 1e-12
        mono_rows.append((i, "convex" if convex else "nonconvex", increases, int(ok)))
        all_ok = all_ok and ok
    _write_csv(out / "monotone.csv",
               ["instance", "family", "max_energy_increase", "holds"], mono_rows)

    # descent-inequality slack on the nonconvex family: recorded, not gated
    noncvx_rows = []
    rng = np.random.default_rng(ss[3])
    for i in range(min(cfg.bench_pairs, 200)):
        h = _random_unified(rng)
        zs = [np.abs(rng.standard_normal(s)) for s in h.shapes]
        z_hat = [np.abs(rng.standard_normal(s)) for s in h.shapes]
        L = shared_backtrack_L(h, zs)
        holds, slack = check_descent_lemma(h, zs, z_hat, L)
        noncvx_rows.append((i, L, slack, int(holds)))
    _write_csv(out / "descent_lemma_nonconvex.csv",
               ["pair", "L", "slack", "holds"], noncvx_rows)

    if cfg.figures:
        worst_L = max(row[3] for row in rate_rows)
        figures.save_rate_curves_png(
            out / "rate_fista.png", gap_curves["fista"],
            lambda k: 2.0 * worst_L * 100.0 / (k + 1.0) ** 2, "2 L d^2 / (k+1)^2 (scaled)")
        figures.save_slack_hist_png(out / "descent_slack.png",
                                    [row[3] for row in lemma_rows],
                                    title="convex families")
    _write_csv(out / "bench_summary.csv", ["all_checks_pass"], [(int(all_ok),)])
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# inpaint
# ---------------------------------------------------------------------------


def cmd_inpaint(cfg):
    out = _outdir(cfg)
    if cfg.mask_ratio >= 1.0:
        raise ConfigError("mask_ratio 1.0 hides every pixel; nothing to condition on")
    toy = _toy_cfg(cfg)
    data_ss, train_ss, holdout_ss, mask_ss = _seeds(cfg, 4)

    patches, _, _ = datagen.toy_patches(toy, cfg.n_samples, np.random.default_rng(data_ss))
    X = patches.reshape(cfg.n_samples, -1)
    topts, _ = _train_opts(cfg, train_ss)

    one_layer = learning.train_sparse_coding(X, cfg.code_dim, cfg.alpha, topts)
    two_layer = learning.train_unified(X[:, None, :], cfg.code_dim, cfg.inv_dim,
                                       cfg.alpha, cfg.beta, topts)

    holdout, _, _ = datagen.toy_patches(toy, cfg.n_holdout, np.random.default_rng(holdout_ss))
    H = holdout.reshape(cfg.n_holdout, -1)
    mask_rng = np.random.default_rng(mask_ss)

    rows = []
    rms = {"one": [], "two": []}
    examples = []
    for i in range(cfg.n_holdout):
        x = H[i]
        mask = mask_rng.random(x.size) >= cfg.mask_ratio
        if not mask.any():
            mask[int(mask_rng.integers(x.size))] = True
        hidden = ~mask
        recon_one = inpaint(one_layer, x, mask)
        recon_two = inpaint(two_layer, x, mask)
        if hidden.any():
            err_one = float(np.sqrt(np.mean((recon_one[hidden] - x[hidden]) ** 2)))
            err_two = float(np.sqrt(np.mean((recon_two[hidden] - x[hidden]) ** 2)))
        else:
            err_one = float(np.sqrt(np.mean((recon_one - x) ** 2)))
            err_two = float(np.sqrt(np.mean((recon_two - x) ** 2)))
        rms["one"].append(err_one)
        rms["two"].append(err_two)
        rows.append((i, err_one, err_two))
        if len(examples) < 4 and hidden.any() and x.any():
            examples.append((x, mask, recon_one, recon_two))

    med_one = float(np.median(rms["one"]))
    med_two = float(np.median(rms["two"]))
    passed = med_two <= med_one
    _write_csv(out / "inpaint_rms.csv", ["patch", "rms_one_layer", "rms_two_layer"], rows)
    _write_csv(out / "inpaint_summary.csv",
               ["mask_ratio", "median_one_layer", "median_two_layer", "passed"],
               [(cfg.mask_ratio, med_one, med_two, int(passed))])
    if cfg.figures and examples:
        figures.save_inpaint_png(out / "inpaint_examples.png",
                                 [e[0] for e in examples], [e[1] for e in examples],
                                 [e[2] for e in examples], [e[3] for e in examples])
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "toy": (cmd_toy, "train on the line world and check the pooled grouping"),
    "train": (cmd_train, "train on translating patch sequences and save the model"),
    "responses": (cmd_responses, "edge-response maps and tuning-width summary"),
    "bench": (cmd_bench, "seeded solver benchmarks: rate bounds, descent checks"),
    "inpaint": (cmd_inpaint, "masked-reconstruction comparison of both model kinds"),
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="sparseinv",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", default=None, help="key=value config file")
        defaults = {**{f.name: getattr(RunConfig(), f.name) for f in fields(RunConfig)},
                    **_SUBCOMMAND_DEFAULTS.get(name, {})}
        for key, kind in _FIELDS.items():
            flag = "--" + key.replace("_", "-")
            if kind in ("bool", bool):
                group = p.add_mutually_exclusive_group()
                group.add_argument(flag, dest=key, action="store_true", default=None,
                                   help=f"{_HELP[key]} (default: {defaults[key]})")
                group.add_argument("--no-" + key.replace("_", "-"), dest=key,
                                   action="store_false", default=None,
                                   help=argparse.SUPPRESS)
            else:
                typ = {int: int, float: float}.get(kind, str)
                if kind in ("int", int):
                    typ = int
                elif kind in ("float", float):
                    typ = float
                else:
                    typ = str
                p.add_argument(flag, dest=key, type=typ, default=None,
                               help=f"{_HELP[key]} (default: {defaults[key]})")
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args, args.command)
        code = _COMMANDS[args.command][0](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
