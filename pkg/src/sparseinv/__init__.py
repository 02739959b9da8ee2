"""Two-layer sparse coding with pooled invariant units.

A reconstruction layer finds sparse codes of image patches against a
learned dictionary; a second layer learns which code units fire together
(across the frames of a short sequence, or within one patch) and pools
them through a multiplicative gate on their sparsity penalties.
Inference is block proximal-gradient descent with backtracking, with or
without momentum, on a generic chain energy.
"""

from .energy import (
    Dictionary,
    DimensionMismatch,
    HierarchicalEnergy,
    InvariantProblem,
    LayerSpec,
    SparseCodingProblem,
    UnifiedProblem,
    accumulate_codes,
    eval_hierarchical_energy,
    eval_invariant_energy,
    eval_sparse_energy,
    eval_unified_energy,
    grad_smooth_layer,
    invariant_energy,
    normalize_columns,
    sparse_coding_energy,
    unified_energy,
)
from .solver import (
    BacktrackingError,
    CodeState,
    SolverOptions,
    SolverTrace,
    check_descent_lemma,
    check_stationarity,
    momentum_update,
    shrink,
    solve_hierarchical,
    solve_invariant,
    solve_lasso,
)
from .learning import (
    Model,
    TrainOptions,
    TrainingError,
    infer_split,
    infer_unified,
    init_dictionary,
    inpaint,
    load_model,
    save_model,
    sparse_codes,
    train_invariant,
    train_sparse_coding,
    train_unified,
)
from .datagen import (
    PatchSequence,
    ToyConfig,
    edge_stimulus,
    extract_sequence,
    gen_toy_patch,
    gen_texture_image,
    preprocess,
    toy_patches,
)
from .analysis import (
    GaborFit,
    ResponseMap,
    fit_gabor,
    grouping_report,
    orientation_purity,
    response_map,
    response_maps,
    tuning_width,
    verify_rate,
    width_summary,
)

__version__ = "0.1.0"
