"""Bayesian change-point detection in longitudinal networks.

The package decomposes a tensor of symmetric network layers into
regime-specific latent node positions and layer-specific generation weights,
infers an unknown number of structural breaks through a forward-moving hidden
Markov chain, and compares candidate break counts with WAIC, an approximate
marginal likelihood, and the average loss of break points.
"""

from .tensor import (
    NullKind,
    NetworkTensor,
    NullModel,
    CorrectedTensor,
    load_tensor,
    principal_eigen,
    degree_correct,
    read_edge_list,
    save_tensor_json,
    load_tensor_json,
)
from .generate import (
    Scenario,
    BlockSchedule,
    EdgeProbabilities,
    default_schedule,
    make_block_network_change,
    planted_partition_layer,
)
from .sampler import (
    Priors,
    HmtmConfig,
    RegimePath,
    HmtmState,
    McmcTrace,
    fit_hmtm,
    initialize_state,
    gibbs_sweep,
    gram_schmidt,
    layer_logdensities,
    ffbs_states,
    perturb_singletons,
    sample_transition,
    make_rng,
)
from .diagnostics import (
    DiagnosticsReport,
    ModelComparison,
    ChibResult,
    waic,
    average_loss,
    regime_change_prob,
    chib_marginal_likelihood,
    build_report,
    compare_models,
)
from .postprocess import (
    RegimeSummary,
    identify_columns,
    posterior_mode_path,
    summarize_regimes,
    kmeans_blocks,
    export_latent,
    export_rules,
)

__version__ = "0.1.0"
