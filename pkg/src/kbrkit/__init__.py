"""Importance-weighted kernel Bayes' rule, kernel Bayes filtering, and benchmarks."""

from .adaptive import (
    AdaptiveLossInputs,
    FeatureNet,
    adaptive_loss,
    adaptive_loss_grad,
    adaptive_posterior_weights,
    train_features,
)
from .baselines import ParticleCloud, TrueModel, ekf_run, ess, pf_run
from .benchmarks import (
    DynamicsSpec,
    GaussianTaskSpec,
    StateSpaceTrace,
    gen_gaussian_task,
    oscillatory_spec,
    rotation_spec,
    run_kbf_experiment,
    run_posterior_mean_experiment,
    run_rate_study,
    simulate_dynamics,
    tune_hyperparams,
)
from .density_ratio import RatioEstimate, kulsif_evaluate, kulsif_fit, tune_eta
from .embeddings import (
    ConditionalOperator,
    MeanEmbedding,
    SampleSet,
    embedding_inner_products,
    empirical_embedding,
    fit_cme,
)
from .kbf import FilterState, KbfModel, correct_step, fit_kbf, init_state, predict_step, run_filter
from .kbr import (
    KbrConfig,
    PosteriorEmbedding,
    iw_kbr_weights,
    kbr_posterior,
    original_kbr_weights,
    posterior_expectation,
)
from .kernels import (
    KernelSpec,
    NumericalFailure,
    RFFMap,
    draw_rff_map,
    gram,
    median_heuristic,
    psd_solve,
    rff_features,
)

__version__ = "0.1.0"
