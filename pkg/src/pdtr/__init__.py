"""Prioritized-outcome dynamic treatment regimes.

Estimation of multi-stage treatment regimes under prioritized outcomes,
recovery of the composite weights the fitted regime implicitly
maximizes, doubly robust value inference with sample splitting, a
generalized win ratio, and the simulation designs used to validate all
of it.
"""

from .data_model import (
    Dataset,
    History,
    Standardization,
    Trajectory,
    load_csv,
    split_even,
    standardize_outcomes,
    write_csv,
)
from .errors import DataValidationError, NumericalError, PdtrError
from .inference import (
    CoarseningWeights,
    EllipsoidReport,
    LambdaSetReport,
    ValueEstimate,
    aipw_value,
    coarsening,
    confidence_ellipsoid,
    sigma_hat,
    universal_lambda_set,
)
from .irl import CompositeSpec, estimate_lambda, fibonacci_sphere, sphere_grid, tuned_composite_regime
from .prioritized import (
    CandidateBank,
    DissimilaritySpec,
    Preference,
    PrioritizedFit,
    PrioritizedRegime,
    PrioritizedSelection,
    UtilityWeights,
    dissimilarity,
    equivalence_class,
    fit_prioritized,
    prefers,
    regret,
    select_regime,
    utility,
)
from .q_regression import (
    FeatureBasis,
    GreedyQRegime,
    LinearEngine,
    QModelStack,
    TreeEngine,
    backward_induce,
    conditional_value,
    fit_greedy_qlearning,
    fit_stage_K,
    make_engine,
)
from .regime import (
    CandidateClass,
    FixedRegime,
    Regime,
    TabulatedRegime,
    WeightVector,
    apply_regime,
    regime_document,
    regime_from_document,
    sample_simplex,
)
from .sim_engine import (
    GenerativeModel,
    MCConfig,
    MCResult,
    OracleValue,
    draw_trajectory,
    oracle_conditional_value,
    run_mc,
)
from .win_ratio import WinRatioResult, WinRatioSpec, cyclic_triples, win_ratio

__version__ = "0.1.0"
