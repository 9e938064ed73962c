"""Multi-task fitted Q-iteration on synthetic low-rank episodic MDP ensembles."""
from .analysis import (
    BoundInputs,
    ErrorReport,
    UnboundedConcentrability,
    error_report,
    evaluate,
    lambda_max,
    lambda_max_bruteforce,
    rademacher_estimate,
    theorem1a_bound,
    theorem1c_bound,
    theorem2_bound,
)
from .data import (
    BehaviorPolicy,
    DatasetBundle,
    TaskDataset,
    collect,
    collect_bundle,
    derive_seed,
    load_bundle,
    save_bundle,
)
from .features import EncoderClass, FeatureMap, build_encoder_class, linear_q, psi_eff
from .fqi import (
    LearnedModel,
    SolverConfig,
    fit_downstream,
    run_exact_mtfqi,
    run_mtfqi,
)
from .mdp import (
    EnsembleSpec,
    TabularMDP,
    TaskEnsemble,
    generate_ensemble,
    occupancy,
    optimal_q,
    policy_q,
    recover_true_decoders,
    state_occupancy,
)
from .serialize import load_ensemble, save_ensemble

__version__ = "0.1.0"
