"""All-layer margins for small feedforward classifiers.

The pieces: networks with per-layer perturbation slots, margin solvers and
brute-force oracles, closed-form kappa lower bounds, generalization-bound
arithmetic, plain and perturbed-objective training, and l-infinity attacks.
"""

from .analytic import (
    BoundReport,
    ComplexityReport,
    KappaReport,
    RequiresSmoothActivation,
    UndefinedAtMisclassified,
    bound_report,
    complexity_report,
    composite_complexity,
    dataset_kappa_nn,
    kappa_adv,
    kappa_nn,
    kappa_star,
    layer_complexity,
    margin_lower_bound,
    optimal_alpha,
    surrogate_loss,
)
from .data import (
    Dataset,
    corrupt_labels,
    gen_synthetic,
    load_idx,
    partition,
    read_idx,
    save_csv,
    save_idx,
)
from .kernels import BACKEND
from .margin import (
    GridSpec,
    LipschitzGapReport,
    MarginResult,
    SolverConfig,
    adversarial_margin,
    brute_force_margin,
    estimate_margin,
    margin_lipschitz_gap,
)
from .network import (
    Network,
    NormSpec,
    PerturbationSet,
    activation_smoothness,
    forward_perturb,
    forward_trace,
    init_network,
    load_network,
    operator_norm,
    save_network,
    weighted_p_norm,
)
from .robust import (
    AttackResult,
    AttackSpec,
    pgd_attack,
    pixel_radius,
    robust_amo_update,
    robust_error,
    train_robust,
)
from .training import (
    TrainConfig,
    TrainRecord,
    TrainResult,
    amo_update,
    evaluate,
    perturbed_objective,
    train,
)

__version__ = "0.1.0"
