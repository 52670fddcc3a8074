"""cocycle-lab: simulation and certification for random matrix products.

The package certifies sufficient conditions for average logarithmic
contraction of projective actions, and stress-tests distributional
limit theorems (Berry-Esseen, Wasserstein rates, concentration,
moderate deviations, variance growth) for the norm cocycle
S_n = ln ||g_n ... g_1 x0|| at desk scale.
"""

from .matcore import (
    Direction,
    SingularMatrixError,
    SquareMatrix,
    SvdTriple,
    act_projective,
    cocycle_sigma,
    det_normalize,
    norm_N,
    projective_distance,
    svd,
)
from .ensembles import (
    CoupledSample,
    EnsembleSpec,
    MarkovState,
    product_range,
    product_range_scaled,
    sample_coupled,
    sample_markov_step,
    sample_matrix,
    spec_digest,
)
from .certify import (
    CertificateReport,
    PairSearchConfig,
    c_bound,
    c_tilde,
    check_decay_condition,
    check_lemma_bounded,
    check_lemma_unbounded,
    check_markov_contraction,
    check_sl2_moment,
    check_svd_condition,
    check_u1_regularity,
    estimate_holder_contraction,
    estimate_log_contraction,
    perturbation_theta,
    r_bound,
    report_from_json_dict,
    report_to_json_dict,
    solve_eps0,
    svd_probability_vectors,
)
from .mclab import (
    ApproxCurve,
    TailCurve,
    TrajectoryStats,
    VarianceProfile,
    approx_coefficients,
    contraction_tail,
    increments,
    simulate,
    variance_profile,
)
from .limitstat import (
    DeviationReport,
    DistanceReport,
    RateFit,
    concentration_check,
    distance_report,
    lq_distance,
    mdp_check,
    moment_gap,
    rate_fit,
    standardize,
    wasserstein_p,
    weighted_kolmogorov,
)
from .seeding import SeedPath

__version__ = "0.1.0"

__all__ = [
    "Direction",
    "SingularMatrixError",
    "SquareMatrix",
    "SvdTriple",
    "act_projective",
    "cocycle_sigma",
    "det_normalize",
    "norm_N",
    "projective_distance",
    "svd",
    "CoupledSample",
    "EnsembleSpec",
    "MarkovState",
    "product_range",
    "product_range_scaled",
    "sample_coupled",
    "sample_markov_step",
    "sample_matrix",
    "spec_digest",
    "CertificateReport",
    "PairSearchConfig",
    "c_bound",
    "c_tilde",
    "check_decay_condition",
    "check_lemma_bounded",
    "check_lemma_unbounded",
    "check_markov_contraction",
    "check_sl2_moment",
    "check_svd_condition",
    "check_u1_regularity",
    "estimate_holder_contraction",
    "estimate_log_contraction",
    "perturbation_theta",
    "r_bound",
    "report_from_json_dict",
    "report_to_json_dict",
    "solve_eps0",
    "svd_probability_vectors",
    "ApproxCurve",
    "TailCurve",
    "TrajectoryStats",
    "VarianceProfile",
    "approx_coefficients",
    "contraction_tail",
    "increments",
    "simulate",
    "variance_profile",
    "DeviationReport",
    "DistanceReport",
    "RateFit",
    "concentration_check",
    "distance_report",
    "lq_distance",
    "mdp_check",
    "moment_gap",
    "rate_fit",
    "standardize",
    "wasserstein_p",
    "weighted_kolmogorov",
    "SeedPath",
    "__version__",
]
