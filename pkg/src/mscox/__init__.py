"""Multi-state Cox models with empirical Bayes shrinkage and fast occupancy estimates."""

from .coxfit import CoxPH, CoxProblem, Penalty, make_surv, newton_solve, penalized_partial_loglik
from .cumhaz import HazardBundle, constant_hazard_bundle, msfit_generic, patient_rows
from .dataset import (
    MultiStateData,
    PriorGrouping,
    TransitionStructure,
    build_structure,
    expand_covariates,
    load_long_csv,
    write_long_csv,
)
from .empbayes import CoxRFX, fit_coxph, fit_coxrfx, load_fit, null_fit, relative_hazards, save_fit
from .occupancy import (
    OccupancyGrid,
    aalen_johansen,
    discretize_kernels,
    probtrans_aj,
    probtrans_direct,
    probtrans_fft,
    sample_paths,
)
from .resample import BootstrapResult, Pipeline, bootstrap, loo_predictions
from .simulate import SimSpec, named_structure, run_study, simulate_cohort, summarize_study

__version__ = "0.1.0"

__all__ = [
    "BootstrapResult", "CoxPH", "CoxProblem", "CoxRFX", "HazardBundle", "MultiStateData",
    "OccupancyGrid", "Penalty", "Pipeline", "PriorGrouping", "SimSpec", "TransitionStructure",
    "aalen_johansen", "bootstrap", "build_structure", "constant_hazard_bundle",
    "discretize_kernels", "expand_covariates", "fit_coxph", "fit_coxrfx", "load_fit",
    "load_long_csv", "loo_predictions", "make_surv", "msfit_generic", "named_structure",
    "newton_solve", "null_fit", "patient_rows", "penalized_partial_loglik", "probtrans_aj", "probtrans_direct",
    "probtrans_fft", "relative_hazards", "run_study", "sample_paths", "save_fit",
    "simulate_cohort", "summarize_study", "write_long_csv",
]
