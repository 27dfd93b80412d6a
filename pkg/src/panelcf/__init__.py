"""Control-function estimation for panel binary-response models in a
triangular system: reduced-form system MLE, empirical-Bayes control
functions, probit/GEE second stage, ASF/APE point estimates and bounds with
two-step inference, competitor estimators, and a Monte Carlo harness."""

from .panel import (PanelDataset, ReducedFormParams, SecondStageParams,
                    load_panel_csv, save_panel_csv, validate_rank_conditions)
from .reduced_form import ReducedFormFit, fit_stepwise
from .control_functions import (ControlFunctionSet, compute_control_functions,
                                compute_cf_random_coeff,
                                compute_cf_scalar_nonspherical,
                                export_control_functions)
from .second_stage import (SecondStageFit, build_design, fit_gee,
                           fit_linear_cf, fit_pooled_probit)
from .alternatives import AltFit, ape_alt, fit_cond_logit, fit_cre_probit, fit_pw
from .effects import ApeEstimate, ape_bounds, ape_point, asf_point
from .inference import (TwoStepCovariance, attach_inference, bootstrap_two_step,
                        imbens_manski_ci, v2_star)
from .estimators import ControlFunctionProbit, ReducedFormEstimator
from .mc import (DgpSpec, McResult, cf_misspec_experiment, dgp_table1,
                 dgp_table2, generate, run_experiment, true_ape)

__all__ = [
    "PanelDataset", "ReducedFormParams", "SecondStageParams",
    "load_panel_csv", "save_panel_csv", "validate_rank_conditions",
    "ReducedFormFit", "fit_stepwise",
    "ControlFunctionSet", "compute_control_functions",
    "compute_cf_scalar_nonspherical", "compute_cf_random_coeff",
    "export_control_functions",
    "SecondStageFit", "build_design", "fit_pooled_probit", "fit_gee",
    "fit_linear_cf",
    "AltFit", "fit_pw", "fit_cre_probit", "fit_cond_logit", "ape_alt",
    "ApeEstimate", "asf_point", "ape_point", "ape_bounds",
    "TwoStepCovariance", "v2_star", "imbens_manski_ci", "bootstrap_two_step",
    "attach_inference",
    "ControlFunctionProbit", "ReducedFormEstimator",
    "DgpSpec", "McResult", "dgp_table1", "dgp_table2", "generate",
    "true_ape", "run_experiment", "cf_misspec_experiment",
]

__version__ = "0.1.0"
