"""Semiparametric odds-ratio association models.

The odds-ratio function of a bivariate distribution is modelled by a
parametric family ``psi_theta(x, y)`` while both marginals stay
unrestricted.  The package fits ``theta`` by conditional maximum likelihood
under stratified (outcome-conditional) sampling, supplies Wald inference,
builds finite joints from marginals and odds ratios, and runs Monte-Carlo
checks of the estimator.
"""

__version__ = "0.1.0"

from .distfactory import (FiniteJoint, LogLinearParams, empirical_marginal, ipf_fit,
                          kl_divergence, loglinear_params, mixture_and_conditionals,
                          odds_ratio_matrix, read_table_csv, saturated_supports,
                          write_table_csv)
from .estimator import (AssociationEstimator, Diagnostic, FitOptions, FitReport, LogLinearFit,
                        check_conditions, fit, fit_loglinear, fit_reverse, fit_table)
from .exceptions import (AssocError, ConfigError, ConsistencyError, ConvergenceError,
                         DataFormatError, DimensionError, DivergenceError, EvaluationError,
                         IdentifiabilityError)
from .inference import (InfoSet, WaldResult, conf_intervals, exact_moments, expected_hessian,
                        expected_score, info_set, safe_inverse, sandwich_cov,
                        w_identity_residual, true_lambda, w_matrix, wald_cov, wald_intervals,
                        wald_test)
from .likelihood import ConditionalDataset, Lambda, cond_prob, loglik, observed_info, score
from .model import (AssociationModel, derivative_check, eval_psi, make_glm_canonical,
                    make_log_bilinear, make_multinomial_logit, make_mv_linear,
                    model_from_config, multinomial_levels, restrict_bilinear)
