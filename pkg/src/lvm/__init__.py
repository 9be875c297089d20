"""Linear latent variable models."""
from .data import faithful, read_csv, write_csv
from .estimate import EstimationError, FitOptions, FitResult, estimate
from .inference import (bootstrap, confint, constraint_estimates, effects, equivalence,
                        gof, lrt, modelsearch, robust_vcov, score_test, standardized, wald)
from .iv import build_plan, iv_estimate
from .mixture import em_fit, mvnmix, posterior
from .model import Model, ModelError, builtin, covariate, identify
from .modelfile import parse_model, parse_model_text, serialize_model
from .ram import compile_model
from .simulate import Binomial, Normal, Poisson, Uniform, Weibull, sim

__all__ = [
    "Binomial", "EstimationError", "FitOptions", "FitResult", "Model", "ModelError",
    "Normal", "Poisson", "Uniform", "Weibull", "bootstrap", "build_plan", "builtin",
    "compile_model", "confint", "constraint_estimates", "covariate", "effects", "em_fit",
    "equivalence", "estimate", "faithful", "gof", "identify", "iv_estimate", "lrt",
    "modelsearch", "mvnmix", "parse_model", "parse_model_text", "posterior", "read_csv",
    "robust_vcov", "score_test", "serialize_model", "sim", "standardized", "wald",
    "write_csv",
]
