"""Extreme-value (Gumbel) regression with small-sample likelihood inference.

Location and dispersion follow user-written predictor formulas with link
functions; the package fits the model by maximum likelihood and computes the
likelihood ratio, Wald, score, gradient and adjusted likelihood ratio tests.
"""
from .errors import (
    DataError,
    DomainError,
    FitError,
    FormulaDomainError,
    FormulaError,
    FormulaSyntaxError,
    GumbelRegError,
    ModelError,
    ObservationDomainError,
    SimulationError,
    SingularMatrixError,
)
from .estimate import FitResult, Hypothesis, default_init, fit_mle
from .formula import PredictorExpr, differentiate, parse_predictor
from .inference import ConfidenceInterval, TestReport, confidence_interval, run_tests
from .io import load_dataset, load_model_config, parse_model_config
from .likelihood import expected_info, loglik, observed_info, score
from .model import ModelSpec, ObservationSet, Theta, design_state, sample_response, to_max_form
from .montecarlo import (
    SimulationConfig,
    critical_values,
    benchmark_design,
    power_study,
    quantile_discrepancy,
    size_study,
)
from .skovgaard import adjusted_lr, coupling, qbar, upsilon_bar

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
