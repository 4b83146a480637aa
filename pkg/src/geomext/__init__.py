"""Geometric extremes toolkit.

Non-stationary margins, a truncated-gamma radial model with a generalised
Gaussian gauge, extrapolated joint-tail probabilities and diagnostics for
gridded daily series.
"""

from geomext.deform import Deformation, empirical_chi_matrix, fit_deformation
from geomext.diagnostics import DiagnosticSeries, model_chi, pp_points, qq_points
from geomext.errors import (
    DegeneracyError,
    DependencyError,
    DomainError,
    FitError,
    GeomExtError,
    NumericalError,
    ParseError,
    SamplingError,
    StructuralError,
)
from geomext.estimate import ExtremeSet, bootstrap_ci, estimate_ctq, inclusion_exclusion_oracle, tail_probability
from geomext.fit import ExceedanceSet, FittedGeometricModel, exceedances, fit_pairwise, fit_truncated_gamma
from geomext.geometry import GaugeParams, gauge, radial_angular
from geomext.ingest import GridDataset, load_dataset, write_dataset
from geomext.kernels import BACKEND
from geomext.marginal import MarginalModel, fit_marginals, leadbetter_to_exponential
from geomext.simulate import sample_radius, select_k, simulate_cloud
from geomext.synthetic import SyntheticSpec, generate

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DegeneracyError",
    "Deformation",
    "DependencyError",
    "DiagnosticSeries",
    "DomainError",
    "ExceedanceSet",
    "ExtremeSet",
    "FitError",
    "FittedGeometricModel",
    "GaugeParams",
    "GeomExtError",
    "GridDataset",
    "MarginalModel",
    "NumericalError",
    "ParseError",
    "SamplingError",
    "StructuralError",
    "SyntheticSpec",
    "bootstrap_ci",
    "empirical_chi_matrix",
    "estimate_ctq",
    "exceedances",
    "fit_deformation",
    "fit_marginals",
    "fit_pairwise",
    "fit_truncated_gamma",
    "gauge",
    "generate",
    "inclusion_exclusion_oracle",
    "leadbetter_to_exponential",
    "load_dataset",
    "model_chi",
    "pp_points",
    "qq_points",
    "radial_angular",
    "sample_radius",
    "select_k",
    "simulate_cloud",
    "tail_probability",
    "write_dataset",
]
