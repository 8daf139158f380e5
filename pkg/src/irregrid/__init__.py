"""Super-resolution of gridded fields from irregularly-sampled point
observations, using locally-adapted convolutional operators decomposed on
constrained dictionaries."""

from .dictionaries import (Coefficients, OperatorDictionary, decode, ksvd_fit,
                           load_dictionary, nn_fit, nnls, nnls_code, omp_code,
                           pca_fit, project_code, save_dictionary)
from .fields import (FieldStack, GridSpec, NeighborhoodSpec, TrackObservations,
                     extract_patch, neighborhood_query, sample_field,
                     standardize, upsample)
from .fileio import read_fld, read_obs, write_fld, write_obs, write_pgm
from .oi import OICovarianceParams, oi_reconstruct
from .operators import (DesignSystem, OperatorPair, build_design,
                        fit_unconstrained, predict_detail)
from .pipeline import (CalibrationTable, HarvestConfig, RmseReport, SRConfig,
                       apply_operator, evaluate_rmse, fit_global,
                       harvest_operators, lattice_nodes, local_coefficients,
                       reconstruct)
from .synth import (ExperimentConfig, ExperimentReport, MethodSpec,
                    TrackParams, TruthParams, generate_truth, run_experiment,
                    simulate_tracks)

__version__ = "0.1.0"

__all__ = [
    "Coefficients", "OperatorDictionary", "decode", "ksvd_fit",
    "load_dictionary", "nn_fit", "nnls", "nnls_code", "omp_code", "pca_fit",
    "project_code", "save_dictionary",
    "FieldStack", "GridSpec", "NeighborhoodSpec", "TrackObservations",
    "extract_patch", "neighborhood_query", "sample_field", "standardize",
    "upsample",
    "read_fld", "read_obs", "write_fld", "write_obs", "write_pgm",
    "OICovarianceParams", "oi_reconstruct",
    "DesignSystem", "OperatorPair", "build_design", "fit_unconstrained",
    "predict_detail",
    "CalibrationTable", "HarvestConfig", "RmseReport", "SRConfig",
    "apply_operator", "evaluate_rmse", "fit_global", "harvest_operators",
    "lattice_nodes", "local_coefficients", "reconstruct",
    "ExperimentConfig", "ExperimentReport", "MethodSpec", "TrackParams",
    "TruthParams", "generate_truth", "run_experiment", "simulate_tracks",
]
