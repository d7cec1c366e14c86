"""Spectral series conditional density estimation."""

__version__ = "0.1.0"

from .baselines import KDECDE, KNNCDE, KdeCdeSpec, KnnCdeSpec, kde_cde, knn_cde, tune_baseline
from .dataset import Dataset, SplitSpec, ZTransform, load_csv, rescale_response, save_csv, split
from .estimator import CdeModel, SpectralSeriesCDE, fit_coefficients, load_model, save_model, tune, tune_delta
from .evaluation import EvalReport, UniformModel, bootstrap_se, ks_pvalue, ks_statistic, pit_ks, test_loss
from .kernel import KernelSpec, gram
from .simgen import Scenario, TrueDensityModel, generate, true_density
from .spectral_basis import SpectralBasis, eigendecompose, nystrom_eval, nystrom_eval_batch
from .z_basis import FourierBasis, IndicatorBasis

__all__ = [
    "CdeModel", "Dataset", "EvalReport", "FourierBasis", "IndicatorBasis", "KDECDE", "KNNCDE",
    "KdeCdeSpec", "KernelSpec", "KnnCdeSpec", "Scenario", "SpectralBasis", "SpectralSeriesCDE",
    "SplitSpec", "TrueDensityModel", "UniformModel", "ZTransform", "bootstrap_se", "eigendecompose",
    "fit_coefficients", "generate", "gram", "kde_cde", "knn_cde", "ks_pvalue", "ks_statistic",
    "load_csv", "load_model", "nystrom_eval", "nystrom_eval_batch", "pit_ks", "rescale_response",
    "save_csv", "save_model", "split", "test_loss", "true_density", "tune", "tune_baseline", "tune_delta",
]
