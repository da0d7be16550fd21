"""Covariance-based super-resolution for fluctuating fluorophores.

Support estimation from second-order temporal statistics with a CEL0
penalty, followed by intensity and background estimation on that support.
"""

__version__ = "0.1.0"

from .forward import ForwardOperator, GridGeometry, PsfSpec, build_psf_kernel
from .covariance import ImageStack, StackStatistics, stack_statistics, temporal_mean
from .patches import PatchPlan
from .support import Cel0Params, CovarianceSystem, SupportResult, run_support_estimation, solve_cel0
from .intensity import IntensityParams, IntensityResult, run_intensity_estimation
from .simulator import AcquisitionConfig, EmitterKinetics, GroundTruth, simulate
from .metrics import jaccard_index, measure_fwhm, psnr
from .pipeline import LocalizationResult, intensify, localize

__all__ = [
    "AcquisitionConfig",
    "Cel0Params",
    "CovarianceSystem",
    "EmitterKinetics",
    "ForwardOperator",
    "GridGeometry",
    "GroundTruth",
    "ImageStack",
    "IntensityParams",
    "IntensityResult",
    "LocalizationResult",
    "PatchPlan",
    "PsfSpec",
    "StackStatistics",
    "SupportResult",
    "build_psf_kernel",
    "intensify",
    "jaccard_index",
    "localize",
    "measure_fwhm",
    "psnr",
    "run_intensity_estimation",
    "run_support_estimation",
    "simulate",
    "solve_cel0",
    "stack_statistics",
    "temporal_mean",
]
