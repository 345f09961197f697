"""Intensity standardization and lesion-segmentation evaluation for FLAIR MRI."""

from flairnorm.ensemble import majority_vote
from flairnorm.nifti import read_mask, read_nifti, write_nifti
from flairnorm.standardize import Method, PipelineParams, StandardScale, run_pipeline
from flairnorm.volume import Histogram, Mask, MaskKind, Volume

__all__ = [
    "Histogram",
    "Mask",
    "MaskKind",
    "Method",
    "PipelineParams",
    "StandardScale",
    "Volume",
    "majority_vote",
    "read_mask",
    "read_nifti",
    "run_pipeline",
    "write_nifti",
]

__version__ = "0.1.0"
