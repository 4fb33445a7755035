"""Rotation-invariant point-cloud convolutions with spherical-harmonics kernels."""

from .cloud import build_kdtree, knn_patches, normalize, random_rotation
from .models import Classifier, ClassifierConfig, Segmenter, SegmenterConfig, build_model, count_params
from .sphmath import KernelBasis, eval_kernel, eval_real_sh, wigner_d

__version__ = "0.1.0"

__all__ = [
    "Classifier",
    "ClassifierConfig",
    "KernelBasis",
    "Segmenter",
    "SegmenterConfig",
    "build_kdtree",
    "build_model",
    "count_params",
    "eval_kernel",
    "eval_real_sh",
    "knn_patches",
    "normalize",
    "random_rotation",
    "wigner_d",
]
