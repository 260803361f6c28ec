"""Sparse variational Gaussian processes on images.

Convolutional kernels treat an image as its grid of patches and place the
inducing variables in patch space, so a handful of inducing patches can
summarize large image datasets. The package provides the kernel family
(translation-invariant, weighted, colour-aware, and kernel sums), orbit-sum
invariance kernels, a blocked variational bound, a small reverse-mode tape
to differentiate it all, and a training CLI.
"""

from ._accel import BACKEND
from .convkernels import (
    ConvKernelSpec,
    additive_colour_cov,
    colour_patch_cov,
    conv_kff_diag,
    conv_kfu,
    conv_kuu,
    multichannel_cov,
    sum_cov,
)
from .datasets import (
    Dataset,
    apply_normalization,
    gen_rectangles,
    load_cifar10,
    load_idx,
    normalize,
    write_idx,
)
from .errors import PatchGpError
from .images import (
    FLATTEN_PER_CHANNEL,
    STACK_CHANNELS,
    ImageBatch,
    extract_patches,
    patch_sq_distances_conv,
    patch_sq_distances_naive,
)
from .invariance import (
    Orbit,
    TransformationGroup,
    flip_group,
    invariant_kff,
    invariant_kfu,
    orbit,
    translation_group,
)
from .kernels import RbfParams, kernel_diag, kernel_matrix
from .likelihoods import LikelihoodSpec, predictive_metrics, variational_expectations
from .linalg import robust_cholesky, triangular_solve
from .model import ModelConfig, SvgpModel
from .svgp import (
    InducingSet,
    PredictiveMarginal,
    VariationalGaussian,
    elbo,
    kl_blocked,
    kl_gaussian,
    predict_marginals,
    predict_marginals_blocked,
)
from .tape import Tape, backward
from .training import (
    AdamState,
    ParamTransform,
    TrainingConfig,
    adam_step,
    evaluate_model,
    init_inducing,
    minibatches,
    predict_full,
    run_training,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BACKEND",
    "ConvKernelSpec",
    "Dataset",
    "FLATTEN_PER_CHANNEL",
    "ImageBatch",
    "InducingSet",
    "LikelihoodSpec",
    "ModelConfig",
    "Orbit",
    "ParamTransform",
    "PatchGpError",
    "PredictiveMarginal",
    "RbfParams",
    "STACK_CHANNELS",
    "SvgpModel",
    "Tape",
    "TrainingConfig",
    "TransformationGroup",
    "VariationalGaussian",
    "adam_step",
    "additive_colour_cov",
    "apply_normalization",
    "backward",
    "colour_patch_cov",
    "conv_kff_diag",
    "conv_kfu",
    "conv_kuu",
    "elbo",
    "evaluate_model",
    "extract_patches",
    "flip_group",
    "gen_rectangles",
    "init_inducing",
    "invariant_kff",
    "invariant_kfu",
    "kernel_diag",
    "kernel_matrix",
    "kl_blocked",
    "kl_gaussian",
    "load_cifar10",
    "load_idx",
    "minibatches",
    "multichannel_cov",
    "normalize",
    "orbit",
    "patch_sq_distances_conv",
    "patch_sq_distances_naive",
    "predict_full",
    "predict_marginals",
    "predict_marginals_blocked",
    "predictive_metrics",
    "robust_cholesky",
    "run_training",
    "sum_cov",
    "translation_group",
    "triangular_solve",
    "variational_expectations",
    "write_idx",
]
