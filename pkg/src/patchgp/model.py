"""Model assembly: named parameters, kernel dispatch, marginals, and KL.

SvgpModel owns the unconstrained parameter arrays plus the structural
configuration. Each training step binds the parameters to a fresh tape
(model.build(tape)), producing a BoundModel whose outputs are
differentiable nodes; binding with tape=None evaluates the same graph on
plain arrays for prediction.

Positive quantities (variances, lengthscales, noise, the diagonal of l)
live in softplus space; patch weights, channel weights, q means, inducing
inputs, and the strict lower triangle of l are unconstrained.
"""

from __future__ import annotations

import numpy as np

from . import tape as T
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
from .errors import DimensionMismatch, ShapeMismatch
from .images import ImageBatch
from .kernels import RbfParams, kernel_diag, kernel_matrix
from .likelihoods import DEFAULT_MC_SAMPLES, DEFAULT_QUAD_NODES, LikelihoodSpec
from .svgp import (
    InducingSet,
    VariationalGaussian,
    block_slices,
    kl_blocked,
    kl_gaussian,
    predict_marginals,
    predict_marginals_blocked,
)

KERNEL_KINDS = ("rbf", "conv", "wconv", "wconv+rbf", "colour-patch", "multichannel", "additive")
LIKELIHOOD_KINDS = ("gaussian", "bernoulli-probit", "softmax-mc")

MULTI_BASE_KINDS = ("multichannel", "additive")


class ModelConfig:
    """Structural description of one SVGP model."""

    def __init__(
        self,
        kernel: str,
        image_shape: tuple[int, int, int],
        num_inducing: int,
        patch_h: int = 3,
        patch_w: int = 3,
        likelihood: str = "bernoulli-probit",
        num_classes: int = 2,
        mc_samples: int = DEFAULT_MC_SAMPLES,
        mc_seed: int = 0,
        quad_nodes: int = DEFAULT_QUAD_NODES,
        mean_field: bool = False,
    ):
        if kernel not in KERNEL_KINDS:
            raise DimensionMismatch(f"unknown kernel kind {kernel!r}")
        if likelihood not in LIKELIHOOD_KINDS:
            raise DimensionMismatch(f"unknown likelihood {likelihood!r}")
        if likelihood == "softmax-mc" and num_classes < 2:
            raise DimensionMismatch("softmax needs at least 2 classes")
        self.kernel = kernel
        self.image_shape = (int(image_shape[0]), int(image_shape[1]), int(image_shape[2]))
        self.num_inducing = int(num_inducing)
        self.patch_h = int(patch_h)
        self.patch_w = int(patch_w)
        self.likelihood = likelihood
        self.num_classes = int(num_classes)
        self.mc_samples = int(mc_samples)
        self.mc_seed = int(mc_seed)
        self.quad_nodes = int(quad_nodes)
        self.mean_field = bool(mean_field)

    @property
    def height(self) -> int:
        return self.image_shape[0]

    @property
    def width(self) -> int:
        return self.image_shape[1]

    @property
    def channels(self) -> int:
        return self.image_shape[2]

    @property
    def image_dim(self) -> int:
        return self.height * self.width * self.channels

    @property
    def grid_h(self) -> int:
        return self.height - self.patch_h + 1

    @property
    def grid_w(self) -> int:
        return self.width - self.patch_w + 1

    @property
    def patches_per_channel(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def num_latents(self) -> int:
        return self.num_classes if self.likelihood == "softmax-mc" else 1

    @property
    def z_dim(self) -> int:
        """Column dimension of the (patch-space) inducing inputs."""
        if self.kernel == "rbf":
            return self.image_dim
        if self.kernel in ("colour-patch", "additive"):
            return self.patch_h * self.patch_w * self.channels
        return self.patch_h * self.patch_w

    @property
    def block_sizes(self) -> list[int]:
        m = self.num_inducing
        if self.kernel == "multichannel":
            return [m] * self.channels
        if self.kernel == "wconv+rbf":
            return [m, m]
        return [m]

    @property
    def m_total(self) -> int:
        return sum(self.block_sizes)

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "image_shape": list(self.image_shape),
            "num_inducing": self.num_inducing,
            "patch_h": self.patch_h,
            "patch_w": self.patch_w,
            "likelihood": self.likelihood,
            "num_classes": self.num_classes,
            "mc_samples": self.mc_samples,
            "mc_seed": self.mc_seed,
            "quad_nodes": self.quad_nodes,
            "mean_field": self.mean_field,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            kernel=d["kernel"],
            image_shape=tuple(d["image_shape"]),
            num_inducing=d["num_inducing"],
            patch_h=d["patch_h"],
            patch_w=d["patch_w"],
            likelihood=d["likelihood"],
            num_classes=d["num_classes"],
            mc_samples=d["mc_samples"],
            mc_seed=d["mc_seed"],
            quad_nodes=d["quad_nodes"],
            mean_field=d["mean_field"],
        )


def default_lengthscale(config: ModelConfig) -> float:
    """sqrt of the kernel input dimension, so unit-variance pixels give
    O(1) scaled distances."""
    if config.kernel == "rbf":
        return float(np.sqrt(config.image_dim))
    if config.kernel in ("colour-patch", "additive"):
        return float(np.sqrt(config.patch_h * config.patch_w * config.channels))
    return float(np.sqrt(config.patch_h * config.patch_w))


def _l_raw_init(m_total: int) -> np.ndarray:
    """Raw matrix whose constrained image is the identity."""
    raw_one = float(T.softplus_inverse(1.0))
    return np.diag(np.full(m_total, raw_one))


def init_params(
    config: ModelConfig,
    z_init: np.ndarray,
    z_images_init: np.ndarray | None = None,
    init_variance: float = 1.0,
    init_lengthscale: float | None = None,
    init_noise: float = 0.1,
) -> dict[str, np.ndarray]:
    """Fresh unconstrained parameter arrays for the configured model."""
    c = config.channels
    ell = default_lengthscale(config) if init_lengthscale is None else float(init_lengthscale)
    raw_var = float(T.softplus_inverse(init_variance))
    raw_ell = float(T.softplus_inverse(ell))
    params: dict[str, np.ndarray] = {}
    if config.kernel in MULTI_BASE_KINDS:
        params["raw_variance"] = np.full(c, raw_var)
        params["raw_lengthscales"] = np.full(c, raw_ell)
    else:
        params["raw_variance"] = np.asarray(raw_var)
        params["raw_lengthscales"] = np.full(1, raw_ell)

    pg = config.patches_per_channel
    if config.kernel in ("wconv", "wconv+rbf"):
        params["patch_weights"] = np.ones(c * pg)
    elif config.kernel in ("colour-patch", "additive"):
        params["patch_weights"] = np.ones(pg)
    elif config.kernel == "multichannel":
        params["patch_weights"] = np.ones((pg, c))
    if config.kernel == "additive":
        params["channel_weights"] = np.ones(c)
    if config.kernel == "wconv+rbf":
        params["raw_rbf_variance"] = np.asarray(raw_var)
        params["raw_rbf_lengthscales"] = np.full(1, float(T.softplus_inverse(np.sqrt(config.image_dim))))

    z_init = np.asarray(z_init, dtype=np.float64)
    if z_init.shape != (config.num_inducing, config.z_dim):
        raise ShapeMismatch(
            f"z_init shape {z_init.shape} != ({config.num_inducing}, {config.z_dim})"
        )
    params["z"] = z_init.copy()
    if config.kernel == "wconv+rbf":
        if z_images_init is None:
            raise ShapeMismatch("wconv+rbf needs z_images_init")
        z_images_init = np.asarray(z_images_init, dtype=np.float64)
        if z_images_init.shape != (config.num_inducing, config.image_dim):
            raise ShapeMismatch(
                f"z_images_init shape {z_images_init.shape} != "
                f"({config.num_inducing}, {config.image_dim})"
            )
        params["z_images"] = z_images_init.copy()

    k = config.num_latents
    mt = config.m_total
    params["q_mu"] = np.zeros((k, mt))
    params["q_l_raw"] = np.broadcast_to(_l_raw_init(mt), (k, mt, mt)).copy()
    if config.likelihood == "gaussian":
        params["raw_noise"] = np.asarray(float(T.softplus_inverse(init_noise)))
    return params


def _strict_tril_mask(config: ModelConfig) -> np.ndarray:
    mt = config.m_total
    if config.mean_field:
        mask = np.zeros((mt, mt))
        for sl in block_slices(config.block_sizes):
            size = sl.stop - sl.start
            mask[sl, sl] = np.tril(np.ones((size, size)), -1)
        return mask
    return np.tril(np.ones((mt, mt)), -1)


class SvgpModel:
    """Configuration plus current unconstrained parameter values."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        z_init: np.ndarray,
        z_images_init: np.ndarray | None = None,
        init_variance: float = 1.0,
        init_lengthscale: float | None = None,
        init_noise: float = 0.1,
    ) -> "SvgpModel":
        return cls(
            config,
            init_params(
                config,
                z_init,
                z_images_init=z_images_init,
                init_variance=init_variance,
                init_lengthscale=init_lengthscale,
                init_noise=init_noise,
            ),
        )

    @property
    def inducing_set(self) -> InducingSet:
        cfg = self.config
        if cfg.kernel == "rbf":
            return InducingSet("image-points", self.params["z"])
        if cfg.kernel == "wconv+rbf":
            return InducingSet(
                "blocked", [self.params["z_images"], self.params["z"]], cfg.block_sizes
            )
        if cfg.kernel == "multichannel":
            return InducingSet("blocked", self.params["z"], cfg.block_sizes)
        return InducingSet("patches", self.params["z"])

    def build(self, tape=None) -> "BoundModel":
        return BoundModel(self, tape)


class BoundModel:
    """The model's parameters bound to one tape (or to plain arrays)."""

    def __init__(self, model: SvgpModel, tape=None):
        self.config = model.config
        if tape is None:
            self.leaves = dict(model.params)
        else:
            self.leaves = {k: tape.leaf(v, name=k) for k, v in model.params.items()}
        cfg, p = self.config, self.leaves

        if cfg.kernel in MULTI_BASE_KINDS:
            self.bases = [
                RbfParams(
                    T.softplus(T.getitem(p["raw_variance"], ci)),
                    T.softplus(T.getitem(p["raw_lengthscales"], ci)),
                )
                for ci in range(cfg.channels)
            ]
        else:
            self.base = RbfParams(
                T.softplus(p["raw_variance"]), T.softplus(p["raw_lengthscales"])
            )

        if cfg.likelihood == "gaussian":
            self.noise_variance = T.softplus(p["raw_noise"])
        else:
            self.noise_variance = None

        mask = _strict_tril_mask(cfg)
        self.qs = []
        for k in range(cfg.num_latents):
            l_raw = T.getitem(p["q_l_raw"], k)
            l = T.add(
                T.mul(l_raw, mask),
                T.diag_embed(T.softplus(T.diag_part(l_raw))),
            )
            self.qs.append(
                VariationalGaussian(
                    T.getitem(p["q_mu"], k), l, cfg.block_sizes, cfg.mean_field
                )
            )

        self.likelihood = LikelihoodSpec(
            cfg.likelihood,
            noise_variance=(
                float(T.value_of(self.noise_variance)) if self.noise_variance is not None else None
            ),
            samples=cfg.mc_samples,
            seed=cfg.mc_seed,
            quad_nodes=cfg.quad_nodes,
        )

    def _kernel_spec(self) -> ConvKernelSpec:
        cfg, p = self.config, self.leaves
        if cfg.kernel == "conv":
            return ConvKernelSpec("invariant", self.base, cfg.patch_w, cfg.patch_h)
        if cfg.kernel == "wconv":
            return ConvKernelSpec(
                "weighted", self.base, cfg.patch_w, cfg.patch_h, weights=p["patch_weights"]
            )
        if cfg.kernel == "wconv+rbf":
            rbf = RbfParams(
                T.softplus(p["raw_rbf_variance"]), T.softplus(p["raw_rbf_lengthscales"])
            )
            return ConvKernelSpec(
                "conv-plus-rbf",
                self.base,
                cfg.patch_w,
                cfg.patch_h,
                weights=p["patch_weights"],
                rbf_component=rbf,
            )
        if cfg.kernel == "colour-patch":
            return ConvKernelSpec(
                "colour-patch", self.base, cfg.patch_w, cfg.patch_h, weights=p["patch_weights"]
            )
        if cfg.kernel == "multichannel":
            return ConvKernelSpec(
                "multi-channel", self.bases, cfg.patch_w, cfg.patch_h, weights=p["patch_weights"]
            )
        return ConvKernelSpec(
            "additive-colour",
            self.bases,
            cfg.patch_w,
            cfg.patch_h,
            weights=p["patch_weights"],
            channel_weights=p["channel_weights"],
        )

    def covariances(self, batch: ImageBatch):
        """(kfu (n, M_total), kuu block list, kff_diag (n,)) at the current
        parameters."""
        cfg, p = self.config, self.leaves
        if cfg.kernel == "rbf":
            x = batch.flat()
            kfu = kernel_matrix(x, p["z"], self.base)
            kuu_blocks = [kernel_matrix(p["z"], None, self.base)]
            kff = kernel_diag(x, self.base)
        elif cfg.kernel in ("conv", "wconv"):
            spec = self._kernel_spec()
            kfu = conv_kfu(batch, p["z"], spec)
            kuu_blocks = [conv_kuu(p["z"], spec)]
            kff = conv_kff_diag(batch, spec)
        elif cfg.kernel == "wconv+rbf":
            kfu, kuu_blocks, kff = sum_cov(batch, p["z"], p["z_images"], self._kernel_spec())
        elif cfg.kernel == "colour-patch":
            kfu, kuu, kff = colour_patch_cov(batch, p["z"], self._kernel_spec())
            kuu_blocks = [kuu]
        elif cfg.kernel == "multichannel":
            kfu, kuu_blocks, kff = multichannel_cov(batch, p["z"], self._kernel_spec())
        else:
            kfu, kuu, kff = additive_colour_cov(batch, p["z"], self._kernel_spec())
            kuu_blocks = [kuu]
        return kfu, kuu_blocks, kff

    def batch_marginals(self, batch: ImageBatch):
        """Per-latent predictive marginals and the total KL over latents."""
        kfu, kuu_blocks, kff = self.covariances(batch)
        single = len(kuu_blocks) == 1
        marginals = []
        kl = None
        for q in self.qs:
            if single:
                marg = predict_marginals(kfu, kuu_blocks[0], kff, q)
                kl_k = kl_gaussian(q, kuu_blocks[0])
            else:
                kfu_blocks = [T.getitem(kfu, (slice(None), sl)) for sl in q.slices]
                marg = predict_marginals_blocked(kfu_blocks, kuu_blocks, kff, q)
                kl_k = kl_blocked(q, kuu_blocks)
            marginals.append(marg)
            kl = kl_k if kl is None else T.add(kl, kl_k)
        return marginals, kl
