"""Training: positivity transforms, Adam, inducing initialization,
minibatching, and the optimization loop.

The loop is gradient ascent on the minibatch ELBO: each step binds the
current parameters to a fresh tape, evaluates the objective, runs the
reverse sweep, and applies one Adam update. Everything is deterministic
given the config seed; derived integer seeds (seed, seed + 1, seed + 2)
drive inducing init, the image-space inducing init, and minibatch
shuffling respectively.
"""

from __future__ import annotations

import time

import numpy as np

from . import svgp
from . import tape as T
from .datasets import Dataset
from .errors import (
    DimensionMismatch,
    InsufficientPatches,
    NonFiniteElbo,
    ShapeMismatch,
)
from .images import (
    FLATTEN_PER_CHANNEL,
    STACK_CHANNELS,
    ImageBatch,
    extract_patches,
)
from .likelihoods import predictive_metrics
from .model import ModelConfig, SvgpModel
from .svgp import InducingSet, PredictiveMarginal

INIT_STRATEGIES = ("uniform-noise", "data-patches")


class ParamTransform:
    """Bijection between unconstrained and model space for one parameter."""

    def __init__(self, kind: str):
        if kind not in ("identity", "softplus-positive"):
            raise ValueError(f"unknown transform {kind!r}")
        self.kind = kind

    def constrain(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "identity":
            return x
        return np.logaddexp(0.0, x)

    def unconstrain(self, y):
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "identity":
            return y
        return T.softplus_inverse(y)


class AdamState:
    """First/second moment accumulators for a named parameter dict."""

    def __init__(
        self,
        params: dict,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        self.v = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam ascent step; missing gradients count as zero."""
    state.t += 1
    t = state.t
    out = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        out[name] = p + state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def init_inducing(
    strategy: str,
    data: ImageBatch | None,
    m: int,
    seed: int,
    patch_w: int,
    patch_h: int,
    channel_mode: str = FLATTEN_PER_CHANNEL,
    channels: int | None = None,
) -> InducingSet:
    """Initial inducing inputs in patch space.

    uniform-noise draws entries i.i.d. U(0, 1); data-patches samples m
    patches from the corpus without replacement. Whole-image inducing
    points are the special case patch size = image size.
    """
    if strategy not in INIT_STRATEGIES:
        raise ValueError(f"unknown init strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    if strategy == "uniform-noise":
        if channels is None:
            channels = data.channels if data is not None else 1
        z_dim = patch_w * patch_h * (channels if channel_mode == STACK_CHANNELS else 1)
        return InducingSet("patches", rng.random((m, z_dim)))
    if data is None:
        raise InsufficientPatches("data-patches needs a training corpus")
    grid = extract_patches(data, patch_w, patch_h, channel_mode)
    pool = grid.patches.reshape(grid.n * grid.p, grid.e)
    if pool.shape[0] < m:
        raise InsufficientPatches(f"{pool.shape[0]} patches available, {m} requested")
    idx = rng.choice(pool.shape[0], size=m, replace=False)
    return InducingSet("patches", pool[idx].copy())


def minibatches(n: int, batch_size: int, seed: int):
    """Endless minibatch index stream, reshuffled each epoch; the final
    short batch of an epoch is yielded at its true size."""
    if batch_size < 1 or batch_size > n:
        raise DimensionMismatch(f"batch size {batch_size} not in 1..{n}")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


class TrainingConfig:
    """Everything a training run needs besides the dataset itself."""

    def __init__(
        self,
        kernel: str = "conv",
        likelihood: str = "bernoulli-probit",
        num_inducing: int = 16,
        patch_h: int = 3,
        patch_w: int = 3,
        learning_rate: float = 0.01,
        batch_size: int = 100,
        iterations: int = 1000,
        seed: int = 0,
        eval_interval: int = 100,
        init_strategy: str = "uniform-noise",
        mc_samples: int = 20,
        quad_nodes: int = 20,
        mean_field: bool = False,
        init_variance: float = 1.0,
        init_lengthscale: float | None = None,
        init_noise: float = 0.1,
        eval_chunk: int = 512,
        eval_batch: int = 256,
    ):
        counts = {
            "num_inducing": num_inducing,
            "patch_h": patch_h,
            "patch_w": patch_w,
            "batch_size": batch_size,
            "eval_interval": eval_interval,
            "mc_samples": mc_samples,
            "quad_nodes": quad_nodes,
            "eval_chunk": eval_chunk,
            "eval_batch": eval_batch,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise DimensionMismatch(f"{name} must be at least 1, got {value}")
        if iterations < 0:
            raise DimensionMismatch("iterations must be nonnegative")
        if init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"unknown init strategy {init_strategy!r}")
        self.kernel = kernel
        self.likelihood = likelihood
        self.num_inducing = int(num_inducing)
        self.patch_h = int(patch_h)
        self.patch_w = int(patch_w)
        self.learning_rate = float(learning_rate)
        self.batch_size = int(batch_size)
        self.iterations = int(iterations)
        self.seed = int(seed)
        self.eval_interval = int(eval_interval)
        self.init_strategy = init_strategy
        self.mc_samples = int(mc_samples)
        self.quad_nodes = int(quad_nodes)
        self.mean_field = bool(mean_field)
        self.init_variance = float(init_variance)
        self.init_lengthscale = None if init_lengthscale is None else float(init_lengthscale)
        self.init_noise = float(init_noise)
        self.eval_chunk = int(eval_chunk)
        self.eval_batch = int(eval_batch)


def _inducing_channel_mode(kernel: str) -> str:
    # rbf treats the whole image as one stacked patch; colour kernels with
    # whC patches stack as well; everything else induces on wh patches.
    if kernel in ("rbf", "colour-patch", "additive"):
        return STACK_CHANNELS
    return FLATTEN_PER_CHANNEL


def build_model(config: TrainingConfig, dataset: Dataset) -> SvgpModel:
    """Assemble the initial model for a dataset per the training config."""
    train = dataset.train_images
    shape = (train.height, train.width, train.channels)
    patch_h, patch_w = config.patch_h, config.patch_w
    if config.kernel == "rbf":
        patch_h, patch_w = train.height, train.width
    mode = _inducing_channel_mode(config.kernel)
    z = init_inducing(
        config.init_strategy,
        train,
        config.num_inducing,
        config.seed,
        patch_w,
        patch_h,
        channel_mode=mode,
        channels=train.channels,
    ).inputs
    z_images = None
    if config.kernel == "wconv+rbf":
        z_images = init_inducing(
            config.init_strategy,
            train,
            config.num_inducing,
            config.seed + 1,
            train.width,
            train.height,
            channel_mode=STACK_CHANNELS,
            channels=train.channels,
        ).inputs
    mcfg = ModelConfig(
        kernel=config.kernel,
        image_shape=shape,
        num_inducing=config.num_inducing,
        patch_h=config.patch_h,
        patch_w=config.patch_w,
        likelihood=config.likelihood,
        num_classes=dataset.num_classes,
        mc_samples=config.mc_samples,
        mc_seed=config.seed,
        quad_nodes=config.quad_nodes,
        mean_field=config.mean_field,
    )
    return SvgpModel.create(
        mcfg,
        z,
        z_images_init=z_images,
        init_variance=config.init_variance,
        init_lengthscale=config.init_lengthscale,
        init_noise=config.init_noise,
    )


def predict_full(model: SvgpModel, images: ImageBatch, chunk: int = 512):
    """Posterior marginals over a whole batch, computed in chunks."""
    bound = model.build(None)
    mus = [[] for _ in range(model.config.num_latents)]
    vars_ = [[] for _ in range(model.config.num_latents)]
    clamps = [0] * model.config.num_latents
    for start in range(0, images.n, chunk):
        part, _ = bound.batch_marginals(images.subset(slice(start, start + chunk)))
        for k, marg in enumerate(part):
            mus[k].append(marg.mu_value)
            vars_[k].append(marg.var_value)
            clamps[k] += marg.clamp_count
    return [
        PredictiveMarginal(np.concatenate(mus[k]), np.concatenate(vars_[k]), clamps[k])
        for k in range(model.config.num_latents)
    ]


def evaluate_model(model: SvgpModel, images: ImageBatch, labels, chunk: int = 512):
    """(error rate, nlpp) of the model on one split."""
    marginals = predict_full(model, images, chunk=chunk)
    spec = model.build(None).likelihood
    return predictive_metrics(marginals, labels, spec)


def run_training(config: TrainingConfig, dataset: Dataset):
    """Optimize the ELBO; returns (model, metrics rows).

    Metrics rows are dicts with step, elapsed_s, elbo, test_error, and
    test_nlpp, written at step 0, every eval_interval, and the final step.
    The elbo column is the bound evaluated on a fixed probe batch (the
    first eval_batch training points) scaled to the full dataset, so rows
    are comparable across steps. A non-finite objective raises
    NonFiniteElbo carrying a parameter snapshot.
    """
    model = build_model(config, dataset)
    state = AdamState(model.params, config.learning_rate)
    train_x = dataset.train_images
    train_y = dataset.train_labels
    n = train_x.n
    batch_size = min(config.batch_size, n)
    batches = minibatches(n, batch_size, config.seed + 2)
    probe = slice(0, min(n, config.eval_batch))
    probe_x = train_x.subset(probe)
    probe_y = train_y[probe]
    metrics: list[dict] = []
    t_start = time.perf_counter()

    def evaluate(step: int) -> None:
        error, nlpp = evaluate_model(
            model, dataset.test_images, dataset.test_labels, chunk=config.eval_chunk
        )
        bound = model.build(None)
        probe_elbo = float(T.value_of(svgp.elbo(bound, probe_x, probe_y, n)))
        metrics.append(
            {
                "step": step,
                "elapsed_s": time.perf_counter() - t_start,
                "elbo": probe_elbo,
                "test_error": error,
                "test_nlpp": nlpp,
            }
        )

    evaluate(0)
    for step in range(1, config.iterations + 1):
        idx = next(batches)
        tape = T.Tape()
        bound = model.build(tape)
        objective = svgp.elbo(bound, train_x.subset(idx), train_y[idx], n)
        value = float(T.value_of(objective))
        if not np.isfinite(value):
            raise NonFiniteElbo(
                step,
                {
                    "step": step,
                    "elbo": value,
                    "params": {k: v.tolist() for k, v in model.params.items()},
                },
            )
        node_grads = T.backward(tape, objective)
        grads = {name: node_grads.get(node) for name, node in bound.leaves.items()}
        tape.release()
        model.params = adam_step(state, model.params, grads)
        if step % config.eval_interval == 0 or step == config.iterations:
            evaluate(step)
    return model, metrics
