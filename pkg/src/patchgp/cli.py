"""Command-line surface: dataset generation, training, and evaluation.

Subcommands:
  gen-data   write a rectangles dataset as IDX files plus metadata
  train      optimize a model, writing metrics.csv / snapshot.json / config.txt
  evaluate   score a saved snapshot on a dataset split

Configuration is flag-driven; a --config file of key=value lines supplies
defaults that flags override. Unknown config keys are rejected. Exit codes:
0 success, 2 bad arguments or config, 3 I/O or dataset failure, 4 non-finite
training objective (diagnostics.json written), 5 unreadable or incompatible
snapshot.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .datasets import (
    Dataset,
    apply_normalization,
    gen_rectangles,
    load_cifar10,
    load_idx,
    normalize,
    write_idx,
)
from .errors import NonFiniteElbo, PatchGpError, SnapshotVersionMismatch
from .model import KERNEL_KINDS, ModelConfig, SvgpModel
from .training import (
    INIT_STRATEGIES,
    TrainingConfig,
    evaluate_model,
    run_training,
)

SNAPSHOT_VERSION = 1
DATASET_KINDS = ("rectangles", "idx", "mnist", "cifar10")
LIKELIHOOD_CHOICES = ("auto", "gaussian", "bernoulli-probit", "softmax")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NONFINITE = 4
EXIT_SNAPSHOT = 5


def _g17(x: float) -> str:
    """Canonical float text: 17 significant digits, round-trip exact."""
    return format(float(x), ".17g")


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, fixed float formatting."""
    if isinstance(obj, dict):
        items = ",".join(
            f"{json.dumps(str(k))}:{canonical_json(v)}" for k, v in sorted(obj.items())
        )
        return "{" + items + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(canonical_json(v) for v in obj) + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _g17(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if obj is None:
        return "null"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# key -> (default, caster, nullable). Casters run on config-file strings;
# flags arrive already typed through argparse.
_DATA_KEYS = {
    "dataset": ("rectangles", str, False),
    "data_dir": (None, str, True),
    "data_n": (1200, int, False),
    "data_seed": (0, int, False),
    "classes": (None, str, True),
}

TRAIN_KEYS = {
    **_DATA_KEYS,
    "normalize": ("none", str, False),
    "kernel": ("conv", str, False),
    "likelihood": ("auto", str, False),
    "m": (16, int, False),
    "patch_h": (3, int, False),
    "patch_w": (3, int, False),
    "lr": (0.01, float, False),
    "batch": (100, int, False),
    "iters": (1000, int, False),
    "seed": (0, int, False),
    "eval_interval": (100, int, False),
    "init": ("uniform-noise", str, False),
    "mc_samples": (20, int, False),
    "quad_nodes": (20, int, False),
    "mean_field": (False, _parse_bool, False),
    "init_variance": (1.0, float, False),
    "init_lengthscale": (None, float, True),
    "init_noise": (0.1, float, False),
    "eval_chunk": (512, int, False),
    "eval_batch": (256, int, False),
    "out": (None, str, True),
}

GEN_DATA_KEYS = {
    "n": (1200, int, False),
    "seed": (0, int, False),
    "out": (None, str, True),
}

EVALUATE_KEYS = {
    **_DATA_KEYS,
    "snapshot": (None, str, True),
    "split": ("test", str, False),
    "eval_chunk": (None, int, True),
    "out": (None, str, True),
}


def _read_config_file(path: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        pairs.append((key.strip(), value.strip()))
    return pairs


def _resolve(args: argparse.Namespace, keys: dict) -> dict:
    """Merge defaults, config-file values, and flags (flags win)."""
    values = {key: spec[0] for key, spec in keys.items()}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        for key, raw in _read_config_file(config_path):
            if key not in keys:
                raise ValueError(f"unknown config key {key!r}")
            _, caster, nullable = keys[key]
            if nullable and raw.lower() == "none":
                values[key] = None
            else:
                values[key] = caster(raw)
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def _require(values: dict, key: str, flag: str):
    if values.get(key) is None:
        raise ValueError(f"{flag} is required")
    return values[key]


def _parse_classes(spec: str | None):
    if spec is None or spec == "":
        return None
    return [int(tok) for tok in spec.split(",")]


def _mnist_path(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        candidate = directory / name
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{directory} has neither {stem} nor {stem}.gz")


def _load_dataset(values: dict) -> Dataset:
    kind = values["dataset"]
    if kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset {kind!r}")
    if kind == "rectangles":
        return gen_rectangles(values["data_n"], values["data_seed"])
    directory = Path(_require(values, "data_dir", "--data-dir"))
    classes = _parse_classes(values["classes"])
    if kind == "idx":
        train = load_idx(directory / "train-images.idx", directory / "train-labels.idx", classes)
        test = load_idx(directory / "test-images.idx", directory / "test-labels.idx", classes)
    elif kind == "mnist":
        train = load_idx(
            _mnist_path(directory, "train-images-idx3-ubyte"),
            _mnist_path(directory, "train-labels-idx1-ubyte"),
            classes,
        )
        test = load_idx(
            _mnist_path(directory, "t10k-images-idx3-ubyte"),
            _mnist_path(directory, "t10k-labels-idx1-ubyte"),
            classes,
        )
    else:
        train = load_cifar10([directory / f"data_batch_{i}.bin" for i in range(1, 6)])
        test = load_cifar10([directory / "test_batch.bin"])
    (train_x, train_y), (test_x, test_y) = train, test
    if classes is not None:
        num_classes = len(classes)
    elif kind == "cifar10":
        num_classes = 10
    else:
        num_classes = int(max(train_y.max(), test_y.max())) + 1
    return Dataset(train_x, train_y, test_x, test_y, num_classes)


def cmd_gen_data(args: argparse.Namespace) -> int:
    values = _resolve(args, GEN_DATA_KEYS)
    out_dir = Path(_require(values, "out", "--out"))
    dataset = gen_rectangles(values["n"], values["seed"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(
        out_dir / "train-images.idx",
        out_dir / "train-labels.idx",
        dataset.train_images.pixels,
        dataset.train_labels,
    )
    write_idx(
        out_dir / "test-images.idx",
        out_dir / "test-labels.idx",
        dataset.test_images.pixels,
        dataset.test_labels,
    )
    lines = [
        "dataset=rectangles",
        f"n={values['n']}",
        f"n_train={dataset.train_images.n}",
        f"n_test={dataset.test_images.n}",
        f"seed={values['seed']}",
    ]
    (out_dir / "metadata.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {dataset.train_images.n} train / {dataset.test_images.n} test images to {out_dir}")
    return EXIT_OK


def _config_text(values: dict) -> str:
    lines = []
    for key in sorted(values):
        value = values[key]
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = _g17(value)
        else:
            text = str(value)
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def snapshot_dict(model: SvgpModel, normalization: dict, seed: int, iterations: int, eval_chunk: int) -> dict:
    return {
        "format_version": SNAPSHOT_VERSION,
        "kernel": model.config.kernel,
        "iterations": iterations,
        "seed": seed,
        "eval_chunk": eval_chunk,
        "model_config": model.config.to_dict(),
        "normalization": normalization,
        "params": {
            name: {"shape": list(value.shape), "data": value.ravel().tolist()}
            for name, value in sorted(model.params.items())
        },
    }


def load_snapshot(path) -> dict:
    try:
        snap = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise SnapshotVersionMismatch(f"cannot read snapshot {path}: {exc}") from exc
    if not isinstance(snap, dict) or snap.get("format_version") != SNAPSHOT_VERSION:
        raise SnapshotVersionMismatch(
            f"snapshot {path} has format_version {snap.get('format_version')!r}, "
            f"expected {SNAPSHOT_VERSION}"
        )
    for key in ("model_config", "normalization", "params"):
        if key not in snap:
            raise SnapshotVersionMismatch(f"snapshot {path} is missing {key!r}")
    return snap


def model_from_snapshot(snap: dict) -> SvgpModel:
    try:
        config = ModelConfig.from_dict(snap["model_config"])
        params = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in snap["params"].items()
        }
        return SvgpModel(config, params)
    except (KeyError, TypeError, ValueError, PatchGpError) as exc:
        raise SnapshotVersionMismatch(f"snapshot is corrupt: {exc}") from exc


def _metrics_csv(metrics: list[dict]) -> str:
    lines = ["step,elapsed_s,elbo,test_error,test_nlpp"]
    for row in metrics:
        lines.append(
            f"{row['step']},{_g17(row['elapsed_s'])},{_g17(row['elbo'])},"
            f"{_g17(row['test_error'])},{_g17(row['test_nlpp'])}"
        )
    return "\n".join(lines) + "\n"


def cmd_train(args: argparse.Namespace) -> int:
    values = _resolve(args, TRAIN_KEYS)
    out_dir = Path(_require(values, "out", "--out"))
    if values["kernel"] not in KERNEL_KINDS:
        raise ValueError(f"unknown kernel {values['kernel']!r}")
    if values["likelihood"] not in LIKELIHOOD_CHOICES:
        raise ValueError(f"unknown likelihood {values['likelihood']!r}")
    if values["init"] not in INIT_STRATEGIES:
        raise ValueError(f"unknown init strategy {values['init']!r}")
    if values["normalize"] not in ("none", "global-mean-scale"):
        raise ValueError(f"unknown normalization {values['normalize']!r}")

    dataset = _load_dataset(values)
    if values["normalize"] != "none":
        dataset = normalize(dataset, values["normalize"])
    likelihood = values["likelihood"]
    if likelihood == "auto":
        likelihood = "bernoulli-probit" if dataset.num_classes == 2 else "softmax"

    config = TrainingConfig(
        kernel=values["kernel"],
        likelihood=likelihood,
        num_inducing=values["m"],
        patch_h=values["patch_h"],
        patch_w=values["patch_w"],
        learning_rate=values["lr"],
        batch_size=values["batch"],
        iterations=values["iters"],
        seed=values["seed"],
        eval_interval=values["eval_interval"],
        init_strategy=values["init"],
        mc_samples=values["mc_samples"],
        quad_nodes=values["quad_nodes"],
        mean_field=values["mean_field"],
        init_variance=values["init_variance"],
        init_lengthscale=values["init_lengthscale"],
        init_noise=values["init_noise"],
        eval_chunk=values["eval_chunk"],
        eval_batch=values["eval_batch"],
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(_config_text({**values, "likelihood": likelihood}))
    try:
        model, metrics = run_training(config, dataset)
    except NonFiniteElbo as exc:
        (out_dir / "diagnostics.json").write_text(canonical_json(exc.diagnostics) + "\n")
        print(f"error: {exc}; diagnostics written to {out_dir / 'diagnostics.json'}", file=sys.stderr)
        return EXIT_NONFINITE
    (out_dir / "metrics.csv").write_text(_metrics_csv(metrics))
    snap = snapshot_dict(
        model, dataset.normalization, config.seed, config.iterations, config.eval_chunk
    )
    (out_dir / "snapshot.json").write_text(canonical_json(snap) + "\n")
    last = metrics[-1]
    print(
        f"step={last['step']} elbo={_g17(last['elbo'])} "
        f"test_error={_g17(last['test_error'])} test_nlpp={_g17(last['test_nlpp'])}"
    )
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    values = _resolve(args, EVALUATE_KEYS)
    snapshot_path = Path(_require(values, "snapshot", "--snapshot"))
    if values["split"] not in ("test", "train"):
        raise ValueError(f"unknown split {values['split']!r}")
    snap = load_snapshot(snapshot_path)
    model = model_from_snapshot(snap)
    dataset = _load_dataset(values)
    if values["split"] == "train":
        images, labels = dataset.train_images, dataset.train_labels
    else:
        images, labels = dataset.test_images, dataset.test_labels
    images = apply_normalization(images, snap["normalization"])
    chunk = values["eval_chunk"]
    if chunk is None:
        chunk = int(snap.get("eval_chunk", 512))
    error, nlpp = evaluate_model(model, images, labels, chunk=chunk)
    line = f"split={values['split']} error={_g17(error)} nlpp={_g17(nlpp)}"
    print(line)
    out_dir = Path(values["out"]) if values["out"] is not None else snapshot_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"evaluation-{values['split']}.txt").write_text(line + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchgp",
        description="Sparse variational GP training on images with convolutional kernels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a rectangles dataset as IDX files")
    gen.add_argument("--config", help="key=value config file; flags override")
    gen.add_argument("--n", type=int, help="total image count (default 1200)")
    gen.add_argument("--seed", type=int, help="generator seed (default 0)")
    gen.add_argument("--out", help="output directory")
    gen.set_defaults(func=cmd_gen_data)

    def add_data_flags(p):
        p.add_argument("--dataset", help="rectangles | idx | mnist | cifar10")
        p.add_argument("--data-dir", dest="data_dir", help="directory of dataset files")
        p.add_argument("--data-n", dest="data_n", type=int, help="rectangles: total images")
        p.add_argument("--data-seed", dest="data_seed", type=int, help="rectangles: generator seed")
        p.add_argument("--classes", help="comma-separated label filter, e.g. 0,1")

    train = sub.add_parser("train", help="train a model and write metrics + snapshot")
    train.add_argument("--config", help="key=value config file; flags override")
    add_data_flags(train)
    train.add_argument("--normalize", help="none | global-mean-scale")
    train.add_argument("--kernel", help=" | ".join(KERNEL_KINDS))
    train.add_argument("--likelihood", help=" | ".join(LIKELIHOOD_CHOICES))
    train.add_argument("--m", type=int, help="number of inducing points")
    train.add_argument("--patch-h", dest="patch_h", type=int, help="patch height (default 3)")
    train.add_argument("--patch-w", dest="patch_w", type=int, help="patch width (default 3)")
    train.add_argument("--lr", type=float, help="Adam learning rate (default 0.01)")
    train.add_argument("--batch", type=int, help="minibatch size (default 100)")
    train.add_argument("--iters", type=int, help="optimization steps (default 1000)")
    train.add_argument("--seed", type=int, help="run seed (default 0)")
    train.add_argument("--eval-interval", dest="eval_interval", type=int, help="steps between evaluations")
    train.add_argument("--init", help=" | ".join(INIT_STRATEGIES))
    train.add_argument("--mc-samples", dest="mc_samples", type=int, help="softmax MC sample count")
    train.add_argument("--quad-nodes", dest="quad_nodes", type=int, help="Gauss-Hermite node count")
    train.add_argument(
        "--mean-field",
        dest="mean_field",
        action="store_const",
        const=True,
        help="restrict q covariance to block-diagonal",
    )
    train.add_argument("--init-variance", dest="init_variance", type=float)
    train.add_argument("--init-lengthscale", dest="init_lengthscale", type=float)
    train.add_argument("--init-noise", dest="init_noise", type=float)
    train.add_argument("--eval-chunk", dest="eval_chunk", type=int, help="prediction chunk size")
    train.add_argument("--eval-batch", dest="eval_batch", type=int, help="ELBO probe batch size")
    train.add_argument("--out", help="output directory")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="score a snapshot on a dataset split")
    ev.add_argument("--config", help="key=value config file; flags override")
    add_data_flags(ev)
    ev.add_argument("--snapshot", help="path to snapshot.json")
    ev.add_argument("--split", help="test | train (default test)")
    ev.add_argument("--eval-chunk", dest="eval_chunk", type=int, help="prediction chunk size")
    ev.add_argument("--out", help="directory for evaluation output (default: snapshot dir)")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SnapshotVersionMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SNAPSHOT
    except (OSError, PatchGpError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
