"""Command-line entry point.

Subcommands cover the full desk workflow: ``train`` produces checkpoints
and a metrics log, ``evaluate`` scores update rules on saved checkpoints,
``damping-sweep`` maps score ratios across damping strengths, ``toy``
writes the two-parameter vector fields, and ``selftest`` runs the built-in
verification suite.

Every run is driven by a flat TOML config validated against a strict
per-subcommand schema: an unrecognised key is a hard error that names the
key, because a silently ignored typo (``dampings`` vs ``damping``) would
produce a plausible-looking but wrong experiment.  Each output directory
gets a manifest echoing the config verbatim plus a hash over config and
package version, so any CSV can be traced back to exactly what produced
it.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical
failure during a run (divergence), 4 missing or corrupt input artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import natgrad
from natgrad import datasets, evaluation, models, optim, selftest, toyviz
from natgrad.evaluation import SweepGrid
from natgrad.models import Batch, ModelSpec
from natgrad.optim import CheckpointError, ScheduleSpec
from natgrad.updates import UpdateRequest

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ARTIFACT = 4

REQUIRED = object()


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_float(v):
    return _is_int(v) or isinstance(v, float)


def _is_list(kind):
    def check(v):
        return isinstance(v, list) and all(kind(item) for item in v)

    return check


_CHECKERS = {
    "int": (_is_int, "an integer"),
    "float": (_is_float, "a number"),
    "str": (lambda v: isinstance(v, str), "a string"),
    "bool": (lambda v: isinstance(v, bool), "a boolean"),
    "int-list": (_is_list(_is_int), "a list of integers"),
    "float-list": (_is_list(_is_float), "a list of numbers"),
    "str-list": (
        _is_list(lambda v: isinstance(v, str)),
        "a list of strings",
    ),
}

SCHEMAS = {
    "train": {
        "kind": ("str", "mlp-softmax-ce"),
        "widths": ("int-list", REQUIRED),
        "activation": ("str", "relu"),
        "dataset": ("str", "mixture"),
        "n_samples": ("int", 512),
        "n_features": ("int", 8),
        "n_classes": ("int", 3),
        "data_seed": ("int", 0),
        "csv_path": ("str", ""),
        "idx_images": ("str", ""),
        "idx_labels": ("str", ""),
        "method": ("str", REQUIRED),
        "epochs": ("int", REQUIRED),
        "batch_size": ("int", REQUIRED),
        "eta0": ("float", REQUIRED),
        "schedule": ("str", ""),
        "decay_step": ("int", 0),
        "decay_factor": ("float", 0.1),
        "damping": ("float", None),
        "seed": ("int", 0),
    },
    "evaluate": {
        "train_dir": ("str", REQUIRED),
        "checkpoints": ("str-list", REQUIRED),
        "methods": ("str-list", REQUIRED),
        "damping": ("float", None),
        "cg_iters": ("int", 10),
        "batch_size": ("int", 64),
        "eval_batches": ("int", 8),
        "seed": ("int", 0),
    },
    "damping-sweep": {
        "train_dir": ("str", REQUIRED),
        "checkpoints": ("str-list", REQUIRED),
        "dampings": ("float-list", REQUIRED),
        "methods": ("str-list", ["ef", "ief", "sf"]),
        "batch_size": ("int", 64),
        "eval_batches": ("int", 4),
        "seed": ("int", 0),
    },
    "toy": {
        "toy": ("str", "linear-least-squares"),
        "grid_lo": ("float", -2.0),
        "grid_hi": ("float", 2.0),
        "grid_points": ("int", 41),
        "methods": ("str-list", list(toyviz.TOY_METHODS)),
        "trajectories": ("bool", True),
        "start": ("float-list", [1.0, 1.0]),
        "step_length": ("float", 0.01),
        "max_steps": ("int", 400),
        "seed": ("int", 0),
    },
}


def load_config(path, command: str) -> tuple[dict, dict]:
    """Parse and validate a TOML config.

    Returns the raw mapping (echoed verbatim into the manifest) and a
    resolved copy with schema defaults filled in.
    """
    path = Path(path)
    if not path.exists():
        raise CliError(EXIT_CONFIG, f"config file {path} does not exist")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config file {path} is not valid TOML: {exc}")
    schema = SCHEMAS[command]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise CliError(
            EXIT_CONFIG,
            f"unknown config key {unknown[0]!r} for {command!r} "
            f"(known keys: {', '.join(sorted(schema))})",
        )
    resolved = {}
    for key, (type_tag, default) in schema.items():
        if key in raw:
            checker, describe = _CHECKERS[type_tag]
            if not checker(raw[key]):
                raise CliError(
                    EXIT_CONFIG, f"config key {key!r} must be {describe}"
                )
            resolved[key] = raw[key]
        elif default is REQUIRED:
            raise CliError(EXIT_CONFIG, f"config key {key!r} is required")
        else:
            resolved[key] = default
    return raw, resolved


def compute_config_hash(config: dict, version: str | None = None) -> str:
    version = natgrad.__version__ if version is None else version
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(f"{version}\n{canonical}".encode("utf-8")).hexdigest()


def write_manifest(out_dir: Path, command: str, raw_config: dict) -> None:
    manifest = {
        "command": command,
        "version": natgrad.__version__,
        "config": raw_config,
        "config_hash": compute_config_hash(raw_config),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def _resolve_threads(args) -> int:
    if args.threads is not None:
        value = args.threads
    else:
        value = int(os.environ.get("NATGRAD_THREADS", "1"))
    if value < 1:
        raise CliError(EXIT_CONFIG, "thread count must be at least 1")
    return value


def _build_dataset(cfg: dict, raw: dict) -> datasets.Dataset:
    source = cfg["dataset"]
    declared = cfg["n_classes"] if "n_classes" in raw else None
    try:
        if source == "mixture":
            return datasets.make_mixture(
                cfg["n_samples"], cfg["n_features"], cfg["n_classes"], cfg["data_seed"]
            )
        if source == "csv":
            path = Path(cfg["csv_path"])
            if not cfg["csv_path"] or not path.exists():
                raise CliError(
                    EXIT_ARTIFACT, f"dataset file {cfg['csv_path']!r} does not exist"
                )
            return datasets.load_csv(path, n_classes=declared)
        if source == "idx":
            for key in ("idx_images", "idx_labels"):
                if not cfg[key] or not Path(cfg[key]).exists():
                    raise CliError(
                        EXIT_ARTIFACT, f"dataset file {cfg[key]!r} does not exist"
                    )
            return datasets.load_idx(
                cfg["idx_images"], cfg["idx_labels"], n_classes=declared
            )
    except (datasets.ParseError, datasets.LabelOutOfRange) as exc:
        raise CliError(EXIT_ARTIFACT, str(exc))
    raise CliError(EXIT_CONFIG, f"unknown dataset source {source!r}")


def _build_spec(cfg: dict, dataset: datasets.Dataset) -> ModelSpec:
    try:
        spec = ModelSpec(
            kind=cfg["kind"],
            widths=tuple(cfg["widths"]),
            activation=cfg["activation"],
        )
    except models.ShapeMismatch as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    if not spec.is_classification:
        raise CliError(
            EXIT_CONFIG, "training through the command line needs a classification model"
        )
    if spec.n_features != dataset.features.shape[1]:
        raise CliError(
            EXIT_CONFIG,
            f"model expects {spec.n_features} features "
            f"but the dataset provides {dataset.features.shape[1]}",
        )
    if spec.n_outputs != dataset.n_classes and spec.kind == "mlp-softmax-ce":
        raise CliError(
            EXIT_CONFIG,
            f"model has {spec.n_outputs} outputs "
            f"but the dataset has {dataset.n_classes} classes",
        )
    if spec.kind == "logistic-binary" and dataset.n_classes != 2:
        raise CliError(EXIT_CONFIG, "a two-class dataset is needed for logistic models")
    return spec


def _eval_batches(
    dataset: datasets.Dataset, batch_size: int, n_batches: int, seed: int
) -> list[Batch]:
    order = np.random.default_rng(seed).permutation(len(dataset))
    batch_size = min(batch_size, len(dataset))
    available = max(len(dataset) // batch_size, 1)
    batches = []
    for index in range(min(n_batches, available)):
        idx = order[index * batch_size : (index + 1) * batch_size]
        batches.append(
            Batch(features=dataset.features[idx], targets=dataset.labels[idx])
        )
    return batches


def _load_train_state(cfg: dict):
    """Rebuild the model and dataset a finished training run used."""
    train_dir = Path(cfg["train_dir"])
    manifest_path = train_dir / "manifest.json"
    if not manifest_path.exists():
        raise CliError(
            EXIT_ARTIFACT, f"{train_dir} has no manifest.json; is it a training output?"
        )
    manifest = json.loads(manifest_path.read_text())
    schema = SCHEMAS["train"]
    train_raw = manifest.get("config", {})
    train_cfg = {
        key: train_raw.get(key, default if default is not REQUIRED else None)
        for key, (_, default) in schema.items()
    }
    dataset = _build_dataset(train_cfg, train_raw)
    spec = _build_spec(train_cfg, dataset)
    return train_dir, spec, dataset


def _checkpoint_labels(train_dir: Path, labels: list[str]) -> list[str]:
    ckpt_dir = train_dir / "checkpoints"
    if labels == ["all"]:
        found = sorted(p.stem for p in ckpt_dir.glob("*.ckpt"))
        if not found:
            raise CliError(EXIT_ARTIFACT, f"{ckpt_dir} holds no checkpoints")
        return found
    return labels


def _load_checkpoint(train_dir: Path, label: str, spec: ModelSpec) -> np.ndarray:
    path = train_dir / "checkpoints" / f"{label}.ckpt"
    try:
        return optim.load_checkpoint(path, expected_signature=spec.signature())
    except CheckpointError as exc:
        raise CliError(EXIT_ARTIFACT, str(exc))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    raw, cfg = load_config(args.config, "train")
    if args.seed is not None:
        cfg["seed"] = args.seed
    dataset = _build_dataset(cfg, raw)
    spec = _build_spec(cfg, dataset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, "train", raw)
    if cfg["epochs"] == 0:
        return EXIT_OK
    schedule_kind = cfg["schedule"] or optim.DEFAULT_SCHEDULE_KIND.get(
        cfg["method"], "constant"
    )
    try:
        schedule = ScheduleSpec(
            kind=schedule_kind,
            eta0=cfg["eta0"],
            decay_step=cfg["decay_step"],
            decay_factor=cfg["decay_factor"],
        )
        run = optim.train(
            spec,
            dataset.to_batch(),
            method=cfg["method"],
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            schedule=schedule,
            damping=cfg["damping"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    optim.write_metrics_csv(out_dir / "metrics.csv", run)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for label, theta in run.checkpoints:
        optim.save_checkpoint(ckpt_dir / f"{label}.ckpt", theta, run.spec_signature)
    return EXIT_DIVERGED if run.diverged else EXIT_OK


def cmd_evaluate(args) -> int:
    raw, cfg = load_config(args.config, "evaluate")
    if args.seed is not None:
        cfg["seed"] = args.seed
    threads = _resolve_threads(args)
    train_dir, spec, dataset = _load_train_state(cfg)
    labels = _checkpoint_labels(train_dir, cfg["checkpoints"])
    states = [(label, _load_checkpoint(train_dir, label, spec)) for label in labels]
    batches = _eval_batches(
        dataset, cfg["batch_size"], cfg["eval_batches"], cfg["seed"]
    )
    requests = [
        UpdateRequest(
            method, damping=cfg["damping"], seed=cfg["seed"], cg_iters=cfg["cg_iters"]
        )
        for method in cfg["methods"]
    ]

    def score(state):
        label, theta = state
        return evaluation.evaluate_methods(
            spec, theta, batches, requests, checkpoint=label
        )

    try:
        if threads == 1:
            results = [score(state) for state in states]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(score, states))
    except (ValueError, models.ShapeMismatch) as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, "evaluate", raw)
    reports = [report for result in results for report in result.reports]
    evaluation.write_indicator_csv(out_dir / "indicator.csv", reports)
    return EXIT_OK


def cmd_damping_sweep(args) -> int:
    raw, cfg = load_config(args.config, "damping-sweep")
    if args.seed is not None:
        cfg["seed"] = args.seed
    threads = _resolve_threads(args)
    train_dir, spec, dataset = _load_train_state(cfg)
    labels = _checkpoint_labels(train_dir, cfg["checkpoints"])
    states = [(label, _load_checkpoint(train_dir, label, spec)) for label in labels]
    batches = _eval_batches(
        dataset, cfg["batch_size"], cfg["eval_batches"], cfg["seed"]
    )
    grid = SweepGrid(dampings=tuple(cfg["dampings"]))

    def sweep(state):
        label, theta = state
        return evaluation.damping_sweep(
            spec,
            theta,
            batches,
            grid,
            methods=tuple(cfg["methods"]),
            checkpoint=label,
            seed=cfg["seed"],
        )

    try:
        if threads == 1:
            results = [sweep(state) for state in states]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(sweep, states))
    except (ValueError, models.ShapeMismatch) as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, "damping-sweep", raw)
    rows = [row for result in results for row in result]
    evaluation.write_sweep_csv(out_dir / "sweep.csv", rows)
    return EXIT_OK


def cmd_toy(args) -> int:
    raw, cfg = load_config(args.config, "toy")
    toy = cfg["toy"]
    if toy not in ("linear-least-squares", "logistic-binary"):
        raise CliError(EXIT_CONFIG, f"unknown toy problem {toy!r}")
    unknown = sorted(set(cfg["methods"]) - set(toyviz.TOY_METHODS))
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown toy method {unknown[0]!r}")
    if len(cfg["start"]) != 2:
        raise CliError(EXIT_CONFIG, "start must have exactly two coordinates")
    try:
        grid = toyviz.GridConfig(
            lo=cfg["grid_lo"], hi=cfg["grid_hi"], points=cfg["grid_points"]
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    builder = (
        toyviz.lls_toy_field
        if toy == "linear-least-squares"
        else toyviz.logistic_toy_field
    )
    rows, meta = builder(grid, methods=tuple(cfg["methods"]))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, "toy", raw)
    toyviz.write_field_csv(out_dir / "field.csv", rows, meta)
    if cfg["trajectories"]:
        spec, batch = (
            models.lls_toy() if toy == "linear-least-squares" else models.logistic_toy()
        )
        traj = toyviz.trace_trajectories(
            spec,
            batch,
            np.array(cfg["start"], dtype=np.float64),
            methods=tuple(cfg["methods"]),
            step_length=cfg["step_length"],
            max_steps=cfg["max_steps"],
        )
        toyviz.write_trajectory_csv(out_dir / "trajectories.csv", traj)
    return EXIT_OK


def cmd_selftest(args) -> int:
    return selftest.run_selftest()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="natgrad",
        description="curvature-preconditioned update rules: training, scoring, sweeps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, needs_io=True):
        p = sub.add_parser(name)
        if needs_io:
            p.add_argument("--config", required=True, help="TOML config file")
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--seed", type=int, default=None, help="override config seed")
            p.add_argument(
                "--threads",
                type=int,
                default=None,
                help="worker threads (default: NATGRAD_THREADS or 1)",
            )
        p.set_defaults(handler=handler)
        return p

    add("train", cmd_train)
    add("evaluate", cmd_evaluate)
    add("damping-sweep", cmd_damping_sweep)
    add("toy", cmd_toy)
    add("selftest", cmd_selftest, needs_io=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
