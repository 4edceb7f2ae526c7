"""Command-line entry point.

Subcommands: gen-data, train, distill, ablate, gradcheck, analyze. Training
commands read an optional flat key=value config file (# comments allowed;
explicit flags win over file values; a run's emitted config.json is also
accepted) and write a self-describing run directory containing manifest.json
(written before training), config.json, metrics.csv, checkpoint.json,
report.json, and cmatrix.csv when a logit table was learned.

Exit codes: 0 success; 2 for usage problems (bad flags, unreadable inputs,
config violations); 1 for failures during execution.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    c_row_entropy,
    center_distance_matrix,
    class_centers,
    class_mean_probs,
    export_matrix_csv,
)
from .dataio import (
    DataFormatError,
    Dataset,
    GaussianSpec,
    generate_gaussian,
    load_csv,
    load_idx,
    save_csv,
    split,
)
from .labelreg import load_cmatrix
from .model import load_checkpoint
from .train import (
    ABLATION_LOSSES,
    TrainConfig,
    config_to_dict,
    distill,
    evaluate,
    gradient_check,
    train,
    train_ablation,
    write_run_artifacts,
)

DEFAULT_MEANS = "0,0;1,0;10,10;11,10"
GRADCHECK_THRESHOLD = 1e-6


class UsageError(Exception):
    """Bad invocation: flags, config values, or unreadable inputs."""


_CONFIG_TYPES = {
    "strategy": str,
    "alpha": float,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "momentum": float,
    "weight_decay": float,
    "c_lr": float,
    "seed": int,
    "layer_sizes": "int_list",
    "ols_mix": float,
    "ols_correct_only": bool,
    "ablation_loss": str,
}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _coerce(key: str, raw, line_no=None) -> object:
    kind = _CONFIG_TYPES[key]
    where = f" (line {line_no})" if line_no is not None else ""
    try:
        if kind == "int_list":
            if isinstance(raw, (list, tuple)):
                return tuple(int(v) for v in raw)
            return _parse_int_list(str(raw))
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            return _parse_bool(str(raw))
        return kind(raw)
    except (TypeError, ValueError):
        raise UsageError(
            f"config key {key!r}{where}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}"
        ) from None


def _unknown_key_error(key: str, line_no=None) -> UsageError:
    where = f" (line {line_no})" if line_no is not None else ""
    close = difflib.get_close_matches(key, _CONFIG_TYPES, n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return UsageError(f"unknown config key {key!r}{where}{hint}")


def parse_config_file(path) -> dict:
    """Parse a key=value config file (or a JSON object) into config fields."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    values: dict = {}
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        for key, raw in doc.items():
            if key not in _CONFIG_TYPES:
                raise _unknown_key_error(key)
            if raw is not None:
                values[key] = _coerce(key, raw)
        return values
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"config line {line_no}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _CONFIG_TYPES:
            raise _unknown_key_error(key, line_no)
        values[key] = _coerce(key, raw, line_no)
    return values


def load_config(path, overrides: dict) -> TrainConfig:
    """Defaults, overlaid by the file (if any), overlaid by explicit flags."""
    values = parse_config_file(path) if path else {}
    for key, raw in overrides.items():
        if raw is not None:
            values[key] = _coerce(key, raw)
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _config_overrides(args) -> dict:
    return {
        key: getattr(args, key, None)
        for key in _CONFIG_TYPES
        if getattr(args, key, None) is not None
    }


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load_datasets(args) -> tuple[Dataset, Dataset, dict]:
    """Resolve train/test datasets from CSV or IDX flags; returns input paths
    for the manifest alongside the datasets."""
    inputs = {}
    try:
        if args.data:
            inputs["data"] = args.data
            full, _ = load_csv(args.data, args.label_column)
            if args.test_data:
                inputs["test_data"] = args.test_data
                test, _ = load_csv(args.test_data, args.label_column)
                return full, test, inputs
            train_set, test_set = split(full, args.train_fraction, args.split_seed)
            return train_set, test_set, inputs
        if args.idx_images and args.idx_labels:
            inputs["idx_images"] = args.idx_images
            inputs["idx_labels"] = args.idx_labels
            full = load_idx(args.idx_images, args.idx_labels)
            if args.test_idx_images and args.test_idx_labels:
                inputs["test_idx_images"] = args.test_idx_images
                inputs["test_idx_labels"] = args.test_idx_labels
                test = load_idx(args.test_idx_images, args.test_idx_labels)
                return full, test, inputs
            train_set, test_set = split(full, args.train_fraction, args.split_seed)
            return train_set, test_set, inputs
    except (OSError, DataFormatError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    raise UsageError("no input data: pass --data or --idx-images/--idx-labels")


def _resolve_run_dir(args, subcommand: str, seed: int) -> Path:
    if args.out:
        run_dir = Path(args.out)
    else:
        root = Path(os.environ.get("LABELFORGE_OUT", "."))
        run_dir = root / f"{subcommand}-{seed}-{int(time.time())}"
    if run_dir.exists() and any(run_dir.iterdir()):
        raise UsageError(f"output directory {run_dir} already exists and is not empty")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_manifest(run_dir: Path, subcommand: str, config_doc: dict,
                    inputs: dict) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config_doc,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items()},
        "output_dir": str(run_dir),
        "tool_version": __version__,
    }
    with open(run_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _parse_means(text: str) -> np.ndarray:
    try:
        rows = [
            [float(v) for v in chunk.split(",")]
            for chunk in text.split(";")
            if chunk.strip()
        ]
        means = np.asarray(rows, dtype=np.float64)
    except ValueError:
        raise UsageError(f"cannot parse --means {text!r}; expected 'x,y;x,y;...'") from None
    if means.ndim != 2:
        raise UsageError("--means rows must all have the same dimension")
    return means


def _cmd_gen_data(args) -> int:
    means = _parse_means(args.means)
    try:
        spec = GaussianSpec(means, args.std, args.per_class, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = generate_gaussian(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(dataset, out, args.label_column)
    print(
        f"wrote {len(dataset)} samples, {dataset.num_classes} classes, "
        f"{dataset.num_features} features -> {out}"
    )
    return 0


def _finish_training_command(args, subcommand, runner, teacher_inputs=None,
                             strategy_override=None):
    train_set, test_set, inputs = _load_datasets(args)
    if args.config:
        inputs["config"] = args.config
    if teacher_inputs:
        inputs.update(teacher_inputs)
    overrides = _config_overrides(args)
    if strategy_override:
        overrides["strategy"] = strategy_override
    config = load_config(args.config, overrides)
    if subcommand == "train" and config.strategy in ("distill", "proxy_distill"):
        raise UsageError(
            f"strategy {config.strategy!r} needs a teacher; use the distill subcommand"
        )
    try:
        resolved = config.resolved(train_set.num_features, train_set.num_classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run_dir = _resolve_run_dir(args, subcommand, resolved.seed)
    _write_manifest(run_dir, subcommand, config_to_dict(resolved), inputs)
    result = runner(resolved, train_set, test_set)
    write_run_artifacts(run_dir, resolved, result)
    print(
        f"{subcommand}: strategy={resolved.strategy} seed={resolved.seed} "
        f"final_test_acc={result.report.final_test_accuracy:.4f} -> {run_dir}"
    )
    return 0


def _cmd_train(args) -> int:
    return _finish_training_command(args, "train", train)


def _cmd_ablate(args) -> int:
    return _finish_training_command(args, "ablate", train_ablation,
                                    strategy_override="ablation")


def _cmd_distill(args) -> int:
    if bool(args.teacher_checkpoint) == bool(args.teacher_cmatrix):
        raise UsageError("pass exactly one of --teacher-checkpoint / --teacher-cmatrix")
    teacher_inputs = {}
    try:
        if args.teacher_checkpoint:
            teacher = load_checkpoint(args.teacher_checkpoint)
            teacher_inputs["teacher_checkpoint"] = args.teacher_checkpoint
        else:
            teacher = load_cmatrix(args.teacher_cmatrix)
            teacher_inputs["teacher_cmatrix"] = args.teacher_cmatrix
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load teacher: {exc}") from None

    def runner(config, train_set, test_set):
        return distill(config, teacher, train_set, test_set)

    strategy = "distill" if args.teacher_checkpoint else "proxy_distill"
    return _finish_training_command(args, "distill", runner, teacher_inputs,
                                    strategy_override=strategy)


def _cmd_gradcheck(args) -> int:
    hidden = _parse_int_list(args.layers) if args.layers else (8,)
    outcome = gradient_check(
        num_classes=args.k,
        seed=args.seed,
        hidden_sizes=hidden,
        batch_size=args.batch,
        step=args.step,
    )
    worst = max(outcome["network_max_rel_err"], outcome["cmatrix_max_rel_err"])
    print(
        f"gradcheck k={args.k} seed={args.seed}: "
        f"network={outcome['network_max_rel_err']:.3e} "
        f"cmatrix={outcome['cmatrix_max_rel_err']:.3e} "
        f"threshold={GRADCHECK_THRESHOLD:.0e}"
    )
    if worst >= GRADCHECK_THRESHOLD:
        print(f"gradcheck FAILED: max relative error {worst:.3e}", file=sys.stderr)
        return 1
    return 0


def _cmd_analyze(args) -> int:
    train_set, test_set, inputs = _load_datasets(args)
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from None
    inputs["checkpoint"] = args.checkpoint
    cmatrix = None
    if args.cmatrix:
        try:
            cmatrix = load_cmatrix(args.cmatrix)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot load cmatrix: {exc}") from None
        inputs["cmatrix"] = args.cmatrix
    run_dir = _resolve_run_dir(args, "analyze", 0)
    _write_manifest(run_dir, "analyze", {}, inputs)

    doc = {}
    for tag, dataset in (("train", train_set), ("test", test_set)):
        export_matrix_csv(
            class_mean_probs(model, dataset), run_dir / f"class_mean_probs_{tag}.csv"
        )
        if model.num_layers >= 2:
            centers = class_centers(model, dataset)
            export_matrix_csv(
                center_distance_matrix(centers),
                run_dir / f"center_distance_{tag}.csv",
            )
        doc[tag] = evaluate(model, dataset)
    if cmatrix is not None:
        doc["c_row_entropy"] = [float(v) for v in c_row_entropy(cmatrix)]
    with open(run_dir / "analysis.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"analyze: wrote {run_dir}")
    return 0


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="training CSV (split unless --test-data given)")
    p.add_argument("--test-data", help="held-out CSV")
    p.add_argument("--label-column", default="label")
    p.add_argument("--idx-images", help="IDX image file (optionally .gz)")
    p.add_argument("--idx-labels", help="IDX label file (optionally .gz)")
    p.add_argument("--test-idx-images")
    p.add_argument("--test-idx-labels")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file (flags override)")
    p.add_argument("--strategy")
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--c-lr", type=float, dest="c_lr")
    p.add_argument("--seed", type=int)
    p.add_argument("--layer-sizes", dest="layer_sizes", help="e.g. 2,32,4")
    p.add_argument("--ols-mix", type=float, dest="ols_mix")
    p.add_argument(
        "--ols-correct-only",
        dest="ols_correct_only",
        action="store_const",
        const=True,
    )
    p.add_argument("--ablation-loss", dest="ablation_loss", choices=ABLATION_LOSSES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labelforge",
        description="Desk-scale label-regularization training laboratory.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate a Gaussian-mixture CSV dataset")
    p.add_argument("--means", default=DEFAULT_MEANS, help="'x,y;x,y;...' class centers")
    p.add_argument("--std", type=float, default=0.5)
    p.add_argument("--per-class", type=int, default=200, dest="per_class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-column", default="label")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one model under a label strategy")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--out", help="run directory (default <sub>-<seed>-<time>)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("distill", help="train a student from a teacher artifact")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--teacher-checkpoint", help="teacher model checkpoint.json")
    p.add_argument("--teacher-cmatrix", help="teacher cmatrix.csv (with sidecar)")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("ablate", help="train with a loss-routing variant")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--k", type=int, default=5, help="number of classes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", help="hidden sizes, e.g. 8,8")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("analyze", help="numeric diagnostics for a trained model")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cmatrix")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"labelforge: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure after a valid invocation
        print(f"labelforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
