"""Command Line.

``superpoint-lens train | infer | eval | gradcheck``. Every command reads the same optional config
file, an INI file with ``[train]``, ``[model]``, ``[loss]`` and ``[scenes]`` sections whose keys
mirror the fields of :class:`superpoint_lens.train.TrainConfig`,
:class:`superpoint_lens.HookedSuperpointTransformerConfig`, :class:`superpoint_lens.loss.LossConfig`
and :class:`superpoint_lens.scenes.SceneSetConfig`. ``--set section.key=value`` overrides a file
value.

Exit codes: 0 success, 1 a check failed, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import pprint
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import torch
from rich.console import Console
from rich.table import Table

from superpoint_lens import evals
from superpoint_lens.gradcheck import run_gradcheck
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig
from superpoint_lens.loss import LossConfig
from superpoint_lens.scenes import SceneSetConfig, generate_scene_set, load_scene, load_scene_dir
from superpoint_lens.train import (
    NonFiniteLossError,
    TrainConfig,
    load_checkpoint,
    load_model,
    save_checkpoint,
    save_loss_history,
    train,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

CHECKPOINT_FILE = "checkpoint.json"
LOSS_HISTORY_FILE = "loss_history.csv"
PREDICTION_SUFFIX = ".txt"

SECTIONS = {
    "train": TrainConfig,
    "model": HookedSuperpointTransformerConfig,
    "loss": LossConfig,
    "scenes": SceneSetConfig,
}
# Keys of [train] that are sections of their own.
NESTED_TRAIN_FIELDS = {"model", "loss", "scenes"}


class ConfigError(ValueError):
    """Raised for a malformed config file or override."""


@dataclass
class CliConfig:
    """Everything one invocation asked for, before the config file is applied."""

    command: str
    config_path: Optional[Path] = None
    overrides: List[str] = field(default_factory=list)
    seed: Optional[int] = None
    out: Optional[Path] = None
    scenes_dir: Optional[Path] = None
    checkpoint: Optional[Path] = None
    scene: Optional[Path] = None
    pred_dir: Optional[Path] = None
    gt_dir: Optional[Path] = None
    score_floor: float = 0.0
    top_n: Optional[int] = None
    dump_attention: bool = False

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> CliConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{key: value for key, value in vars(args).items() if key in names})


def _settable_fields(section: str) -> Dict[str, Any]:
    config_class = SECTIONS[section]
    hints = typing.get_type_hints(config_class)
    names = [f.name for f in dataclasses.fields(config_class)]
    if section == "train":
        names = [name for name in names if name not in NESTED_TRAIN_FIELDS]
    settable = {name: hints[name] for name in names}
    if section == "model":
        settable["preset"] = str
    return settable


def _coerce(raw: str, hint: Any, key: str) -> Any:
    """Parse ``raw`` as a value of type ``hint``."""
    origin = typing.get_origin(hint)
    args = [arg for arg in typing.get_args(hint) if arg is not type(None)]
    if origin is Union:
        if raw.strip().lower() in ("none", ""):
            return None
        return _coerce(raw, args[0], key)
    try:
        if hint is bool:
            states = configparser.ConfigParser.BOOLEAN_STATES
            if raw.strip().lower() not in states:
                raise ValueError(f"expected one of {sorted(states)}")
            return states[raw.strip().lower()]
        if hint in (int, float, str):
            return hint(raw.strip())
        if hint is torch.dtype:
            return raw.strip()
        if hint is tuple or origin is tuple:
            items = [item.strip() for item in raw.split(",") if item.strip()]
            if args and args[0] is str:
                return tuple(items)
            return tuple(float(item) for item in items)
    except ValueError as error:
        raise ConfigError(f"Cannot read {key} = {raw!r}: {error}") from error
    raise ConfigError(f"{key} cannot be set from a config file")


def read_config_values(
    config_path: Optional[Path], overrides: Sequence[str]
) -> Dict[str, Dict[str, Any]]:
    """Collect typed values per section from the config file and the ``--set`` overrides."""
    parser = configparser.ConfigParser()
    # Keys are field names; keep their case.
    parser.optionxform = str  # type: ignore[assignment]
    if config_path is not None:
        if not config_path.is_file():
            raise ConfigError(f"Config file {config_path} does not exist")
        try:
            parser.read(config_path)
        except configparser.Error as error:
            raise ConfigError(f"Cannot parse config file {config_path}: {error}") from error

    raw: Dict[str, Dict[str, str]] = {
        section: dict(parser.items(section)) for section in parser.sections()
    }
    for override in overrides:
        key, sep, value = override.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"Override {override!r} is not of the form section.key=value")
        raw.setdefault(section, {})[name] = value

    values: Dict[str, Dict[str, Any]] = {}
    for section, entries in raw.items():
        if section not in SECTIONS:
            raise ConfigError(
                f"Unknown config section [{section}], expected one of {list(SECTIONS)}"
            )
        settable = _settable_fields(section)
        for key, raw_value in entries.items():
            if key not in settable:
                raise ConfigError(f"Unknown key {key!r} in section [{section}]")
            values.setdefault(section, {})[key] = _coerce(
                raw_value, settable[key], f"{section}.{key}"
            )
    return values


def build_train_config(
    values: Dict[str, Dict[str, Any]], seed: Optional[int] = None
) -> TrainConfig:
    """A :class:`TrainConfig` from per-section values; ``seed`` sets both the run and the scene
    set seed."""
    model_values = dict(values.get("model", {}))
    preset = model_values.pop("preset", "desk")
    scene_values = dict(values.get("scenes", {}))
    train_values = dict(values.get("train", {}))
    if seed is not None:
        train_values["seed"] = seed
        scene_values["seed"] = seed
    try:
        return TrainConfig(
            model=HookedSuperpointTransformerConfig.from_preset(preset, **model_values),
            loss=LossConfig(**values.get("loss", {})),
            scenes=SceneSetConfig(**scene_values),
            **train_values,
        )
    except (ValueError, AssertionError, TypeError) as error:
        raise ConfigError(f"Invalid configuration: {error}") from error


def _log_resolved(config: Dict[str, Any]) -> None:
    logging.info("Resolved config:\n%s", pprint.pformat(config))


def cmd_train(cli: CliConfig) -> int:
    config = build_train_config(read_config_values(cli.config_path, cli.overrides), cli.seed)
    _log_resolved(config.to_dict())
    if cli.out is None:
        raise ConfigError("train needs --out")

    if cli.scenes_dir is not None:
        scenes = list(load_scene_dir(cli.scenes_dir, config.scenes.superpoint_cell).values())
        if not scenes:
            raise ConfigError(f"No scene files in {cli.scenes_dir}")
    else:
        scenes = generate_scene_set(config.scenes)

    result = train(config, scenes)
    cli.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, cli.out / CHECKPOINT_FILE)
    save_loss_history(result.history, cli.out / LOSS_HISTORY_FILE)
    logging.info(
        "Trained %d steps, final loss %.6f, checkpoint in %s",
        config.num_steps,
        result.history[-1]["total"] if result.history else float("nan"),
        cli.out,
    )
    return EXIT_OK


def cmd_infer(cli: CliConfig) -> int:
    if cli.checkpoint is None or cli.scene is None or cli.out is None:
        raise ConfigError("infer needs --checkpoint, --scene and --out")
    checkpoint = load_checkpoint(cli.checkpoint)
    model_config = dict(checkpoint.config.get("model", {}))
    model_values = read_config_values(cli.config_path, cli.overrides).get("model", {})
    if model_values:
        model_config.update(model_values)
        model_config.pop("preset", None)
    _log_resolved({"model": model_config, "score_floor": cli.score_floor, "top_n": cli.top_n})
    try:
        model_cfg = HookedSuperpointTransformerConfig.from_dict(model_config)
    except (ValueError, AssertionError, TypeError) as error:
        raise ConfigError(f"Invalid model configuration: {error}") from error
    model = load_model(checkpoint, model_cfg)

    superpoint_cell = float(checkpoint.config.get("scenes", {}).get("superpoint_cell", 0.2))
    if cli.scene.is_dir():
        scenes = load_scene_dir(cli.scene, superpoint_cell)
        cli.out.mkdir(parents=True, exist_ok=True)
        outputs = {stem: cli.out / f"{stem}{PREDICTION_SUFFIX}" for stem in scenes}
    else:
        scenes = {cli.scene.stem: load_scene(cli.scene, superpoint_cell)}
        cli.out.parent.mkdir(parents=True, exist_ok=True)
        outputs = {cli.scene.stem: cli.out}

    for stem, scene in scenes.items():
        predictions = evals.predict_scene(model, scene, cli.score_floor, cli.top_n)
        evals.save_predictions(predictions, outputs[stem])
        logging.info("Scene %s: %d instances written to %s", stem, len(predictions), outputs[stem])
        if cli.dump_attention:
            paths = evals.save_attention_tables(
                evals.attention_tables(model, scene),
                outputs[stem].parent,
                stem=f"{stem}_attention",
            )
            logging.info("Scene %s: %d attention tables written", stem, len(paths))
    return EXIT_OK


def cmd_eval(cli: CliConfig, console: Optional[Console] = None) -> int:
    if cli.pred_dir is None or cli.gt_dir is None:
        raise ConfigError("eval needs --pred-dir and --gt-dir")
    for directory in (cli.pred_dir, cli.gt_dir):
        if not directory.is_dir():
            raise ConfigError(f"Directory {directory} does not exist")
    scene_values = read_config_values(cli.config_path, cli.overrides).get("scenes", {})
    superpoint_cell = scene_values.get("superpoint_cell", SceneSetConfig.superpoint_cell)
    _log_resolved(
        {
            "pred_dir": str(cli.pred_dir),
            "gt_dir": str(cli.gt_dir),
            "superpoint_cell": superpoint_cell,
        }
    )
    gt_scenes = load_scene_dir(cli.gt_dir, superpoint_cell)
    prediction_files = {
        path.stem: path for path in sorted(cli.pred_dir.glob(f"*{PREDICTION_SUFFIX}"))
    }
    missing = sorted(set(prediction_files) - set(gt_scenes))
    if missing:
        raise ConfigError(f"No ground truth for predicted scenes: {', '.join(missing)}")

    predictions, ground_truths = [], []
    for stem, scene in gt_scenes.items():
        if scene.ground_truth is None:
            raise ConfigError(f"Scene {stem} in {cli.gt_dir} has no ground truth")
        if stem in prediction_files:
            predictions.append(evals.load_predictions(prediction_files[stem], scene.n_points))
        else:
            logging.warning("No prediction file for scene %s, counting it as empty", stem)
            predictions.append([])
        ground_truths.append(scene.ground_truth)

    result = evals.compute_ap(predictions, ground_truths)
    evals.print_metrics(result, console)
    if cli.out is not None:
        cli.out.parent.mkdir(parents=True, exist_ok=True)
        evals.save_metrics_report(result, cli.out)
    return EXIT_OK


def cmd_gradcheck(cli: CliConfig, console: Optional[Console] = None) -> int:
    # The toy problem is fixed; a config is only validated.
    read_config_values(cli.config_path, cli.overrides)
    seed = 1 if cli.seed is None else cli.seed
    _log_resolved({"seed": seed})
    report = run_gradcheck(seed)
    console = console or Console()

    table = Table(title=f"Gradient check, seed {seed}")
    for column in ["check", "max rel error", "worst entry", "passed"]:
        table.add_column(column)
    for name, row in report.to_frame().iterrows():
        entry = f"{row['parameter']}[{row['index']}]" if row["parameter"] else ""
        table.add_row(str(name), f"{row['max_rel_error']:.3e}", entry, str(row["passed"]))
    console.print(table)

    if report.passed:
        return EXIT_OK
    console.print(f"gradcheck failed: {', '.join(report.failures())}")
    return EXIT_CHECK_FAILED


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="config_path", type=Path, help="INI config file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value; may be repeated",
    )
    common.add_argument("--seed", type=int, help="Seed for the run")

    parser = argparse.ArgumentParser(
        prog="superpoint-lens", description="Superpoint transformer instance segmentation"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train_parser = commands.add_parser("train", parents=[common], help="Train a model")
    train_parser.add_argument("--out", type=Path, required=True, help="Output directory")
    train_parser.add_argument(
        "--scenes", dest="scenes_dir", type=Path, help="Train on these scene files"
    )

    infer_parser = commands.add_parser("infer", parents=[common], help="Predict instances")
    infer_parser.add_argument("--checkpoint", type=Path, required=True)
    infer_parser.add_argument("--scene", type=Path, required=True, help="Scene file or directory")
    infer_parser.add_argument(
        "--out", type=Path, required=True, help="Prediction file or directory"
    )
    infer_parser.add_argument("--score-floor", type=float, default=0.0)
    infer_parser.add_argument("--top-n", type=int, default=None)
    infer_parser.add_argument(
        "--dump-attention",
        action="store_true",
        help="Also write per-layer cross-attention tables next to the predictions",
    )

    eval_parser = commands.add_parser("eval", parents=[common], help="Score predictions")
    eval_parser.add_argument("--pred-dir", type=Path, required=True)
    eval_parser.add_argument("--gt-dir", type=Path, required=True)
    eval_parser.add_argument("--out", type=Path, help="Write the metrics report here")

    commands.add_parser("gradcheck", parents=[common], help="Check gradients")
    return parser


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exit_:
        return EXIT_OK if exit_.code in (0, None) else EXIT_USAGE
    cli = CliConfig.from_args(args)

    try:
        return COMMANDS[cli.command](cli)
    except NonFiniteLossError as error:
        logging.error("%s", error)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as error:
        # Config, scene, checkpoint and prediction file problems are all ValueErrors.
        logging.error("%s", error)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
