"""Train.

Utilities for training :class:`superpoint_lens.HookedSuperpointTransformer` models on scenes with
instance ground truth, and for saving and restoring the trained parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Union

import numpy as np
import pandas as pd
import torch
import torch.optim as optim
import wandb
from torch.optim import Optimizer
from tqdm.auto import tqdm

from superpoint_lens import kernels
from superpoint_lens.HookedSuperpointTransformer import HookedSuperpointTransformer
from superpoint_lens.HookedSuperpointTransformerConfig import HookedSuperpointTransformerConfig
from superpoint_lens.loss import LossBreakdown, LossConfig, SceneTargets, total_loss
from superpoint_lens.scenes import Scene, SceneSetConfig, SceneValidationError

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be read or does not fit the model config."""


class NonFiniteLossError(ArithmeticError):
    """Raised when a training step produces a non-finite loss term."""

    def __init__(self, step: int, term: str):
        super().__init__(f"Loss term {term!r} is not finite at step {step}")
        self.step = step
        self.term = term


@dataclass
class TrainConfig:
    """
    Configuration class to store training hyperparameters for a training run of a
    HookedSuperpointTransformer model.

    Args:
        model (HookedSuperpointTransformerConfig): Model hyperparameters. If its seed is None the
            training seed is used to initialize the weights.
        loss (LossConfig): Matching and loss weights.
        scenes (SceneSetConfig): The synthetic scene set trained on when no scenes are passed in.
        num_steps (int): Number of optimizer steps. Each step sees one scene, visited round robin.
        lr (float): Learning rate.
        seed (int): Random seed for the run.
        optimizer_name (str): "Adam" or "SGD".
        momentum (float): Momentum of SGD.
        betas (tuple of float): Moment decay rates of Adam.
        adam_eps (float): Epsilon of Adam.
        wandb (bool): Whether to use Weights and Biases for logging.
        wandb_project_name (str, *optional*): Name of the Weights and Biases project to use.
        print_every (int, *optional*): Log the loss every n steps.
    """

    model: HookedSuperpointTransformerConfig = field(
        default_factory=HookedSuperpointTransformerConfig
    )
    loss: LossConfig = field(default_factory=LossConfig)
    scenes: SceneSetConfig = field(default_factory=SceneSetConfig)
    num_steps: int = 500
    lr: float = 3e-3
    seed: int = 0
    optimizer_name: str = "Adam"
    momentum: float = 0.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    wandb: bool = False
    wandb_project_name: Optional[str] = None
    print_every: Optional[int] = 50

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = HookedSuperpointTransformerConfig.from_dict(self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if isinstance(self.scenes, dict):
            self.scenes = SceneSetConfig(**self.scenes)
        self.betas = tuple(self.betas)
        if self.optimizer_name not in ["Adam", "SGD"]:
            raise ValueError(f"Optimizer {self.optimizer_name} not supported")
        if self.lr < 0:
            raise ValueError(f"Learning rate must be non-negative, got {self.lr}")
        assert self.num_steps >= 0, "num_steps must be non-negative"

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> TrainConfig:
        return cls(**config_dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            **self.__dict__,
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "scenes": dict(self.scenes.__dict__),
            "betas": list(self.betas),
        }

    def model_config(self) -> HookedSuperpointTransformerConfig:
        """The model config with the training seed filled in when it has none."""
        if self.model.seed is None:
            return replace(self.model, seed=self.seed)
        return self.model


@dataclass
class Checkpoint:
    """Named parameter values plus the config and step they were saved at."""

    parameters: Dict[str, np.ndarray]
    config: Dict[str, Any]
    step: int

    @classmethod
    def from_model(
        cls, model: HookedSuperpointTransformer, config: TrainConfig, step: int
    ) -> Checkpoint:
        parameters = {
            name: param.detach().cpu().numpy().copy() for name, param in model.named_parameters()
        }
        config_dict = config.to_dict()
        config_dict["model"] = model.cfg.to_dict()
        return cls(parameters, config_dict, step)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


@dataclass
class TrainResult:
    model: HookedSuperpointTransformer
    checkpoint: Checkpoint
    history: List[Dict[str, float]]
    trained_parameters: Set[str]
    """Parameters that received a nonzero gradient at least once."""


def make_optimizer(model: HookedSuperpointTransformer, config: TrainConfig) -> Optimizer:
    if config.optimizer_name == "Adam":
        return optim.Adam(
            model.parameters(), lr=config.lr, betas=config.betas, eps=config.adam_eps
        )
    elif config.optimizer_name == "SGD":
        return optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    else:
        raise ValueError(f"Optimizer {config.optimizer_name} not supported")


def scene_loss(
    model: HookedSuperpointTransformer,
    scene: Scene,
    targets: SceneTargets,
    loss_config: LossConfig,
) -> LossBreakdown:
    """Forward one scene and compute its deep-supervision loss."""
    predictions = model(scene)
    return total_loss(
        predictions,
        targets,
        loss_config,
        iterative_prediction=model.cfg.iterative_prediction,
        use_score_loss=model.cfg.use_score_branch,
    )


def train(
    config: TrainConfig,
    scenes: Sequence[Scene],
    model: Optional[HookedSuperpointTransformer] = None,
) -> TrainResult:
    """
    Trains a HookedSuperpointTransformer on instance segmentation of the given scenes.

    Args:
        config: The training configuration.
        scenes: Scenes with ground truth. Step ``t`` trains on ``scenes[t % len(scenes)]``.
        model: The model to train. A fresh model is built from ``config`` by default.

    Returns:
        The trained model, a checkpoint of it, the per-step loss history and the set of
        parameters that were ever updated.

    Raises:
        NonFiniteLossError: when a loss term stops being finite.
    """
    if not scenes:
        raise ValueError("Training needs at least one scene")
    for index, scene in enumerate(scenes):
        if scene.ground_truth is None:
            raise ValueError(f"Scene {index} has no ground truth to train on")

    torch.manual_seed(config.seed)
    if model is None:
        model = HookedSuperpointTransformer(config.model_config())
    model.train()
    for index, scene in enumerate(scenes):
        try:
            scene.ground_truth.check_classes(model.cfg.n_classes)
        except SceneValidationError as error:
            raise SceneValidationError(f"Training scene {index}: {error}") from error

    targets = [SceneTargets.from_scene(scene, model.token_partition(scene)) for scene in scenes]
    most_instances = max(target.n_instances for target in targets)
    if most_instances > model.cfg.n_queries:
        raise ValueError(
            f"A training scene has {most_instances} instances but the model only has "
            f"{model.cfg.n_queries} queries"
        )

    if config.wandb:
        if config.wandb_project_name is None:
            config.wandb_project_name = "superpoint-lens"
        wandb.init(project=config.wandb_project_name, config=config.to_dict())

    optimizer = make_optimizer(model, config)
    params = dict(model.named_parameters())
    trained_parameters: Set[str] = set()
    history: List[Dict[str, float]] = []

    for step in tqdm(range(1, config.num_steps + 1)):
        scene_index = (step - 1) % len(scenes)
        breakdown = scene_loss(model, scenes[scene_index], targets[scene_index], config.loss)
        bad_term = breakdown.non_finite_term()
        if bad_term is not None:
            raise NonFiniteLossError(step, bad_term)

        gradients = kernels.backward(breakdown.total, params)
        for name, param in params.items():
            param.grad = gradients[name]
            if torch.any(gradients[name] != 0):
                trained_parameters.add(name)
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)

        losses = breakdown.items()
        history.append({"step": step, "scene": scene_index, **losses})

        if config.wandb:
            wandb.log({**losses, "scene": scene_index}, step=step)

        if config.print_every is not None and step % config.print_every == 0:
            logging.info("Step %d scene %d loss %.6f", step, scene_index, losses["total"])

    if config.wandb:
        wandb.finish()

    return TrainResult(
        model=model,
        checkpoint=Checkpoint.from_model(model, config, config.num_steps),
        history=history,
        trained_parameters=trained_parameters,
    )


def save_loss_history(history: Sequence[Dict[str, float]], path: Union[str, Path]) -> None:
    """Write the per-step loss breakdown as CSV with exact float repr."""
    frame = pd.DataFrame(list(history))
    frame.to_csv(path, index=False, float_format="%.17g")


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    """Write a checkpoint as JSON. Floats are written at full precision, so loading restores
    every parameter bit for bit."""
    document = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": checkpoint.step,
        "config": checkpoint.config,
        "parameters": {
            name: {"shape": list(values.shape), "values": values.reshape(-1).tolist()}
            for name, values in checkpoint.parameters.items()
        },
    }
    Path(path).write_text(json.dumps(document, indent=1))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        document = json.loads(Path(path).read_text())
    except OSError as error:
        raise CheckpointError(f"Cannot read checkpoint {path}: {error}") from error
    except json.JSONDecodeError as error:
        raise CheckpointError(
            f"Checkpoint {path} is not valid JSON (line {error.lineno}, column {error.colno})"
        ) from error

    if not isinstance(document, dict):
        raise CheckpointError(f"Checkpoint {path} must hold a JSON object")
    missing = {"step", "config", "parameters"} - set(document)
    if missing:
        raise CheckpointError(f"Checkpoint {path} is missing {sorted(missing)}")

    parameters = {}
    for name, entry in document["parameters"].items():
        try:
            shape = tuple(int(size) for size in entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as error:
            raise CheckpointError(f"Parameter {name} in {path} is malformed: {error}") from error
        if values.size != int(np.prod(shape)):
            raise CheckpointError(
                f"Parameter {name} in {path} holds {values.size} values for shape {shape}"
            )
        parameters[name] = values.reshape(shape)
    return Checkpoint(parameters, document["config"], int(document["step"]))


def load_model(
    checkpoint: Checkpoint,
    model_config: Optional[Union[HookedSuperpointTransformerConfig, Dict]] = None,
) -> HookedSuperpointTransformer:
    """Build a model and fill it with the checkpoint's parameters.

    Args:
        checkpoint: The loaded checkpoint.
        model_config: Config to build the model from. Defaults to the checkpoint's own snapshot.

    Raises:
        CheckpointError: naming the first parameter that is missing, unexpected or misshapen.
    """
    if model_config is None:
        model_config = checkpoint.config.get("model", {})
    model = HookedSuperpointTransformer(model_config)
    params = dict(model.named_parameters())

    for name in params:
        if name not in checkpoint.parameters:
            raise CheckpointError(f"Checkpoint has no value for parameter {name}")
    for name, values in checkpoint.parameters.items():
        if name not in params:
            raise CheckpointError(f"Checkpoint parameter {name} does not exist in the model")
        if tuple(values.shape) != tuple(params[name].shape):
            raise CheckpointError(
                f"Parameter {name} has shape {tuple(values.shape)} in the checkpoint but "
                f"{tuple(params[name].shape)} in the model"
            )

    with torch.no_grad():
        for name, param in params.items():
            param.copy_(torch.as_tensor(checkpoint.parameters[name], dtype=param.dtype))
    model.eval()
    return model
