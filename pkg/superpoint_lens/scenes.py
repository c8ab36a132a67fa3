"""Scenes.

Point clouds, superpoint partitions and instance ground truth, the JSON scene file format, the
synthetic scene generator and the voxel-grid superpoint partitioner.

Synthetic scenes are drawn with :func:`numpy.random.default_rng` (the PCG64 bit generator), so a
scene is a pure function of its seed and config on every platform numpy supports.
"""

from __future__ import annotations

import colorsys
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

SLOT_SIZE = 1.0
"""Edge length (meters) of the floor slots synthetic instances are placed in, one per slot."""

FLOOR_CLEARANCE = 0.3
"""Height (meters) of the lowest point of a synthetic instance above the floor."""

BACKGROUND_COLOR = 0.5

SCENE_FIELDS = {"points", "superpoint_ids", "num_superpoints", "instance_ids", "instance_classes"}


class SceneFormatError(ValueError):
    """Raised when a scene file cannot be parsed."""


class SceneValidationError(ValueError):
    """Raised when scene arrays are inconsistent with each other."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Per-point coordinates (meters) and colors (in [0, 1])."""

    coordinates: np.ndarray
    """[n_points, 3] float64."""

    colors: np.ndarray
    """[n_points, 3] float64."""

    def __post_init__(self):
        coordinates = np.asarray(self.coordinates, dtype=np.float64)
        colors = np.asarray(self.colors, dtype=np.float64)
        if coordinates.ndim != 2 or coordinates.shape[1] != 3 or coordinates.shape[0] < 1:
            raise SceneValidationError(
                f"Coordinates must have shape [n_points >= 1, 3], got {coordinates.shape}"
            )
        if colors.shape != coordinates.shape:
            raise SceneValidationError(
                f"Colors of shape {colors.shape} do not match coordinates {coordinates.shape}"
            )
        if not np.isfinite(coordinates).all():
            raise SceneValidationError("Coordinates must be finite")
        if not ((colors >= 0) & (colors <= 1)).all():
            raise SceneValidationError("Colors must lie in [0, 1]")
        object.__setattr__(self, "coordinates", coordinates)
        object.__setattr__(self, "colors", colors)

    @property
    def n_points(self) -> int:
        return self.coordinates.shape[0]

    def features(self) -> np.ndarray:
        """[n_points, 6] array of ``x, y, z, r, g, b`` rows."""
        return np.concatenate([self.coordinates, self.colors], axis=1)


@dataclass(frozen=True, eq=False)
class SuperpointPartition:
    """Assignment of every point to one of ``n_superpoints`` non-empty superpoints."""

    ids: np.ndarray
    n_superpoints: int

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
            raise SceneValidationError("Superpoint ids must be a 1-d integer array")
        ids = ids.astype(np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_superpoints):
            raise SceneValidationError(
                f"Superpoint ids must lie in [0, {self.n_superpoints}), got range "
                f"[{ids.min()}, {ids.max()}]"
            )
        empty = np.flatnonzero(np.bincount(ids, minlength=self.n_superpoints) == 0)
        if empty.size:
            raise SceneValidationError(f"Superpoints {empty.tolist()} have no points")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "n_superpoints", int(self.n_superpoints))

    @classmethod
    def from_ids(cls, ids: Union[np.ndarray, List[int]]) -> SuperpointPartition:
        ids = np.asarray(ids, dtype=np.int64)
        return cls(ids, int(ids.max()) + 1 if ids.size else 0)

    @classmethod
    def identity(cls, n_points: int) -> SuperpointPartition:
        """Every point is its own superpoint."""
        return cls(np.arange(n_points, dtype=np.int64), n_points)

    def member_counts(self) -> np.ndarray:
        return np.bincount(self.ids, minlength=self.n_superpoints)


@dataclass(frozen=True, eq=False)
class InstanceGroundTruth:
    """Per-point instance ids (-1 for background) and the semantic class of every instance."""

    instance_ids: np.ndarray
    instance_classes: np.ndarray

    def __post_init__(self):
        instance_ids = np.asarray(self.instance_ids)
        instance_classes = np.asarray(self.instance_classes, dtype=np.int64).reshape(-1)
        if instance_ids.ndim != 1 or (
            instance_ids.size and not np.issubdtype(instance_ids.dtype, np.integer)
        ):
            raise SceneValidationError("Instance ids must be a 1-d integer array")
        instance_ids = instance_ids.astype(np.int64)
        n_instances = instance_classes.shape[0]
        if instance_ids.size and (instance_ids.min() < -1 or instance_ids.max() >= n_instances):
            raise SceneValidationError(
                f"Instance ids must lie in [-1, {n_instances}), got range "
                f"[{instance_ids.min()}, {instance_ids.max()}]"
            )
        sizes = np.bincount(instance_ids[instance_ids >= 0], minlength=n_instances)
        empty = np.flatnonzero(sizes == 0)
        if empty.size:
            raise SceneValidationError(f"Instances {empty.tolist()} have no points")
        if (instance_classes < 0).any():
            raise SceneValidationError("Instance classes must be non-negative")
        object.__setattr__(self, "instance_ids", instance_ids)
        object.__setattr__(self, "instance_classes", instance_classes)

    @property
    def n_instances(self) -> int:
        return self.instance_classes.shape[0]

    def check_classes(self, n_classes: int) -> None:
        """Raise :class:`SceneValidationError` if an instance class is n_classes or more."""
        outside = np.unique(self.instance_classes[self.instance_classes >= n_classes])
        if outside.size:
            raise SceneValidationError(
                f"Instance classes {outside.tolist()} are outside [0, {n_classes})"
            )

    def point_masks(self) -> np.ndarray:
        """[n_instances, n_points] boolean membership matrix."""
        return self.instance_ids[None, :] == np.arange(self.n_instances)[:, None]


@dataclass(frozen=True, eq=False)
class Scene:
    cloud: PointCloud
    superpoints: SuperpointPartition
    ground_truth: Optional[InstanceGroundTruth] = None

    def __post_init__(self):
        n_points = self.cloud.n_points
        if self.superpoints.ids.shape[0] != n_points:
            raise SceneValidationError(
                f"Scene has {n_points} points but {self.superpoints.ids.shape[0]} superpoint ids"
            )
        if self.ground_truth is not None and self.ground_truth.instance_ids.shape[0] != n_points:
            raise SceneValidationError(
                f"Scene has {n_points} points but {self.ground_truth.instance_ids.shape[0]} "
                "instance ids"
            )

    @property
    def n_points(self) -> int:
        return self.cloud.n_points

    @property
    def n_superpoints(self) -> int:
        return self.superpoints.n_superpoints

    def with_superpoints(self, superpoints: SuperpointPartition) -> Scene:
        return replace(self, superpoints=superpoints)


@dataclass(frozen=True, eq=False)
class SuperpointInstanceMasks:
    """Hard superpoint labels: ``masks[k, j]`` is set iff superpoint j belongs to instance k."""

    masks: np.ndarray
    """[n_instances, n_superpoints] bool."""

    classes: np.ndarray
    """[n_instances] int64 semantic class of every instance."""

    @property
    def n_instances(self) -> int:
        return self.masks.shape[0]


def grid_superpoints(cloud: PointCloud, cell: float) -> SuperpointPartition:
    """Partition points by the voxel cell of edge ``cell`` they fall in.

    Ids are numbered by the first point that falls in each cell.

    >>> cloud = PointCloud(np.array([[0.1, 0.1, 0.1], [0.9, 0.1, 0.1], [0.15, 0.1, 0.1]]),
    ...                    np.zeros((3, 3)))
    >>> grid_superpoints(cloud, 0.5).ids.tolist()
    [0, 1, 0]
    """
    if not cell > 0:
        raise ValueError(f"Superpoint cell size must be positive, got {cell}")
    cells = np.floor(cloud.coordinates / cell).astype(np.int64)
    _, first_index, inverse = np.unique(cells, axis=0, return_index=True, return_inverse=True)
    # np.unique numbers cells in sorted order; renumber them by first occurrence.
    rank = np.empty_like(first_index)
    rank[np.argsort(first_index, kind="stable")] = np.arange(first_index.shape[0])
    return SuperpointPartition(rank[inverse.reshape(-1)], first_index.shape[0])


def project_instance_to_superpoints(
    scene: Scene, superpoints: Optional[SuperpointPartition] = None
) -> SuperpointInstanceMasks:
    """Assign a superpoint to an instance iff strictly more than half of its points carry that id.

    ``superpoints`` defaults to the scene's own partition.
    """
    if scene.ground_truth is None:
        raise ValueError("Cannot project instance labels of a scene without ground truth")
    superpoints = scene.superpoints if superpoints is None else superpoints
    ground_truth = scene.ground_truth
    instance_points = ground_truth.instance_ids >= 0
    counts = np.zeros((ground_truth.n_instances, superpoints.n_superpoints), dtype=np.int64)
    np.add.at(
        counts,
        (ground_truth.instance_ids[instance_points], superpoints.ids[instance_points]),
        1,
    )
    masks = 2 * counts > superpoints.member_counts()[None, :]
    return SuperpointInstanceMasks(masks, ground_truth.instance_classes.copy())


@dataclass
class SyntheticSceneConfig:
    """
    Layout of one synthetic scene.

    Args:
        num_instances (int): Number of object instances, each in its own floor slot.
        points_per_instance (int): Points sampled inside every instance.
        num_classes (int): Number of semantic classes. A class fixes the instance's color and its
            shape (boxes for even classes, ellipsoids for odd ones).
        noise_scale (float): Standard deviation of the Gaussian jitter added to coordinates and
            colors.
        room_extent (float): Edge length (meters) of the square room floor.
        background_points (int): Floor clutter points with instance id -1.
        superpoint_cell (float): Voxel size used to partition the scene into superpoints.
    """

    num_instances: int = 4
    points_per_instance: int = 64
    num_classes: int = 4
    noise_scale: float = 0.0
    room_extent: float = 4.0
    background_points: int = 64
    superpoint_cell: float = 0.2


def class_color(class_id: int, num_classes: int) -> np.ndarray:
    """Color signature of a class: evenly spaced saturated hues."""
    return np.array(colorsys.hsv_to_rgb(class_id / num_classes, 0.8, 0.9))


def generate_synthetic_scene(seed: int, config: Optional[SyntheticSceneConfig] = None) -> Scene:
    """Draw a scene of box and ellipsoid clusters standing on a cluttered floor.

    Instance extents stay below 0.5 m and slots are spaced ``SLOT_SIZE`` apart, so with zero noise
    no 0.5 m voxel holds points of two instances.
    """
    config = SyntheticSceneConfig() if config is None else config
    if config.num_instances < 1:
        raise ValueError(f"A synthetic scene needs at least one instance, got {config}")
    if config.points_per_instance < 1 or config.num_classes < 1 or config.background_points < 0:
        raise ValueError(f"Degenerate synthetic scene config {config}")
    slots_per_side = int(math.floor(config.room_extent / SLOT_SIZE))
    if slots_per_side**2 < config.num_instances:
        raise ValueError(
            f"A room of extent {config.room_extent} m fits {slots_per_side ** 2} instances, "
            f"{config.num_instances} requested"
        )

    rng = np.random.default_rng(seed)
    slots = rng.permutation(slots_per_side**2)[: config.num_instances]

    coordinates, colors, instance_ids = [], [], []
    classes = rng.integers(config.num_classes, size=config.num_instances)
    for instance, (slot, class_id) in enumerate(zip(slots, classes)):
        half_size = rng.uniform(0.1, 0.2, size=3)
        center = np.array(
            [
                (slot % slots_per_side + 0.5) * SLOT_SIZE,
                (slot // slots_per_side + 0.5) * SLOT_SIZE,
                FLOOR_CLEARANCE + half_size[2],
            ]
        )
        center[:2] += rng.uniform(-0.05, 0.05, size=2)
        n = config.points_per_instance
        if class_id % 2 == 0:
            offsets = rng.uniform(-1.0, 1.0, size=(n, 3))
        else:
            directions = rng.normal(size=(n, 3))
            directions /= np.linalg.norm(directions, axis=1, keepdims=True)
            offsets = directions * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1 / 3)
        jitter = config.noise_scale * rng.normal(size=(n, 3))
        coordinates.append(center + offsets * half_size + jitter)
        colors.append(
            class_color(int(class_id), config.num_classes)
            + config.noise_scale * rng.normal(size=(n, 3))
        )
        instance_ids.append(np.full(n, instance, dtype=np.int64))

    n = config.background_points
    floor = np.stack(
        [
            rng.uniform(0.0, config.room_extent, size=n),
            rng.uniform(0.0, config.room_extent, size=n),
            config.noise_scale * np.abs(rng.normal(size=n)),
        ],
        axis=1,
    )
    coordinates.append(floor)
    colors.append(BACKGROUND_COLOR + rng.uniform(-0.05, 0.05, size=(n, 1)) * np.ones(3))
    instance_ids.append(np.full(n, -1, dtype=np.int64))

    order = rng.permutation(sum(len(ids) for ids in instance_ids))
    cloud = PointCloud(
        np.concatenate(coordinates)[order], np.clip(np.concatenate(colors)[order], 0.0, 1.0)
    )
    ground_truth = InstanceGroundTruth(np.concatenate(instance_ids)[order], classes)
    return Scene(cloud, grid_superpoints(cloud, config.superpoint_cell), ground_truth)


@dataclass
class SceneSetConfig:
    """
    A deterministic set of synthetic training scenes.

    Scene ``i`` is drawn with seed ``seed + i`` and holds
    ``min_instances + i % (max_instances - min_instances + 1)`` instances; the remaining fields are
    passed on to :class:`SyntheticSceneConfig`.
    """

    num_scenes: int = 8
    min_instances: int = 2
    max_instances: int = 4
    points_per_instance: int = 64
    num_classes: int = 4
    noise_scale: float = 0.0
    room_extent: float = 4.0
    background_points: int = 64
    superpoint_cell: float = 0.2
    seed: int = 0

    def __post_init__(self):
        assert self.num_scenes >= 1, "A scene set needs at least one scene"
        assert (
            1 <= self.min_instances <= self.max_instances
        ), f"Invalid instance range [{self.min_instances}, {self.max_instances}]"

    def scene_config(self, index: int) -> SyntheticSceneConfig:
        return SyntheticSceneConfig(
            num_instances=self.min_instances
            + index % (self.max_instances - self.min_instances + 1),
            points_per_instance=self.points_per_instance,
            num_classes=self.num_classes,
            noise_scale=self.noise_scale,
            room_extent=self.room_extent,
            background_points=self.background_points,
            superpoint_cell=self.superpoint_cell,
        )


def generate_scene_set(config: SceneSetConfig) -> List[Scene]:
    return [
        generate_synthetic_scene(config.seed + index, config.scene_config(index))
        for index in range(config.num_scenes)
    ]


def scene_to_dict(scene: Scene) -> Dict[str, Any]:
    document: Dict[str, Any] = {
        "points": scene.cloud.features().tolist(),
        "superpoint_ids": scene.superpoints.ids.tolist(),
        "num_superpoints": scene.superpoints.n_superpoints,
    }
    if scene.ground_truth is not None:
        document["instance_ids"] = scene.ground_truth.instance_ids.tolist()
        document["instance_classes"] = scene.ground_truth.instance_classes.tolist()
    return document


def _integer_array(document: Dict[str, Any], name: str) -> np.ndarray:
    values = document[name]
    if not isinstance(values, list) or not all(
        isinstance(v, int) and not isinstance(v, bool) for v in values
    ):
        raise SceneFormatError(f"Field '{name}' must be an array of integers")
    return np.array(values, dtype=np.int64)


def scene_from_dict(document: Any, superpoint_cell: float = 0.2) -> Scene:
    """Build a scene from a parsed scene document.

    Scenes without ``superpoint_ids`` are partitioned with :func:`grid_superpoints`.
    """
    if not isinstance(document, dict):
        raise SceneFormatError("A scene file must hold a single object")
    unknown = set(document) - SCENE_FIELDS
    if unknown:
        raise SceneFormatError(f"Unknown scene fields {sorted(unknown)}")
    if "points" not in document:
        raise SceneFormatError("Missing field 'points'")
    points = document["points"]
    if not isinstance(points, list) or not all(
        isinstance(row, list)
        and len(row) == 6
        and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row)
        for row in points
    ):
        raise SceneFormatError("Field 'points' must be an array of [x, y, z, r, g, b] rows")
    features = np.array(points, dtype=np.float64).reshape(-1, 6)
    cloud = PointCloud(features[:, :3].copy(), features[:, 3:].copy())

    if "superpoint_ids" in document:
        ids = _integer_array(document, "superpoint_ids")
        if ids.shape[0] != cloud.n_points:
            raise SceneValidationError(
                f"Scene has {cloud.n_points} points but {ids.shape[0]} superpoint ids"
            )
        n_superpoints = document.get("num_superpoints")
        if n_superpoints is None:
            superpoints = SuperpointPartition.from_ids(ids)
        elif isinstance(n_superpoints, int) and not isinstance(n_superpoints, bool):
            superpoints = SuperpointPartition(ids, n_superpoints)
        else:
            raise SceneFormatError("Field 'num_superpoints' must be an integer")
    else:
        superpoints = grid_superpoints(cloud, superpoint_cell)

    ground_truth = None
    if "instance_ids" in document or "instance_classes" in document:
        if "instance_ids" not in document or "instance_classes" not in document:
            raise SceneFormatError("'instance_ids' and 'instance_classes' must appear together")
        ground_truth = InstanceGroundTruth(
            _integer_array(document, "instance_ids"), _integer_array(document, "instance_classes")
        )
    return Scene(cloud, superpoints, ground_truth)


def save_scene(scene: Scene, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)) + "\n", encoding="utf-8")


def load_scene(path: Union[str, Path], superpoint_cell: float = 0.2) -> Scene:
    """Read a scene file.

    Raises:
        SceneFormatError: the file is not a well-formed scene document.
        SceneValidationError: the arrays are inconsistent (lengths, id ranges, empty groups).
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as error:
        raise SceneFormatError(f"{path} is not valid UTF-8: {error.reason}") from error
    try:
        document = json.loads(text)
    except json.JSONDecodeError as error:
        raise SceneFormatError(
            f"{path}: line {error.lineno} column {error.colno}: {error.msg}"
        ) from error
    return scene_from_dict(document, superpoint_cell)


def load_scene_dir(directory: Union[str, Path], superpoint_cell: float = 0.2) -> Dict[str, Scene]:
    """Load every ``*.json`` scene in a directory, keyed by file stem in sorted order."""
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        logging.warning("No scene files found in %s", directory)
    return {path.stem: load_scene(path, superpoint_cell) for path in paths}


def save_scene_dir(scenes: Dict[str, Scene], directory: Union[str, Path]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for scene_id, scene in scenes.items():
        save_scene(scene, directory / f"{scene_id}.json")
