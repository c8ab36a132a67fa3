import json
from pathlib import Path

import numpy as np
import pytest

from superpoint_lens.scenes import (
    InstanceGroundTruth,
    PointCloud,
    Scene,
    SceneFormatError,
    SceneSetConfig,
    SceneValidationError,
    SuperpointPartition,
    SyntheticSceneConfig,
    generate_scene_set,
    generate_synthetic_scene,
    grid_superpoints,
    load_scene,
    load_scene_dir,
    project_instance_to_superpoints,
    save_scene,
    save_scene_dir,
)

FIXTURES = Path(__file__).parent.parent / "fixtures"


def cloud_at(coordinates):
    coordinates = np.asarray(coordinates, dtype=np.float64)
    return PointCloud(coordinates, np.zeros_like(coordinates))


def assert_scenes_equal(a: Scene, b: Scene):
    assert np.array_equal(a.cloud.coordinates, b.cloud.coordinates)
    assert np.array_equal(a.cloud.colors, b.cloud.colors)
    assert np.array_equal(a.superpoints.ids, b.superpoints.ids)
    assert a.n_superpoints == b.n_superpoints
    if a.ground_truth is None:
        assert b.ground_truth is None
    else:
        assert np.array_equal(a.ground_truth.instance_ids, b.ground_truth.instance_ids)
        assert np.array_equal(a.ground_truth.instance_classes, b.ground_truth.instance_classes)


def scene_with_superpoint_labels(instance_ids, n_instances):
    """All points in one superpoint, carrying the given instance ids."""
    n_points = len(instance_ids)
    cloud = cloud_at(np.zeros((n_points, 3)))
    return Scene(
        cloud,
        SuperpointPartition(np.zeros(n_points, dtype=np.int64), 1),
        InstanceGroundTruth(np.array(instance_ids), np.zeros(n_instances, dtype=np.int64)),
    )


def test_three_point_fixture():
    scene = load_scene(FIXTURES / "three_point_scene.json")
    assert scene.n_points == 3
    assert scene.n_superpoints == 2
    assert scene.ground_truth.n_instances == 1
    assert project_instance_to_superpoints(scene).masks.tolist() == [[True, False]]


def test_three_point_fixture_without_superpoints_uses_grid(tmp_path):
    document = json.loads((FIXTURES / "three_point_scene.json").read_text())
    del document["superpoint_ids"]
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(document))
    assert load_scene(path, superpoint_cell=0.5).superpoints.ids.tolist() == [0, 0, 1]


def test_one_point_round_trip(tmp_path):
    scene = Scene(
        PointCloud(np.array([[0.1, -2.5, 1e-17]]), np.array([[0.0, 1.0, 1 / 3]])),
        SuperpointPartition.from_ids([0]),
        InstanceGroundTruth(np.array([0]), np.array([3])),
    )
    save_scene(scene, tmp_path / "one.json")
    assert_scenes_equal(load_scene(tmp_path / "one.json"), scene)


def test_generated_scene_round_trip(tmp_path):
    scenes = {"a": generate_synthetic_scene(4), "b": generate_synthetic_scene(5)}
    save_scene_dir(scenes, tmp_path)
    loaded = load_scene_dir(tmp_path)
    assert list(loaded) == ["a", "b"]
    for key in scenes:
        assert_scenes_equal(loaded[key], scenes[key])


def test_superpoint_id_out_of_range(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(
        json.dumps(
            {"points": [[0, 0, 0, 0, 0, 0]] * 2, "superpoint_ids": [0, 2], "num_superpoints": 2}
        )
    )
    with pytest.raises(SceneValidationError):
        load_scene(path)


def test_length_mismatch(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"points": [[0, 0, 0, 0, 0, 0]] * 2, "superpoint_ids": [0]}))
    with pytest.raises(SceneValidationError, match="2 points but 1"):
        load_scene(path)


def test_malformed_file_names_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"points": [\n[0, 0, 0, 0, 0]')
    with pytest.raises(SceneFormatError, match="line 2"):
        load_scene(path)


def test_undecodable_file_names_path(tmp_path):
    path = tmp_path / "latin.json"
    path.write_bytes(b'{"points": [\xff\xfe]}')
    with pytest.raises(SceneFormatError, match="latin.json is not valid UTF-8"):
        load_scene(path)


@pytest.mark.parametrize(
    "document",
    [
        [],
        {"points": [[0, 0, 0, 0, 0]]},
        {"points": [[0, 0, 0, 0, 0, 0]], "colour": 1},
        {"points": [[0, 0, 0, 0, 0, 0]], "instance_ids": [0]},
        {"points": [[0, 0, 0, 0, 0, 0]], "superpoint_ids": [0.5]},
    ],
)
def test_malformed_documents(tmp_path, document):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(document))
    with pytest.raises(SceneFormatError):
        load_scene(path)


def test_colors_out_of_range():
    with pytest.raises(SceneValidationError):
        PointCloud(np.zeros((1, 3)), np.array([[1.5, 0.0, 0.0]]))


def test_empty_instance_is_rejected():
    with pytest.raises(SceneValidationError, match="no points"):
        InstanceGroundTruth(np.array([0, 0, -1]), np.array([1, 2]))


def test_check_classes():
    gt = InstanceGroundTruth(np.array([0, 1, 2, -1]), np.array([0, 3, 5]))
    gt.check_classes(6)
    with pytest.raises(SceneValidationError, match=r"\[5\] are outside \[0, 4\)"):
        gt.check_classes(4)
    with pytest.raises(SceneValidationError, match=r"\[3, 5\] are outside \[0, 3\)"):
        gt.check_classes(3)


def test_synthetic_scene_is_deterministic():
    assert_scenes_equal(generate_synthetic_scene(7), generate_synthetic_scene(7))


def test_synthetic_scene_instances_are_non_empty():
    scene = generate_synthetic_scene(2, SyntheticSceneConfig(num_instances=2))
    assert scene.ground_truth.n_instances == 2
    assert scene.ground_truth.point_masks().sum(1).min() > 0


def test_synthetic_instances_separable_by_half_meter_grid():
    config = SyntheticSceneConfig(num_instances=4, points_per_instance=64, noise_scale=0.0)
    scene = generate_synthetic_scene(1, config)
    cells = grid_superpoints(scene.cloud, 0.5).ids
    instance_ids = scene.ground_truth.instance_ids
    owner = {}
    for instance in range(4):
        instance_cells = set(cells[instance_ids == instance].tolist())
        assert len(instance_cells) <= 8
        for cell in instance_cells:
            assert owner.setdefault(cell, instance) == instance


@pytest.mark.parametrize(
    "config",
    [
        SyntheticSceneConfig(num_instances=0),
        SyntheticSceneConfig(points_per_instance=0),
        SyntheticSceneConfig(num_instances=50, room_extent=2.0),
    ],
)
def test_degenerate_synthetic_configs(config):
    with pytest.raises(ValueError):
        generate_synthetic_scene(0, config)


def test_scene_set_instance_counts():
    scenes = generate_scene_set(SceneSetConfig(num_scenes=5, min_instances=2, max_instances=4))
    assert [scene.ground_truth.n_instances for scene in scenes] == [2, 3, 4, 2, 3]


def test_grid_same_and_different_cells():
    ids = grid_superpoints(
        cloud_at([[0.1, 0.1, 0.1], [0.15, 0.1, 0.1], [0.9, 0.1, 0.1]]), 0.5
    ).ids
    assert ids[0] == ids[1]
    assert ids[0] != ids[2]


def test_grid_unit_cube_corners():
    eps = 1e-9
    corners = np.array(
        [[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)]
    )
    partition = grid_superpoints(cloud_at(corners - eps), 0.5)
    assert partition.n_superpoints == 8


def test_grid_numbers_cells_by_first_occurrence():
    ids = grid_superpoints(cloud_at([[2.0, 0, 0], [0.0, 0, 0], [2.1, 0, 0], [1.0, 0, 0]]), 0.5).ids
    assert ids.tolist() == [0, 1, 0, 2]


def test_grid_is_repeatable():
    cloud = generate_synthetic_scene(3).cloud
    assert np.array_equal(grid_superpoints(cloud, 0.2).ids, grid_superpoints(cloud, 0.2).ids)


def test_grid_rejects_non_positive_cell():
    with pytest.raises(ValueError):
        grid_superpoints(cloud_at([[0, 0, 0]]), 0.0)


def test_projection_strict_majority():
    scene = scene_with_superpoint_labels([1, 1, 0], 2)
    assert project_instance_to_superpoints(scene).masks.tolist() == [[False], [True]]


def test_projection_tie_assigns_nothing():
    scene = scene_with_superpoint_labels([1, 0], 2)
    assert not project_instance_to_superpoints(scene).masks.any()


def test_projection_background_majority_assigns_nothing():
    scene = scene_with_superpoint_labels([-1, -1, 0], 1)
    assert not project_instance_to_superpoints(scene).masks.any()


def test_projection_columns_hold_at_most_one_instance():
    scene = generate_synthetic_scene(6, SyntheticSceneConfig(noise_scale=0.05))
    masks = project_instance_to_superpoints(scene).masks
    assert masks.sum(0).max() <= 1


def test_projection_needs_ground_truth():
    scene = Scene(cloud_at([[0, 0, 0]]), SuperpointPartition.from_ids([0]))
    with pytest.raises(ValueError):
        project_instance_to_superpoints(scene)


def test_projection_onto_identity_partition():
    scene = load_scene(FIXTURES / "three_point_scene.json")
    projected = project_instance_to_superpoints(scene, SuperpointPartition.identity(3))
    assert projected.masks.tolist() == [[True, True, False]]
    assert projected.classes.tolist() == [2]
