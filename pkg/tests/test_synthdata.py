"""Primitive SDFs, LIDAR scene generation, augmentation and dataset files."""

from __future__ import annotations

import math

import numpy as np
import pytest

from agents.synthdata import (
    DatasetWriterAgent,
    SceneGeneratorAgent,
    SceneRecord,
    analytic_sdf,
    augment_record,
    augment_scene,
    canonical_sdf,
    default_shapes,
    load_dataset,
    object_sdf,
    read_shapes,
    sample_shape_surface,
    shape_for_kind,
    shape_half_extents,
    trace_object,
    transform_scene,
    write_shapes,
)
from core.config import SceneConfig
from core.errors import DataFormatError, SceneGenerationError
from core.geometry import points_in_box
from core.models import Box3D, LabeledBox, PointCloud, SceneObject, ShapeKind


# ── Helpers ──────────────────────────────────────────────────────────────

def _small_config(**overrides) -> SceneConfig:
    values = dict(
        min_objects=2, max_objects=3, extent=8.0, n_azimuth=120, n_elevation=10,
        elevation_range_deg=(-30.0, 0.0), max_range=30.0,
    )
    values.update(overrides)
    return SceneConfig(**values)


@pytest.fixture(scope="module")
def scene():
    return SceneGeneratorAgent(config=_small_config()).generate(7)


# ── Shapes ──────────────────────────────────────────────────────────────

class TestShapes:
    @pytest.mark.parametrize("shape", default_shapes(), ids=lambda s: s.name)
    def test_surface_samples_on_zero_level(self, shape, rng):
        pts = sample_shape_surface(shape, 500, rng)
        assert pts.shape == (500, 3)
        np.testing.assert_allclose(analytic_sdf(shape, pts), 0.0, atol=1e-9)

    @pytest.mark.parametrize("shape", default_shapes(), ids=lambda s: s.name)
    def test_center_inside_corners_outside(self, shape):
        half = shape_half_extents(shape)
        assert analytic_sdf(shape, np.zeros((1, 3)))[0] < 0
        assert analytic_sdf(shape, (half * 1.01)[None])[0] > 0

    def test_exact_distances(self):
        sphere = shape_for_kind(ShapeKind.SPHERE)
        np.testing.assert_allclose(analytic_sdf(sphere, [[2.0, 0.0, 0.0]]), [1.5])
        box = shape_for_kind(ShapeKind.BOX)
        np.testing.assert_allclose(analytic_sdf(box, [[1.5, 0.0, 0.0], [0.0, 0.0, 0.0]]), [1.0, -0.25])
        capsule = shape_for_kind(ShapeKind.CAPSULE)
        np.testing.assert_allclose(analytic_sdf(capsule, [[0.0, 1.0, 0.0]]), [0.8])

    def test_vehicle_is_mirror_symmetric(self, rng):
        vehicle = shape_for_kind(ShapeKind.VEHICLE)
        p = rng.uniform(-0.6, 0.6, size=(200, 3))
        mirrored = p * [1.0, -1.0, 1.0]
        np.testing.assert_allclose(analytic_sdf(vehicle, p), analytic_sdf(vehicle, mirrored))

    def test_canonical_sdf_scales_with_the_cube(self):
        sphere = shape_for_kind(ShapeKind.SPHERE)
        # sphere of radius 0.5 fills 1 / 1.1 of the cube edge
        assert canonical_sdf(sphere, [[0.5, 0.5, 0.5]])[0] == pytest.approx(-0.5 / 1.1)

    def test_shapes_csv_round_trip(self, tmp_path):
        write_shapes(tmp_path, default_shapes())
        back = read_shapes(tmp_path)
        assert [s.kind for s in back] == [s.kind for s in default_shapes()]
        assert back[3].params == default_shapes()[3].params

    def test_bad_shape_row(self, tmp_path):
        (tmp_path / "shapes.csv").write_text('name,kind,params\nblob,torus,"{}"\n')
        with pytest.raises(DataFormatError):
            read_shapes(tmp_path)


# ── Ray casting ─────────────────────────────────────────────────────────

class TestTraceObject:
    def test_sphere_hit_distance(self):
        obj = SceneObject(
            Box3D.from_yaw([5.0, 0.0, 1.0], [2.0, 2.0, 2.0]), 1, shape_for_kind(ShapeKind.SPHERE), scale=2.0
        )
        dirs = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        hits = trace_object(obj, np.array([0.0, 0.0, 1.0]), dirs)
        assert hits[0] == pytest.approx(4.0, abs=1e-5)
        assert math.isinf(hits[1]) and math.isinf(hits[2])

    def test_rotated_box_hit(self):
        box_shape = shape_for_kind(ShapeKind.BOX)
        obj = SceneObject(Box3D.from_yaw([0.0, 4.0, 0.0], [1.0, 0.6, 0.5], math.pi / 2), 2, box_shape, 1.0)
        # turned a quarter, the box's long side runs along y: its near face sits at y = 4 - 0.5
        hits = trace_object(obj, np.zeros(3), np.array([[0.0, 1.0, 0.0]]))
        assert hits[0] == pytest.approx(3.5, abs=1e-5)


# ── Scenes ──────────────────────────────────────────────────────────────

class TestSceneGenerator:
    def test_deterministic(self, scene):
        again = SceneGeneratorAgent(config=_small_config()).generate(7)
        np.testing.assert_array_equal(again.cloud.positions, scene.cloud.positions)
        assert len(again.objects) == len(scene.objects)

    def test_object_points_inside_their_box(self, scene):
        assert len(scene.objects) >= 1
        for j, obj in enumerate(scene.objects):
            pts = scene.cloud.positions[scene.point_object == j]
            assert len(pts) > 0
            assert points_in_box(pts, obj.box).all()

    def test_ground_points_near_plane(self, scene):
        ground = scene.cloud.positions[scene.point_object == -1]
        assert len(ground) > 0
        assert np.abs(ground[:, 2]).max() < 0.03

    def test_objects_stand_on_ground(self, scene):
        for obj in scene.objects:
            half = shape_half_extents(obj.shape) * obj.scale
            assert obj.box.center[2] == pytest.approx(half[2])

    def test_object_points_lie_on_their_surface(self, scene):
        bound = 3.0 * _small_config().noise_sigma
        for j, obj in enumerate(scene.objects):
            pts = scene.cloud.positions[scene.point_object == j]
            assert np.abs(object_sdf(obj, pts)).max() < bound

    def test_one_return_per_ray(self, scene):
        assert len(np.unique(scene.point_ray)) == len(scene.point_ray)

    def test_gt_classes(self, scene):
        assert {b.class_id for b in scene.gt_boxes} <= {1, 2, 3, 4}

    def test_placement_gives_up(self):
        config = _small_config(extent=1.0, min_sensor_distance=5.0, max_placement_retries=5)
        with pytest.raises(SceneGenerationError):
            SceneGeneratorAgent(config=config).generate(0)


# ── Augmentation ────────────────────────────────────────────────────────

class TestAugmentation:
    def test_transform_keeps_membership(self, scene):
        moved = transform_scene(scene, 0.7, 1.2)
        for j, obj in enumerate(moved.objects):
            assert points_in_box(moved.cloud.positions[moved.point_object == j], obj.box).all()
        np.testing.assert_allclose(moved.objects[0].box.size, 1.2 * scene.objects[0].box.size)

    def test_zero_ranges_are_identity(self, scene):
        same = augment_scene(scene, 0.0, (1.0, 1.0), seed=5)
        np.testing.assert_allclose(same.cloud.positions, scene.cloud.positions, atol=1e-12)
        np.testing.assert_allclose(same.objects[0].box.center, scene.objects[0].box.center, atol=1e-12)

    def test_augment_scene_keeps_membership(self, scene):
        moved = augment_scene(scene, seed=2)
        for j, obj in enumerate(moved.objects):
            assert points_in_box(moved.cloud.positions[moved.point_object == j], obj.box).all()

    def test_record_augmentation_is_seeded(self):
        record = SceneRecord(
            "s", PointCloud(np.array([[1.0, 0.0, 0.0]])),
            [LabeledBox(Box3D.from_yaw([1.0, 0.0, 0.0], [1.0, 1.0, 1.0]), 1)],
        )
        a = augment_record(record, 10.0, (0.9, 1.1), seed=3)
        b = augment_record(record, 10.0, (0.9, 1.1), seed=3)
        np.testing.assert_array_equal(a.cloud.positions, b.cloud.positions)
        np.testing.assert_allclose(a.gt[0].box.center, a.cloud.positions[0])


# ── Dataset files ───────────────────────────────────────────────────────

class TestDataset:
    def test_write_and_load(self, tmp_path):
        manifest = DatasetWriterAgent(config=_small_config()).write(tmp_path, [1, 2])
        assert manifest.exists()
        records = load_dataset(tmp_path)
        assert [r.name for r in records] == ["scene_0001", "scene_0002"]
        scene = SceneGeneratorAgent(config=_small_config()).generate(2)
        assert len(records[1].gt) == len(scene.objects)
        np.testing.assert_allclose(records[1].cloud.positions, scene.cloud.positions, atol=1e-4)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path / "missing")
