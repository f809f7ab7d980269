import io
import math

import numpy as np
import pytest

from emslam.fileio import observation_to_dict, write_bundles
from emslam.geometry import transform_to_observer_frame
from emslam.observation_model import NoiseConfig
from emslam.simulator import (
    CLUTTER_LABEL,
    WorldSpec,
    generate_observations,
    generate_world,
)


def small_spec(**overrides):
    base = dict(
        num_landmarks=6,
        num_classes=4,
        num_keyframes=15,
        arena_half_extent=10.0,
        detections_range=(0, 5),
        clutter_rate=0.5,
        seed=7,
    )
    base.update(overrides)
    return WorldSpec(**base)


def serialize(bundles, tmp_path, name):
    path = tmp_path / name
    write_bundles(path, bundles)
    return path.read_bytes()


class TestGenerateWorld:
    def test_same_seed_gives_identical_worlds(self):
        spec = small_spec()
        gt1, table1 = generate_world(spec)
        gt2, table2 = generate_world(spec)
        for p1, p2 in zip(gt1.trajectory, gt2.trajectory):
            np.testing.assert_array_equal(p1.position, p2.position)
            assert p1.orientation == p2.orientation
        for l1, l2 in zip(gt1.landmarks, gt2.landmarks):
            assert l1.class_id == l2.class_id
            np.testing.assert_array_equal(l1.position, l2.position)
        for i in table1.ids:
            np.testing.assert_array_equal(table1.center(i), table2.center(i))

    def test_zero_landmarks_valid(self):
        gt, _ = generate_world(small_spec(num_landmarks=0))
        assert gt.landmarks == ()
        assert len(gt.trajectory) == 15

    def test_zero_classes_rejected(self):
        with pytest.raises(ValueError):
            small_spec(num_classes=0)

    def test_center_distance_grows_with_separation(self):
        def mean_pairwise(scale):
            total, count = 0.0, 0
            for seed in range(100):
                _, table = generate_world(
                    small_spec(seed=seed, class_separation=scale, num_landmarks=0)
                )
                centers = table.center_matrix()
                diff = centers[:, None, :] - centers[None, :, :]
                d = np.linalg.norm(diff, axis=2)
                total += d[np.triu_indices_from(d, k=1)].mean()
                count += 1
            return total / count

        assert mean_pairwise(4.0) > 3.0 * mean_pairwise(1.0)

    def test_trajectory_kinds(self):
        for kind in ("loop", "figure-eight", "random-walk"):
            gt, _ = generate_world(small_spec(trajectory=kind))
            assert len(gt.trajectory) == 15

    def test_landmarks_inside_arena(self):
        gt, _ = generate_world(small_spec(num_landmarks=50))
        for lm in gt.landmarks:
            assert np.all(np.abs(lm.position[:2]) <= 10.0)
            assert 0.0 <= lm.position[2] <= 3.0


class TestGenerateObservations:
    def test_deterministic_bundle_bytes(self, tmp_path):
        spec = small_spec()
        noise = NoiseConfig()
        gt1, table1 = generate_world(spec)
        b1 = generate_observations(gt1, table1, noise, spec)
        gt2, table2 = generate_world(spec)
        b2 = generate_observations(gt2, table2, noise, spec)
        assert serialize(b1, tmp_path, "a.jsonl") == serialize(b2, tmp_path, "b.jsonl")

    def test_near_zero_noise_recovers_positions(self):
        spec = small_spec(clutter_rate=0.0)
        noise = NoiseConfig(
            sigma_position=1e-12, sigma_angle=1e-12, epsilon_objectness=0.01
        )
        gt, table = generate_world(spec)
        bundles = generate_observations(gt, table, noise, spec)
        checked = 0
        for bundle, labels in zip(bundles, gt.associations):
            pose = gt.trajectory[bundle.index]
            for obs, label in zip(bundle.observations, labels):
                true_local = transform_to_observer_frame(
                    gt.landmarks[label].position, pose
                )
                assert np.linalg.norm(obs.position - true_local) < 1e-9
                checked += 1
        assert checked > 0

    def test_zero_clutter_rate_gives_only_true_labels(self):
        spec = small_spec(clutter_rate=0.0)
        gt, table = generate_world(spec)
        generate_observations(gt, table, NoiseConfig(), spec)
        assert all(
            label != CLUTTER_LABEL for labels in gt.associations for label in labels
        )

    def test_clutter_labeled_and_low_objectness_on_average(self):
        spec = small_spec(clutter_rate=3.0, num_keyframes=40)
        gt, table = generate_world(spec)
        bundles = generate_observations(gt, table, NoiseConfig(), spec)
        clutter_objectness = [
            obs.objectness
            for bundle, labels in zip(bundles, gt.associations)
            for obs, label in zip(bundle.observations, labels)
            if label == CLUTTER_LABEL
        ]
        assert len(clutter_objectness) > 30
        assert np.mean(clutter_objectness) < 0.15

    def test_latent_sample_mean_approaches_class_center(self):
        # One landmark observed from every keyframe of a long run.
        spec = small_spec(
            num_landmarks=1,
            num_classes=1,
            num_keyframes=10_000,
            clutter_rate=0.0,
            detections_range=(1, 1),
            arena_half_extent=5.0,
            range_gate=30.0,
        )
        gt, table = generate_world(spec)
        bundles = generate_observations(gt, table, NoiseConfig(), spec)
        latents = np.stack(
            [
                obs.shape_latent.mean
                for bundle in bundles
                for obs in bundle.observations
            ]
        )
        assert latents.shape[0] == 10_000
        deviation = np.abs(latents.mean(axis=0) - table.center(0))
        assert np.all(deviation < 0.05)  # 3 sigma / sqrt(n) = 0.03

    def test_encodings_satisfy_shrinkage_identity(self):
        spec = small_spec()
        noise = NoiseConfig(sigma_angle=0.05)
        gt, table = generate_world(spec)
        bundles = generate_observations(gt, table, noise, spec)
        expected = math.exp(-(0.05**2))
        for bundle in bundles:
            for obs in bundle.observations:
                for e in obs.angle_encodings:
                    np.testing.assert_allclose(
                        e.mu_sin**2 + e.mu_cos**2, expected, atol=1e-12
                    )

    def test_visibility_gate(self):
        spec = small_spec(
            num_landmarks=40,
            arena_half_extent=20.0,
            range_gate=12.0,
            fov_deg=120.0,
            num_keyframes=30,
            detections_range=(0, 40),
        )
        gt, table = generate_world(spec)
        bundles = generate_observations(gt, table, NoiseConfig(), spec)
        for bundle, labels in zip(bundles, gt.associations):
            pose = gt.trajectory[bundle.index]
            for label in labels:
                if label == CLUTTER_LABEL:
                    continue
                local = transform_to_observer_frame(gt.landmarks[label].position, pose)
                assert np.linalg.norm(local) <= 12.0
                bearing = math.atan2(local[1], local[0])
                assert abs(bearing) <= math.radians(60.0) + 1e-12

    def test_detections_range_cap(self):
        spec = small_spec(num_landmarks=30, detections_range=(0, 3), clutter_rate=0.0)
        gt, table = generate_world(spec)
        bundles = generate_observations(gt, table, NoiseConfig(), spec)
        assert all(len(b.observations) <= 3 for b in bundles)

    def test_odometry_links_present(self):
        spec = small_spec()
        gt, table = generate_world(spec)
        bundles = generate_observations(gt, table, NoiseConfig(), spec)
        assert bundles[0].odometry_to_previous is None
        assert all(b.odometry_to_previous is not None for b in bundles[1:])

    def test_objectness_of_true_objects(self):
        spec = small_spec(clutter_rate=0.0)
        noise = NoiseConfig(epsilon_objectness=0.02)
        gt, table = generate_world(spec)
        bundles = generate_observations(gt, table, noise, spec)
        for bundle in bundles:
            for obs in bundle.observations:
                assert obs.objectness == 0.98
