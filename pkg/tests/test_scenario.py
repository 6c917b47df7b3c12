import json
import math

import numpy as np
import pytest

from cocalib.geometry import Pose2, compose, relative, rotated_iou
from cocalib.scenario import (
    GridConfig,
    NoiseConfig,
    PlacementError,
    SceneParams,
    build_message,
    generate_scene,
    load_scene,
    observe,
    perturb_pose,
    save_scene,
    scene_from_dict,
    scene_to_dict,
    synthesize_feature,
    visible_ids,
)


class TestGenerateScene:
    def test_empty_object_list(self):
        scene = generate_scene(SceneParams(n_agents=1, n_objects=0), seed=4)
        assert len(scene.agents) == 1
        assert scene.objects == ()

    def test_determinism(self):
        a = generate_scene(SceneParams(n_agents=3, n_objects=20), seed=11)
        b = generate_scene(SceneParams(n_agents=3, n_objects=20), seed=11)
        assert a == b

    def test_different_seeds_differ(self):
        a = generate_scene(SceneParams(), seed=1)
        b = generate_scene(SceneParams(), seed=2)
        assert a != b

    def test_objects_disjoint(self):
        # pairwise IoU oracle over every object footprint
        scene = generate_scene(
            SceneParams(n_agents=2, n_objects=30, extent=100.0), seed=7
        )
        boxes = [o.footprint() for o in scene.objects]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert rotated_iou(boxes[i], boxes[j]) == 0.0

    def test_infeasible_density_raises(self):
        with pytest.raises(PlacementError):
            generate_scene(
                SceneParams(n_objects=200, extent=10.0, max_placement_tries=30), seed=0
            )

    def test_unique_ids(self):
        scene = generate_scene(SceneParams(n_agents=4, n_objects=15), seed=3)
        ids = [a.id for a in scene.agents] + [o.id for o in scene.objects]
        assert len(set(ids)) == len(ids)


class TestPerturbPose:
    def test_zero_noise_is_identity(self):
        cfg = NoiseConfig(sigma_t=0.0, sigma_r=0.0)
        p = Pose2(1.0, 2.0, 0.5)
        assert perturb_pose(p, cfg, np.random.default_rng(0)) == p

    def test_deterministic(self):
        cfg = NoiseConfig(sigma_t=0.3, sigma_r=0.5)
        p = Pose2(1.0, 2.0, 0.5)
        a = perturb_pose(p, cfg, np.random.default_rng(42))
        b = perturb_pose(p, cfg, np.random.default_rng(42))
        assert a == b

    def test_moment_recovery(self):
        # Monte-Carlo moment oracle: sample std within 3 standard errors
        cfg = NoiseConfig(sigma_t=0.4, sigma_r=2.0)
        rng = np.random.default_rng(7)
        p = Pose2(0.0, 0.0, 0.0)
        n = 100_000
        draws = np.array([perturb_pose(p, cfg, rng).as_array() for _ in range(n)])
        se = 0.4 / math.sqrt(2 * (n - 1))
        assert abs(draws[:, 0].std() - 0.4) < 3 * se
        assert abs(draws[:, 1].std() - 0.4) < 3 * se
        sr = math.radians(2.0)
        assert abs(draws[:, 2].std() - sr) < 3 * sr / math.sqrt(2 * (n - 1))

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            NoiseConfig(sigma_t=-0.1)
        with pytest.raises(ValueError):
            NoiseConfig(delay=-1.0)


class TestObserve:
    def make_scene(self, agent_pose, objects):
        from cocalib.scenario import AgentState, Scene, SceneObject

        return Scene(
            (AgentState(0, agent_pose, 50.0),),
            tuple(
                SceneObject(10 + i, pose, vel, 2.0, 1.0)
                for i, (pose, vel) in enumerate(objects)
            ),
        )

    def test_object_at_origin(self):
        scene = self.make_scene(Pose2(3, -1, 0.7), [(Pose2(3, -1, 0.7), (0, 0))])
        boxes = observe(scene, 0, NoiseConfig(), np.random.default_rng(0))
        assert len(boxes) == 1
        assert np.allclose(boxes[0].center.as_array(), 0.0, atol=1e-12)

    def test_out_of_range_dropped(self):
        scene = self.make_scene(Pose2(0, 0, 0), [(Pose2(100, 0, 0), (0, 0))])
        assert observe(scene, 0, NoiseConfig(), np.random.default_rng(0)) == []
        assert visible_ids(scene, 0) == []

    def test_frame_transform(self):
        # world (5,0) seen from agent at (0,0,pi/2) lands at (0,-5)
        scene = self.make_scene(Pose2(0, 0, math.pi / 2), [(Pose2(5, 0, 0), (0, 0))])
        boxes = observe(scene, 0, NoiseConfig(), np.random.default_rng(0))
        assert boxes[0].center.x == pytest.approx(0.0, abs=1e-12)
        assert boxes[0].center.y == pytest.approx(-5.0, abs=1e-12)

    def test_sigma_floor_applied(self):
        scene = self.make_scene(Pose2(0, 0, 0), [(Pose2(5, 0, 0), (0, 0))])
        boxes = observe(scene, 0, NoiseConfig(), np.random.default_rng(0))
        assert all(s > 0 for s in boxes[0].sigma)

    def test_confidence_decreases_with_range(self):
        scene = self.make_scene(
            Pose2(0, 0, 0), [(Pose2(1, 0, 0), (0, 0)), (Pose2(45, 0, 0), (0, 0))]
        )
        cfgs = [observe(scene, 0, NoiseConfig(), np.random.default_rng(s)) for s in range(20)]
        near = np.mean([b[0].confidence for b in cfgs])
        far = np.mean([b[1].confidence for b in cfgs])
        assert near > far


class TestBuildMessage:
    def test_zero_delay_matches_observe(self):
        scene = generate_scene(SceneParams(n_agents=2, n_objects=8), seed=5)
        cfg = NoiseConfig()
        msg = build_message(scene, 1, cfg, np.random.default_rng(3))
        direct = observe(scene, 1, cfg, np.random.default_rng(3))
        assert list(msg.boxes) == direct
        assert msg.capture_time == scene.timestamp

    def test_delay_shifts_boxes_by_velocity(self):
        # kinematics oracle with the stock 100 ms delay
        from cocalib.scenario import AgentState, Scene, SceneObject

        scene = Scene(
            (AgentState(0, Pose2(0, 0, 0), 50.0),),
            (SceneObject(1, Pose2(5, 0, 0), (1.0, 0.0), 2.0, 1.0),),
        )
        cfg = NoiseConfig(delay=0.1)
        msg = build_message(scene, 0, cfg, np.random.default_rng(0))
        assert msg.boxes[0].center.x == pytest.approx(5.0 - 0.1, abs=1e-12)
        assert msg.capture_time == pytest.approx(-0.1)

    def test_zero_noise_reported_pose_exact(self):
        scene = generate_scene(SceneParams(n_agents=2, n_objects=4), seed=9)
        msg = build_message(scene, 1, NoiseConfig(), np.random.default_rng(0))
        assert msg.reported_pose == scene.agent(1).pose

    def test_delay_consistency(self):
        # rolling delayed boxes forward by velocity*delay recovers now-boxes
        scene = generate_scene(SceneParams(n_agents=2, n_objects=10), seed=13)
        cfg = NoiseConfig(delay=0.25)
        msg = build_message(scene, 1, cfg, np.random.default_rng(1))
        ids = visible_ids(scene, 1, time_offset=-cfg.delay)
        agent = scene.agent(1)
        by_id = {o.id: o for o in scene.objects}
        for box, oid in zip(msg.boxes, ids):
            obj = by_id[oid]
            world = compose(agent.pose, box.center)
            rolled = (world.x + obj.velocity[0] * cfg.delay, world.y + obj.velocity[1] * cfg.delay)
            assert rolled[0] == pytest.approx(obj.pose.x, abs=1e-9)
            assert rolled[1] == pytest.approx(obj.pose.y, abs=1e-9)

    def test_zero_noise_fidelity(self):
        # transforming message boxes by the true relative pose reproduces
        # ego-frame truth
        scene = generate_scene(SceneParams(n_agents=2, n_objects=10), seed=21)
        msg = build_message(scene, 1, NoiseConfig(), np.random.default_rng(2))
        ego = scene.agent(0)
        rel = relative(ego.pose, scene.agent(1).pose)
        ids = visible_ids(scene, 1)
        by_id = {o.id: o for o in scene.objects}
        for box, oid in zip(msg.boxes, ids):
            in_ego = compose(rel, box.center)
            truth = relative(ego.pose, by_id[oid].pose)
            assert np.allclose(in_ego.as_array()[:2], truth.as_array()[:2], atol=1e-9)

    def test_determinism_bit_identical(self):
        scene = generate_scene(SceneParams(n_agents=3, n_objects=12), seed=2)
        cfg = NoiseConfig(sigma_t=0.2, sigma_r=0.2, delay=0.1, detection_sigma=(0.1, 0.1, 0.01))
        a = build_message(scene, 1, cfg, np.random.default_rng(77))
        b = build_message(scene, 1, cfg, np.random.default_rng(77))
        assert a.reported_pose == b.reported_pose
        assert list(a.boxes) == list(b.boxes)
        assert np.array_equal(a.feature.grid, b.feature.grid)


class TestSynthesizeFeature:
    def test_empty_gives_zero_map(self):
        fm = synthesize_feature([], GridConfig(height=16, width=16, channels=4))
        assert fm.grid.shape == (16, 16, 4)
        assert np.all(fm.grid == 0.0)

    def test_single_box_peak_at_center(self):
        from cocalib.geometry import DetectedBox

        grid = GridConfig(height=17, width=17, channels=2, resolution=1.0)
        fm = synthesize_feature([DetectedBox(Pose2(0, 0, 0), 2.0, 1.0)], grid)
        r, c = np.unravel_index(np.argmax(fm.grid[:, :, 0]), (17, 17))
        assert (r, c) == (8, 8)
        assert fm.grid[r, c, 0] == pytest.approx(1.0)

    def test_two_boxes_two_maxima(self):
        from cocalib.geometry import DetectedBox
        from scipy.ndimage import maximum_filter

        grid = GridConfig(height=33, width=33, channels=1, resolution=1.0)
        fm = synthesize_feature(
            [
                DetectedBox(Pose2(-8, -8, 0), 1.0, 0.5),
                DetectedBox(Pose2(8, 8, 0), 1.0, 0.5),
            ],
            grid,
        )
        plane = fm.grid[:, :, 0]
        peaks = (plane == maximum_filter(plane, size=5)) & (plane > 0.9)
        assert peaks.sum() == 2

    def test_outside_grid_ignored(self):
        from cocalib.geometry import DetectedBox

        grid = GridConfig(height=8, width=8, channels=1, resolution=1.0)
        fm = synthesize_feature([DetectedBox(Pose2(100, 100, 0), 1.0, 0.5)], grid)
        assert np.all(fm.grid == 0.0)

    def test_channels_replicated(self):
        from cocalib.geometry import DetectedBox

        grid = GridConfig(height=8, width=8, channels=3, resolution=1.0)
        fm = synthesize_feature([DetectedBox(Pose2(0, 0, 0), 1.0, 0.5)], grid)
        assert np.array_equal(fm.grid[:, :, 0], fm.grid[:, :, 1])
        assert np.array_equal(fm.grid[:, :, 0], fm.grid[:, :, 2])


class TestSceneSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        scene = generate_scene(SceneParams(n_agents=3, n_objects=14), seed=31)
        path = tmp_path / "scene.json"
        save_scene(scene, path, seed=31)
        again = load_scene(path)
        assert again == scene

    def test_round_trip_via_dict(self):
        scene = generate_scene(SceneParams(n_agents=2, n_objects=5), seed=8)
        blob = json.dumps(scene_to_dict(scene, seed=8))
        assert scene_from_dict(json.loads(blob)) == scene

    def test_schema_checked(self):
        with pytest.raises(ValueError):
            scene_from_dict({"schema": "wrong", "agents": [], "objects": []})

    def test_file_bytes_deterministic(self, tmp_path):
        scene = generate_scene(SceneParams(), seed=5)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_scene(scene, p1, seed=5)
        save_scene(scene, p2, seed=5)
        assert p1.read_bytes() == p2.read_bytes()
