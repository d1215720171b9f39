import json

import numpy as np
import pytest

from emloc.errors import TrajectoryError, UnknownScenarioError
from emloc.simworld.scenarios import SCENARIOS, make_benchmark_scenario, with_query
from emloc.simworld.sensors import SensorConfig, TrajectorySpec, simulate_trace
from emloc.simworld.world import WorldParams, free_path, generate_world
from emloc.vision import BODY_FROM_CAMERA, project_points


@pytest.fixture(scope="module")
def two_rooms():
    return make_benchmark_scenario("two-rooms", 0)


@pytest.fixture(scope="module")
def one_room():
    return generate_world(WorldParams(rooms_x=1, rooms_y=1, room_size=14.0, feature_count=100,
                                      n_access_points=1, gamma=2.0), seed=5)


class TestWorld:
    def test_deterministic(self):
        a, b = generate_world(WorldParams(), 3), generate_world(WorldParams(), 3)
        np.testing.assert_array_equal(a.feature_positions, b.feature_positions)
        np.testing.assert_array_equal(a.feature_descriptors, b.feature_descriptors)
        c = generate_world(WorldParams(), 4)
        assert not np.array_equal(a.feature_positions, c.feature_positions)

    @pytest.mark.parametrize("layout", ["grid", "two-rooms", "loop"])
    def test_feature_count_and_free_space(self, layout):
        w = generate_world(WorldParams(layout=layout, feature_count=333), 1)
        assert w.feature_positions.shape == (333, 3)
        assert np.all(w.is_free(w.feature_positions))
        np.testing.assert_allclose(np.linalg.norm(w.feature_descriptors, axis=1), 1.0)

    def test_free_space_path_loss(self, one_room):
        ap = one_room.access_points[0]
        room = one_room.regions[0]
        for ang in np.linspace(0, 2 * np.pi, 16, endpoint=False):
            u = np.array([np.cos(ang), np.sin(ang), 0.0])
            near, far = ap.position + 0.5 * u, ap.position + 5.0 * u
            if room.contains(far[None, :2], margin=0.3)[0]:
                break
        else:
            pytest.skip("no clear decade inside the room")
        r = one_room.rssi_mean(np.stack([near, far]))[:, 0]
        assert r[0] - r[1] == pytest.approx(20.0)  # gamma = 2: 20 dB per decade

    def test_walls_attenuate(self, two_rooms):
        w = two_rooms.world
        ap = w.access_points[0]
        other = w.regions[2] if ap.id.endswith(w.regions[1].name) else w.regions[1]
        p = np.array([*other.center, 1.6])
        d = np.linalg.norm(p - ap.position)
        free = ap.tx_power - 10 * ap.gamma * np.log10(d)
        assert w.rssi_mean(p[None])[0, 0] <= free - w.params.wall_loss

    def test_magnetic_far_field_is_base(self, one_room):
        np.testing.assert_allclose(one_room.magnetic_field([[1e4, 1e4, 1.0]])[0],
                                   one_room.params.magnetic_base, atol=1e-9)

    def test_clone_regions_copy_features(self, two_rooms):
        w = two_rooms.world
        a = w.feature_regions == 1
        b = w.feature_regions == 2
        np.testing.assert_array_equal(w.feature_descriptors[a], w.feature_descriptors[b])
        shift = np.asarray(w.regions[2].lo) - np.asarray(w.regions[1].lo)
        np.testing.assert_allclose(w.feature_positions[b][:, :2] - w.feature_positions[a][:, :2],
                                   np.broadcast_to(shift, (a.sum(), 2)), atol=1e-12)

    def test_bad_layout(self):
        with pytest.raises(ValueError):
            WorldParams(layout="maze")


class TestTraces:
    def path(self, world):
        r = world.regions[0]
        lo, hi = np.asarray(r.lo), np.asarray(r.hi)
        return np.array([lo + 1.5, [hi[0] - 1.5, lo[1] + 1.5]])

    def test_deterministic(self, one_room):
        tr = TrajectorySpec(self.path(one_room))
        a, _ = simulate_trace(one_room, tr, seed=2)
        b, _ = simulate_trace(one_room, tr, seed=2)
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())

    def test_through_wall_rejected(self, two_rooms):
        w = two_rooms.world
        p = np.array([w.regions[1].center, w.regions[2].center])
        assert not free_path(w, p)
        with pytest.raises(TrajectoryError):
            simulate_trace(w, TrajectorySpec(p))

    def test_mapping_landmarks_in_body_frame(self, one_room):
        cfg = SensorConfig(record="mapping", depth_sigma=0.0)
        trace, gt = simulate_trace(one_room, TrajectorySpec(self.path(one_room)), seed=1, sensors=cfg)
        n = 0
        for fr, pose in zip(trace.frames, gt.poses):
            if fr.landmark_ids.size:
                np.testing.assert_allclose(pose.transform(fr.positions),
                                           one_room.feature_positions[fr.landmark_ids], atol=1e-9)
                n += 1
        assert n > 0

    def test_query_detections_project(self, one_room):
        cfg = SensorConfig(record="query", pixel_sigma=0.0, outlier_rate=0.0, descriptor_sigma=0.0)
        trace, gt = simulate_trace(one_room, TrajectorySpec(self.path(one_room)), seed=1, sensors=cfg)
        fr = max(trace.frames, key=lambda f: len(f.observations))
        k = trace.frames.index(fr)
        cam = gt.poses[k] @ BODY_FROM_CAMERA
        uv, _ = project_points(cam, one_room.feature_positions, SensorConfig().intrinsics)
        # every detection coincides with the projection of the feature sharing its descriptor
        j = np.argmax(fr.observations.descriptors @ one_room.feature_descriptors.T, axis=1)
        np.testing.assert_allclose(fr.observations.uv, uv[j], atol=1e-9)

    def test_frames_after_first_window(self, one_room):
        trace, _ = simulate_trace(one_room, TrajectorySpec(self.path(one_room), fingerprint_window=2.0))
        assert trace.frames[0].timestamp >= 2.0 - 1e-9
        assert trace.imu.shape[1] == 10


class TestScenarios:
    def test_names(self):
        assert set(SCENARIOS) == {"corridor-loop", "two-rooms", "large-sparse"}
        with pytest.raises(UnknownScenarioError):
            make_benchmark_scenario("atrium")

    def test_unpacks(self, two_rooms):
        mapping, query, truth = two_rooms
        assert len(truth) == len(query)
        assert len(two_rooms.node_positions) == sum(len(t) for t in mapping)
        assert all(0 <= n < len(two_rooms.node_positions) for n in truth.nodes)

    def test_with_query_keeps_map(self, two_rooms):
        sc = with_query(two_rooms, 5)
        assert sc.mapping is two_rooms.mapping and sc.query_seed == 5
        assert json.dumps(sc.query.to_dict()) != json.dumps(two_rooms.query.to_dict())

    def test_query_rooms_alternate(self, two_rooms):
        rooms = []
        for s in (0, 1):
            labels = with_query(two_rooms, s).truth.rooms
            rooms.append(max(set(labels), key=labels.count))
        assert sorted(rooms) == [1, 2]

    def test_large_sparse_size(self):
        sc = make_benchmark_scenario("large-sparse", 0)
        assert len(sc.node_positions) >= 200
        assert len(sc.world.regions) == 16
