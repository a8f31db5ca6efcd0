import math

import numpy as np
import pytest

from scenediff import dynamics as dyn
from scenediff import harness as hs
from scenediff import scene as sc
from scenediff import tensor as tn

from helpers import simple_scene, straight_lanes


def dense_polyline(wp, step=0.01):
    """Centerline points every ``step`` meters, built from the raw waypoints."""
    seg = np.diff(wp[:, :2], axis=0)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    q = np.arange(0.0, s[-1], step)
    return np.c_[np.interp(q, s, wp[:, 0]), np.interp(q, s, wp[:, 1])]


def test_save_load_round_trip(tmp_path):
    scene = simple_scene([[0.0, 0.0, 5.0, 0.0], [12.0, 3.5, 4.0, 0.1]])
    scene.goals = np.array([[50.0, 0.0, 2.5], [60.0, 3.5, 2.0]])
    path = tmp_path / "s.json"
    sc.save_scene(scene, path)
    assert sc.load_scene(path) == scene


def test_missing_dt_is_schema_error(tmp_path):
    d = sc.scene_to_dict(simple_scene([[0.0, 0.0, 5.0, 0.0]]))
    del d["dt"]
    with pytest.raises(sc.SchemaError, match="dt"):
        sc.scene_from_dict(d)


def test_default_footprint():
    d = sc.scene_to_dict(simple_scene([[0.0, 0.0, 5.0, 0.0]]))
    for a in d["agents"]:
        del a["length"], a["width"]
    assert np.array_equal(sc.scene_from_dict(d).extents, [[4.0, 2.0]])


def test_current_lane_on_centerline():
    assert sc.current_lane(simple_scene([[30.0, 0.0, 5.0, 0.0]]), 0) == 0


def test_current_lane_heading_tiebreak():
    xs = np.linspace(0, 100, 5)
    east = sc.Lane(0, np.c_[xs, np.zeros(5), np.zeros(5)], 1.75)
    west = sc.Lane(1, np.c_[xs[::-1], np.full(5, 3.5), np.full(5, math.pi)], 1.75)
    scene = simple_scene([[40.0, 1.75, 5.0, math.pi]], lanes=[east, west])
    assert sc.current_lane(scene, 0) == 1
    scene = simple_scene([[40.0, 1.75, 5.0, 0.0]], lanes=[east, west])
    assert sc.current_lane(scene, 0) == 0


def test_current_lane_off_map():
    assert sc.current_lane(simple_scene([[30.0, 80.0, 5.0, 0.0]]), 0) is None


def test_current_lane_vs_nearest_centerline_scan():
    lanes = hs.gen_map(hs.MapSpec("arc", 3), seed=4)
    dense = [dense_polyline(l.waypoints, 0.05) for l in lanes]
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(200):
        base = dense[rng.integers(len(dense))]
        p = base[rng.integers(len(base))] + rng.normal(scale=3.0, size=2)
        d = [np.min(np.hypot(*(q - p).T)) for q in dense]
        order = np.sort(d)
        if order[1] - order[0] < 0.1:  # too close to call at this sampling
            continue
        scene = simple_scene([[p[0], p[1], 5.0, 0.0]], lanes=lanes)
        assert sc.current_lane(scene, 0) == int(np.argmin(d))
        checked += 1
    assert checked > 100


def test_projection_of_centerline_trajectory_is_fixed_point():
    scene = simple_scene([[10.0, 0.0, 5.0, 0.0], [20.0, 3.5, 5.0, 0.0]])
    pos = np.zeros((2, 1, 6, 2))
    pos[..., 0] = np.arange(6) * 0.5
    yaw = np.zeros((2, 1, 6, 1))
    out = sc.get_current_lane_projection(pos, yaw, scene).data
    assert np.allclose(out[..., :2], pos, atol=1e-9)
    assert np.allclose(out[..., 2:], yaw, atol=1e-9)


def test_missing_neighbor_returns_input():
    scene = simple_scene([[10.0, 3.5, 5.0, 0.0], [10.0, 0.0, 5.0, 0.0]])
    rng = np.random.default_rng(1)
    pos, yaw = rng.normal(size=(2, 2, 5, 2)), rng.normal(scale=0.1, size=(2, 2, 5, 1))
    out, flags = sc.lane_projection("left", pos, yaw, scene, return_flags=True)
    assert flags.tolist() == [True, False]
    assert np.array_equal(out.data[0], np.concatenate([pos[0], yaw[0]], -1))
    # agent 1 projects onto lane 1, which is 3.5 m to its left
    assert np.allclose(out.data[1, ..., 1], 3.5)
    out, flags = sc.lane_projection("right", pos, yaw, scene, return_flags=True)
    assert flags.tolist() == [False, True]


@pytest.mark.parametrize("kind", ["arc", "merge"])
def test_projection_vs_dense_sampling(kind):
    lanes = hs.gen_map(hs.MapSpec(kind, 2 if kind == "arc" else 1), seed=9)
    scene, _ = hs.gen_scene(lanes, 3, duration=2.0, seed=2)
    rng = np.random.default_rng(5)
    pos = rng.normal(scale=[8.0, 1.0], size=(3, 2, 10, 2)) + np.array([5.0, 0.0])
    yaw = rng.normal(scale=0.1, size=(3, 2, 10, 1))
    out = sc.get_current_lane_projection(pos, yaw, scene).data
    fr = scene.frames()
    for b in range(3):
        lane = scene.lane(sc.current_lane(scene, b))
        dense = dense_polyline(lane.waypoints)
        got = dyn.frame_to_world_np(out[b, ..., :2], fr[b]).reshape(-1, 2)
        world = dyn.frame_to_world_np(pos[b], fr[b]).reshape(-1, 2)
        for g, w in zip(got, world):
            d = np.hypot(*(dense - w).T)
            assert np.hypot(*(dense[np.argmin(d)] - g)) < 0.02


def test_projection_is_idempotent():
    lanes = hs.gen_map(hs.MapSpec("arc", 2), seed=3)
    scene, _ = hs.gen_scene(lanes, 2, duration=2.0, seed=1)
    rng = np.random.default_rng(2)
    pos = rng.normal(scale=[5.0, 0.8], size=(2, 1, 8, 2))
    yaw = rng.normal(scale=0.1, size=(2, 1, 8, 1))
    p1 = sc.get_current_lane_projection(pos, yaw, scene).data
    p2 = sc.get_current_lane_projection(p1[..., :2], p1[..., 2:], scene).data
    assert np.max(np.abs(p1 - p2)) < 1e-9


def test_projection_gradient():
    lanes = hs.gen_map(hs.MapSpec("arc", 2), seed=3)
    scene, _ = hs.gen_scene(lanes, 2, duration=2.0, seed=1)
    rng = np.random.default_rng(3)
    x0 = rng.normal(scale=[5.0, 0.8, 0.1], size=(2, 1, 4, 3))
    w = rng.normal(size=(2, 1, 4, 3))

    def f(x):
        return tn.sum_(sc.get_current_lane_projection(x[..., :2], x[..., 2:], scene) * w)

    assert tn.grad_check(f, x0) < 1e-5


def test_offroad_examples():
    scene = simple_scene([[0.0, 0.0, 5.0, 0.0]])
    assert not sc.offroad_test(50.0, 0.0, scene)
    assert sc.offroad_test(50.0, 10 * 1.75 + 3.5, scene)
    assert sc.offroad_test(50.0, -1.76, scene)
    assert not sc.offroad_test(50.0, -1.74, scene)


def test_offroad_band_vs_dense_oracle():
    lanes = hs.gen_map(hs.MapSpec("merge", 2), seed=11)
    scene = simple_scene([[0.0, 0.0, 1.0, 0.0]], lanes=lanes)
    dense = [dense_polyline(l.waypoints, 0.01) for l in lanes]
    rng = np.random.default_rng(7)
    for _ in range(150):
        li = rng.integers(len(lanes))
        base = dense[li][rng.integers(len(dense[li]))]
        p = base + rng.normal(size=2) * 2.0
        dist = [np.min(np.hypot(*(q - p).T)) - l.half_width for q, l in zip(dense, lanes)]
        if abs(min(dist)) < 0.02:
            continue
        assert bool(sc.offroad_test(p[0], p[1], scene)) == (min(dist) > 0)


def test_offroad_monotone_in_half_width():
    rng = np.random.default_rng(8)
    pts = rng.uniform([0, -6], [200, 10], size=(500, 2))
    prev = None
    for hw in (1.0, 1.5, 2.0, 3.0):
        scene = simple_scene([[0.0, 0.0, 1.0, 0.0]], lanes=straight_lanes(2, hw))
        off = sc.offroad_test(pts[:, 0], pts[:, 1], scene)
        if prev is not None:
            assert not np.any(off & ~prev)
        prev = off


def test_frame_round_trip():
    rng = np.random.default_rng(9)
    states = np.c_[rng.uniform(-50, 50, (4, 2)), rng.uniform(0, 10, 4), rng.uniform(-3, 3, 4)]
    scene = simple_scene(states)
    pos = rng.normal(scale=20, size=(4, 2, 5, 2))
    yaw = rng.normal(size=(4, 2, 5, 1))
    pw, yw = dyn.transform_coord_agents_to_world(pos, yaw, scene)
    back, yb = dyn.transform_coord_world_to_agents(pw, yw, scene)
    assert np.max(np.abs(back.data - pos)) < 1e-9
    assert np.max(np.abs(dyn.wrap(yb.data - yaw))) < 1e-9


def test_transform_scene_keeps_relative_geometry():
    scene = simple_scene([[10.0, 0.0, 5.0, 0.0], [30.0, 3.5, 5.0, 0.1]])
    moved = sc.transform_scene(scene, 12.0, -7.0, 0.7)
    d0 = np.hypot(*(scene.states[0, :2] - scene.states[1, :2]))
    d1 = np.hypot(*(moved.states[0, :2] - moved.states[1, :2]))
    assert d1 == pytest.approx(d0, abs=1e-9)
    assert sc.current_lane(moved, 1) == sc.current_lane(scene, 1)
