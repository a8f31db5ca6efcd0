import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenediff import dynamics as dyn
from scenediff import metrics as mt
from scenediff import tensor as tn
from scenediff.guidelang import rule

from helpers import simple_scene


def straight_states(x0, y, v, T=20, yaw=0.0):
    s = np.zeros((T, 4))
    s[:, 0] = x0 + np.arange(T) * v * 0.1 * math.cos(yaw)
    s[:, 1] = y + np.arange(T) * v * 0.1 * math.sin(yaw)
    s[:, 2] = v
    s[:, 3] = yaw
    return s


def raster_overlap(a, b, ext_a, ext_b, res=0.01):
    """Dense point-containment check: any 1 cm grid point strictly inside both boxes."""
    def inside(px, py, pose, ext):
        c, s = math.cos(pose[2]), math.sin(pose[2])
        lx = (px - pose[0]) * c + (py - pose[1]) * s
        ly = -(px - pose[0]) * s + (py - pose[1]) * c
        return (np.abs(lx) < ext[0] / 2) & (np.abs(ly) < ext[1] / 2)

    r = max(ext_a) / 2 + 0.1
    xs = np.arange(a[0] - r, a[0] + r, res)
    ys = np.arange(a[1] - r, a[1] + r, res)
    px, py = np.meshgrid(xs, ys)
    return bool(np.any(inside(px, py, a, ext_a) & inside(px, py, b, ext_b)))


def test_parallel_agents_do_not_collide():
    s = np.stack([straight_states(0, 0, 5), straight_states(0, 10, 5)])
    ev = mt.collision_events(s, [[4.5, 1.9]] * 2)
    assert not ev.agent.any() and np.all(ev.first_step == -1)


def test_coincident_boxes_both_flagged():
    s = np.stack([straight_states(0, 0, 5), straight_states(0, 0, 5)])
    ev = mt.collision_events(s, [[4.5, 1.9]] * 2)
    assert ev.agent.all() and np.all(ev.first_step == 0) and ev.pairs[0, 1]


def test_sat_vs_raster_near_tangent():
    rng = np.random.default_rng(0)
    ext = np.array([4.0, 2.0])
    checked = 0
    for _ in range(60):
        a = np.array([0.0, 0.0, rng.uniform(-math.pi, math.pi)])
        ang = rng.uniform(-math.pi, math.pi)
        dist = rng.uniform(1.8, 4.6)
        b = np.array([dist * math.cos(ang), dist * math.sin(ang), rng.uniform(-math.pi, math.pi)])
        ca = mt.box_corners(*a, *ext)
        cb = mt.box_corners(*b, *ext)
        sat = bool(mt.boxes_overlap(ca, cb))
        ras = raster_overlap(a, b, ext, ext)
        if sat != ras:
            # disagreement is only allowed for slivers thinner than the raster
            grown = mt.boxes_overlap(mt.box_corners(*a, *(ext - 0.03)), mt.box_corners(*b, *(ext - 0.03)))
            assert not grown
            continue
        checked += 1
    assert checked >= 55


def test_touching_boxes_do_not_count():
    a = mt.box_corners(0.0, 0.0, 0.0, 4.0, 2.0)
    b = mt.box_corners(4.0, 0.0, 0.0, 4.0, 2.0)
    assert not mt.boxes_overlap(a, b)


def four_agent_scene():
    return simple_scene([[0, 0, 5, 0], [30, 0, 5, 0], [60, 3.5, 5, 0], [90, 0, 5, 0]])


def test_failure_rate_examples():
    scene = four_agent_scene()
    clean = np.stack([straight_states(x, y, 5) for x, y in [(0, 0), (30, 0), (60, 3.5), (90, 0)]])
    assert mt.failure_rate(clean, scene) == 0.0
    off = clean.copy()
    off[3, 5:, 1] = 20.0  # agent 3 leaves the road
    assert mt.failure_rate(off, scene) == 0.25
    crash = clean.copy()
    crash[1] = straight_states(0, 0, 5)
    crash[1, :, 0] += 1.0
    assert mt.failure_rate(crash, scene) == 0.5


def test_failure_rate_hand_count():
    scenes = [four_agent_scene()] * 3
    base = np.stack([straight_states(x, y, 5) for x, y in [(0, 0), (30, 0), (60, 3.5), (90, 0)]])
    r1 = base.copy()
    r2 = base.copy()
    r2[2, 10:, 1] = -30.0  # 1 of 4 off-road
    r3 = base.copy()
    r3[0] = r3[1] - np.array([2.0, 0, 0, 0])  # 0 and 1 overlap
    r3[3, :, 1] = 50.0  # 3 off-road
    assert mt.failure_rate([r1, r2, r3], scenes) == pytest.approx((0 + 0.25 + 0.75) / 3)


def test_failure_rate_monotone():
    scene = four_agent_scene()
    r = np.stack([straight_states(x, y, 5) for x, y in [(0, 0), (30, 0), (60, 3.5), (90, 0)]])
    before = mt.failure_rate(r, scene)
    r[3] = r[2]
    assert 0 <= before <= mt.failure_rate(r, scene) <= 1


def test_rule_violation_examples():
    scene = simple_scene([[0, 0, 5, 0], [20, 0, 5, 0]])
    r = np.stack([straight_states(0, 0, 5), straight_states(33, 0, 5)])
    assert mt.rule_violation("keep_distance", r, scene, pair=(0, 1), min_distance=10, max_distance=30) == pytest.approx(3.0)
    ok = np.stack([straight_states(0, 0, 5), straight_states(20, 0, 5)])
    assert mt.rule_violation("keep_distance", ok, scene, pair=(0, 1)) == 0.0
    assert mt.rule_violation("speed_limit", ok, scene, vmax=6.0) == 0.0
    assert mt.rule_violation("no_offroad", ok, scene) == 0.0
    assert mt.rule_violation("no_collision", ok, scene) == 0.0
    assert mt.rule_violation("gpt_collision", ok, scene, pair=(0, 1)) == 0.0
    with pytest.raises(ValueError):
        mt.rule_violation("teleport", ok, scene)


def test_stop_sign_scan():
    scene = simple_scene([[0, 0, 5, 0]])
    s = straight_states(0, 0, 5, T=40)[None]
    s[0, :, 2] = np.linspace(5.0, 0.5, 40)
    region = (4.0, -2.0, 9.0, 2.0)
    speeds = [s[0, t, 2] for t in range(40) if region[0] <= s[0, t, 0] <= region[2]]
    want = min(speeds)
    s[0, :, 2] = np.where((s[0, :, 0] >= 4) & (s[0, :, 0] <= 9), np.maximum(s[0, :, 2], 1.2), s[0, :, 2])
    want = min(max(v, 1.2) for v in speeds)
    assert mt.rule_violation("stop_sign", s, scene, region=region) == pytest.approx(want)
    assert want == pytest.approx(1.2) or want > 1.2


def test_driving_profiles():
    T = 12
    r = np.zeros((1, T, 6))
    r[..., 2] = 5.0
    p = mt.driving_profiles(r)
    assert all(np.all(p[k] == 0) for k in mt.PROFILE_KEYS)
    r[..., 4] = -1.5
    p = mt.driving_profiles(r)
    assert np.all(p["long_accel"] == 1.5) and np.all(p["jerk"] == 0)
    r[..., 4] = 0.0
    r[..., 5] = 0.2
    assert np.allclose(mt.driving_profiles(r)["lat_accel"], 1.0)
    with pytest.raises(ValueError):
        mt.driving_profiles(r[:, :2])


def test_histogram_invariants():
    h = mt.histogram([0.1, 0.2, 5.0, -1.0], np.linspace(0, 1, 5))
    assert abs(h.mass.sum() - 1.0) <= 1e-12
    assert h.mass[0] == 0.75 and h.mass[-1] == 0.25
    with pytest.raises(ValueError):
        mt.Histogram(np.array([0.0, 1.0, 1.0]), np.array([0.5, 0.5]))


def test_w1_examples():
    edges = np.linspace(0, 2.0, 5)
    h = mt.Histogram(edges, np.array([0.25, 0.25, 0.25, 0.25]))
    assert mt.wasserstein1(h, h) == 0.0
    a = mt.Histogram(edges, np.array([1.0, 0, 0, 0]))
    b = mt.Histogram(edges, np.array([0, 1.0, 0, 0]))
    assert mt.wasserstein1(a, b) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        mt.wasserstein1(a, mt.Histogram(np.linspace(0, 3, 5), b.mass))


def transport_oracle(h1, h2, total):
    """Sorted-sample coupling on bin centers for masses that are multiples of 1/total."""
    c = h1.centers
    s1 = np.repeat(c, np.rint(h1.mass * total).astype(int))
    s2 = np.repeat(c, np.rint(h2.mass * total).astype(int))
    return float(np.mean(np.abs(np.sort(s1) - np.sort(s2))))


def random_hist(rng, edges, total):
    counts = np.bincount(rng.integers(0, len(edges) - 1, size=total), minlength=len(edges) - 1)
    return mt.Histogram(edges, counts / total)


def test_w1_vs_transport_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 17))
        edges = np.cumsum(np.r_[rng.uniform(-5, 5), rng.uniform(0.1, 2.0, n)])
        edges = np.linspace(edges[0], edges[-1], n + 1)
        h1, h2 = random_hist(rng, edges, 240), random_hist(rng, edges, 240)
        assert abs(mt.wasserstein1(h1, h2) - transport_oracle(h1, h2, 240)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_w1_is_a_metric(seed):
    rng = np.random.default_rng(seed)
    edges = np.linspace(0, 3, 9)
    a, b, c = (random_hist(rng, edges, 50) for _ in range(3))
    ab, ba = mt.wasserstein1(a, b), mt.wasserstein1(b, a)
    assert ab == pytest.approx(ba, abs=1e-15)
    assert mt.wasserstein1(a, c) <= ab + mt.wasserstein1(b, c) + 1e-12
    assert (ab == 0) == np.array_equal(a.mass, b.mass)
    assert 0 <= mt.normalized_w1(a, b) <= 1


def rollout_with_acc(acc, T=15, v=5.0):
    r = np.zeros((len(acc), T, 6))
    r[..., 2] = v
    r[..., 4] = np.asarray(acc)[:, None]
    return r


def test_realism_identity_and_single_agent():
    ref = [rollout_with_acc([0.3, 1.0, 1.7])]
    assert mt.realism_deviation(ref, ref) == 0.0
    assert mt.relative_realism(ref, ref) == 0.0
    single = [rollout_with_acc([0.5])]
    assert mt.relative_realism(single, single) == 0.0
    with pytest.raises(ValueError):
        mt.realism_deviation(ref, [])


def test_realism_shifted_acceleration():
    ref = [rollout_with_acc(np.linspace(0.0, 2.0, 21))]
    gen = [rollout_with_acc(np.linspace(0.0, 2.0, 21) + 0.5)]
    ref_acc = np.abs(ref[0][..., 4]).ravel()
    gen_acc = np.abs(gen[0][..., 4]).ravel()
    hi = np.percentile(ref_acc, 99.5)
    edges = np.linspace(0, hi, 41)
    width = edges[1] - edges[0]

    def masses(v):
        idx = np.minimum((v / width).astype(int), 39)
        return np.bincount(idx, minlength=40) / len(v)

    h1 = mt.Histogram(edges, masses(gen_acc))
    h2 = mt.Histogram(edges, masses(ref_acc))
    expect = transport_oracle(h1, h2, len(ref_acc)) / 3  # lateral and jerk profiles agree exactly
    assert mt.realism_deviation(gen, ref) == pytest.approx(expect, abs=1e-9)


def test_guidance_metric_consistency():
    scene = simple_scene([[0, 0, 5, 0], [20, 0, 5, 0]])
    world = np.stack([straight_states(0, 0, 5, T=10), straight_states(20, 0, 5, T=10)])
    x = np.zeros((2, 1, 10, 6))
    x[:, 0, :, :4] = dyn.states_world_to_agent(world, scene.frames())
    for vmax, zero in ((6.0, True), (4.0, False)):
        metric = mt.rule_violation("speed_limit", world, scene, vmax=vmax)
        loss = rule("speed_limit", scene, vmax=vmax)(x).data
        assert (metric == 0) == zero and (np.all(loss == 0)) == zero
    for lo, hi in ((10, 30), (25, 40)):
        metric = mt.rule_violation("keep_distance", world, scene, pair=(0, 1), min_distance=lo, max_distance=hi)
        loss = rule("keep_distance", scene, target_ind=0, ref_ind=1, min_distance=lo, max_distance=hi)(x).data
        assert metric == pytest.approx(float(loss[0]))


def test_speed_references():
    es = np.zeros((3, 10, 4))
    es[0, :, 2] = 10.0
    es[1, :, 2] = np.linspace(0, 8, 10)
    assert mt.speed_limit_threshold(es) == pytest.approx(np.quantile(np.r_[es[0, :, 2], es[1, :, 2]], 0.75))
    assert np.array_equal(mt.target_speed_reference(es), 0.5 * es[..., 2])


def sample_report():
    rep = mt.MetricsReport(metadata={"seed": 0, "config": "abc"})
    rep.add_scene("s1", 0.25, {"speed_limit": 0.5})
    rep.add_scene("s2", 0.0, {"speed_limit": 1.5})
    rep.finalize(real=0.125, rel_real=0.0625)
    return rep


def test_report_json_round_trip(tmp_path):
    rep = sample_report()
    back = mt.read_report(mt.write_report(rep, tmp_path / "r.json"))
    assert back.to_dict() == rep.to_dict()
    assert rep.aggregate == {"fail": 0.125, "rule:speed_limit": 1.0, "real": 0.125, "rel_real": 0.0625}


def test_report_csv_golden(tmp_path):
    path = mt.write_report(sample_report(), tmp_path / "r.csv")
    assert path.read_text().splitlines() == [
        "scene,metric,value",
        "s1,fail,0.25",
        "s1,rule:speed_limit,0.5",
        "s2,fail,0.0",
        "s2,rule:speed_limit,1.5",
        "__all__,fail,0.125",
        "__all__,rule:speed_limit,1.0",
        "__all__,real,0.125",
        "__all__,rel_real,0.0625",
    ]
    with path.open() as f:
        assert tuple(next(csv.reader(f))) == mt.CSV_COLUMNS


def test_report_rejects_bad_values():
    rep = mt.MetricsReport()
    rep.add_scene("s", float("nan"))
    with pytest.raises(ValueError):
        rep.finalize()
