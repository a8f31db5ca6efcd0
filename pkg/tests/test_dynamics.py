import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenediff import dynamics as dyn
from scenediff import tensor as tn

from helpers import simple_scene


def test_step_examples():
    assert np.allclose(dyn.step([0, 0, 2, 0], [0, 0], 0.1), [0.2, 0, 2, 0], atol=1e-15)
    assert np.allclose(dyn.step([0, 0, 1, math.pi / 2], [1, 0], 0.1), [0, 0.1, 1.1, math.pi / 2], atol=1e-15)


def test_step_rejects_bad_input():
    with pytest.raises(ValueError):
        dyn.step([0, 0, 1, 0], [0, 0], 0.0)
    with pytest.raises(ValueError):
        dyn.step([0, 0, np.nan, 0], [0, 0])


def _euler_error(omega, dt):
    s = np.array([0.0, 0.0, 5.0, 0.0])
    for _ in range(int(round(1.0 / dt))):
        s = dyn.step(s, [0.0, omega], dt)
    fine = np.array([0.0, 0.0, 5.0, 0.0])
    for _ in range(10000):
        fine = dyn.step(fine, [0.0, omega], 1e-4)
    return math.hypot(s[0] - fine[0], s[1] - fine[1])


def test_constant_yaw_rate_vs_fine_integrator():
    assert _euler_error(0.05, 0.1) < 0.02
    # first order: halving dt halves the error
    assert _euler_error(0.2, 0.05) / _euler_error(0.2, 0.1) == pytest.approx(0.5, abs=0.02)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
    st.floats(-50, 50), st.floats(-5, 5),
)
def test_step_keeps_speed_nonnegative_and_yaw_wrapped(s, acc, w):
    s[2] = abs(s[2])
    out = dyn.step(s, [acc, w])
    assert out[2] >= 0
    assert -math.pi < out[3] <= math.pi


def test_zero_actions_give_straight_lines():
    s0 = np.array([[0.0, 0.0, 3.0, 0.0], [5.0, 1.0, 0.0, 1.0]])
    out = dyn.rollout(s0, np.zeros((2, 1, 6, 2))).data
    assert np.allclose(out[0, 0, :, 0], 0.3 * np.arange(1, 7))
    assert np.allclose(out[1, 0, :, :2], [5.0, 1.0])


def test_rollout_inverse_round_trip():
    rng = np.random.default_rng(0)
    s0 = np.c_[rng.normal(size=(3, 2)), rng.uniform(4, 8, 3), rng.uniform(-3, 3, 3)]
    acts = np.stack([rng.normal(scale=0.5, size=(3, 15)), rng.normal(scale=0.1, size=(3, 15))], -1)
    states = dyn.rollout(s0, acts[:, None]).data[:, 0]
    rec, res = dyn.inverse_actions(np.concatenate([s0[:, None], states], 1), return_residual=True)
    assert np.allclose(rec, acts, atol=1e-9)
    again = dyn.rollout(s0, rec[:, None]).data[:, 0]
    assert np.max(np.abs(again - states)) < 1e-9
    assert res < 1e-9


def test_inverse_of_constant_speed_is_zero():
    s = np.zeros((1, 6, 4))
    s[0, :, 0] = np.arange(6) * 0.5
    s[0, :, 2] = 5.0
    assert np.allclose(dyn.inverse_actions(s), 0.0)


def test_inverse_on_expert_data(gen_scenes):
    for scene in gen_scenes:
        win = np.concatenate([scene.states[:, None], scene.expert_states[:, :20]], 1)
        _, res = dyn.inverse_actions(win, return_residual=True)
        assert res < 0.1


def test_rollout_is_compositional():
    rng = np.random.default_rng(1)
    s0 = np.c_[np.zeros((2, 2)), [3.0, 6.0], [0.1, -0.4]]
    a = rng.normal(size=(2, 1, 9, 2))
    full = dyn.rollout(s0, a).data
    head = dyn.rollout(s0, a[:, :, :8]).data
    last = dyn.step(head[:, :, -1], a[:, :, 8])
    assert np.array_equal(full[:, :, -1], last)


def test_final_x_gradient_vs_finite_differences():
    s0 = np.array([[0.0, 0.0, 4.0, 0.3]])
    a0 = np.random.default_rng(2).normal(scale=0.3, size=(1, 1, 10, 2))
    assert tn.grad_check(lambda a: tn.sum_(dyn.rollout(s0, a)[:, :, -1, 0]), a0, eps=1e-6) < 1e-4


def test_speed_clamp_subgradient():
    s0 = np.array([[0.0, 0.0, 0.05, 0.0]])
    a = np.array([[[[-5.0, 0.0], [0.0, 0.0]]]])
    _, (g,) = tn.grad(lambda t: tn.sum_(dyn.rollout(s0, t)[..., 2]), a)
    assert g[0, 0, 0, 0] == 0.0


def test_transform_examples():
    scene = simple_scene([[3.0, -2.0, 5.0, 0.7], [10.0, 4.0, 2.0, -1.2]])
    pw, yw = dyn.transform_coord_agents_to_world(np.zeros((2, 1, 1, 2)), np.zeros((2, 1, 1, 1)), scene)
    assert np.allclose(pw.data[:, 0, 0], scene.states[:, :2])
    assert np.allclose(yw.data[:, 0, 0, 0], scene.states[:, 3])
    ident = simple_scene([[0.0, 0.0, 5.0, 0.0]])
    p = np.random.default_rng(3).normal(size=(1, 2, 3, 2))
    assert np.allclose(dyn.transform_coord_agents_to_world(p, np.zeros((1, 2, 3, 1)), ident)[0].data, p)


def test_world_to_agent_i():
    scene = simple_scene([[3.0, -2.0, 5.0, 0.7], [10.0, 4.0, 2.0, math.pi / 2]])
    p, y = dyn.transform_coord_world_to_agent_i(np.array([[10.0, 4.0]]), np.array([[math.pi / 2]]), scene, 1)
    assert np.allclose(p.data, 0.0) and np.allclose(y.data, 0.0)
    # 90 degree frame: a point 2 m north of the anchor is 2 m straight ahead
    p, _ = dyn.transform_coord_world_to_agent_i(np.array([[10.0, 6.0], [9.0, 4.0]]), np.zeros((2, 1)), scene, 1)
    rot = np.array([[0.0, 1.0], [-1.0, 0.0]])  # world -> frame for yaw pi/2
    assert np.allclose(p.data, (np.array([[0.0, 2.0], [-1.0, 0.0]]) @ rot.T), atol=1e-12)
    with pytest.raises(IndexError):
        dyn.transform_coord_world_to_agent_i(np.zeros((1, 2)), np.zeros((1, 1)), scene, 2)


def test_agent_world_agent_i_round_trip():
    rng = np.random.default_rng(4)
    states = np.c_[rng.uniform(-30, 30, (4, 2)), rng.uniform(0, 9, 4), rng.uniform(-3, 3, 4)]
    scene = simple_scene(states)
    pos, yaw = rng.normal(scale=10, size=(4, 2, 5, 2)), rng.normal(size=(4, 2, 5, 1))
    pw, yw = dyn.transform_coord_agents_to_world(pos, yaw, scene)
    for i in range(4):
        pi, yi = dyn.transform_coord_world_to_agent_i(pw, yw, scene, i)
        assert np.max(np.abs(pi.data[i] - pos[i])) < 1e-9
        assert np.max(np.abs(dyn.wrap(yi.data[i] - yaw[i]))) < 1e-9
        # world -> i -> world
        c, s = math.cos(states[i, 3]), math.sin(states[i, 3])
        back = np.stack([pi.data[..., 0] * c - pi.data[..., 1] * s, pi.data[..., 0] * s + pi.data[..., 1] * c], -1)
        assert np.max(np.abs(back + states[i, :2] - pw.data)) < 1e-9


def test_transforms_are_isometries():
    rng = np.random.default_rng(5)
    states = np.c_[rng.uniform(-30, 30, (3, 2)), np.ones(3), rng.uniform(-3, 3, 3)]
    scene = simple_scene(states)
    pos = rng.normal(scale=10, size=(3, 1, 6, 2))
    pw = dyn.transform_coord_agents_to_world(pos, np.zeros((3, 1, 6, 1)), scene)[0].data
    for b in range(3):
        a = pos[b, 0]
        w = pw[b, 0]
        da = np.linalg.norm(a[:, None] - a[None], axis=-1)
        dw = np.linalg.norm(w[:, None] - w[None], axis=-1)
        assert np.max(np.abs(da - dw)) < 1e-9
    pi = dyn.transform_coord_world_to_agent_i(pw, np.zeros((3, 1, 6, 1)), scene, 2)[0].data
    dw = np.linalg.norm(pw[:, 0, 0] - pw[:, 0, 3], axis=-1)
    di = np.linalg.norm(pi[:, 0, 0] - pi[:, 0, 3], axis=-1)
    assert np.max(np.abs(dw - di)) < 1e-9


def test_select_agent_ind():
    x = np.random.default_rng(6).normal(size=(3, 2, 4, 2))
    assert np.array_equal(dyn.select_agent_ind(x[:1], 0).data, x[0])
    rows = tn.concat([tn.Tensor(x[i : i + 1]) for i in range(3)], 0)
    assert np.array_equal(dyn.select_agent_ind(rows, 2).data, x[2])
    w = np.arange(16.0).reshape(2, 4, 2)
    assert tn.grad_check(lambda t: tn.sum_(dyn.select_agent_ind(t, 1) * w), x) < 1e-8
    _, (g,) = tn.grad(lambda t: tn.sum_(dyn.select_agent_ind(t, 1)), x)
    assert np.all(g[1] == 1.0) and np.all(g[[0, 2]] == 0.0)


def test_rollout_and_transform_gradient():
    rng = np.random.default_rng(7)
    states = np.c_[rng.uniform(-20, 20, (4, 2)), rng.uniform(2, 8, 4), rng.uniform(-3, 3, 4)]
    scene = simple_scene(states)
    s0 = dyn.agent_frame_initial(states[:, 2])
    a0 = rng.normal(scale=0.3, size=(4, 2, 10, 2))

    def f(a):
        x = dyn.rollout(s0, a)
        pw, yw = dyn.transform_coord_agents_to_world(x[..., :2], x[..., 3:4], scene)
        p1, _ = dyn.transform_coord_world_to_agent_i(pw, yw, scene, 1)
        return tn.sum_(tn.norm2(p1, -1)) + tn.sum_(tn.sin(yw))

    assert tn.grad_check(f, a0) < 1e-3


def test_constant_velocity_forecast():
    scene = simple_scene([[1.0, 2.0, 0.0, 0.3], [0.0, 0.0, 10.0, 0.0]])
    out = dyn.constant_velocity_forecast(scene, 5)
    assert np.array_equal(out[0], np.repeat(scene.states[:1], 5, 0))
    assert np.allclose(out[1, :, 0], np.arange(1, 6) * 1.0)
    ref = dyn.rollout(scene.states, np.zeros((2, 5, 2))[:, None]).data[:, 0]
    assert np.array_equal(out, ref)
