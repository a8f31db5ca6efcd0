"""Unicycle dynamics, differentiable rollout and frame transforms.

States are ``[x, y, v, yaw]`` and actions ``[acc, yaw_rate]``.  Integration is
explicit Euler: positions advance with the speed and yaw *before* the update,
speed is clamped at zero, yaw is wrapped to (-pi, pi].
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .tensor import Tensor

DT = 0.1


def wrap(a):
    """Wrap angles to (-pi, pi]; in-range angles come back bit-identical."""
    a = np.asarray(a, dtype=np.float64)
    y = np.mod(a + math.pi, 2.0 * math.pi) - math.pi
    y = np.where(y == -math.pi, math.pi, y)
    return np.where((a > -math.pi) & (a <= math.pi), a, y)


def _step_arrays(x, y, v, yaw, acc, yaw_rate, dt):
    nx = x + v * np.cos(yaw) * dt
    ny = y + v * np.sin(yaw) * dt
    nv = np.maximum(v + acc * dt, 0.0)
    nyaw = wrap(yaw + yaw_rate * dt)
    return nx, ny, nv, nyaw


def step(state, action, dt: float = DT) -> np.ndarray:
    """One transition.  ``state`` is ``[..., 4]`` and ``action`` ``[..., 2]``."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    s = np.asarray(state, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise ValueError("non-finite state or action")
    out = _step_arrays(s[..., 0], s[..., 1], s[..., 2], s[..., 3], a[..., 0], a[..., 1], dt)
    return np.stack(out, axis=-1)


def _rollout_np(s0: np.ndarray, actions: np.ndarray, dt: float):
    """Forward pass; also returns the per-step speed-clamp masks."""
    shape = actions.shape[:-1]
    T = shape[-1]
    x, y, v, yaw = (np.broadcast_to(s0[..., i], shape[:-1]).astype(np.float64) for i in range(4))
    out = np.empty(shape + (4,))
    live = np.empty(shape, dtype=bool)
    for t in range(T):
        live[..., t] = (v + actions[..., t, 0] * dt) > 0
        x, y, v, yaw = _step_arrays(x, y, v, yaw, actions[..., t, 0], actions[..., t, 1], dt)
        out[..., t, 0] = x
        out[..., t, 1] = y
        out[..., t, 2] = v
        out[..., t, 3] = yaw
    return out, live


def rollout(s0, actions, dt: float = DT) -> Tensor:
    """Roll actions ``(B, N, T, 2)`` out from initial states ``(B, 4)``.

    Returns states ``s_1 .. s_T`` with shape ``(B, N, T, 4)``; gradients flow
    from every state back to every earlier action.  Leading dims other than
    ``(B, N)`` work as long as ``s0`` broadcasts against ``actions[..., 0, :]``.
    """
    a = tn.as_tensor(actions)
    s0 = np.asarray(s0.data if isinstance(s0, Tensor) else s0, dtype=np.float64)
    if a.ndim == 4 and s0.ndim == 2:
        s0 = s0[:, None, :]
    if not np.all(np.isfinite(a.data)):
        raise ValueError("non-finite actions in rollout")
    states, live = _rollout_np(s0, a.data, dt)
    T = a.shape[-2]

    def vjp(g):
        prev = np.concatenate(
            [np.broadcast_to(s0[..., None, :], states[..., :1, :].shape), states[..., :-1, :]], axis=-2
        )
        v_prev = prev[..., 2]
        yaw_prev = prev[..., 3]
        ga = np.zeros(a.shape)
        lam = np.zeros(g.shape[:-2] + (4,))
        for t in range(T - 1, -1, -1):
            lam = lam + g[..., t, :]
            lx, ly, lv, lyaw = lam[..., 0], lam[..., 1], lam[..., 2], lam[..., 3]
            c = np.cos(yaw_prev[..., t])
            s = np.sin(yaw_prev[..., t])
            m = live[..., t]
            ga[..., t, 0] = lv * m * dt
            ga[..., t, 1] = lyaw * dt
            vp = v_prev[..., t]
            new = np.empty_like(lam)
            new[..., 0] = lx
            new[..., 1] = ly
            new[..., 2] = (lx * c + ly * s) * dt + lv * m
            new[..., 3] = (-lx * s + ly * c) * vp * dt + lyaw
            lam = new
        return (ga,)

    return tn.record(states, (a,), vjp, "rollout")


def full_trajectory(s0, actions, dt: float = DT) -> Tensor:
    """``[states; actions]`` as the 6-channel block ``[x, y, vel, yaw, acc, yawvel]``."""
    a = tn.as_tensor(actions)
    return tn.concat([rollout(s0, a, dt), a], dim=-1)


def inverse_actions(states, dt: float = DT, return_residual: bool = False):
    """Recover actions from a state sequence ``(B, T+1, 4)``.

    Speed and yaw are reproduced by construction; the returned residual is the
    max position error of re-rolling the actions (> 0.5 m means the sequence
    is not unicycle-feasible).
    """
    s = np.asarray(states, dtype=np.float64)
    acc = (s[..., 1:, 2] - s[..., :-1, 2]) / dt
    yaw_rate = wrap(s[..., 1:, 3] - s[..., :-1, 3]) / dt
    actions = np.stack([acc, yaw_rate], axis=-1)
    if not return_residual:
        return actions
    re, _ = _rollout_np(s[..., 0, :], actions, dt)
    residual = float(np.max(np.linalg.norm(re[..., :2] - s[..., 1:, :2], axis=-1))) if actions.shape[-2] else 0.0
    return actions, residual


def is_unicycle(residual: float) -> bool:
    return residual <= 0.5


def agent_frame_initial(speeds) -> np.ndarray:
    """Initial states in each agent's own frame: ``(0, 0, v, 0)``."""
    v = np.asarray(speeds, dtype=np.float64)
    s0 = np.zeros(v.shape + (4,))
    s0[..., 2] = v
    return s0


def constant_velocity_forecast(scene_or_states, T: int, dt: float = DT) -> np.ndarray:
    """Hold each agent's speed and yaw for ``T`` steps: ``(B, T, 4)`` world states."""
    cur = _current_states(scene_or_states)
    out, _ = _rollout_np(cur, np.zeros(cur.shape[:-1] + (T, 2)), dt)
    return out


def _current_states(src) -> np.ndarray:
    if hasattr(src, "states"):
        return np.asarray(src.states, dtype=np.float64)
    return np.asarray(src, dtype=np.float64)


def _frames(src) -> np.ndarray:
    """Per-agent frame poses ``(B, 3)`` = ``[x, y, yaw]``."""
    if hasattr(src, "frames"):
        return np.asarray(src.frames(), dtype=np.float64)
    arr = np.asarray(src, dtype=np.float64)
    if arr.shape[-1] == 4:
        return arr[..., [0, 1, 3]]
    return arr


def _rotate(px, py, c, s):
    return px * c - py * s, px * s + py * c


def transform_coord_agents_to_world(pos, yaw, scene):
    """Map each agent's ``(B, N, T, 2)`` positions and ``(B, N, T, 1)`` yaws from
    its own frame into the world frame."""
    fr = _frames(scene)
    pos = tn.as_tensor(pos)
    yaw = tn.as_tensor(yaw)
    ext = (slice(None),) + (None,) * (pos.ndim - 1)
    c = np.cos(fr[:, 2])[ext]
    s = np.sin(fr[:, 2])[ext]
    px, py = pos[..., 0:1], pos[..., 1:2]
    wx, wy = _rotate(px, py, c, s)
    wx = wx + fr[:, 0][ext]
    wy = wy + fr[:, 1][ext]
    return tn.concat([wx, wy], dim=-1), tn.wrap_angle(yaw + fr[:, 2][ext])


def transform_coord_world_to_agent_i(pos_world, yaw_world, scene, i: int):
    """Express world positions/yaws in agent ``i``'s frame."""
    fr = _frames(scene)
    if not 0 <= i < len(fr):
        raise IndexError(f"agent index {i} out of range for {len(fr)} agents")
    ox, oy, th = fr[i]
    c, s = math.cos(th), math.sin(th)
    pos_world = tn.as_tensor(pos_world)
    dx = pos_world[..., 0:1] - ox
    dy = pos_world[..., 1:2] - oy
    lx, ly = _rotate(dx, dy, c, -s)
    return tn.concat([lx, ly], dim=-1), tn.wrap_angle(tn.as_tensor(yaw_world) - th)


def transform_coord_world_to_agents(pos_world, yaw_world, scene):
    """Inverse of :func:`transform_coord_agents_to_world`: row ``b`` into agent ``b``'s frame."""
    fr = _frames(scene)
    pos_world = tn.as_tensor(pos_world)
    ext = (slice(None),) + (None,) * (pos_world.ndim - 1)
    c = np.cos(fr[:, 2])[ext]
    s = np.sin(fr[:, 2])[ext]
    dx = pos_world[..., 0:1] - fr[:, 0][ext]
    dy = pos_world[..., 1:2] - fr[:, 1][ext]
    lx, ly = _rotate(dx, dy, c, -s)
    return tn.concat([lx, ly], dim=-1), tn.wrap_angle(tn.as_tensor(yaw_world) - fr[:, 2][ext])


def select_agent_ind(x, i: int):
    """Row ``i`` of a ``(B, ...)`` block; gradients scatter back to that row."""
    x = tn.as_tensor(x)
    if not 0 <= i < x.shape[0]:
        raise IndexError(f"agent index {i} out of range for {x.shape[0]} agents")
    return x[i]


def world_to_frame_np(points, frame) -> np.ndarray:
    """Numpy helper: ``(..., 2)`` world points into a single ``(x, y, yaw)`` frame."""
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(frame[2]), math.sin(frame[2])
    dx = p[..., 0] - frame[0]
    dy = p[..., 1] - frame[1]
    return np.stack([dx * c + dy * s, -dx * s + dy * c], axis=-1)


def frame_to_world_np(points, frame) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(frame[2]), math.sin(frame[2])
    return np.stack([p[..., 0] * c - p[..., 1] * s + frame[0], p[..., 0] * s + p[..., 1] * c + frame[1]], axis=-1)


def states_world_to_agent(states, frames) -> np.ndarray:
    """World states ``(B, ..., 4)`` into each agent's frame (row ``b`` uses frame ``b``)."""
    st = np.asarray(states, dtype=np.float64)
    fr = _frames(frames)
    out = st.copy()
    for b in range(st.shape[0]):
        out[b, ..., :2] = world_to_frame_np(st[b, ..., :2], fr[b])
        out[b, ..., 3] = wrap(st[b, ..., 3] - fr[b, 2])
    return out


def states_agent_to_world(states, frames) -> np.ndarray:
    st = np.asarray(states, dtype=np.float64)
    fr = _frames(frames)
    out = st.copy()
    for b in range(st.shape[0]):
        out[b, ..., :2] = frame_to_world_np(st[b, ..., :2], fr[b])
        out[b, ..., 3] = wrap(st[b, ..., 3] + fr[b, 2])
    return out
