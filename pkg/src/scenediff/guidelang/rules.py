"""Native rule library: hand-written differentiable losses.

Every rule maps an agent-frame ``(B, N, T, 6)`` trajectory tensor to ``(N,)``
or ``(B, N)`` losses.  The first seven mirror the example loss programs
shipped as GuideLang fixtures; the rest encode the quantitative rule set.
"""

from __future__ import annotations

import math

import numpy as np

from .. import dynamics as dyn
from .. import scene as sc
from .. import tensor as tn
from .compiler import decay_weights


def _world(x, scene):
    return dyn.transform_coord_agents_to_world(x[..., 0:2], x[..., 3:4], scene)


def _check_index(i, B, what="agent index"):
    if not 0 <= int(i) < B:
        raise IndexError(f"{what} {i} out of range for B={B}")
    return int(i)


def acc_limit(x, scene, acc_limit=2.0):
    dev = tn.absolute(x[..., 4:5]) - acc_limit
    return tn.mean(tn.clip_min(dev, 0.0), (-2, -1))


def stay_on_left(x, scene, target_ind=20, ref_ind=13, decay_rate=0.9):
    pw, yw = _world(x, scene)
    p_ref, _ = dyn.transform_coord_world_to_agent_i(pw, yw, scene, ref_ind)
    pi = p_ref[target_ind]
    pj = p_ref[ref_ind]
    dev = tn.clip_min(pj[..., 1] - pi[..., 1], 0.0)
    w = decay_weights(decay_rate, x.shape[2])
    return tn.mean(dev * w, -1)


def _pair_distance(x, scene, target_ind, ref_ind):
    pw, _ = _world(x, scene)
    return tn.norm2(pw[target_ind] - pw[ref_ind], -1)


def collision(x, scene, target_ind=1, ref_ind=2, collision_radius=1.0):
    d = _pair_distance(x, scene, target_ind, ref_ind)
    return tn.mean(tn.clip_min(collision_radius - d, 0.0), -1)


def keep_distance(x, scene, target_ind=1, ref_ind=2, min_distance=10.0, max_distance=30.0):
    d = _pair_distance(x, scene, target_ind, ref_ind)
    loss = tn.clip_min(min_distance - d, 0.0) + tn.clip_min(d - max_distance, 0.0)
    return tn.mean(loss, -1)


def same_direction(x, scene, target_ind=1, ref_ind=2, threshold=0.1):
    _, yw = _world(x, scene)
    dev = tn.squeeze(tn.absolute(yw[target_ind] - yw[ref_ind]), -1)
    dev = tn.fmod(dev, 2 * math.pi)
    dev = tn.minimum(dev, 2 * math.pi - dev)
    return tn.mean(tn.clip_min(dev - threshold, 0.0), -1)


def collide_from_behind(x, scene, target_ind=1, ref_ind=2, collision_threshold=1.0):
    """The example program gates with the hard mask ``dist^2 < threshold``; a
    sigmoid of sharpness ``10 / threshold`` replaces it here."""
    pw, yw = _world(x, scene)
    p_ref, _ = dyn.transform_coord_world_to_agent_i(pw, yw, scene, ref_ind)
    dx = p_ref[ref_ind][..., 0] - p_ref[target_ind][..., 0]
    dy = p_ref[ref_ind][..., 1] - p_ref[target_ind][..., 1]
    d2 = dx**2 + dy**2
    gate = tn.sigmoid((collision_threshold - d2) * (10.0 / collision_threshold))
    return tn.mean(gate * tn.clip_min(-dx, 0.0), -1)


def lane_following(x, scene, target_inds=(1, 2, 3)):
    pos, yaw = x[..., 0:2], x[..., 3:4]
    proj = sc.get_current_lane_projection(pos, yaw, scene)
    pos_loss = tn.sum_((pos - proj[..., 0:2]) ** 2, -1)
    yaw_loss = tn.squeeze((yaw - proj[..., 2:3]) ** 2, -1)
    total = pos_loss + yaw_loss
    sel = tn.stack([total[int(i)] for i in target_inds], 0)
    return tn.mean(tn.mean(sel, -1), 0)


def agent_radii(scene) -> np.ndarray:
    """Disc radius per agent: half the footprint length (covers the whole body)."""
    return 0.5 * np.asarray(scene.extents)[:, 0]


def no_collision(x, scene, radii=None):
    """Per agent: sum over the other agents of the disc-overlap depth, mean over time."""
    B = x.shape[0]
    r = agent_radii(scene) if radii is None else np.broadcast_to(np.asarray(radii, dtype=np.float64), (B,))
    pw, _ = _world(x, scene)
    diff = tn.unsqueeze(pw, 1) - tn.unsqueeze(pw, 0)  # (B, B, N, T, 2)
    # avoid the sqrt kink on the zero diagonal
    off = ~np.eye(B, dtype=bool)
    sq = tn.sum_(diff**2, -1) + np.where(off, 0.0, 1.0)[:, :, None, None]
    d = tn.sqrt(sq)
    rr = (r[:, None] + r[None, :])[:, :, None, None]
    overlap = tn.where(off[:, :, None, None], tn.clip_min(rr - d, 0.0), 0.0)
    return tn.mean(tn.sum_(overlap, 1), -1)


def speed_limit(x, scene, vmax=10.0):
    return tn.mean(tn.clip_min(x[..., 2] - vmax, 0.0), -1)


def target_speed(x, scene, target=None):
    """``target`` is a scalar or a per-agent ``(B,)`` array; defaults to the
    goals' speed column when the scene has one."""
    if target is None:
        if scene is None or scene.goals is None:
            raise ValueError("target_speed needs a target or scene goals")
        target = scene.goals[:, 2]
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None, None]
    return tn.mean(tn.absolute(x[..., 2] - t), -1)


def no_offroad(x, scene):
    pw, _ = _world(x, scene)
    return tn.mean(tn.clip_min(sc.offroad_excess(pw, scene), 0.0), -1)


def _soft_min(v, mask=None, temperature=1.0):
    """Log-mean-exp soft minimum over the last dim; lies in [min, min + t*log(count)].
    Rows with an empty mask give 0."""
    T = v.shape[-1]
    count = np.full(v.shape[:-1], float(T)) if mask is None else np.broadcast_to(mask, v.shape).sum(-1).astype(np.float64)
    sm = tn.softmin(v, -1, temperature, mask)
    return sm + temperature * np.log(np.maximum(count, 1.0))


def goal_waypoint(x, scene, goals=None, temperature=1.0):
    if goals is None:
        if scene is None or scene.goals is None:
            raise ValueError("goal_waypoint needs goals")
        goals = scene.goals[:, :2]
    g = np.asarray(goals, dtype=np.float64)[:, None, None, :2]
    pw, _ = _world(x, scene)
    d2 = tn.sum_((pw - g) ** 2, -1)
    return _soft_min(d2, None, temperature)


def stop_region(x, scene, region=None, temperature=1.0):
    """Soft-min over in-region timesteps of ``v^2``; agents never inside get 0."""
    if region is None:
        if scene is None or scene.stop_region is None:
            raise ValueError("stop_region needs a region")
        region = scene.stop_region
    xmin, ymin, xmax, ymax = (float(v) for v in region)
    pw, _ = _world(x, scene)
    px, py = pw.data[..., 0], pw.data[..., 1]
    inside = (px >= xmin) & (px <= xmax) & (py >= ymin) & (py <= ymax)
    v2 = x[..., 2] ** 2
    return _soft_min(v2, inside, temperature)


RULES = {
    "acc_limit": acc_limit,
    "stay_on_left": stay_on_left,
    "collision": collision,
    "keep_distance": keep_distance,
    "same_direction": same_direction,
    "collide_from_behind": collide_from_behind,
    "lane_following": lane_following,
    "no_collision": no_collision,
    "speed_limit": speed_limit,
    "target_speed": target_speed,
    "no_offroad": no_offroad,
    "goal_waypoint": goal_waypoint,
    "stop_region": stop_region,
}

_INDEX_PARAMS = ("target_ind", "ref_ind")


class Rule:
    """A native rule bound to parameters and a scene; same call contract as a
    compiled program."""

    def __init__(self, kind: str, scene=None, **params):
        if kind not in RULES:
            raise ValueError(f"unknown rule {kind!r}; known rules: {', '.join(RULES)}")
        self.kind = kind
        self.fn = RULES[kind]
        self.params = params
        self.scene = scene
        for k, v in params.items():
            if k in ("collision_radius", "collision_threshold", "temperature") and not v > 0:
                raise ValueError(f"{k} must be positive, got {v}")
        if scene is not None:
            self.validate(scene.num_agents)

    @property
    def name(self) -> str:
        return self.kind

    def validate(self, B: int):
        for k in _INDEX_PARAMS:
            if k in self.params:
                _check_index(self.params[k], B, k)
        for i in self.params.get("target_inds", ()):
            _check_index(i, B, "target_inds entry")

    def rebind(self, scene) -> "Rule":
        return Rule(self.kind, scene, **self.params)

    def __call__(self, x):
        x = tn.as_tensor(x)
        self.validate(x.shape[0])
        return self.fn(x, self.scene, **self.params)


def rule(kind: str, scene=None, **params) -> Rule:
    return Rule(kind, scene, **params)
