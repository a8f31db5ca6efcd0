"""Scene data model, lane geometry queries and scene JSON I/O.

Scene file schema (``version`` 1), all lengths in meters, angles in radians,
speeds in m/s::

    {
      "version": 1,
      "name": "scene-0001",                 # optional
      "dt": 0.1,
      "lanes": [{"id": 0, "waypoints": [[x, y, heading], ...],
                 "half_width": 1.75, "left_id": null, "right_id": 1}],
      "agents": [{"state": [x, y, v, yaw], "length": 4.0, "width": 2.0}],
      "history": [[[x, y, v, yaw], ...], ...],   # per agent, oldest first
      "expert": {"states": [...], "actions": [...]},   # optional future
      "goals": [[x, y, target_speed], ...],          # optional
      "stop_region": [xmin, ymin, xmax, ymax]         # optional
    }

The drivable area is the union of lane corridors (centerline +- half_width).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import tensor as tn
from .tensor import Tensor

SCHEMA_VERSION = 1
OFF_MAP_THRESHOLD = 50.0
DEFAULT_LENGTH = 4.0
DEFAULT_WIDTH = 2.0


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    v: float
    yaw: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.yaw])


@dataclass(frozen=True)
class Action:
    acc: float
    yaw_rate: float


class Lane:
    """Piecewise-linear centerline with per-waypoint headings."""

    def __init__(self, id, waypoints, half_width: float, left_id=None, right_id=None):
        wp = np.asarray(waypoints, dtype=np.float64)
        if wp.ndim != 2 or wp.shape[1] != 3 or len(wp) < 2:
            raise SchemaError(f"lane {id}: waypoints must be >= 2 (x, y, heading) triples")
        seg = wp[1:, :2] - wp[:-1, :2]
        seglen = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seglen == 0):
            raise SchemaError(f"lane {id}: consecutive waypoints must be distinct")
        if half_width <= 0:
            raise SchemaError(f"lane {id}: half_width must be positive")
        self.id = int(id)
        self.waypoints = wp.copy()
        self.waypoints[:, 2] = dyn.wrap(self.waypoints[:, 2])
        self.half_width = float(half_width)
        self.left_id = None if left_id is None else int(left_id)
        self.right_id = None if right_id is None else int(right_id)
        self._a = wp[:-1, :2]
        self._d = seg
        self._len2 = seglen**2
        self._s = np.concatenate([[0.0], np.cumsum(seglen)])
        self._dh = dyn.wrap(self.waypoints[1:, 2] - self.waypoints[:-1, 2])

    @property
    def length(self) -> float:
        return float(self._s[-1])

    def __eq__(self, other):
        return (
            isinstance(other, Lane)
            and self.id == other.id
            and np.array_equal(self.waypoints, other.waypoints)
            and self.half_width == other.half_width
            and self.left_id == other.left_id
            and self.right_id == other.right_id
        )

    def nearest(self, points):
        """Closest centerline point for each of ``(..., 2)`` points.

        Returns ``(segment index, t in [0, 1], distance)``.
        """
        p = np.asarray(points, dtype=np.float64)
        flat = p.reshape(-1, 2)
        rel = flat[:, None, :] - self._a[None]
        t = np.clip((rel * self._d[None]).sum(-1) / self._len2[None], 0.0, 1.0)
        proj = self._a[None] + t[..., None] * self._d[None]
        d2 = ((flat[:, None, :] - proj) ** 2).sum(-1)
        seg = np.argmin(d2, axis=1)
        rows = np.arange(len(flat))
        shape = p.shape[:-1]
        return seg.reshape(shape), t[rows, seg].reshape(shape), np.sqrt(d2[rows, seg]).reshape(shape)

    def heading_at(self, seg, t) -> np.ndarray:
        return dyn.wrap(self.waypoints[seg, 2] + t * self._dh[seg])

    def arclength(self, seg, t) -> np.ndarray:
        return self._s[seg] + t * np.sqrt(self._len2[seg])

    def point_at(self, s) -> np.ndarray:
        """``(x, y, heading)`` at arc lengths ``s`` (clamped to the lane)."""
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.length)
        seg = np.clip(np.searchsorted(self._s, s, side="right") - 1, 0, len(self._d) - 1)
        t = (s - self._s[seg]) / np.sqrt(self._len2[seg])
        xy = self._a[seg] + t[..., None] * self._d[seg]
        return np.concatenate([xy, self.heading_at(seg, t)[..., None]], axis=-1)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "waypoints": self.waypoints.tolist(),
            "half_width": self.half_width,
            "left_id": self.left_id,
            "right_id": self.right_id,
        }


@dataclass
class Scene:
    """Conditioning context: map lanes, current agent states, footprints, history."""

    lanes: list
    states: np.ndarray  # (M, 4) world [x, y, v, yaw]
    extents: np.ndarray  # (M, 2) [length, width]
    history: np.ndarray  # (M, T_hist, 4) oldest first, excludes the current state
    dt: float = dyn.DT
    name: str = "scene"
    expert_states: np.ndarray | None = None  # (M, Tf, 4) ground-truth future s_1..s_Tf
    expert_actions: np.ndarray | None = None  # (M, Tf, 2)
    goals: np.ndarray | None = None  # (M, 3) [x, y, target_speed]
    stop_region: np.ndarray | None = None  # [xmin, ymin, xmax, ymax]
    _lane_index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64).reshape(-1, 4)
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(-1, 2)
        self.history = np.asarray(self.history, dtype=np.float64).reshape(len(self.states), -1, 4)
        if self.dt <= 0:
            raise SchemaError("dt must be positive")
        if len(self.states) < 1:
            raise SchemaError("a scene needs at least one agent")
        if len(self.extents) != len(self.states):
            raise SchemaError("extents must have one row per agent")
        self._lane_index = {lane.id: lane for lane in self.lanes}

    @property
    def num_agents(self) -> int:
        return len(self.states)

    @property
    def t_hist(self) -> int:
        return self.history.shape[1]

    def frames(self) -> np.ndarray:
        return self.states[:, [0, 1, 3]]

    def lane(self, lane_id):
        return self._lane_index.get(lane_id)

    def past_and_current(self) -> np.ndarray:
        """``(M, T_hist + 1, 4)`` history followed by the current state."""
        return np.concatenate([self.history, self.states[:, None]], axis=1)

    def replace(self, **kw) -> "Scene":
        base = dict(
            lanes=self.lanes, states=self.states, extents=self.extents, history=self.history,
            dt=self.dt, name=self.name, expert_states=self.expert_states,
            expert_actions=self.expert_actions, goals=self.goals, stop_region=self.stop_region,
        )
        base.update(kw)
        return Scene(**base)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(np.asarray(a), np.asarray(b))

        return (
            self.lanes == other.lanes
            and same(self.states, other.states)
            and same(self.extents, other.extents)
            and same(self.history, other.history)
            and self.dt == other.dt
            and self.name == other.name
            and same(self.expert_states, other.expert_states)
            and same(self.expert_actions, other.expert_actions)
            and same(self.goals, other.goals)
            and same(self.stop_region, other.stop_region)
        )


# ---------------------------------------------------------------- I/O

def scene_to_dict(scene: Scene) -> dict:
    d = {
        "version": SCHEMA_VERSION,
        "name": scene.name,
        "dt": scene.dt,
        "lanes": [lane.to_dict() for lane in scene.lanes],
        "agents": [
            {"state": s.tolist(), "length": float(e[0]), "width": float(e[1])}
            for s, e in zip(scene.states, scene.extents)
        ],
        "history": scene.history.tolist(),
    }
    if scene.expert_states is not None:
        d["expert"] = {
            "states": np.asarray(scene.expert_states).tolist(),
            "actions": None if scene.expert_actions is None else np.asarray(scene.expert_actions).tolist(),
        }
    if scene.goals is not None:
        d["goals"] = np.asarray(scene.goals).tolist()
    if scene.stop_region is not None:
        d["stop_region"] = np.asarray(scene.stop_region).tolist()
    return d


def _require(d: dict, key: str, where: str = "scene"):
    if key not in d:
        raise SchemaError(f"{where}: missing required field '{key}'")
    return d[key]


def scene_from_dict(d: dict) -> Scene:
    if not isinstance(d, dict):
        raise SchemaError("scene: top level must be an object")
    version = _require(d, "version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"scene: unsupported field 'version' = {version!r}")
    dt = _require(d, "dt")
    if not isinstance(dt, (int, float)) or dt <= 0:
        raise SchemaError("scene: field 'dt' must be a positive number")
    lanes = []
    for n, ld in enumerate(_require(d, "lanes")):
        where = f"lanes[{n}]"
        lanes.append(
            Lane(
                _require(ld, "id", where),
                _require(ld, "waypoints", where),
                _require(ld, "half_width", where),
                ld.get("left_id"),
                ld.get("right_id"),
            )
        )
    agents = _require(d, "agents")
    if not agents:
        raise SchemaError("scene: field 'agents' must list at least one agent")
    states, extents = [], []
    for n, ad in enumerate(agents):
        st = _require(ad, "state", f"agents[{n}]")
        if len(st) != 4:
            raise SchemaError(f"agents[{n}]: field 'state' must be [x, y, v, yaw]")
        states.append(st)
        extents.append([ad.get("length", DEFAULT_LENGTH), ad.get("width", DEFAULT_WIDTH)])
    history = _require(d, "history")
    if len(history) != len(agents):
        raise SchemaError("scene: field 'history' must have one entry per agent")
    lengths = {len(h) for h in history}
    if len(lengths) > 1:
        raise SchemaError("scene: field 'history' entries must have equal length")
    hist = np.asarray(history, dtype=np.float64).reshape(len(agents), lengths.pop() if lengths else 0, 4)
    expert = d.get("expert")
    es = ea = None
    if expert is not None:
        es = np.asarray(_require(expert, "states", "expert"), dtype=np.float64)
        if expert.get("actions") is not None:
            ea = np.asarray(expert["actions"], dtype=np.float64)
    goals = None if d.get("goals") is None else np.asarray(d["goals"], dtype=np.float64)
    stop = None if d.get("stop_region") is None else np.asarray(d["stop_region"], dtype=np.float64)
    return Scene(
        lanes=lanes, states=np.asarray(states, dtype=np.float64), extents=np.asarray(extents, dtype=np.float64),
        history=hist, dt=float(dt), name=str(d.get("name", "scene")), expert_states=es, expert_actions=ea,
        goals=goals, stop_region=stop,
    )


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)), encoding="utf-8")


def load_scene(path) -> Scene:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    return scene_from_dict(d)


# ---------------------------------------------------------------- map queries

def current_lane(scene: Scene, agent: int, threshold: float = OFF_MAP_THRESHOLD, tol: float = 1e-6):
    """Lane id minimizing (centerline distance, heading difference), or None off-map."""
    x, y, _, yaw = scene.states[agent]
    best = None
    for lane in scene.lanes:
        seg, t, dist = lane.nearest(np.array([x, y]))
        dh = abs(float(dyn.wrap(yaw - lane.heading_at(seg, t))))
        key = (float(dist), dh)
        if best is None or key[0] < best[0][0] - tol or (abs(key[0] - best[0][0]) <= tol and key[1] < best[0][1]):
            best = (key, lane.id)
    if best is None or best[0][0] > threshold:
        return None
    return best[1]


def lane_for(scene: Scene, agent: int, kind: str):
    """Lane object for ``kind`` in {current, left, right}, or None."""
    cur = scene.lane(current_lane(scene, agent))
    if cur is None or kind == "current":
        return cur
    if kind == "left":
        return scene.lane(cur.left_id)
    if kind == "right":
        return scene.lane(cur.right_id)
    raise ValueError(f"unknown lane kind {kind!r}")


def _project_world(pos_w: Tensor, lane: Lane):
    """Differentiable projection of world points ``(..., 2)`` onto a lane.

    The nearest segment is chosen numerically; the position along it is
    differentiable.  Returns ``(proj_xy, heading)`` tensors.
    """
    seg, _, _ = lane.nearest(pos_w.data)
    a = lane._a[seg]
    d = lane._d[seg]
    t = tn.sum_((pos_w - a) * d, -1, keepdims=True) / lane._len2[seg][..., None]
    t = tn.clip(t, 0.0, 1.0)
    proj = a + t * d
    heading = tn.wrap_angle(lane.waypoints[seg, 2][..., None] + t * lane._dh[seg][..., None])
    return proj, heading


def lane_projection(kind: str, pos_pred, yaw_pred, scene: Scene, return_flags: bool = False):
    """Project each agent's ``(B, N, T, 2)`` agent-frame trajectory onto its
    current (or left/right neighbor) lane.

    Returns ``(B, N, T, 3)`` = ``(x, y, yaw)`` in each agent's own frame.  When
    the requested lane does not exist the input position and yaw are echoed;
    ``return_flags`` adds a per-agent bool array marking those fallbacks.
    """
    pos_pred = tn.as_tensor(pos_pred)
    yaw_pred = tn.as_tensor(yaw_pred)
    pos_w, yaw_w = dyn.transform_coord_agents_to_world(pos_pred, yaw_pred, scene)
    fr = scene.frames()
    rows = []
    fallback = np.zeros(pos_pred.shape[0], dtype=bool)
    for b in range(pos_pred.shape[0]):
        lane = lane_for(scene, b, kind)
        if lane is None:
            fallback[b] = True
            rows.append(tn.concat([pos_pred[b], yaw_pred[b]], dim=-1))
            continue
        proj, heading = _project_world(pos_w[b], lane)
        c, s = math.cos(fr[b, 2]), math.sin(fr[b, 2])
        dx = proj[..., 0:1] - fr[b, 0]
        dy = proj[..., 1:2] - fr[b, 1]
        lx = dx * c + dy * s
        ly = dy * c - dx * s
        rows.append(tn.concat([lx, ly, tn.wrap_angle(heading - fr[b, 2])], dim=-1))
    out = tn.stack(rows, 0)
    return (out, fallback) if return_flags else out


def get_current_lane_projection(pos_pred, yaw_pred, scene):
    return lane_projection("current", pos_pred, yaw_pred, scene)


def get_left_lane_projection(pos_pred, yaw_pred, scene):
    return lane_projection("left", pos_pred, yaw_pred, scene)


def get_right_lane_projection(pos_pred, yaw_pred, scene):
    return lane_projection("right", pos_pred, yaw_pred, scene)


def centerline_distances(points, scene: Scene) -> np.ndarray:
    """``(L, ...)`` distance from each point to each lane centerline."""
    p = np.asarray(points, dtype=np.float64)
    return np.stack([lane.nearest(p)[2] for lane in scene.lanes], axis=0)


def offroad_test(x, y, scene: Scene) -> np.ndarray:
    """True where a point lies outside every lane corridor."""
    pts = np.stack(np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)), axis=-1)
    if not scene.lanes:
        return np.ones(pts.shape[:-1], dtype=bool)
    d = centerline_distances(pts, scene)
    hw = np.array([lane.half_width for lane in scene.lanes]).reshape((-1,) + (1,) * (d.ndim - 1))
    return np.all(d > hw, axis=0)


def offroad_excess(pos_w, scene: Scene) -> Tensor:
    """Differentiable ``min_lane(dist - half_width)`` for world points ``(..., 2)``."""
    pos_w = tn.as_tensor(pos_w)
    if not scene.lanes:
        raise ValueError("scene has no lanes")
    d = centerline_distances(pos_w.data, scene)
    hw = np.array([lane.half_width for lane in scene.lanes]).reshape((-1,) + (1,) * (d.ndim - 1))
    best = np.argmin(d - hw, axis=0)
    out = None
    for li, lane in enumerate(scene.lanes):
        sel = best == li
        if not np.any(sel):
            continue
        proj, _ = _project_world(pos_w, lane)
        dist = tn.norm2(pos_w - proj, -1) - lane.half_width
        out = tn.where(sel, dist, 0.0) if out is None else tn.where(sel, dist, out)
    return out


def lane_window(lane: Lane, pos, num_points: int = 16, back: float = 20.0, ahead: float = 60.0) -> np.ndarray:
    """``num_points`` world ``(x, y, heading)`` samples around the point of ``lane``
    nearest to ``pos``."""
    seg, t, _ = lane.nearest(np.asarray(pos, dtype=np.float64))
    s0 = float(lane.arclength(seg, t))
    lo = max(0.0, s0 - back)
    hi = min(lane.length, s0 + ahead)
    return lane.point_at(np.linspace(lo, hi, num_points))


def transform_scene(scene: Scene, dx: float, dy: float, dtheta: float) -> Scene:
    """Rigidly move the whole world (rotation about the origin, then translation)."""
    c, s = math.cos(dtheta), math.sin(dtheta)

    def pts(a):
        a = np.asarray(a, dtype=np.float64)
        return np.stack([a[..., 0] * c - a[..., 1] * s + dx, a[..., 0] * s + a[..., 1] * c + dy], -1)

    def sts(a):
        if a is None:
            return None
        out = np.array(a, dtype=np.float64)
        out[..., :2] = pts(out[..., :2])
        out[..., 3] = dyn.wrap(out[..., 3] + dtheta)
        return out

    lanes = []
    for lane in scene.lanes:
        wp = lane.waypoints.copy()
        wp[:, :2] = pts(wp[:, :2])
        wp[:, 2] = dyn.wrap(wp[:, 2] + dtheta)
        lanes.append(Lane(lane.id, wp, lane.half_width, lane.left_id, lane.right_id))
    goals = None
    if scene.goals is not None:
        goals = np.array(scene.goals, dtype=np.float64)
        goals[:, :2] = pts(goals[:, :2])
    return scene.replace(
        lanes=lanes, states=sts(scene.states), history=sts(scene.history),
        expert_states=sts(scene.expert_states), goals=goals, stop_region=None,
    )
