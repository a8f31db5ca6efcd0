"""Synthetic driving data and the closed-loop simulation protocol.

Maps are straight roads, circular arcs or a two-lane merge.  The expert is
IDM car following along the assigned lane with pure-pursuit steering, run
directly in the unicycle action space so expert states are exact rollouts of
their actions.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import denoiser as den
from . import diffusion as dif
from . import dynamics as dyn
from . import guidance as gd
from . import metrics as mt
from . import scene as sc
from . import tensor as tn

T_HIST = 10
LENGTH, WIDTH = 4.5, 1.9


@dataclass(frozen=True)
class MapSpec:
    kind: str = "straight"  # straight | arc | merge
    lanes: int = 2
    half_width: float = 1.75
    length: float = 300.0
    radius: float = 80.0

    def __post_init__(self):
        if self.kind not in ("straight", "arc", "merge"):
            raise ValueError(f"unknown map kind {self.kind!r}")
        if self.lanes < 1 or self.half_width <= 0 or self.length <= 0 or self.radius <= 0:
            raise ValueError("map lanes, half_width, length and radius must be positive")
        if self.kind == "arc" and self.radius - (self.lanes - 0.5) * 2 * self.half_width <= 0:
            raise ValueError("arc radius too small for the number of lanes")


@dataclass(frozen=True)
class ExpertConfig:
    desired_speed: tuple = (8.0, 14.0)  # sampled per agent
    headway: float = 1.5
    min_gap: float = 2.0
    max_accel: float = 1.5
    comfort_decel: float = 2.0
    max_decel: float = 6.0
    lookahead: float = 1.0  # seconds of travel, floored at min_lookahead
    min_lookahead: float = 6.0
    max_yaw_rate: float = 0.6
    delta: float = 4.0

    def __post_init__(self):
        vals = (self.headway, self.min_gap, self.max_accel, self.comfort_decel, self.max_decel, self.lookahead)
        if min(vals) <= 0 or min(self.desired_speed) <= 0:
            raise ValueError("expert parameters must be positive")


# ---------------------------------------------------------------- maps

def _polyline_lane(lid, xy, hw, left=None, right=None):
    d = np.diff(xy, axis=0)
    h = np.arctan2(d[:, 1], d[:, 0])
    h = np.append(h, h[-1])
    return sc.Lane(lid, np.c_[xy, h], hw, left, right)


def gen_map(spec: MapSpec, seed: int = 0) -> list:
    """Lanes for ``spec``.  Lane 0 is the rightmost; ``left_id`` points to the
    next lane over.  The seed rotates and shifts the whole map."""
    rng = dif.make_rng(seed, 7)
    w = 2 * spec.half_width
    lanes = []
    if spec.kind == "straight":
        xs = np.linspace(0.0, spec.length, int(spec.length // 5) + 1)
        for i in range(spec.lanes):
            xy = np.c_[xs, np.full_like(xs, i * w)]
            lanes.append(sc.Lane(i, np.c_[xy, np.zeros_like(xs)], spec.half_width))
    elif spec.kind == "arc":
        # counter-clockwise; the rightmost lane has the largest radius
        span = spec.length / spec.radius
        th = np.linspace(-math.pi / 2, -math.pi / 2 + span, int(spec.length // 4) + 1)
        for i in range(spec.lanes):
            r = spec.radius - i * w
            xy = np.c_[r * np.cos(th), r * np.sin(th) + spec.radius]
            lanes.append(sc.Lane(i, np.c_[xy, th + math.pi / 2], spec.half_width))
    else:
        xs = np.linspace(0.0, spec.length, int(spec.length // 5) + 1)
        for i in range(spec.lanes):
            xy = np.c_[xs, np.full_like(xs, i * w)]
            lanes.append(sc.Lane(i, np.c_[xy, np.zeros_like(xs)], spec.half_width))
        # on-ramp joining the rightmost lane with a cosine blend, then sharing it
        m0, m1 = 0.3 * spec.length, 0.5 * spec.length
        off = -2.5 * w
        y = np.where(xs < m0, off, np.where(xs > m1, 0.0, off * 0.5 * (1 + np.cos(math.pi * (xs - m0) / (m1 - m0)))))
        lanes.append(_polyline_lane(spec.lanes, np.c_[xs, y], spec.half_width))
    for i in range(spec.lanes):
        lanes[i].left_id = i + 1 if i + 1 < spec.lanes else None
        lanes[i].right_id = i - 1 if i > 0 else None
    # random rigid placement of the whole map
    th, dx, dy = rng.uniform(-math.pi, math.pi), rng.uniform(-50, 50), rng.uniform(-50, 50)
    return [_move_lane(l, dx, dy, th) for l in lanes]


def _move_lane(lane, dx, dy, th):
    c, s = math.cos(th), math.sin(th)
    wp = lane.waypoints
    x = wp[:, 0] * c - wp[:, 1] * s + dx
    y = wp[:, 0] * s + wp[:, 1] * c + dy
    return sc.Lane(lane.id, np.c_[x, y, wp[:, 2] + th], lane.half_width, lane.left_id, lane.right_id)


# ---------------------------------------------------------------- expert

def idm_accel(v, v0, gap, dv, cfg: ExpertConfig):
    """IDM acceleration; ``dv = v - v_leader``, ``gap`` bumper to bumper."""
    s_star = cfg.min_gap + np.maximum(0.0, v * cfg.headway + v * dv / (2 * math.sqrt(cfg.max_accel * cfg.comfort_decel)))
    return cfg.max_accel * (1 - (v / v0) ** cfg.delta - (s_star / np.maximum(gap, 0.1)) ** 2)


def _leaders(states, extents):
    """For each agent the nearest agent ahead in its lane band: (index, gap)."""
    M = len(states)
    lead = np.full(M, -1)
    gap = np.full(M, np.inf)
    for i in range(M):
        c, s = math.cos(states[i, 3]), math.sin(states[i, 3])
        for j in range(M):
            if i == j:
                continue
            dx, dy = states[j, 0] - states[i, 0], states[j, 1] - states[i, 1]
            lon, lat = dx * c + dy * s, -dx * s + dy * c
            if lon <= 0 or abs(lat) > 0.5 * (extents[i, 1] + extents[j, 1]) + 0.6:
                continue
            g = lon - 0.5 * (extents[i, 0] + extents[j, 0])
            if g < gap[i]:
                lead[i], gap[i] = j, g
    return lead, gap


def expert_actions(states, extents, lanes, v0, cfg: ExpertConfig, dt: float):
    """One control step for all agents: ``(M, 2)`` actions."""
    lead, gap = _leaders(states, extents)
    M = len(states)
    out = np.zeros((M, 2))
    for i in range(M):
        v = states[i, 2]
        if lead[i] >= 0:
            a = idm_accel(v, v0[i], gap[i], v - states[lead[i], 2], cfg)
        else:
            a = idm_accel(v, v0[i], np.inf, 0.0, cfg)
        # never drive the speed below zero within the step
        a = float(np.clip(a, max(-cfg.max_decel, -v / dt), cfg.max_accel))
        lane = lanes[i]
        seg, t, _ = lane.nearest(states[i, :2])
        ld = max(cfg.min_lookahead, cfg.lookahead * v)
        tx, ty, _ = lane.point_at(lane.arclength(seg, t) + ld)
        dx, dy = tx - states[i, 0], ty - states[i, 1]
        alpha = dyn.wrap(math.atan2(dy, dx) - states[i, 3])
        w = 2 * max(v, 0.5) * math.sin(alpha) / math.hypot(dx, dy)
        out[i] = a, float(np.clip(w, -cfg.max_yaw_rate, cfg.max_yaw_rate))
    return out


def run_expert(s0, extents, lanes, v0, cfg: ExpertConfig, steps: int, dt: float):
    """Simulate ``steps`` expert steps: states ``(M, steps+1, 4)`` and actions."""
    M = len(s0)
    states = np.zeros((M, steps + 1, 4))
    actions = np.zeros((M, steps, 2))
    states[:, 0] = s0
    for t in range(steps):
        a = expert_actions(states[:, t], extents, lanes, v0, cfg, dt)
        actions[:, t] = a
        states[:, t + 1] = dyn.step(states[:, t], a, dt)
    return states, actions


@dataclass
class ExpertRun:
    """A full expert episode; ``scene_at`` cuts conditioning windows from it."""

    lanes: list
    states: np.ndarray  # (M, S+1, 4)
    actions: np.ndarray  # (M, S, 2)
    extents: np.ndarray
    dt: float
    name: str
    v0: np.ndarray

    @property
    def steps(self) -> int:
        return self.actions.shape[1]

    def scene_at(self, t: int, t_hist: int = T_HIST, horizon: int | None = None, name: str | None = None) -> sc.Scene:
        """Scene whose current state is step ``t``; history padded by repeating step 0."""
        idx = np.clip(np.arange(t - t_hist, t), 0, None)
        future = self.states[:, t + 1 :] if horizon is None else self.states[:, t + 1 : t + 1 + horizon]
        fa = self.actions[:, t:] if horizon is None else self.actions[:, t : t + horizon]
        cur = self.states[:, t]
        goals = np.c_[future[:, -1, :2], 0.5 * cur[:, 2]] if future.shape[1] else None
        return sc.Scene(
            lanes=self.lanes, states=cur, extents=self.extents, history=self.states[:, idx], dt=self.dt,
            name=name or f"{self.name}@{t}", expert_states=future, expert_actions=fa, goals=goals,
            stop_region=_stop_region(self.lanes[0], cur),
        )


def _stop_region(lane, cur):
    """Axis-aligned box around the rightmost lane, 25 m ahead of the mean position."""
    seg, t, _ = lane.nearest(cur[:, :2].mean(0))
    x, y, _ = lane.point_at(lane.arclength(seg, t) + 25.0)
    r = 2 * lane.half_width
    return np.array([x - r, y - r, x + r, y + r])


def _place(lanes, M, rng, cfg: ExpertConfig, spacing: float):
    """Initial states on lane centerlines with enough longitudinal spacing."""
    # ramp lane (merge maps) counts as a lane too
    choice = rng.integers(0, len(lanes), size=M)
    s_pos = np.zeros(M)
    for lid in range(len(lanes)):
        idx = np.flatnonzero(choice == lid)
        if not len(idx):
            continue
        L = lanes[lid].length
        lo, hi = 0.05 * L, 0.45 * L
        need = (len(idx) - 1) * spacing
        if hi - lo < need:
            return None
        slack = (hi - lo) - need
        cuts = np.sort(rng.uniform(0, slack, size=len(idx)))
        s_pos[idx] = lo + cuts + np.arange(len(idx)) * spacing
    v0 = rng.uniform(*cfg.desired_speed, size=M)
    speeds = v0 * rng.uniform(0.6, 1.0, size=M)
    states = np.zeros((M, 4))
    for i in range(M):
        x, y, h = lanes[choice[i]].point_at(s_pos[i])
        states[i] = x, y, speeds[i], h
    return states, v0, [lanes[c] for c in choice]


def gen_scene(lanes, M: int, expert: ExpertConfig | None = None, duration: float = 12.0, seed: int = 0,
              dt: float = dyn.DT, t_hist: int = T_HIST, name: str | None = None, tries: int = 10):
    """Place ``M`` agents and run the expert for ``t_hist`` history steps plus
    ``duration`` seconds.  Returns ``(scene, run)`` where ``scene`` sits at the
    end of the history window and carries the whole expert future.

    Placements that collide or leave the road are re-drawn up to ``tries`` times.
    """
    cfg = expert or ExpertConfig()
    extents = np.tile([LENGTH, WIDTH], (M, 1))
    steps = t_hist + int(round(duration / dt))
    spacing = LENGTH + cfg.min_gap + 8.0
    for attempt in range(tries):
        rng = dif.make_rng(seed, M, attempt)
        placed = _place(lanes, M, rng, cfg, spacing)
        if placed is None:
            continue
        s0, v0, own = placed
        states, actions = run_expert(s0, extents, own, v0, cfg, steps, dt)
        probe = sc.Scene(lanes, s0, extents, np.repeat(s0[:, None], 1, 1), dt)
        if mt.collision_events(states, extents).agent.any() or mt.offroad_events(states, probe).any():
            continue
        run = ExpertRun(lanes, states, actions, extents, dt, name or f"scene-{seed}", v0)
        return run.scene_at(t_hist, name=run.name), run
    raise RuntimeError(f"could not place {M} agents without conflicts after {tries} tries")


# ---------------------------------------------------------------- datasets

MAP_KINDS = (MapSpec("straight", 2), MapSpec("arc", 2), MapSpec("merge", 1))


@dataclass
class DatasetConfig:
    n_scenes: int = 500
    agents: tuple = (2, 6)
    duration: float = 12.0
    seed: int = 0
    val_fraction: float = 0.2
    specs: tuple = MAP_KINDS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["specs"] = [asdict(s) for s in self.specs]
        return d


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def gen_dataset(out_dir, config: DatasetConfig | None = None) -> dict:
    """Write ``n_scenes`` scene files plus ``manifest.json``; the split is
    decided by the scene file hash."""
    cfg = config or DatasetConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for n in range(cfg.n_scenes):
        rng = dif.make_rng(cfg.seed, n)
        spec = cfg.specs[n % len(cfg.specs)]
        lanes = gen_map(spec, seed=int(rng.integers(2**31)))
        M = int(rng.integers(cfg.agents[0], cfg.agents[1] + 1))
        name = f"scene-{n:04d}"
        scene, _ = gen_scene(lanes, M, duration=cfg.duration, seed=int(rng.integers(2**31)), name=name)
        path = out / f"{name}.json"
        sc.save_scene(scene, path)
        h = file_hash(path)
        split = "val" if int(h[:8], 16) / 16**8 < cfg.val_fraction else "train"
        entries.append({"file": path.name, "sha256": h, "split": split, "map": spec.kind, "agents": M})
    manifest = {"version": 1, "config": cfg.to_dict(), "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


class DatasetError(RuntimeError):
    pass


def load_dataset(root, split: str | None = None, verify: bool = True) -> list:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{root}: no manifest.json")
    manifest = json.loads(mpath.read_text())
    scenes = []
    for e in manifest["scenes"]:
        if split is not None and e["split"] != split:
            continue
        path = root / e["file"]
        if verify and file_hash(path) != e["sha256"]:
            raise DatasetError(f"{path}: hash mismatch")
        scenes.append(sc.load_scene(path))
    return scenes


def training_windows(scene: sc.Scene, T: int = 20, stride: int = 20, t_hist: int = T_HIST) -> list:
    """Scenes cut along the expert future of ``scene``: the original window
    plus one every ``stride`` steps while ``T`` future steps remain."""
    es, ea = scene.expert_states, scene.expert_actions
    if es is None or ea is None:
        raise ValueError(f"{scene.name}: no expert future")
    full = np.concatenate([scene.history, scene.states[:, None], es], axis=1)
    acts = np.concatenate([np.zeros(scene.history.shape[:2] + (2,)), ea], axis=1)
    h = scene.history.shape[1]
    run = ExpertRun(scene.lanes, full, acts, scene.extents, scene.dt, scene.name, np.zeros(len(full)))
    out = []
    t = h
    while t + T <= run.steps:
        out.append(run.scene_at(t, t_hist, T))
        t += stride
    return out


def training_examples(scenes, dims: den.DenoiserDims, stride: int = 20) -> list:
    """:class:`~scenediff.diffusion.TrainExample` for every window of every scene."""
    out = []
    for s in scenes:
        for w in training_windows(s, dims.T, stride, dims.t_hist):
            out.append(dif.TrainExample(den.build_context(w, dims), w.expert_actions[:, : dims.T]))
    return out


# ---------------------------------------------------------------- pair selection

PAIR_ANGLE = {"collision": 108.0, "keep_distance": 36.0}


def select_pair(scene: sc.Scene, rule_kind: str, horizon_steps: int = 20, min_speed: float = 2.0,
                dist_range=(10.0, 30.0)):
    """Qualifying pair ``(A, B)`` with the smallest current distance, else None.

    Both agents move faster than ``min_speed``; at 0 s and 2 s their distance
    lies in ``dist_range`` and their heading difference is below the kind's
    threshold.
    """
    if rule_kind not in PAIR_ANGLE:
        raise ValueError(f"unknown rule kind {rule_kind!r}")
    es = scene.expert_states
    if es is None or es.shape[1] < horizon_steps:
        raise ValueError(f"{scene.name}: pair selection needs {horizon_steps} future steps")
    now, later = scene.states, es[:, horizon_steps - 1]
    ang = math.radians(PAIR_ANGLE[rule_kind])
    M = len(now)
    moving = now[:, 2] > min_speed
    best = None
    for i in range(M):
        for j in range(i + 1, M):
            if not (moving[i] and moving[j]):
                continue
            ok = True
            for s in (now, later):
                d = math.hypot(s[i, 0] - s[j, 0], s[i, 1] - s[j, 1])
                if not dist_range[0] <= d <= dist_range[1] or abs(float(dyn.wrap(s[i, 3] - s[j, 3]))) >= ang:
                    ok = False
                    break
            if not ok:
                continue
            d0 = math.hypot(now[i, 0] - now[j, 0], now[i, 1] - now[j, 1])
            if best is None or d0 < best[0]:
                best = (d0, (i, j))
    return None if best is None else best[1]


# ---------------------------------------------------------------- closed loop

@dataclass
class ClosedLoopResult:
    states: np.ndarray  # (M, S+1, 4) executed world states, step 0 is the start
    actions: np.ndarray  # (M, S, 2)
    replans: list = field(default_factory=list)  # per replan: t, index, loss, skipped

    @property
    def rollout(self) -> np.ndarray:
        """6-channel ``(M, S, 6)`` block aligned as ``[s_{t+1}, a_t]``."""
        return mt.with_actions(self.states[:, 1:], self.actions)


def _bind(J, scene):
    if J is None:
        return None
    return J.rebind(scene) if hasattr(J, "rebind") else J


def simulate_closed_loop(scene: sc.Scene, params, dims, schedule, J=None, cfg: gd.GuidanceConfig | None = None,
                         duration: float = 10.0, seed: int = 0, replan_hz: float = 2.0) -> ClosedLoopResult:
    """Guided sample, execute the first ``l`` actions, refresh history, repeat.

    ``J`` may be None (unguided) or a loss with ``rebind(scene)``; it is
    rebound to every replan's scene since agent frames move.
    """
    cfg = cfg or gd.GuidanceConfig()
    dt = scene.dt
    if abs(cfg.l * dt * replan_hz - 1.0) > 1e-9:
        raise ValueError(f"replan interval l*dt = {cfg.l * dt} does not match {replan_hz} Hz")
    n_replans = duration / (cfg.l * dt)
    if abs(n_replans - round(n_replans)) > 1e-9:
        raise ValueError("duration must be a multiple of l*dt")
    n_replans = int(round(n_replans))
    if cfg.l > dims.T:
        raise ValueError("cannot execute more actions than the horizon")
    M = scene.num_agents
    states = np.zeros((M, n_replans * cfg.l + 1, 4))
    actions = np.zeros((M, n_replans * cfg.l, 2))
    states[:, 0] = scene.states
    past = scene.past_and_current()
    cur = scene
    log = []
    for r in range(n_replans):
        view = cur.replace(name=f"{scene.name}#r{r}")
        ctx = den.build_context(view, dims)
        Jr = _bind(J, view)
        if Jr is None:
            block = dif.sample(view, params, dims, schedule, N=1, seed=seed, ctx=ctx)
            info = {"index": 0, "log": gd.GuidanceLog()}
            value = float("nan")
        else:
            block, info = gd.guided_sample(view, params, dims, schedule, Jr, cfg, seed=seed, ctx=ctx, return_info=True)
            with tn.no_grad():
                value = float(gd.aggregate(Jr(tn.Tensor(block)))[0])
        a = block[:, 0, : cfg.l, 4:]
        with tn.no_grad():
            world = dyn.rollout(cur.states, a, dt).data
        t0 = r * cfg.l
        states[:, t0 + 1 : t0 + cfg.l + 1] = world
        actions[:, t0 : t0 + cfg.l] = a
        past = np.concatenate([past, world], axis=1)
        cur = cur.replace(states=world[:, -1], history=past[:, -1 - cur.t_hist : -1])
        log.append({"replan": r, "t": t0, "index": int(info["index"]), "loss": value,
                    "skipped": len(info["log"].skipped)})
    return ClosedLoopResult(states, actions, log)


def continuity_violations(states, dt: float = dyn.DT, slack: float = 0.5) -> int:
    """Steps whose position jump exceeds ``v*dt + slack``."""
    s = np.asarray(states)
    jump = np.hypot(np.diff(s[..., 0], axis=-1), np.diff(s[..., 1], axis=-1))
    bound = np.abs(s[..., :-1, 2]) * dt + slack
    return int(np.sum(jump > bound))
