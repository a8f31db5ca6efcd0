"""Evaluation: failure rate, rule violations, realism deviation and reports.

Rollouts are world-frame ``(M, T, 4)`` state arrays ``[x, y, v, yaw]``,
optionally with ``(M, T, 2)`` actions ``[acc, yaw_rate]``.  The metrics use
hard definitions (exact minima and counts), not the smoothed guidance losses.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scene as sc

# ---------------------------------------------------------------- collisions


def box_corners(x, y, yaw, length, width) -> np.ndarray:
    """Corners ``(..., 4, 2)`` of oriented rectangles, counter-clockwise."""
    x, y, yaw, length, width = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, yaw, length, width)))
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw = length / 2, width / 2
    local = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)
    lx = local[:, 0] * hl[..., None]
    ly = local[:, 1] * hw[..., None]
    wx = x[..., None] + lx * c[..., None] - ly * s[..., None]
    wy = y[..., None] + lx * s[..., None] + ly * c[..., None]
    return np.stack([wx, wy], -1)


def _axes(corners):
    e1 = corners[..., 1, :] - corners[..., 0, :]
    e2 = corners[..., 3, :] - corners[..., 0, :]
    return e1, e2


def boxes_overlap(c1, c2) -> np.ndarray:
    """Separating-axis test on broadcastable corner arrays ``(..., 4, 2)``.
    Touching boxes (zero-area contact) do not count as overlapping."""
    c1, c2 = np.broadcast_arrays(c1, c2)
    sep = np.zeros(c1.shape[:-2], dtype=bool)
    for ax in (*_axes(c1), *_axes(c2)):
        p1 = np.einsum("...kd,...d->...k", c1, ax)
        p2 = np.einsum("...kd,...d->...k", c2, ax)
        sep |= (p1.max(-1) <= p2.min(-1)) | (p2.max(-1) <= p1.min(-1))
    return ~sep


@dataclass
class CollisionEvents:
    agent: np.ndarray  # (M,) True once the agent overlaps anyone
    first_step: np.ndarray  # (M,) first colliding step, -1 if none
    pairs: np.ndarray  # (M, M) symmetric pair flags


def collision_events(states, extents) -> CollisionEvents:
    s = np.asarray(states, dtype=np.float64)
    e = np.asarray(extents, dtype=np.float64)
    M, T = s.shape[:2]
    corners = box_corners(s[..., 0], s[..., 1], s[..., 3], e[:, 0:1], e[:, 1:2])  # (M, T, 4, 2)
    hit = boxes_overlap(corners[:, None], corners[None, :])  # (M, M, T)
    hit &= ~np.eye(M, dtype=bool)[..., None]
    pairs = hit.any(-1)
    agent = pairs.any(1)
    any_t = hit.any(1)
    first = np.where(agent, np.argmax(any_t, axis=-1), -1)
    return CollisionEvents(agent, first, pairs)


def offroad_events(states, scene) -> np.ndarray:
    """(M,) True if the agent's center leaves every lane corridor at any step."""
    s = np.asarray(states, dtype=np.float64)
    return sc.offroad_test(s[..., 0], s[..., 1], scene).any(-1)


def failed_agents(states, scene, exclude=None) -> np.ndarray:
    """(M,) collided or off-road.  ``exclude=(i, j)`` is a pair asked to
    collide: their mutual contact is not a failure, and for those two agents
    only the steps up to that contact count."""
    s = np.asarray(states, dtype=np.float64)
    ev = collision_events(s, scene.extents)
    pairs = ev.pairs.copy()
    off = offroad_events(s, scene)
    if exclude is not None:
        i, j = exclude
        pairs[i, j] = pairs[j, i] = False
        if ev.pairs[i, j]:
            before = s[:, : _first_contact(s[[i, j]], np.asarray(scene.extents)[[i, j]]) + 1]
            pre = collision_events(before, scene.extents).pairs
            pre[i, j] = pre[j, i] = False
            pre_off = offroad_events(before, scene)
            for k in (i, j):
                pairs[k] = pairs[:, k] = pre[k]
                off[k] = pre_off[k]
    return pairs.any(1) | off


def _first_contact(two, extents) -> int:
    corners = box_corners(two[..., 0], two[..., 1], two[..., 3], extents[:, 0:1], extents[:, 1:2])
    return int(np.argmax(boxes_overlap(corners[0], corners[1])))


def failure_rate(rollouts, scenes, exclude=None) -> float:
    """Fraction of agents that collide or go off-road, averaged over scenes."""
    if isinstance(scenes, sc.Scene):
        rollouts, scenes, exclude = [rollouts], [scenes], [exclude]
    exclude = exclude if exclude is not None else [None] * len(scenes)
    rates = [failed_agents(r, s, e).mean() for r, s, e in zip(rollouts, scenes, exclude, strict=True)]
    return float(np.mean(rates)) if rates else 0.0


# ---------------------------------------------------------------- rule violations


def speed_limit_threshold(expert_states, moving: float = 0.5) -> float:
    """75% quantile of the speeds of moving vehicles in the reference rollout."""
    v = np.asarray(expert_states)[..., 2]
    mov = v.max(-1) > moving
    if not np.any(mov):
        return 0.0
    return float(np.quantile(v[mov], 0.75))


def target_speed_reference(expert_states) -> np.ndarray:
    """Half of each vehicle's ground-truth speed at every step."""
    return 0.5 * np.asarray(expert_states)[..., 2]


def _pair_distance(s, pair):
    i, j = pair
    return np.hypot(s[i, :, 0] - s[j, :, 0], s[i, :, 1] - s[j, :, 1])


def rule_violation(kind: str, rollout, scene, **params) -> float:
    s = np.asarray(rollout, dtype=np.float64)
    if kind == "keep_distance":
        d = _pair_distance(s, params["pair"])
        lo, hi = params.get("min_distance", 10.0), params.get("max_distance", 30.0)
        return float(np.mean(np.clip(lo - d, 0, None) + np.clip(d - hi, 0, None)))
    if kind in ("gpt_collision", "collision"):
        i, j = params["pair"]
        ev = collision_events(s[[i, j]], np.asarray(scene.extents)[[i, j]])
        return float(ev.pairs[0, 1])
    if kind == "no_collision":
        return float(collision_events(s, scene.extents).agent.mean())
    if kind == "speed_limit":
        return float(np.mean(np.clip(s[..., 2] - params["vmax"], 0, None)))
    if kind == "target_speed":
        target = np.asarray(params["target"], dtype=np.float64)
        if target.ndim == 1:
            target = target[:, None]
        return float(np.mean(np.abs(s[..., 2] - target)))
    if kind == "no_offroad":
        return float(offroad_events(s, scene).mean())
    if kind == "goal_waypoint":
        g = np.asarray(params.get("goals", scene.goals if scene is not None else None), dtype=np.float64)
        d = np.hypot(s[..., 0] - g[:, None, 0], s[..., 1] - g[:, None, 1])
        return float(np.mean(d.min(-1)))
    if kind in ("stop_sign", "stop_region"):
        xmin, ymin, xmax, ymax = params.get("region", scene.stop_region if scene is not None else None)
        inside = (s[..., 0] >= xmin) & (s[..., 0] <= xmax) & (s[..., 1] >= ymin) & (s[..., 1] <= ymax)
        entered = inside.any(-1)
        if not np.any(entered):
            return 0.0
        vmin = np.where(inside, s[..., 2], np.inf).min(-1)
        return float(np.mean(vmin[entered]))
    raise ValueError(f"unknown rule kind {kind!r}")


# ---------------------------------------------------------------- profiles and W1


def driving_profiles(rollout, dt: float = 0.1) -> dict:
    """``|long accel|``, ``|lat accel|`` and ``|jerk|`` from a 6-channel
    ``(M, T, 6)`` rollout ``[x, y, v, yaw, acc, yaw_rate]``."""
    r = np.asarray(rollout, dtype=np.float64)
    if r.shape[-2] < 3:
        raise ValueError(f"driving profiles need T >= 3, got {r.shape[-2]}")
    acc = r[..., 4]
    return {
        "long_accel": np.abs(acc),
        "lat_accel": np.abs(r[..., 2] * r[..., 5]),
        "jerk": np.abs(np.diff(acc, axis=-1)) / dt,
    }


PROFILE_KEYS = ("long_accel", "lat_accel", "jerk")


def with_actions(states, actions) -> np.ndarray:
    """Join ``(M, T, 4)`` states and ``(M, T, 2)`` actions into a 6-channel rollout."""
    return np.concatenate([np.asarray(states, dtype=np.float64), np.asarray(actions, dtype=np.float64)], -1)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        m = np.asarray(self.mass, dtype=np.float64)
        if e.ndim != 1 or len(e) != len(m) + 1 or np.any(np.diff(e) <= 0):
            raise ValueError("edges must be strictly increasing with one more entry than mass")
        if abs(m.sum() - 1.0) > 1e-12 or np.any(m < 0):
            raise ValueError("mass must be nonnegative and sum to 1")
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "mass", m)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def profile_edges(reference, bins: int = 40, q: float = 99.5) -> np.ndarray:
    """Uniform bins over ``[0, P99.5]`` of the reference values."""
    ref = np.asarray(reference, dtype=np.float64).ravel()
    hi = float(np.percentile(ref, q)) if ref.size else 0.0
    if not hi > 0:
        hi = 1e-6
    return np.linspace(0.0, hi, bins + 1)


def histogram(values, edges) -> Histogram:
    """Normalized histogram; values beyond the edges land in the end bins."""
    v = np.asarray(values, dtype=np.float64).ravel()
    edges = np.asarray(edges, dtype=np.float64)
    n = len(edges) - 1
    if v.size == 0:
        raise ValueError("cannot histogram an empty sample")
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, n - 1)
    counts = np.bincount(idx, minlength=n).astype(np.float64)
    mass = counts / counts.sum()
    # renormalize so the sum is 1 to the last ulp
    mass[np.argmax(mass)] += 1.0 - mass.sum()
    return Histogram(edges, mass)


def wasserstein1(h1: Histogram, h2: Histogram) -> float:
    """Exact 1-D W1 between binned measures with mass at the bin centers."""
    if h1.edges.shape != h2.edges.shape or not np.array_equal(h1.edges, h2.edges):
        raise ValueError("histograms must share bin edges")
    cdf = np.cumsum(h1.mass - h2.mass)[:-1]
    return float(np.sum(np.abs(cdf) * np.diff(h1.centers)))


def normalized_w1(h1: Histogram, h2: Histogram) -> float:
    """W1 divided by the histogram range, so the value lies in [0, 1]."""
    return wasserstein1(h1, h2) / float(h1.edges[-1] - h1.edges[0])


def _pool(rollouts, key, dt):
    return np.concatenate([driving_profiles(r, dt)[key].ravel() for r in rollouts])


def _relative(rollout, key, dt):
    p = driving_profiles(rollout, dt)[key]
    if len(p) < 2:
        return np.zeros(0)
    diffs = [np.abs(p[i] - p[j]) for i, j in itertools.combinations(range(len(p)), 2)]
    return np.mean(diffs, axis=0)


def realism_deviation(generated, reference, dt: float = 0.1, relative: bool = False) -> float:
    """Mean over the three driving profiles of the W1 distance between pooled
    histograms of generated and reference rollouts (each a list of 6-channel
    arrays).  ``relative=True`` uses pair-averaged relative profiles; scenes
    with a single agent contribute nothing, and no pairs at all gives 0."""
    if not reference:
        raise ValueError("empty reference set")
    out = []
    for key in PROFILE_KEYS:
        if relative:
            g = np.concatenate([_relative(r, key, dt) for r in generated]) if generated else np.zeros(0)
            ref = np.concatenate([_relative(r, key, dt) for r in reference])
            if g.size == 0 or ref.size == 0:
                out.append(0.0)
                continue
        else:
            g, ref = _pool(generated, key, dt), _pool(reference, key, dt)
        edges = profile_edges(ref)
        out.append(wasserstein1(histogram(g, edges), histogram(ref, edges)))
    return float(np.mean(out))


def relative_realism(generated, reference, dt: float = 0.1) -> float:
    return realism_deviation(generated, reference, dt, relative=True)


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    scenes: list = field(default_factory=list)  # [{"scene": name, "fail": x, "rule": {kind: v}}]
    aggregate: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add_scene(self, name: str, fail: float, rules: dict | None = None):
        self.scenes.append({"scene": name, "fail": float(fail), "rule": {k: float(v) for k, v in (rules or {}).items()}})

    def finalize(self, real: float = 0.0, rel_real: float = 0.0) -> dict:
        """Average per-scene values and attach the realism numbers."""
        agg = {"fail": float(np.mean([s["fail"] for s in self.scenes])) if self.scenes else 0.0}
        kinds = sorted({k for s in self.scenes for k in s["rule"]})
        for k in kinds:
            agg[f"rule:{k}"] = float(np.mean([s["rule"][k] for s in self.scenes if k in s["rule"]]))
        agg["real"] = float(real)
        agg["rel_real"] = float(rel_real)
        for k, v in agg.items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"metric {k} = {v} is not finite and nonnegative")
        self.aggregate = agg
        return agg

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "aggregate": self.aggregate, "scenes": self.scenes}


CSV_COLUMNS = ("scene", "metric", "value")


def report_rows(report: MetricsReport) -> list:
    rows = []
    for s in report.scenes:
        rows.append((s["scene"], "fail", s["fail"]))
        for k in sorted(s["rule"]):
            rows.append((s["scene"], f"rule:{k}", s["rule"][k]))
    for k, v in report.aggregate.items():
        rows.append(("__all__", k, v))
    return rows


def write_report(report: MetricsReport, path, format: str | None = None) -> Path:
    path = Path(path)
    fmt = format or path.suffix.lstrip(".") or "json"
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for scene, metric, value in report_rows(report):
                w.writerow([scene, metric, repr(float(value))])
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path) -> MetricsReport:
    d = json.loads(Path(path).read_text())
    return MetricsReport(d["scenes"], d["aggregate"], d["metadata"])
