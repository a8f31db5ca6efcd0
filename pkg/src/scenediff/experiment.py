"""Desk-scale experiment plumbing shared by the CLI and the acceptance suite:
in-memory datasets, cached training runs and open-loop A/B evaluation."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import denoiser as den
from . import diffusion as dif
from . import dynamics as dyn
from . import guidance as gd
from . import harness as hs
from . import metrics as mt
from .guidelang import compile_program, rule


@dataclass(frozen=True)
class TrainConfig:
    n_scenes: int = 500
    agents: tuple = (2, 6)
    steps: int = 2000
    K: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    d_h: int = 64
    T: int = 20
    stride: int = 20

    def dims(self) -> den.DenoiserDims:
        return den.DenoiserDims(d_h=self.d_h, T=self.T)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def desk_scenes(n_scenes: int, agents=(2, 6), seed: int = 0, duration: float = 12.0) -> list:
    """Same scenes ``gen_dataset`` would write, kept in memory."""
    return list(iter_desk_scenes(n_scenes, agents, seed, duration))


def iter_desk_scenes(n_scenes: int, agents=(2, 6), seed: int = 0, duration: float = 12.0):
    cfg = hs.DatasetConfig(n_scenes=n_scenes, agents=tuple(agents), seed=seed, duration=duration)
    for n in range(n_scenes):
        rng = dif.make_rng(cfg.seed, n)
        spec = cfg.specs[n % len(cfg.specs)]
        lanes = hs.gen_map(spec, seed=int(rng.integers(2**31)))
        M = int(rng.integers(cfg.agents[0], cfg.agents[1] + 1))
        scene, _ = hs.gen_scene(lanes, M, duration=cfg.duration, seed=int(rng.integers(2**31)), name=f"scene-{n:04d}")
        yield scene


def train_model(cfg: TrainConfig, scenes=None, log=None):
    """Train from scratch; returns ``(params, losses)``."""
    dims = cfg.dims()
    scenes = scenes if scenes is not None else desk_scenes(cfg.n_scenes, cfg.agents, cfg.seed)
    examples = hs.training_examples(scenes, dims, cfg.stride)
    params = den.init_params(dims, cfg.seed)
    schedule = dif.cosine_schedule(cfg.K)

    def cb(i, loss):
        if log is not None and (i % 100 == 0 or i == cfg.steps - 1):
            log(f"step {i:5d}  loss {loss:.5f}")

    losses = dif.fit(examples, params, dims, schedule, cfg.steps, cfg.batch_size, cfg.lr, cfg.seed, callback=cb)
    return params, losses


def cached_model(cfg: TrainConfig, cache_dir, log=None):
    """Load the checkpoint for ``cfg`` from ``cache_dir`` or train and store it.
    Returns ``(params, dims, losses)``."""
    path = Path(cache_dir) / f"model-{cfg.digest()}.npz"
    if path.exists():
        params, dims, manifest = den.load_checkpoint(path)
        return params, dims, list(manifest["extra"]["losses"])
    t0 = time.time()
    params, losses = train_model(cfg, log=log)
    path.parent.mkdir(parents=True, exist_ok=True)
    den.save_checkpoint(params, cfg.dims(), path, extra={"config": asdict(cfg), "losses": losses,
                                                          "seconds": time.time() - t0})
    return params, cfg.dims(), losses


# ---------------------------------------------------------------- open-loop A/B

AB_RULES = ("speed_limit", "collision", "keep_distance")


def ab_scenes(kind: str, n: int = 20, seed: int = 1, pool: int = 200, agents=(2, 6)) -> list:
    """First ``n`` held-out scenes (seed differs from training) that qualify for
    ``kind``, as ``(scene, pair)``; pair is None for rules without one."""
    out = []
    for scene in iter_desk_scenes(pool, agents, seed):
        pair = None
        if kind in ("collision", "keep_distance"):
            pair = hs.select_pair(scene, kind)
            if pair is None:
                continue
        out.append((scene, pair))
        if len(out) == n:
            break
    return out


# "Should collide" as a penalty to descend: penalize distance beyond the radius.
# The collision fixture's hinge is the mirror image and pushes agents apart.
APPROACH_GL = """
loss approach(target_ind = 0, ref_ind = 1, collision_radius = 1.0) {
    let pos_world, yaw_world = transform_coord_agents_to_world(pos(x), yaw(x));
    let pos_i = select_agent_ind(pos_world, target_ind);
    let pos_j = select_agent_ind(pos_world, ref_ind);
    let dist = norm(pos_i - pos_j, -1);
    return mean(clip_min(dist - collision_radius, 0), -1);
}
"""


def ab_loss(kind: str, scene, pair):
    if kind == "speed_limit":
        return rule(kind, scene, vmax=mt.speed_limit_threshold(scene.expert_states))
    if kind == "collision":
        return compile_program(APPROACH_GL, scene, target_ind=pair[0], ref_ind=pair[1])
    return rule(kind, scene, target_ind=pair[0], ref_ind=pair[1])


def ab_metric(kind: str, world, scene, pair) -> float:
    if kind == "speed_limit":
        return mt.rule_violation(kind, world, scene, vmax=mt.speed_limit_threshold(scene.expert_states))
    if kind == "collision":
        return mt.rule_violation("gpt_collision", world, scene, pair=pair)
    return mt.rule_violation(kind, world, scene, pair=pair)


def _failure(kind, world, scene, pair):
    return mt.failure_rate(world, scene, exclude=pair if kind == "collision" else None)


def open_loop_ab(kind: str, cases, params, dims, schedule, cfg: gd.GuidanceConfig, seed: int = 0) -> list:
    """Unguided vs guided open-loop samples on shared seeds.  One dict per
    scene with the rule metric and failure rate of each arm."""
    rows = []
    for scene, pair in cases:
        ctx = den.build_context(scene, dims)
        J = ab_loss(kind, scene, pair)
        arms = {
            "unguided": dif.sample(scene, params, dims, schedule, N=1, seed=seed, ctx=ctx)[:, 0],
            "guided": gd.guided_sample(scene, params, dims, schedule, J, cfg, seed=seed, ctx=ctx)[:, 0],
        }
        row = {"scene": scene.name, "pair": pair}
        for arm, block in arms.items():
            world = dyn.states_agent_to_world(block[..., :4], scene.frames())
            row[arm] = ab_metric(kind, world, scene, pair)
            row[arm + "_fail"] = _failure(kind, world, scene, pair)
        rows.append(row)
    return rows


def closed_loop_ab(kind: str, cases, params, dims, schedule, cfg: gd.GuidanceConfig, duration: float = 10.0,
                   seed: int = 0) -> list:
    """Like :func:`open_loop_ab` with both arms simulated closed loop."""
    rows = []
    unguided_cfg = gd.GuidanceConfig(alpha=cfg.alpha, W=0, N=1, l=cfg.l)
    for scene, pair in cases:
        J = ab_loss(kind, scene, pair)
        row = {"scene": scene.name, "pair": pair}
        for arm, loss, c in (("unguided", None, unguided_cfg), ("guided", J, cfg)):
            res = hs.simulate_closed_loop(scene, params, dims, schedule, loss, c, duration, seed)
            row[arm] = ab_metric(kind, res.states, scene, pair)
            row[arm + "_fail"] = _failure(kind, res.states, scene, pair)
        rows.append(row)
    return rows
