"""Command-line entry point.

Every subcommand takes ``--config FILE`` (a JSON object whose keys mirror the
long flags with dashes turned into underscores) plus flag overrides, and writes
``manifest.json`` beside its outputs.

Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import hashlib
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import denoiser as den
from . import diffusion as dif
from . import dynamics as dyn
from . import guidance as gd
from . import harness as hs
from . import llm
from . import metrics as mt
from . import scene as sc
from .guidelang import GuideLangError, compile_program, parse, rule
from .guidelang.rules import RULES

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 2, 3, 4, 5


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- manifests

def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way git hashes a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_path(p: Path) -> str:
    if p.is_dir():
        h = hashlib.sha1()
        for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json"):
            h.update(f.relative_to(p).as_posix().encode() + b"\0" + git_blob_hash(f.read_bytes()).encode())
        return h.hexdigest()
    return git_blob_hash(p.read_bytes())


def write_manifest(out_dir: Path, command: str, config: dict, inputs=(), outputs=()) -> Path:
    cfg = {k: v for k, v in sorted(config.items()) if k not in ("func", "config")}
    text = json.dumps(cfg, sort_keys=True, default=str)
    m = {
        "command": command,
        "version": __version__,
        "config": json.loads(text),
        "config_hash": hashlib.sha256(text.encode()).hexdigest(),
        "seed": config.get("seed"),
        "inputs": {str(p): _hash_path(Path(p)) for p in inputs if p is not None and Path(p).exists()},
        "outputs": sorted(str(o) for o in outputs),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- outputs

def write_trajectory_csv(path: Path, states, actions, name: str):
    """One row per (agent, step); step 0 is the initial state with no action."""
    s = np.asarray(states)
    a = np.asarray(actions)
    lines = ["scene,agent,t,x,y,v,yaw,acc,yaw_rate"]
    for i in range(s.shape[0]):
        for t in range(s.shape[1]):
            acc, w = (a[i, t - 1] if t > 0 else (math.nan, math.nan))
            row = [name, i, t, *s[i, t], acc, w]
            lines.append(",".join(str(v) if isinstance(v, (int, str)) else repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def write_svg(path: Path, scene: sc.Scene, states, size: int = 600):
    """Overhead plot: lane corridors, centerlines and agent paths."""
    s = np.asarray(states)
    c = s[:, 0, :2].mean(0)
    half = max(20.0, float(np.abs(s[..., :2] - c).max()) + 15.0)
    lo = c - half
    scale = size / (2 * half)

    def xy(p):
        return (p[..., 0] - lo[0]) * scale, size - (p[..., 1] - lo[1]) * scale

    def poly(p):
        x, y = xy(p)
        return " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(x, y))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    for lane in scene.lanes:
        w = 2 * lane.half_width * scale
        out.append(f'<polyline points="{poly(lane.waypoints)}" fill="none" stroke="#e6e6e6" stroke-width="{w:.1f}"/>')
        out.append(f'<polyline points="{poly(lane.waypoints)}" fill="none" stroke="#b0b0b0" stroke-dasharray="4 4"/>')
    for i in range(len(s)):
        col = _COLORS[i % len(_COLORS)]
        out.append(f'<polyline points="{poly(s[i, :, :2])}" fill="none" stroke="{col}" stroke-width="2"/>')
        x, y = xy(s[i, 0, :2])
        out.append(f'<circle cx="{float(x):.1f}" cy="{float(y):.1f}" r="4" fill="{col}"/>')
        out.append(f'<text x="{float(x) + 5:.1f}" y="{float(y) - 5:.1f}" font-size="12">{i}</text>')
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------- helpers

def _load_model(path):
    try:
        params, dims, manifest = den.load_checkpoint(path)
    except (ValueError, KeyError) as e:
        raise DataError(f"{path}: bad checkpoint ({e})") from None
    K = manifest.get("extra", {}).get("K") or manifest.get("extra", {}).get("config", {}).get("K", 100)
    return params, dims, dif.cosine_schedule(int(K))


def _params(items) -> dict:
    out = {}
    for it in items or ():
        if "=" not in it:
            raise ConfigError(f"--param expects key=value, got {it!r}")
        k, v = it.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            raise ConfigError(f"--param {k}: value {v!r} is not a number or list") from None
        if isinstance(out[k], list):
            out[k] = tuple(out[k])
    return out


def _scenes_from(args) -> list:
    if args.scene:
        return [sc.load_scene(p) for p in args.scene]
    if args.data:
        return hs.load_dataset(args.data, split=args.split)
    raise ConfigError("give --scene or --data")


PAIR_RULES = ("collision", "keep_distance")


def _program(args):
    """Parsed program for --loss / --query, or None for native rules."""
    if args.loss:
        try:
            return parse(Path(args.loss).read_text())
        except GuideLangError as e:
            raise DataError(f"{args.loss}: {e}") from None
    if args.query:
        resp, val = llm.translate(args.query, llm.LlmConfig(offline=args.offline))
        if not val.ok:
            raise DataError(f"LLM program rejected: {val.repair_hint()}")
        return parse(val.program)
    return None


def _pair_kind(args, prog=None):
    """Rule kind that needs an agent pair: the native rule or the program name."""
    kind = prog.name if prog is not None else args.rule
    return kind if kind in PAIR_RULES else None


def _loss_for(args, scene, pair=None, prog=None):
    """Guidance loss for one scene from --rule / --loss / --query, or None."""
    p = _params(args.param)
    if prog is None and (args.loss or args.query):
        prog = _program(args)
    if prog is not None:
        if pair is not None:
            # a pair binds to any program that declares the two indices
            for k, i in zip(("target_ind", "ref_ind"), pair):
                if k in prog.defaults:
                    p.setdefault(k, i)
        try:
            return compile_program(prog, scene, **p)
        except GuideLangError as e:
            raise DataError(f"{args.loss or 'query'}: {e}") from None
    kind = args.rule
    if kind in (None, "none"):
        return None
    if kind in PAIR_RULES and pair is not None:
        p.setdefault("target_ind", pair[0])
        p.setdefault("ref_ind", pair[1])
    if kind == "speed_limit" and "vmax" not in p:
        if scene.expert_states is None:
            raise DataError(f"{scene.name}: speed_limit needs vmax or an expert rollout")
        p["vmax"] = mt.speed_limit_threshold(scene.expert_states)
    if kind not in RULES:
        raise ConfigError(f"unknown rule {kind!r}; known rules: {', '.join(RULES)}")
    return rule(kind, scene, **p)


def _guidance_cfg(args) -> gd.GuidanceConfig:
    try:
        return gd.GuidanceConfig(alpha=args.alpha, W=args.W, N=args.N, l=args.l)
    except ValueError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = hs.DatasetConfig(n_scenes=args.n, agents=tuple(args.agents), duration=args.duration, seed=args.seed)
    out = Path(args.out)
    manifest = hs.gen_dataset(out, cfg)
    print(f"wrote {len(manifest['scenes'])} scenes to {out}")
    return 0


def cmd_train(args):
    from .experiment import TrainConfig, train_model

    scenes = hs.load_dataset(args.data, split="train")
    if not scenes:
        raise DataError(f"{args.data}: no training scenes")
    cfg = TrainConfig(n_scenes=len(scenes), steps=args.steps, K=args.K, batch_size=args.batch_size, lr=args.lr,
                      seed=args.seed, d_h=args.d_h, T=args.T)
    params, losses = train_model(cfg, scenes, log=print)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.npz"
    den.save_checkpoint(params, cfg.dims(), ckpt, extra={"K": cfg.K, "config": asdict(cfg)})
    (out / "losses.csv").write_text("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses)))
    write_manifest(out, "train", vars(args), [args.data], [ckpt.name, "losses.csv"])
    print(f"final loss {losses[-1]:.5f}; checkpoint {ckpt}")
    return 0


def cmd_sample(args):
    params, dims, schedule = _load_model(args.checkpoint)
    cfg = _guidance_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    prog = _program(args)
    for scene in _scenes_from(args):
        J = _loss_for(args, scene, prog=prog)
        if J is None:
            block = dif.sample(scene, params, dims, schedule, N=1, seed=args.seed)
        else:
            block = gd.guided_sample(scene, params, dims, schedule, J, cfg, seed=args.seed)
        world = _agent_to_world(scene, block[:, 0])
        states = np.concatenate([scene.states[:, None], world], 1)
        write_trajectory_csv(out / f"{scene.name}.csv", states, block[:, 0, :, 4:], scene.name)
        write_svg(out / f"{scene.name}.svg", scene, states)
        outputs += [f"{scene.name}.csv", f"{scene.name}.svg"]
    write_manifest(out, "sample", vars(args), [args.checkpoint, *(args.scene or []), args.data], outputs)
    return 0


def _agent_to_world(scene, block) -> np.ndarray:
    """Agent-frame ``(B, T, 6)`` -> world ``(B, T, 4)`` states."""
    return dyn.states_agent_to_world(block[..., :4], scene.frames())


def _simulate_one(args, scene, params, dims, schedule, prog=None):
    pair = None
    kind = _pair_kind(args, prog)
    if args.pair == "auto" and kind is not None:
        pair = hs.select_pair(scene, kind)
        if pair is None:
            return scene, None, None
    elif args.pair not in (None, "auto"):
        pair = tuple(int(i) for i in args.pair.split(","))
    J = _loss_for(args, scene, pair, prog)
    cfg = _guidance_cfg(args)
    if J is None:
        cfg = gd.GuidanceConfig(alpha=cfg.alpha, W=0, N=1, l=cfg.l)
    res = hs.simulate_closed_loop(scene, params, dims, schedule, J, cfg, args.duration, args.seed, args.replan_hz)
    return scene, res, pair


def cmd_simulate(args):
    params, dims, schedule = _load_model(args.checkpoint)
    scenes = _scenes_from(args)
    prog = _program(args)
    kind = _pair_kind(args, prog) or args.rule
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = max(1, args.jobs)
    if jobs > 1:
        with cf.ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_simulate_one, [args] * len(scenes), scenes, [params] * len(scenes),
                                  [dims] * len(scenes), [schedule] * len(scenes), [prog] * len(scenes)))
    else:
        results = [_simulate_one(args, s, params, dims, schedule, prog) for s in scenes]
    outputs, report = [], mt.MetricsReport(metadata={"seed": args.seed, "rule": kind})
    for scene, res, pair in results:
        if res is None:
            print(f"{scene.name}: no qualifying pair, skipped")
            continue
        np.savez(out / f"{scene.name}.npz", states=res.states, actions=res.actions)
        write_trajectory_csv(out / f"{scene.name}.csv", res.states, res.actions, scene.name)
        write_svg(out / f"{scene.name}.svg", scene, res.states)
        (out / f"{scene.name}.replans.json").write_text(json.dumps(res.replans, indent=1) + "\n")
        meta = {"scene": scene.name, "pair": pair, "rule": kind}
        (out / f"{scene.name}.meta.json").write_text(json.dumps(meta) + "\n")
        outputs += [f"{scene.name}.{e}" for e in ("npz", "csv", "svg", "replans.json", "meta.json")]
        report.add_scene(scene.name, mt.failure_rate(res.states, scene), _rule_metrics(kind, res, scene, pair))
    if report.scenes:
        report.finalize()
        mt.write_report(report, out / "metrics.json")
        outputs.append("metrics.json")
    write_manifest(out, "simulate", vars(args), [args.checkpoint, *(args.scene or []), args.data], outputs)
    print(f"simulated {len(report.scenes)} scene(s) into {out}")
    return 0


def _rule_metrics(kind, res, scene, pair) -> dict:
    s = res.states
    out = {}
    if kind in PAIR_RULES and pair is not None:
        name = "gpt_collision" if kind == "collision" else "keep_distance"
        out[name] = mt.rule_violation(name, s, scene, pair=pair)
    elif kind == "speed_limit" and scene.expert_states is not None:
        out[kind] = mt.rule_violation(kind, s, scene, vmax=mt.speed_limit_threshold(scene.expert_states))
    elif kind in ("no_collision", "no_offroad"):
        out[kind] = mt.rule_violation(kind, s, scene)
    elif kind == "goal_waypoint" and scene.goals is not None:
        out[kind] = mt.rule_violation(kind, s, scene, goals=scene.goals)
    elif kind == "stop_region" and scene.stop_region is not None:
        out["stop_sign"] = mt.rule_violation("stop_sign", s, scene, region=scene.stop_region)
    return out


def cmd_eval(args):
    run = Path(args.runs)
    metas = sorted(run.glob("*.meta.json"))
    if not metas:
        raise DataError(f"{run}: no simulation outputs")
    scenes = {s.name: s for s in hs.load_dataset(args.data)} if args.data else {}
    for p in args.scene or []:
        s = sc.load_scene(p)
        scenes[s.name] = s
    report = mt.MetricsReport(metadata={"runs": str(run), "seed": args.seed})
    generated, reference = [], []
    for mp in metas:
        meta = json.loads(mp.read_text())
        scene = scenes.get(meta["scene"])
        if scene is None:
            raise DataError(f"scene {meta['scene']} not found in --data/--scene")
        z = np.load(run / f"{meta['scene']}.npz")
        res = hs.ClosedLoopResult(z["states"], z["actions"])
        pair = tuple(meta["pair"]) if meta.get("pair") else None
        report.add_scene(scene.name, mt.failure_rate(res.states, scene), _rule_metrics(meta["rule"], res, scene, pair))
        generated.append(res.rollout)
        if scene.expert_states is not None and scene.expert_actions is not None:
            reference.append(mt.with_actions(scene.expert_states, scene.expert_actions))
    if not reference:
        raise DataError("no expert reference rollouts for realism metrics")
    report.finalize(mt.realism_deviation(generated, reference), mt.relative_realism(generated, reference))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mt.write_report(report, out / "report.json")
    mt.write_report(report, out / "report.csv")
    write_manifest(out, "eval", vars(args), [args.runs, args.data], ["report.json", "report.csv"])
    for k, v in report.aggregate.items():
        print(f"{k:24s} {v:.6f}")
    return 0


def cmd_compile_loss(args):
    try:
        prog = parse(Path(args.file).read_text())
        loss = compile_program(prog, None, **_params(args.param))
        B = args.B or max(4, llm.needed_agents(prog))
        shape, report = loss.check(B, args.T)
    except GuideLangError as e:
        print(f"{args.file}:{e}", file=sys.stderr)
        return EXIT_DATA
    print(f"loss {prog.name}({', '.join(f'{k}={v}' for k, v in loss.params.items())})")
    for name, shp in report:
        print(f"  {name:20s} ({', '.join(str(d) for d in shp)})")
    return 0


def cmd_llm_translate(args):
    cfg = llm.LlmConfig(offline=args.offline, endpoint=args.endpoint, model=args.model)
    resp, val = llm.translate(args.query, cfg)
    out = Path(args.out) if args.out else Path(f"{val.program.name if val.program else 'loss'}.gl")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(resp.extracted.rstrip() + "\n")
    expect = (resp.fixture or {}).get("expect", "success")
    print(f"status: {val.status}")
    if resp.fixture and resp.fixture.get("annotation"):
        print(f"annotation ({expect}): {resp.fixture['annotation']}")
    for d in val.diagnostics:
        print(str(d), file=sys.stderr)
    write_manifest(out.parent, "llm-translate", vars(args), [], [out.name])
    print(f"wrote {out}")
    return 0 if val.ok else EXIT_DATA


def cmd_report(args):
    reports = [mt.read_report(p) for p in args.inputs]
    keys = sorted({k for r in reports for k in r.aggregate})
    rows = []
    for k in keys:
        vals = np.array([r.aggregate[k] for r in reports if k in r.aggregate])
        rows.append((k, float(vals.mean()), float(vals.std()), len(vals)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".csv":
        out.write_text("metric,mean,std,n\n" + "".join(f"{k},{m!r},{s!r},{n}\n" for k, m, s, n in rows))
    else:
        out.write_text(json.dumps({k: {"mean": m, "std": s, "n": n} for k, m, s, n in rows}, indent=2) + "\n")
    for k, m, s, n in rows:
        print(f"{k:24s} {m:.6f} +- {s:.6f} (n={n})")
    write_manifest(out.parent, "report", vars(args), args.inputs, [out.name])
    return 0


# ---------------------------------------------------------------- parser

def _guidance_flags(p):
    p.add_argument("--rule", default=None, help="native rule kind, or 'none'")
    p.add_argument("--loss", default=None, help="GuideLang .gl file")
    p.add_argument("--query", default=None, help="natural-language query (llm path)")
    p.add_argument("--param", action="append", help="loss parameter override key=value")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--W", type=int, default=5)
    p.add_argument("--N", type=int, default=4)
    p.add_argument("--l", type=int, default=5)
    p.add_argument("--offline", action="store_true")


def _scene_flags(p):
    p.add_argument("--scene", action="append", help="scene JSON file (repeatable)")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--split", default="val")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scenediff", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--agents", type=int, nargs=2, default=[2, 6])
    p.add_argument("--duration", type=float, default=12.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--K", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--d-h", type=int, default=64)
    p.add_argument("--T", type=int, default=20)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="open-loop (guided) sampling")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _scene_flags(p)
    _guidance_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("simulate", help="closed-loop guided simulation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pair", default=None, help="'auto' or 'A,B'")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--replan-hz", type=float, default=2.0)
    p.add_argument("--jobs", type=int, default=1)
    _scene_flags(p)
    _guidance_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="metrics for simulation outputs")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scene", action="append")
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compile-loss", help="parse and shape-check a .gl file")
    p.add_argument("file")
    p.add_argument("--B", type=int, default=None, help="agents (default: enough for the index parameters)")
    p.add_argument("--T", type=int, default=20)
    p.add_argument("--param", action="append")
    p.set_defaults(func=cmd_compile_loss)

    p = sub.add_parser("llm-translate", help="query -> GuideLang program")
    p.add_argument("query")
    p.add_argument("--out", default=None)
    p.add_argument("--offline", action="store_true")
    p.add_argument("--endpoint", default=llm.LlmConfig.endpoint)
    p.add_argument("--model", default=llm.LlmConfig.model)
    p.set_defaults(func=cmd_llm_translate)

    p = sub.add_parser("report", help="mean/std over several metric reports")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    for sp in sub.choices.values():
        sp.add_argument("--config", default=None, help="JSON config file; flags override it")
        if not any(a.dest == "seed" for a in sp._actions):
            sp.add_argument("--seed", type=int, default=0)
    return ap


def _apply_config(ap, args, argv):
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{args.config}: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{args.config}: top level must be an object")
    # flags given explicitly win over the file
    sub = ap._subparsers._group_actions[0].choices[args.command]
    explicit = {a.dest for a in sub._actions for opt in a.option_strings if any(x == opt or x.startswith(opt + "=") for x in argv)}
    known = {a.dest for a in sub._actions}
    for k, v in cfg.items():
        k = k.replace("-", "_")
        if k not in known:
            raise ConfigError(f"{args.config}: unknown key {k!r} for {args.command}")
        if k not in explicit:
            setattr(args, k, v)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args = _apply_config(ap, args, argv)
        return args.func(args) or 0
    except (ConfigError, llm.LlmConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, sc.SchemaError, hs.DatasetError, llm.MissingFixtureError, GuideLangError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, llm.LlmTransportError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
