import itertools
import math
import random
from pathlib import Path

import numpy as np
import pytest

from scenediff import dynamics as dyn
from scenediff import harness as hs
from scenediff import tensor as tn
from scenediff.guidelang import (
    RULES, BindError, GuideShapeError, ParseError, compile_program, decay_weights, parse, pretty_print, rule,
    typecheck_shapes,
)
from scenediff.guidelang.rules import agent_radii

from helpers import simple_scene

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "scenediff" / "fixtures"
TWINS = ["acc_limit", "stay_on_left", "collision", "keep_distance", "same_direction", "collide_from_behind",
         "lane_following"]


@pytest.fixture(scope="module")
def arc_scene():
    lanes = hs.gen_map(hs.MapSpec("arc", 2), seed=21)
    scene, _ = hs.gen_scene(lanes, 4, duration=3.0, seed=5)
    return scene


def random_block(rng, B=4, N=3, T=12):
    x = rng.normal(size=(B, N, T, 6))
    x[..., 0] *= 15.0
    x[..., 1] *= 3.0
    x[..., 2] = np.abs(x[..., 2]) * 5
    return x


def twin_params(name):
    return {"target_ind": 1, "ref_ind": 2} if name == "stay_on_left" else {}


def test_collision_fixture_parses_and_round_trips():
    prog = parse((FIXTURES / "collision.gl").read_text())
    assert parse(pretty_print(prog)) == prog
    assert typecheck_shapes(prog, 3, 20)[0] == ("N",)


def test_acc_limit_fixture_is_per_agent():
    assert typecheck_shapes(parse((FIXTURES / "acc_limit.gl").read_text()), 3, 20)[0] == ("B", "N")


@pytest.mark.parametrize("path", sorted(FIXTURES.glob("**/*.gl")), ids=lambda p: p.name)
def test_all_fixtures_round_trip(path):
    prog = parse(path.read_text())
    assert parse(pretty_print(prog)) == prog
    assert pretty_print(parse(pretty_print(prog))) == pretty_print(prog)


def test_unbound_identifier_is_a_bind_error():
    prog = parse("loss f() { return mean(mean(vel(x) * speed, -1), -1); }")
    with pytest.raises(BindError, match="speed"):
        typecheck_shapes(prog, 2, 10)


def test_unknown_builtin_lists_catalog():
    with pytest.raises(ParseError) as err:
        parse("loss f() {\n  return frobnicate(x);\n}")
    assert err.value.line == 2 and "transform_coord_agents_to_world" in str(err.value)


def test_syntax_error_position():
    with pytest.raises(ParseError) as err:
        parse("loss f() {\n  let a = vel(x)\n  return a;\n}")
    assert err.value.line == 3


def test_wrong_result_shape_rejected():
    with pytest.raises(GuideShapeError, match=r"\(B, N, T\)"):
        typecheck_shapes(parse("loss f() { return x[..., 2]; }"), 2, 10)


def test_arity_misuse_rejected():
    with pytest.raises(ParseError, match="mean"):
        parse("loss f() { return mean(x); }")
    with pytest.raises(GuideShapeError):
        typecheck_shapes(parse("loss f() { return mean(select_agent_ind(x, 5), -1); }"), 2, 10)


def test_constant_program():
    loss = compile_program("loss c(k = 2.5) { return k * 2; }")
    x = random_block(np.random.default_rng(0))
    assert np.array_equal(loss(tn.Tensor(x)).data, np.full(3, 5.0))
    _, (g,) = tn.grad(lambda t: tn.sum_(loss(t)), x)
    assert not np.any(g)


def test_decay_weights():
    w = decay_weights(0.9, 5)
    assert w.sum() == pytest.approx(1.0)
    assert np.allclose(w[1:] / w[:-1], 0.9)


@pytest.mark.parametrize("name", TWINS)
def test_compiled_fixture_matches_native_rule(name, arc_scene):
    params = twin_params(name)
    compiled = compile_program((FIXTURES / f"{name}.gl").read_text(), arc_scene, horizon=12, **params)
    native = rule(name, arc_scene, **params)
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(100):
        x = tn.Tensor(random_block(rng))
        a, b = compiled(x).data, native(x).data
        assert a.shape == b.shape
        worst = max(worst, float(np.max(np.abs(a - b))))
    assert worst < 1e-9


def test_compiled_collision_gradient(arc_scene):
    loss = compile_program((FIXTURES / "collision.gl").read_text(), arc_scene, collision_radius=40.0)
    s0 = dyn.agent_frame_initial(arc_scene.states[:, 2])
    a0 = np.random.default_rng(1).normal(scale=0.3, size=(4, 2, 10, 2))
    assert tn.grad_check(lambda a: tn.sum_(loss(dyn.full_trajectory(s0, a))), a0) < 1e-3


def test_collision_rule_examples():
    scene = simple_scene([[0.0, 0.0, 5.0, 0.0], [0.0, 3.5, 5.0, 0.0], [5.0, 0.0, 5.0, 0.0]])
    x = np.zeros((3, 1, 10, 6))
    x[..., 0] = np.arange(10) * 0.5
    assert rule("collision", scene, target_ind=0, ref_ind=2, collision_radius=1.0)(x).data[0] == 0.0
    kd = rule("keep_distance", scene, target_ind=0, ref_ind=2, min_distance=2.0, max_distance=8.0)(x).data[0]
    assert kd == 0.0
    kd = rule("keep_distance", scene, target_ind=0, ref_ind=2, min_distance=1.0, max_distance=3.0)(x).data[0]
    assert kd == pytest.approx(2.0)


def test_no_collision_vs_pair_enumeration():
    rng = np.random.default_rng(2)
    scene = simple_scene([[0.0, 0.0, 5.0, 0.0], [2.0, 1.0, 5.0, 0.3], [3.0, -1.0, 5.0, -0.2]])
    x = rng.normal(scale=2.0, size=(3, 2, 6, 6))
    got = rule("no_collision", scene)(x).data
    pw = dyn.transform_coord_agents_to_world(x[..., :2], x[..., 3:4], scene)[0].data
    r = agent_radii(scene)
    want = np.zeros((3, 2))
    for i, j in itertools.permutations(range(3), 2):
        for n in range(2):
            for t in range(6):
                d = math.dist(pw[i, n, t], pw[j, n, t])
                want[i, n] += max(r[i] + r[j] - d, 0.0) / 6
    assert np.allclose(got, want, atol=1e-12)


def satisfying_block(scene, T=10):
    """Agents driving straight down their own lanes far apart and slowly."""
    x = np.zeros((scene.num_agents, 1, T, 6))
    x[..., 0] = np.arange(1, T + 1) * 0.5
    x[..., 2] = 5.0
    return x


def test_clip_rules_zero_on_satisfying_trajectories():
    scene = simple_scene([[0.0, 0.0, 5.0, 0.0], [30.0, 3.5, 5.0, 0.0], [60.0, 0.0, 5.0, 0.0]])
    x = satisfying_block(scene)
    kinds = {
        "collision": dict(target_ind=0, ref_ind=1, collision_radius=1.0),
        "keep_distance": dict(target_ind=0, ref_ind=1, min_distance=10.0, max_distance=40.0),
        "speed_limit": dict(vmax=6.0),
        "acc_limit": {},
        "no_offroad": {},
        "no_collision": {},
    }
    for kind, params in kinds.items():
        r = rule(kind, scene, **params)
        val = r(x).data
        assert np.all(val == 0.0), kind
        _, (g,) = tn.grad(lambda t: tn.sum_(r(t)), x)
        assert not np.any(g), kind


@pytest.mark.parametrize("kind", sorted(RULES))
def test_rules_are_nonnegative(kind, arc_scene):
    params = {"speed_limit": {"vmax": 3.0}, "target_speed": {"target": 4.0}, "stay_on_left": twin_params("stay_on_left"),
              "goal_waypoint": {}, "stop_region": {}}.get(kind, {})
    r = rule(kind, arc_scene, **params)
    rng = np.random.default_rng(3)
    for _ in range(5):
        val = r(random_block(rng)).data
        if kind in ("goal_waypoint", "stop_region"):
            continue  # soft-min of squares is bounded below by the hard min, not by 0
        assert np.all(val >= 0)


def test_rule_rejects_bad_params(arc_scene):
    with pytest.raises(IndexError):
        rule("collision", arc_scene, target_ind=9)
    with pytest.raises(ValueError):
        rule("collision", arc_scene, collision_radius=0.0)
    with pytest.raises(ValueError):
        rule("teleport", arc_scene)


def test_soft_min_brackets_hard_min(arc_scene):
    x = random_block(np.random.default_rng(4))
    soft = rule("goal_waypoint", arc_scene)(x).data
    pw = dyn.transform_coord_agents_to_world(x[..., :2], x[..., 3:4], arc_scene)[0].data
    hard = ((pw - arc_scene.goals[:, None, None, :2]) ** 2).sum(-1).min(-1)
    assert np.all(soft >= hard - 1e-9)
    assert np.all(soft <= hard + math.log(x.shape[2]) + 1e-9)


# ---------------------------------------------------------------- fuzz harness

UNARY_FNS = ["abs", "sqrt", "sin", "cos", "exp", "sigmoid"]


def gen_expr(rng, names, depth):
    if depth == 0 or rng.random() < 0.25:
        pick = rng.random()
        if pick < 0.4:
            return rng.choice(names)
        if pick < 0.7:
            return repr(round(rng.uniform(0, 10), rng.choice([0, 1, 3])))
        return f"{rng.choice(['pos', 'vel', 'yaw', 'acc', 'yawvel'])}(x)"
    kind = rng.randrange(7)
    a = gen_expr(rng, names, depth - 1)
    if kind == 0:
        return f"{a} {rng.choice(['+', '-', '*', '/'])} {gen_expr(rng, names, depth - 1)}"
    if kind == 1:
        return f"{rng.choice(UNARY_FNS)}({a})"
    if kind == 2:
        return f"clip_min({a}, {gen_expr(rng, names, depth - 1)})"
    if kind == 3:
        return f"mean({a}, {rng.choice(['-1', '[0, 1]', '2'])})"
    if kind == 4:
        return f"-({a})"
    if kind == 5:
        return f"({a}) ** 2"
    return f"{a}[..., {rng.choice(['0', '1:3', ':2', '-1'])}]"


def gen_program(rng, n):
    params = ", ".join(f"p{i} = {v}" for i, v in enumerate(rng.sample(["1", "2.5", "-3", "[1, 2]", "0.1"], 2)))
    names = ["x", "p0", "p1", "pi", "T"]
    body = []
    for i in range(rng.randrange(0, 4)):
        body.append(f"    let v{i} = {gen_expr(rng, names, 3)};")
        names.append(f"v{i}")
    body.append(f"    return {gen_expr(rng, names, 3)};")
    return f"loss fuzz{n}({params}) {{\n" + "\n".join(body) + "\n}\n"


def test_fuzz_round_trip_and_whitespace():
    rng = random.Random(7)
    for n in range(200):
        text = gen_program(rng, n)
        prog = parse(text)
        assert parse(pretty_print(prog)) == prog, text
        squashed = " ".join(text.split())
        assert parse(squashed) == prog
        assert parse(text.replace(" ", "  \t").replace("\n", "\n\n# note\n")) == prog


def test_fuzz_single_token_mutation_breaks_the_program():
    rng = random.Random(8)
    programs = [gen_program(rng, n) for n in range(200)]
    for k in range(0, 200, 10):
        text = programs[k]
        spots = [i for i, ch in enumerate(text) if ch in ";)}"]
        i = rng.choice(spots)
        mutated = text[:i] + text[i + 1 :]
        results = []
        for j, t in enumerate(programs):
            try:
                parse(mutated if j == k else t)
                results.append(True)
            except ParseError:
                results.append(False)
        assert results.count(False) == 1 and not results[k]
