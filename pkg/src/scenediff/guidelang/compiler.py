"""Compile GuideLang programs into differentiable guidance losses."""

from __future__ import annotations

import math

import numpy as np

from .. import dynamics as dyn
from .. import scene as sc
from .. import tensor as tn
from ..tensor import Tensor
from .shapes import BindError, typecheck_shapes
from .syntax import BinOp, Call, Index, ListLit, Name, Num, Program, Unary, parse


class Mask:
    """Comparison result: a boolean array carried outside the gradient graph."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=bool)

    def as_float(self) -> Tensor:
        return Tensor(self.data.astype(np.float64))


def decay_weights(rate: float, T: int) -> np.ndarray:
    """Normalized geometric weights ``rate**t / sum``."""
    w = float(rate) ** np.arange(int(T), dtype=np.float64)
    return w / w.sum()


def _val(v):
    """Numeric operand: masks become 0/1 floats, python numbers stay numbers."""
    if isinstance(v, Mask):
        return v.as_float()
    return v


def _raw(v):
    if isinstance(v, Tensor):
        return v.data
    if isinstance(v, Mask):
        return v.data.astype(np.float64)
    return np.asarray(v, dtype=np.float64)


def _dims(d):
    return tuple(d) if isinstance(d, (list, tuple)) else int(d)


_SCALAR_OPS = {"+": "add", "-": "sub", "*": "mul", "/": "div", "**": "pow"}


class Evaluator:
    def __init__(self, program: Program, params: dict, scene):
        self.program = program
        self.params = params
        self.scene = scene

    def run(self, x: Tensor):
        env = {"x": x, "pi": math.pi, "B": x.shape[0], "N": x.shape[1], "T": x.shape[2]}
        env.update(self.params)
        for let in self.program.lets:
            val = self.eval(let.value, env)
            if len(let.names) == 1:
                env[let.names[0]] = val
            else:
                for name, item in zip(let.names, val):
                    env[name] = item
        out = tn.as_tensor(_val(self.eval(self.program.result, env)))
        if out.ndim == 0:
            out = out + np.zeros(x.shape[1])
        return out

    def eval(self, node, env):
        if isinstance(node, Num):
            return node.value
        if isinstance(node, Name):
            if node.id not in env:
                raise BindError(f"unbound identifier {node.id!r}", *node.pos)
            return env[node.id]
        if isinstance(node, ListLit):
            return [self.eval(i, env) for i in node.items]
        if isinstance(node, Unary):
            v = _val(self.eval(node.operand, env))
            return -v
        if isinstance(node, BinOp):
            return self.binop(node, env)
        if isinstance(node, Index):
            v = tn.as_tensor(_val(self.eval(node.base, env)))
            if node.is_slice:
                n = v.shape[-1]
                start, stop, _ = slice(node.start, node.stop).indices(n)
                return v[..., start:stop]
            return v[..., node.start]
        if isinstance(node, Call):
            return self.call(node, env)
        raise TypeError(type(node))

    def binop(self, node: BinOp, env):
        a = self.eval(node.left, env)
        b = self.eval(node.right, env)
        op = node.op
        if op == "&":
            return Mask(np.logical_and(a.data, b.data))
        if op in ("<", "<=", ">", ">="):
            ra, rb = _raw(a), _raw(b)
            return Mask({"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal}[op](ra, rb))
        a, b = _val(a), _val(b)
        if not isinstance(a, Tensor) and not isinstance(b, Tensor):
            return float(_raw(tn.elementwise(_SCALAR_OPS[op], a, b)))
        if op == "+":
            return tn.add(a, b)
        if op == "-":
            return tn.sub(a, b)
        if op == "*":
            return tn.mul(a, b)
        if op == "/":
            return tn.div(a, b)
        if op == "**":
            return tn.power(a, b)
        raise AssertionError(op)

    def call(self, node: Call, env):
        f = node.func
        args = [self.eval(a, env) for a in node.args]
        scene = self.scene
        if f == "transform_coord_agents_to_world":
            return dyn.transform_coord_agents_to_world(args[0], args[1], scene)
        if f == "transform_coord_world_to_agent_i":
            return dyn.transform_coord_world_to_agent_i(args[0], args[1], scene, int(args[2]))
        if f == "select_agent_ind":
            if isinstance(args[1], (list, tuple)):
                return tn.stack([dyn.select_agent_ind(args[0], int(i)) for i in args[1]], 0)
            return dyn.select_agent_ind(_val(args[0]), int(args[1]))
        if f == "get_current_lane_projection":
            return sc.get_current_lane_projection(args[0], args[1], scene)
        if f == "get_left_lane_projection":
            return sc.get_left_lane_projection(args[0], args[1], scene)
        if f == "get_right_lane_projection":
            return sc.get_right_lane_projection(args[0], args[1], scene)
        if f in ("mean", "sum", "min", "max", "norm"):
            kind = {"min": "min", "max": "max", "norm": "norm2", "mean": "mean", "sum": "sum"}[f]
            return tn.reduce(kind, _val(args[0]), _dims(args[1]))
        if f == "squeeze":
            v = tn.as_tensor(_val(args[0]))
            d = _dims(args[1])
            for dim in sorted((d,) if isinstance(d, int) else d, key=lambda k: -(k % v.ndim)):
                v = tn.squeeze(v, dim % v.ndim)
            return v
        if f == "softmin":
            v = tn.as_tensor(_val(args[0]))
            mask = args[2].data if len(args) == 3 else None
            return tn.softmin(v, _dims(args[1]), 1.0, mask)
        if f in ("abs", "sqrt", "sin", "cos", "exp", "sigmoid"):
            fn = {"abs": tn.absolute, "sqrt": tn.sqrt, "sin": tn.sin, "cos": tn.cos, "exp": tn.exp, "sigmoid": tn.sigmoid}[f]
            return fn(tn.as_tensor(_val(args[0])))
        if f == "clip_min":
            return tn.clip_min(tn.as_tensor(_val(args[0])), _val(args[1]))
        if f == "clip_max":
            return tn.clip_max(tn.as_tensor(_val(args[0])), _val(args[1]))
        if f == "fmod":
            return tn.fmod(tn.as_tensor(_val(args[0])), _val(args[1]))
        if f == "minimum":
            return tn.minimum(tn.as_tensor(_val(args[0])), _val(args[1]))
        if f == "maximum":
            return tn.maximum(tn.as_tensor(_val(args[0])), _val(args[1]))
        if f == "where":
            return tn.where(args[0].data, _val(args[1]), _val(args[2]))
        if f in ("pos", "vel", "yaw", "acc", "yawvel"):
            v = tn.as_tensor(args[0])
            lo = {"pos": 0, "vel": 2, "yaw": 3, "acc": 4, "yawvel": 5}[f]
            return v[..., lo : lo + (2 if f == "pos" else 1)]
        if f == "decay_weights":
            return Tensor(decay_weights(args[0], args[1]))
        raise AssertionError(f)


class GuidanceLoss:
    """A compiled program bound to a scene.  Calling it on an agent-frame
    ``(B, N, T, 6)`` tensor returns ``(N,)`` or ``(B, N)`` losses."""

    def __init__(self, program: Program, scene=None, **overrides):
        self.program = program
        params = program.defaults
        for k, v in overrides.items():
            if k not in params:
                raise BindError(f"unknown parameter {k!r} for loss {program.name}")
            params[k] = v
        self.params = params
        self.scene = scene
        self._checked: dict = {}

    @property
    def name(self) -> str:
        return self.program.name

    def rebind(self, scene) -> "GuidanceLoss":
        """Same program and parameters, new scene."""
        return GuidanceLoss(self.program, scene, **self.params)

    def check(self, B: int, T: int):
        key = (B, T)
        if key not in self._checked:
            self._checked[key] = typecheck_shapes(self.program, B, T, self.params)
        return self._checked[key]

    def __call__(self, x) -> Tensor:
        x = tn.as_tensor(x)
        if x.ndim != 4 or x.shape[-1] != 6:
            raise ValueError(f"loss input must be (B, N, T, 6), got {x.shape}")
        self.check(x.shape[0], x.shape[2])
        return Evaluator(self.program, self.params, self.scene).run(x)


def compile_program(program, scene=None, horizon: int = 20, **overrides) -> GuidanceLoss:
    """Accepts a :class:`Program` or GuideLang source text.  With a scene the
    program is shape-checked eagerly for ``B = scene.num_agents``."""
    if isinstance(program, str):
        program = parse(program)
    loss = GuidanceLoss(program, scene, **overrides)
    if scene is not None:
        loss.check(scene.num_agents, horizon)
    return loss
