"""Symbolic shape inference for GuideLang programs.

Dimensions are the symbols ``"B"``, ``"N"``, ``"T"`` or concrete ints.  Two
different symbols never broadcast against each other, so a program that
silently mixes the agent and time axes is rejected even when ``B == T``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .syntax import (
    BUILTINS, CONSTANTS, BinOp, Call, GuideLangError, Index, ListLit, Name, Node, Num, Program, Unary,
)


class BindError(GuideLangError):
    pass


class GuideShapeError(GuideLangError):
    pass


@dataclass(frozen=True)
class Abs:
    """Abstract value: a tensor shape, a compile-time constant, a list or a tuple."""

    kind: str  # tensor | const | list | tuple
    shape: tuple = ()
    value: object = None  # constants and lists carry their value when known
    mask: bool = False
    items: tuple = ()


def fmt(shape) -> str:
    return "(" + ", ".join(str(d) for d in shape) + ")"


def _pos(node):
    return node.pos if getattr(node, "pos", None) else (None, None)


def _fail(node, msg, cls=GuideShapeError):
    line, col = _pos(node)
    raise cls(msg, line, col)


def broadcast(a: tuple, b: tuple, node) -> tuple:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            _fail(node, f"cannot broadcast shapes {fmt(a)} and {fmt(b)} in {_describe(node)}")
    return tuple(reversed(out))


def _describe(node) -> str:
    if isinstance(node, Call):
        return f"call to {node.func}"
    if isinstance(node, BinOp):
        return f"'{node.op}' expression"
    if isinstance(node, Index):
        return "index expression"
    return type(node).__name__


class ShapeChecker:
    def __init__(self, program: Program, B: int, T: int, overrides: dict | None = None):
        self.program = program
        self.B, self.T = int(B), int(T)
        self.report: list = []  # (description, shape) per let binding and the result
        params = program.defaults
        for k, v in (overrides or {}).items():
            if k not in params:
                raise BindError(f"unknown parameter {k!r} for loss {program.name}")
            params[k] = v
        self.env = {"x": Abs("tensor", ("B", "N", "T", 6))}
        for c in CONSTANTS:
            self.env[c] = Abs("const", value={"pi": 3.141592653589793, "B": self.B, "T": self.T}.get(c), shape=())
        for k, v in params.items():
            if isinstance(v, (list, tuple)):
                self.env[k] = Abs("list", value=tuple(v))
            else:
                self.env[k] = Abs("const", value=v)

    def run(self) -> Abs:
        for let in self.program.lets:
            val = self.infer(let.value)
            if len(let.names) == 1:
                if val.kind == "tuple":
                    _fail(let, f"{_describe(let.value)} returns {len(val.items)} values; bind them with 'let a, b = ...'")
                self.env[let.names[0]] = val
                self.report.append((let.names[0], val.shape))
            else:
                if val.kind != "tuple" or len(val.items) != len(let.names):
                    n = len(val.items) if val.kind == "tuple" else 1
                    _fail(let, f"cannot unpack {n} value(s) into {len(let.names)} names")
                for name, item in zip(let.names, val.items):
                    self.env[name] = item
                    self.report.append((name, item.shape))
        res = self.infer(self.program.result)
        if res.kind == "tuple":
            _fail(self.program.result, "the result must be a single tensor")
        shape = res.shape
        if res.kind == "const" or (res.kind == "tensor" and shape == () and not res.mask):
            # a scalar loss applies to every sample alike
            res, shape = Abs("tensor", ("N",)), ("N",)
        if shape not in (("N",), ("B", "N")):
            _fail(self.program.result, f"result must have shape (N) or (B, N), got {fmt(shape)}")
        self.report.append(("<result>", shape))
        return res

    # ------------------------------------------------------------------
    def infer(self, node: Node) -> Abs:
        if isinstance(node, Num):
            return Abs("const", value=node.value)
        if isinstance(node, Name):
            if node.id not in self.env:
                _fail(node, f"unbound identifier {node.id!r}", BindError)
            return self.env[node.id]
        if isinstance(node, ListLit):
            vals = [self.infer(i) for i in node.items]
            if not all(v.kind == "const" for v in vals):
                _fail(node, "list literals may only contain constants")
            return Abs("list", value=tuple(v.value for v in vals))
        if isinstance(node, Unary):
            v = self.tensorish(node.operand)
            return Abs(v.kind, v.shape, None if v.value is None else -v.value)
        if isinstance(node, BinOp):
            return self.binop(node)
        if isinstance(node, Index):
            return self.index(node)
        if isinstance(node, Call):
            return self.call(node)
        raise TypeError(type(node))

    def tensorish(self, node) -> Abs:
        v = self.infer(node)
        if v.kind not in ("tensor", "const"):
            _fail(node, f"expected a tensor or number, got a {v.kind}")
        return v

    def binop(self, node: BinOp) -> Abs:
        a, b = self.tensorish(node.left), self.tensorish(node.right)
        shape = broadcast(a.shape, b.shape, node)
        if node.op == "&":
            if not (a.mask and b.mask):
                _fail(node, "'&' needs comparison masks on both sides")
            return Abs("tensor", shape, mask=True)
        if node.op in ("<", "<=", ">", ">="):
            return Abs("tensor", shape, mask=True)
        if a.kind == "const" and b.kind == "const" and a.value is not None and b.value is not None:
            return Abs("const", (), _fold(node.op, a.value, b.value))
        return Abs("tensor", shape)

    def index(self, node: Index) -> Abs:
        v = self.tensorish(node.base)
        if not v.shape:
            _fail(node, "cannot index a scalar")
        last = v.shape[-1]
        if not isinstance(last, int):
            _fail(node, f"indexing needs a concrete last dimension, got {last}")
        if node.is_slice:
            start, stop, step = slice(node.start, node.stop).indices(last)
            n = max(0, stop - start)
            if n == 0:
                _fail(node, f"empty slice {node.start}:{node.stop} of a dimension of size {last}")
            return Abs("tensor", v.shape[:-1] + (n,))
        i = node.start
        if not -last <= i < last:
            _fail(node, f"index {i} out of range for last dimension {last}")
        return Abs("tensor", v.shape[:-1])

    def _dims(self, node, shape):
        d = self.infer(node)
        if d.kind == "const" and isinstance(d.value, int):
            dims = (d.value,)
        elif d.kind == "list":
            dims = tuple(d.value)
        else:
            _fail(node, "reduction dims must be an integer or a list of integers")
        out = []
        for x in dims:
            if not isinstance(x, int) or not -len(shape) <= x < len(shape):
                _fail(node, f"dim {x} out of range for shape {fmt(shape)}")
            out.append(x % len(shape))
        if len(set(out)) != len(out):
            _fail(node, "reduction dims must be distinct")
        return tuple(out)

    def _index_arg(self, node):
        v = self.infer(node)
        if v.kind == "const" and isinstance(v.value, int):
            if not 0 <= v.value < self.B:
                _fail(node, f"agent index {v.value} out of range for B={self.B}")
            return v.value
        if v.kind == "list":
            for i in v.value:
                if not isinstance(i, int) or not 0 <= i < self.B:
                    _fail(node, f"agent index {i} out of range for B={self.B}")
            return tuple(v.value)
        _fail(node, "agent index must be an integer or a list of integers")

    def _need(self, node, arg, v: Abs, last=None, lead=("B", "N", "T")):
        want = lead + ((last,) if last is not None else ())
        if v.kind != "tensor" or v.shape != want:
            _fail(arg, f"{node.func} expects shape {fmt(want)}, got {fmt(v.shape) if v.kind == 'tensor' else v.kind}")

    def call(self, node: Call) -> Abs:
        f, args = node.func, node.args
        if f not in BUILTINS:
            _fail(node, f"unknown builtin {f!r}", BindError)
        if f in ("transform_coord_agents_to_world", "transform_coord_world_to_agent_i"):
            p, y = self.infer(args[0]), self.infer(args[1])
            self._need(node, args[0], p, 2)
            self._need(node, args[1], y, 1)
            if f.endswith("agent_i"):
                i = self._index_arg(args[2])
                if not isinstance(i, int):
                    _fail(args[2], "transform_coord_world_to_agent_i takes a single agent index")
            return Abs("tuple", items=(Abs("tensor", p.shape), Abs("tensor", y.shape)))
        if f.startswith("get_") and f.endswith("_projection"):
            p, y = self.infer(args[0]), self.infer(args[1])
            self._need(node, args[0], p, 2)
            self._need(node, args[1], y, 1)
            return Abs("tensor", ("B", "N", "T", 3))
        if f == "select_agent_ind":
            v = self.tensorish(args[0])
            if not v.shape or v.shape[0] != "B":
                _fail(args[0], f"select_agent_ind needs a leading agent dimension B, got {fmt(v.shape)}")
            i = self._index_arg(args[1])
            if isinstance(i, tuple):
                return Abs("tensor", (len(i),) + v.shape[1:], mask=v.mask)
            return Abs("tensor", v.shape[1:], mask=v.mask)
        if f in ("mean", "sum", "min", "max", "norm", "softmin", "squeeze"):
            v = self.tensorish(args[0])
            dims = self._dims(args[1], v.shape)
            if f == "squeeze":
                for d in dims:
                    if v.shape[d] != 1:
                        _fail(node, f"cannot squeeze dim {d} of size {v.shape[d]}")
            if f == "softmin":
                if len(dims) != 1:
                    _fail(node, "softmin reduces a single dim")
                if len(args) == 3:
                    m = self.tensorish(args[2])
                    if not m.mask:
                        _fail(args[2], "softmin mask must be a comparison")
                    broadcast(v.shape, m.shape, node)
            return Abs("tensor", tuple(d for i, d in enumerate(v.shape) if i not in dims))
        if f in ("abs", "sqrt", "sin", "cos", "exp", "sigmoid"):
            v = self.tensorish(args[0])
            return Abs("tensor", v.shape)
        if f in ("clip_min", "clip_max", "fmod", "minimum", "maximum"):
            a, b = self.tensorish(args[0]), self.tensorish(args[1])
            return Abs("tensor", broadcast(a.shape, b.shape, node))
        if f == "where":
            c = self.tensorish(args[0])
            if not c.mask:
                _fail(args[0], "where needs a comparison mask as its first argument")
            a, b = self.tensorish(args[1]), self.tensorish(args[2])
            return Abs("tensor", broadcast(broadcast(c.shape, a.shape, node), b.shape, node))
        if f in ("pos", "vel", "yaw", "acc", "yawvel"):
            v = self.tensorish(args[0])
            if not v.shape or v.shape[-1] != 6:
                _fail(args[0], f"{f} needs a 6-channel trajectory, got {fmt(v.shape)}")
            return Abs("tensor", v.shape[:-1] + ((2,) if f == "pos" else (1,)))
        if f == "decay_weights":
            r = self.infer(args[0])
            if r.kind != "const":
                _fail(args[0], "decay rate must be a constant")
            if isinstance(args[1], Name) and args[1].id == "T":
                return Abs("tensor", ("T",))
            n = self.infer(args[1])
            if n.kind != "const" or not isinstance(n.value, int) or n.value < 1:
                _fail(args[1], "decay_weights length must be T or a positive integer")
            return Abs("tensor", (n.value,))
        raise AssertionError(f)


def _fold(op, a, b):
    try:
        return {
            "+": lambda: a + b, "-": lambda: a - b, "*": lambda: a * b,
            "/": lambda: a / b, "**": lambda: a**b,
        }[op]()
    except (ZeroDivisionError, OverflowError):
        return None


def typecheck_shapes(program: Program, B: int, T: int, overrides: dict | None = None):
    """Annotate every binding; returns ``(result_shape, report)``.

    ``report`` lists ``(name, shape)`` for each let binding and ``<result>``.
    """
    chk = ShapeChecker(program, B, T, overrides)
    res = chk.run()
    return res.shape, chk.report
