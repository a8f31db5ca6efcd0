"""GuideLang lexer, parser, AST and pretty printer.

Grammar (EBNF)::

    program  = "loss" IDENT "(" [ param { "," param } ] ")" "{" { let } "return" expr ";" "}" ;
    param    = IDENT "=" literal ;
    literal  = [ "-" ] NUMBER | "[" [ [ "-" ] NUMBER { "," [ "-" ] NUMBER } ] "]" ;
    let      = "let" IDENT { "," IDENT } "=" expr ";" ;
    expr     = conj ;
    conj     = compare { "&" compare } ;
    compare  = sum [ ( "<" | "<=" | ">" | ">=" ) sum ] ;
    sum      = product { ( "+" | "-" ) product } ;
    product  = unary { ( "*" | "/" ) unary } ;
    unary    = "-" unary | power ;
    power    = postfix [ "**" unary ] ;
    postfix  = primary { "[" "..." "," index "]" } ;
    index    = INT | [ INT ] ":" [ INT ]            (INT may carry a leading "-") ;
    primary  = NUMBER | IDENT | IDENT "(" [ expr { "," expr } ] ")"
             | "(" expr ")" | "[" [ expr { "," expr } ] "]" ;

Comments start with ``#`` and run to the end of the line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field


class GuideLangError(Exception):
    """Base error; ``line``/``col`` are 1-based when known."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line, self.col = line, col
        where = f"{line}:{col}: " if line is not None else ""
        super().__init__(where + message)
        self.message = message


class ParseError(GuideLangError):
    pass


BUILTINS = {
    # helpers from the loss-function API; the scene is implicit
    "transform_coord_agents_to_world": 2,
    "transform_coord_world_to_agent_i": 3,
    "select_agent_ind": 2,
    "get_current_lane_projection": 2,
    "get_left_lane_projection": 2,
    "get_right_lane_projection": 2,
    # reductions: (expr, dim) ; softmin takes an optional mask
    "mean": 2, "sum": 2, "min": 2, "max": 2, "norm": 2, "squeeze": 2, "softmin": (2, 3),
    # elementwise
    "abs": 1, "sqrt": 1, "sin": 1, "cos": 1, "exp": 1, "sigmoid": 1,
    "clip_min": 2, "clip_max": 2, "fmod": 2, "minimum": 2, "maximum": 2, "where": 3,
    # channel selectors, all keep the last dim
    "pos": 1, "vel": 1, "yaw": 1, "acc": 1, "yawvel": 1,
    "decay_weights": 2,
}
HELPERS = tuple(list(BUILTINS)[:6])
CONSTANTS = ("pi", "B", "N", "T")
KEYWORDS = {"loss", "let", "return"}


def builtin_catalog() -> str:
    return ", ".join(sorted(BUILTINS))


# ---------------------------------------------------------------- AST

@dataclass(frozen=True)
class Node:
    pass


@dataclass(frozen=True)
class Num(Node):
    value: float | int
    pos: tuple = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Name(Node):
    id: str
    pos: tuple = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class ListLit(Node):
    items: tuple
    pos: tuple = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Call(Node):
    func: str
    args: tuple
    pos: tuple = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Unary(Node):
    op: str
    operand: Node
    pos: tuple = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node
    pos: tuple = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Index(Node):
    """Last-dim indexing ``base[..., i]`` (``stop is None and not is_slice``)
    or slicing ``base[..., start:stop]``."""

    base: Node
    start: int | None
    stop: int | None
    is_slice: bool
    pos: tuple = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Let(Node):
    names: tuple
    value: Node
    pos: tuple = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Program(Node):
    name: str
    params: tuple  # ((name, value), ...) with value a number or tuple of numbers
    lets: tuple
    result: Node
    pos: tuple = field(default=(0, 0), compare=False, repr=False)

    @property
    def defaults(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.params}


# ---------------------------------------------------------------- lexer

TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\.\.\.|\*\*|<=|>=|[-+*/<>&=(){}\[\],;:])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # num | ident | op | eof
    text: str
    line: int
    col: int


def tokenize(text: str) -> list:
    tokens = []
    line, line_start, i = 1, 0, 0
    while i < len(text):
        m = TOKEN_RE.match(text, i)
        if not m:
            raise ParseError(f"unexpected character {text[i]!r}", line, i - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), line, i - line_start + 1))
        i = m.end()
    tokens.append(Token("eof", "", line, i - line_start + 1))
    return tokens


def _number(text: str):
    if re.fullmatch(r"\d+", text):
        return int(text)
    return float(text)


# ---------------------------------------------------------------- parser

class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise ParseError(f"{msg}, found {found}", tok.line, tok.col)

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("op", "ident") and t.text == text

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> Token:
        if not self.at(text):
            self.error(f"expected {text!r}")
        tok = self.tok
        self.i += 1
        return tok

    def ident(self, what: str = "identifier") -> Token:
        t = self.tok
        if t.kind != "ident" or t.text in KEYWORDS:
            self.error(f"expected {what}")
        self.i += 1
        return t

    # program structure
    def program(self) -> Program:
        start = self.expect("loss")
        name = self.ident("loss name").text
        self.expect("(")
        params = []
        if not self.at(")"):
            params.append(self.param())
            while self.accept(","):
                params.append(self.param())
        self.expect(")")
        seen = set()
        for pname, _ in params:
            if pname in CONSTANTS or pname == "x":
                raise ParseError(f"parameter name {pname!r} shadows a predefined name", start.line, start.col)
            if pname in seen:
                raise ParseError(f"duplicate parameter {pname!r}", start.line, start.col)
            seen.add(pname)
        self.expect("{")
        lets = []
        while self.at("let"):
            lets.append(self.let())
        self.expect("return")
        result = self.expr()
        self.expect(";")
        self.expect("}")
        if self.tok.kind != "eof":
            self.error("expected end of input after the closing '}'")
        return Program(name, tuple(params), tuple(lets), result, (start.line, start.col))

    def signed_number(self):
        neg = self.accept("-")
        t = self.tok
        if t.kind != "num":
            self.error("expected a number")
        self.i += 1
        v = _number(t.text)
        return -v if neg else v

    def param(self):
        name = self.ident("parameter name").text
        self.expect("=")
        if self.accept("["):
            items = []
            if not self.at("]"):
                items.append(self.signed_number())
                while self.accept(","):
                    items.append(self.signed_number())
            self.expect("]")
            return name, tuple(items)
        return name, self.signed_number()

    def let(self) -> Let:
        t = self.expect("let")
        names = [self.ident("binding name").text]
        while self.accept(","):
            names.append(self.ident("binding name").text)
        self.expect("=")
        value = self.expr()
        self.expect(";")
        return Let(tuple(names), value, (t.line, t.col))

    # expressions
    def expr(self) -> Node:
        return self.conj()

    def conj(self) -> Node:
        left = self.compare()
        while self.at("&"):
            t = self.expect("&")
            left = BinOp("&", left, self.compare(), (t.line, t.col))
        return left

    def compare(self) -> Node:
        left = self.sum()
        for op in ("<=", ">=", "<", ">"):
            if self.at(op):
                t = self.expect(op)
                return BinOp(op, left, self.sum(), (t.line, t.col))
        return left

    def sum(self) -> Node:
        left = self.product()
        while self.at("+") or self.at("-"):
            t = self.tok
            self.i += 1
            left = BinOp(t.text, left, self.product(), (t.line, t.col))
        return left

    def product(self) -> Node:
        left = self.unary()
        while self.at("*") or self.at("/"):
            t = self.tok
            self.i += 1
            left = BinOp(t.text, left, self.unary(), (t.line, t.col))
        return left

    def unary(self) -> Node:
        if self.at("-"):
            t = self.expect("-")
            return Unary("-", self.unary(), (t.line, t.col))
        return self.power()

    def power(self) -> Node:
        base = self.postfix()
        if self.at("**"):
            t = self.expect("**")
            return BinOp("**", base, self.unary(), (t.line, t.col))
        return base

    def index_int(self):
        neg = self.accept("-")
        t = self.tok
        if t.kind != "num" or not re.fullmatch(r"\d+", t.text):
            self.error("expected an integer index")
        self.i += 1
        return -int(t.text) if neg else int(t.text)

    def postfix(self) -> Node:
        node = self.primary()
        while self.at("["):
            t = self.expect("[")
            self.expect("...")
            self.expect(",")
            start = stop = None
            if self.at(":"):
                self.expect(":")
                if not self.at("]"):
                    stop = self.index_int()
                node = Index(node, None, stop, True, (t.line, t.col))
            else:
                start = self.index_int()
                if self.accept(":"):
                    if not self.at("]"):
                        stop = self.index_int()
                    node = Index(node, start, stop, True, (t.line, t.col))
                else:
                    node = Index(node, start, None, False, (t.line, t.col))
            self.expect("]")
        return node

    def args(self, close: str) -> tuple:
        items = []
        if not self.at(close):
            items.append(self.expr())
            while self.accept(","):
                items.append(self.expr())
        self.expect(close)
        return tuple(items)

    def primary(self) -> Node:
        t = self.tok
        if t.kind == "num":
            self.i += 1
            return Num(_number(t.text), (t.line, t.col))
        if t.kind == "ident" and t.text not in KEYWORDS:
            self.i += 1
            if self.at("("):
                if t.text not in BUILTINS:
                    raise ParseError(
                        f"unknown builtin {t.text!r}; available builtins: {builtin_catalog()}", t.line, t.col
                    )
                self.expect("(")
                args = self.args(")")
                arity = BUILTINS[t.text]
                ok = len(args) in arity if isinstance(arity, tuple) else len(args) == arity
                if not ok:
                    raise ParseError(f"{t.text} takes {arity} argument(s), got {len(args)}", t.line, t.col)
                return Call(t.text, args, (t.line, t.col))
            return Name(t.text, (t.line, t.col))
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        if self.at("["):
            self.expect("[")
            return ListLit(self.args("]"), (t.line, t.col))
        self.error("expected an expression")


def parse(text: str) -> Program:
    """Parse GuideLang source into a :class:`Program`."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    return _Parser(text).program()


# ---------------------------------------------------------------- printer

_PREC = {"&": 1, "<": 2, "<=": 2, ">": 2, ">=": 2, "+": 3, "-": 3, "*": 4, "/": 4, "neg": 5, "**": 6}


def _num(v) -> str:
    return repr(v)


def _expr(node: Node, parent: int = 0) -> str:
    if isinstance(node, Num):
        s = _num(node.value)
        return s
    if isinstance(node, Name):
        return node.id
    if isinstance(node, ListLit):
        return "[" + ", ".join(_expr(i) for i in node.items) + "]"
    if isinstance(node, Call):
        return f"{node.func}(" + ", ".join(_expr(a) for a in node.args) + ")"
    if isinstance(node, Index):
        base = _expr(node.base, 7)
        if node.is_slice:
            a = "" if node.start is None else str(node.start)
            b = "" if node.stop is None else str(node.stop)
            return f"{base}[..., {a}:{b}]"
        return f"{base}[..., {node.start}]"
    if isinstance(node, Unary):
        s = "-" + _expr(node.operand, _PREC["neg"])
        return f"({s})" if parent > _PREC["neg"] else s
    if isinstance(node, BinOp):
        p = _PREC[node.op]
        if node.op == "**":
            # right operand is a unary-level expression, base binds tighter
            s = f"{_expr(node.left, p + 1)} ** {_expr(node.right, _PREC['neg'])}"
        elif node.op in ("<", "<=", ">", ">="):
            s = f"{_expr(node.left, p + 1)} {node.op} {_expr(node.right, p + 1)}"
        else:
            s = f"{_expr(node.left, p)} {node.op} {_expr(node.right, p + 1)}"
        return f"({s})" if parent > p else s
    raise TypeError(f"cannot print {type(node).__name__}")


def _param_value(v) -> str:
    if isinstance(v, tuple):
        return "[" + ", ".join(_num(x) for x in v) + "]"
    return _num(v)


def pretty_print(program: Program) -> str:
    params = ", ".join(f"{k} = {_param_value(v)}" for k, v in program.params)
    lines = [f"loss {program.name}({params}) {{"]
    for let in program.lets:
        lines.append(f"    let {', '.join(let.names)} = {_expr(let.value)};")
    lines.append(f"    return {_expr(program.result)};")
    lines.append("}")
    return "\n".join(lines) + "\n"
