"""GuideLang: a small language for differentiable guidance losses."""

from .compiler import GuidanceLoss, compile_program, decay_weights
from .rules import RULES, Rule, rule
from .shapes import BindError, GuideShapeError, typecheck_shapes
from .syntax import BUILTINS, GuideLangError, ParseError, Program, parse, pretty_print

__all__ = [
    "BUILTINS", "BindError", "GuideLangError", "GuideShapeError", "GuidanceLoss", "ParseError",
    "Program", "RULES", "Rule", "compile_program", "decay_weights", "parse", "pretty_print",
    "rule", "typecheck_shapes",
]
