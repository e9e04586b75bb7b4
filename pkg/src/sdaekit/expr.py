"""Scalar expression DSL used to define every coefficient function.

Expressions are immutable trees over variables ``x1..xn``, ``u1..um`` and
``t``, the seven unary functions ``sin cos tan atan exp log sqrt``, and the
arithmetic operators ``+ - * / ^`` (``^`` is right-associative and binds
tighter than unary minus, so ``-u1^2`` means ``-(u1^2)``).

Three consumers drive the design:

* symbolic differentiation (exact, with conservative constant folding),
* scalar evaluation with strict domain checking (errors name the node),
* compilation to numpy-vectorised callables for the integration hot loops.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Union

import numpy as np

from .errors import (
    EvaluationDomainError,
    ExpressionParseError,
    MissingBindingError,
)

__all__ = [
    "Constant",
    "Variable",
    "Unary",
    "Binary",
    "Expression",
    "UNARY_FUNCTIONS",
    "parse",
    "to_text",
    "differentiate",
    "evaluate",
    "free_variables",
    "substitute",
    "add",
    "sub",
    "mul",
    "div",
    "pow_",
    "neg",
    "func",
    "const",
    "var",
    "jacobian",
    "hessian",
    "compile_expr",
    "CompiledVector",
    "CompiledMatrix",
    "make_env",
]

UNARY_FUNCTIONS = ("sin", "cos", "tan", "atan", "exp", "log", "sqrt")

_VAR_RE = re.compile(r"^(?:[xu][1-9][0-9]*|t)$")


@dataclass(frozen=True)
class Constant:
    value: float

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True)
class Variable:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Unary:
    op: str  # 'neg' or a function name
    child: "Expression"

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True)
class Binary:
    op: str  # add | sub | mul | div | pow
    left: "Expression"
    right: "Expression"

    def __str__(self) -> str:
        return to_text(self)


Expression = Union[Constant, Variable, Unary, Binary]


# ---------------------------------------------------------------------------
# Smart constructors.  Folding is deliberately conservative: constants are
# combined and multiplicative/additive identities removed, nothing else.
# ---------------------------------------------------------------------------


def const(v: float) -> Constant:
    return Constant(float(v))


def var(name: str) -> Variable:
    return Variable(name)


def _cv(e: Expression) -> float | None:
    return e.value if isinstance(e, Constant) else None


def add(a: Expression, b: Expression) -> Expression:
    ca, cb = _cv(a), _cv(b)
    if ca is not None and cb is not None:
        return Constant(ca + cb)
    if ca == 0.0:
        return b
    if cb == 0.0:
        return a
    return Binary("add", a, b)


def sub(a: Expression, b: Expression) -> Expression:
    ca, cb = _cv(a), _cv(b)
    if ca is not None and cb is not None:
        return Constant(ca - cb)
    if cb == 0.0:
        return a
    if ca == 0.0:
        return neg(b)
    return Binary("sub", a, b)


def mul(a: Expression, b: Expression) -> Expression:
    ca, cb = _cv(a), _cv(b)
    if ca is not None and cb is not None:
        return Constant(ca * cb)
    if ca == 0.0 or cb == 0.0:
        return Constant(0.0)
    if ca == 1.0:
        return b
    if cb == 1.0:
        return a
    # fold a constant into a neighbouring constant*expr product
    if ca is not None and isinstance(b, Binary) and b.op == "mul":
        if _cv(b.left) is not None:
            return mul(Constant(ca * b.left.value), b.right)
        if _cv(b.right) is not None:
            return mul(Constant(ca * b.right.value), b.left)
    if cb is not None and isinstance(a, Binary) and a.op == "mul":
        if _cv(a.left) is not None:
            return mul(Constant(cb * a.left.value), a.right)
        if _cv(a.right) is not None:
            return mul(Constant(cb * a.right.value), a.left)
    return Binary("mul", a, b)


def div(a: Expression, b: Expression) -> Expression:
    ca, cb = _cv(a), _cv(b)
    if cb is not None and cb != 0.0:
        if ca is not None:
            return Constant(ca / cb)
        if cb == 1.0:
            return a
    return Binary("div", a, b)


def pow_(a: Expression, b: Expression) -> Expression:
    ca, cb = _cv(a), _cv(b)
    if cb == 1.0:
        return a
    if cb == 0.0:
        return Constant(1.0)
    if ca is not None and cb is not None:
        try:
            v = _pow_scalar(ca, cb, node=None)
        except EvaluationDomainError:
            return Binary("pow", a, b)
        if math.isfinite(v):
            return Constant(v)
    return Binary("pow", a, b)


def neg(a: Expression) -> Expression:
    ca = _cv(a)
    if ca is not None:
        return Constant(-ca)
    if isinstance(a, Unary) and a.op == "neg":
        return a.child
    return Unary("neg", a)


def func(name: str, child: Expression) -> Expression:
    if name not in UNARY_FUNCTIONS:
        raise ValueError(f"unknown function '{name}'")
    cc = _cv(child)
    if cc is not None:
        try:
            v = _apply_unary(name, cc, node=None)
        except EvaluationDomainError:
            return Unary(name, child)
        if math.isfinite(v):
            return Constant(v)
    return Unary(name, child)


# ---------------------------------------------------------------------------
# Parser.  Grammar (right-associative '^', unary minus below '^'):
#   expr   := term (('+'|'-') term)*
#   term   := factor (('*'|'/') factor)*
#   factor := '-' factor | power
#   power  := atom ('^' factor)?
#   atom   := NUMBER | IDENT '(' expr ')' | IDENT | '(' expr ')'
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if m is None:
                stripped = text[pos:].lstrip()
                if not stripped:
                    break
                off = len(text) - len(stripped)
                raise ExpressionParseError(
                    f"unexpected character '{text[off]}'", off
                )
            if m.lastgroup is not None:
                self.tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
            pos = m.end()
        self.i = 0

    def _peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None, len(self.text))

    def _next(self):
        tok = self._peek()
        self.i += 1
        return tok

    def _expect_op(self, symbol: str):
        kind, value, off = self._next()
        if kind != "op" or value != symbol:
            raise ExpressionParseError(f"expected '{symbol}'", off)

    def parse(self) -> Expression:
        e = self.expr()
        kind, value, off = self._peek()
        if kind is not None:
            raise ExpressionParseError(f"unexpected token '{value}'", off)
        return e

    def expr(self) -> Expression:
        e = self.term()
        while True:
            kind, value, _ = self._peek()
            if kind == "op" and value in "+-":
                self.i += 1
                rhs = self.term()
                e = add(e, rhs) if value == "+" else sub(e, rhs)
            else:
                return e

    def term(self) -> Expression:
        e = self.factor()
        while True:
            kind, value, _ = self._peek()
            if kind == "op" and value in "*/":
                self.i += 1
                rhs = self.factor()
                e = mul(e, rhs) if value == "*" else div(e, rhs)
            else:
                return e

    def factor(self) -> Expression:
        kind, value, _ = self._peek()
        if kind == "op" and value == "-":
            self.i += 1
            return neg(self.factor())
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        kind, value, _ = self._peek()
        if kind == "op" and value == "^":
            self.i += 1
            exponent = self.factor()
            return pow_(base, exponent)
        return base

    def atom(self) -> Expression:
        kind, value, off = self._next()
        if kind == "num":
            return Constant(float(value))
        if kind == "ident":
            nxt_kind, nxt_val, _ = self._peek()
            if nxt_kind == "op" and nxt_val == "(":
                if value not in UNARY_FUNCTIONS:
                    raise ExpressionParseError(f"unknown function '{value}'", off)
                self.i += 1
                inner = self.expr()
                self._expect_op(")")
                return Unary(value, inner)
            if value in UNARY_FUNCTIONS:
                raise ExpressionParseError(f"expected '(' after function '{value}'", off)
            if not _VAR_RE.match(value):
                raise ExpressionParseError(f"unknown variable '{value}'", off)
            return Variable(value)
        if kind == "op" and value == "(":
            inner = self.expr()
            self._expect_op(")")
            return inner
        if kind is None:
            raise ExpressionParseError("unexpected end of input", off)
        raise ExpressionParseError(f"unexpected token '{value}'", off)


def parse(text: str) -> Expression:
    """Parse expression text into an AST. Raises ExpressionParseError with offset."""
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Printing.  Round-trips through parse() to the identical AST.
# ---------------------------------------------------------------------------

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _prec(e: Expression) -> int:
    if isinstance(e, Binary):
        if e.op in ("add", "sub"):
            return _PREC_ADD
        if e.op in ("mul", "div"):
            return _PREC_MUL
        return _PREC_POW
    if isinstance(e, Unary) and e.op == "neg":
        return _PREC_NEG
    if isinstance(e, Constant) and (e.value < 0 or (e.value == 0 and math.copysign(1, e.value) < 0)):
        return _PREC_NEG  # prints with a leading '-'
    return _PREC_ATOM


def _format_number(v: float) -> str:
    if math.isfinite(v) and v == int(v) and abs(v) <= 1e16:
        return str(int(v))
    return repr(v)


def to_text(e: Expression) -> str:
    """Render an expression so that parse(to_text(e)) == e."""
    if isinstance(e, Constant):
        return _format_number(e.value)
    if isinstance(e, Variable):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            inner = to_text(e.child)
            if _prec(e.child) <= _PREC_MUL:
                inner = f"({inner})"
            return f"-{inner}"
        return f"{e.op}({to_text(e.child)})"
    sym = {"add": " + ", "sub": " - ", "mul": "*", "div": "/", "pow": "^"}[e.op]
    lhs, rhs = to_text(e.left), to_text(e.right)
    if e.op in ("add", "sub"):
        if _prec(e.left) < _PREC_ADD:
            lhs = f"({lhs})"
        if _prec(e.right) <= _PREC_ADD:
            rhs = f"({rhs})"
    elif e.op in ("mul", "div"):
        if _prec(e.left) < _PREC_MUL:
            lhs = f"({lhs})"
        if _prec(e.right) <= _PREC_MUL:
            rhs = f"({rhs})"
    else:  # pow: right-associative, binds above unary minus
        if _prec(e.left) <= _PREC_POW:
            lhs = f"({lhs})"
        if _prec(e.right) < _PREC_NEG:
            rhs = f"({rhs})"
    return f"{lhs}{sym}{rhs}"


# ---------------------------------------------------------------------------
# Differentiation.
# ---------------------------------------------------------------------------


def differentiate(e: Expression, name: str) -> Expression:
    """Exact symbolic derivative of e with respect to the named variable."""
    if isinstance(e, Constant):
        return Constant(0.0)
    if isinstance(e, Variable):
        return Constant(1.0 if e.name == name else 0.0)
    if isinstance(e, Unary):
        d = differentiate(e.child, name)
        c = e.child
        if e.op == "neg":
            return neg(d)
        if e.op == "sin":
            return mul(func("cos", c), d)
        if e.op == "cos":
            return neg(mul(func("sin", c), d))
        if e.op == "tan":
            return mul(add(Constant(1.0), pow_(func("tan", c), Constant(2.0))), d)
        if e.op == "atan":
            return div(d, add(Constant(1.0), pow_(c, Constant(2.0))))
        if e.op == "exp":
            return mul(func("exp", c), d)
        if e.op == "log":
            return div(d, c)
        if e.op == "sqrt":
            return div(d, mul(Constant(2.0), func("sqrt", c)))
        raise ValueError(f"unknown unary op '{e.op}'")
    da = differentiate(e.left, name)
    db = differentiate(e.right, name)
    a, b = e.left, e.right
    if e.op == "add":
        return add(da, db)
    if e.op == "sub":
        return sub(da, db)
    if e.op == "mul":
        return add(mul(da, b), mul(a, db))
    if e.op == "div":
        return div(sub(mul(da, b), mul(a, db)), pow_(b, Constant(2.0)))
    if e.op == "pow":
        cb = _cv(b)
        if cb is not None:
            return mul(mul(b, pow_(a, Constant(cb - 1.0))), da)
        if _cv(a) is not None:
            return mul(mul(pow_(a, b), func("log", a)), db)
        return mul(
            pow_(a, b),
            add(mul(db, func("log", a)), mul(b, div(da, a))),
        )
    raise ValueError(f"unknown binary op '{e.op}'")


def jacobian(exprs: Iterable[Expression], names: Iterable[str]) -> list[list[Expression]]:
    names = list(names)
    return [[differentiate(e, nm) for nm in names] for e in exprs]


def hessian(e: Expression, names_a: Iterable[str], names_b: Iterable[str]) -> list[list[Expression]]:
    names_b = list(names_b)
    return [[differentiate(differentiate(e, na), nb) for nb in names_b] for na in names_a]


# ---------------------------------------------------------------------------
# Evaluation (scalar reference path, strict domain checking).
# ---------------------------------------------------------------------------


def _apply_unary(op: str, v: float, node) -> float:
    try:
        if op == "neg":
            return -v
        if op == "sin":
            return math.sin(v)
        if op == "cos":
            return math.cos(v)
        if op == "tan":
            return math.tan(v)
        if op == "atan":
            return math.atan(v)
        if op == "exp":
            return math.exp(v)
        if op == "log":
            if v <= 0.0:
                raise EvaluationDomainError(f"log of non-positive value {v!r}", node)
            return math.log(v)
        if op == "sqrt":
            if v < 0.0:
                raise EvaluationDomainError(f"sqrt of negative value {v!r}", node)
            return math.sqrt(v)
    except OverflowError as exc:
        raise EvaluationDomainError(f"overflow: {exc}", node) from None
    raise ValueError(f"unknown unary op '{op}'")


def _pow_scalar(base: float, exponent: float, node) -> float:
    if base < 0.0 and not float(exponent).is_integer():
        raise EvaluationDomainError(
            f"negative base {base!r} with non-integer exponent {exponent!r}", node
        )
    if base == 0.0 and exponent < 0.0:
        raise EvaluationDomainError("zero base with negative exponent", node)
    try:
        return base ** exponent
    except OverflowError:
        raise EvaluationDomainError("overflow in power", node) from None


def evaluate(e: Expression, bindings: Mapping[str, float]) -> float:
    """Evaluate with every free variable bound; missing bindings are errors."""
    if isinstance(e, Constant):
        return e.value
    if isinstance(e, Variable):
        try:
            return float(bindings[e.name])
        except KeyError:
            raise MissingBindingError(e.name) from None
    if isinstance(e, Unary):
        return _apply_unary(e.op, evaluate(e.child, bindings), e)
    lv = evaluate(e.left, bindings)
    rv = evaluate(e.right, bindings)
    if e.op == "add":
        return lv + rv
    if e.op == "sub":
        return lv - rv
    if e.op == "mul":
        return lv * rv
    if e.op == "div":
        if rv == 0.0:
            raise EvaluationDomainError("division by zero", e)
        return lv / rv
    if e.op == "pow":
        return _pow_scalar(lv, rv, e)
    raise ValueError(f"unknown binary op '{e.op}'")


def free_variables(e: Expression) -> frozenset[str]:
    if isinstance(e, Constant):
        return frozenset()
    if isinstance(e, Variable):
        return frozenset((e.name,))
    if isinstance(e, Unary):
        return free_variables(e.child)
    return free_variables(e.left) | free_variables(e.right)


def substitute(e: Expression, mapping: Mapping[str, Expression]) -> Expression:
    """Replace variables by expressions (used to compose maps symbolically)."""
    if isinstance(e, Constant):
        return e
    if isinstance(e, Variable):
        return mapping.get(e.name, e)
    if isinstance(e, Unary):
        child = substitute(e.child, mapping)
        return neg(child) if e.op == "neg" else func(e.op, child)
    l = substitute(e.left, mapping)
    r = substitute(e.right, mapping)
    return {"add": add, "sub": sub, "mul": mul, "div": div, "pow": pow_}[e.op](l, r)


# ---------------------------------------------------------------------------
# Compilation to numpy callables.  The generated function accepts an
# environment dict mapping variable names to floats or same-shaped arrays and
# evaluates elementwise.  Out-of-domain inputs produce nan/inf rather than
# raising; the integrator turns non-finite states into a path status.
# ---------------------------------------------------------------------------

_NP_FUNCS = {
    "sin": "_np.sin",
    "cos": "_np.cos",
    "tan": "_np.tan",
    "atan": "_np.arctan",
    "exp": "_np.exp",
    "log": "_np.log",
    "sqrt": "_np.sqrt",
}


def _emit(e: Expression) -> str:
    if isinstance(e, Constant):
        return repr(e.value)
    if isinstance(e, Variable):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"(-{_emit(e.child)})"
        return f"{_NP_FUNCS[e.op]}({_emit(e.child)})"
    l, r = _emit(e.left), _emit(e.right)
    if e.op == "pow":
        cv = _cv(e.right)
        if cv is not None and float(cv).is_integer() and abs(cv) < 128:
            r = str(int(cv))
        return f"({l} ** {r})"
    sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[e.op]
    return f"({l} {sym} {r})"


def compile_expr(e: Expression) -> Callable[[Mapping[str, np.ndarray]], np.ndarray]:
    """Compile to a function of an environment dict; numpy semantics inside."""
    names = sorted(free_variables(e))
    lines = ["def _compiled(env):"]
    for nm in names:
        lines.append(f"    {nm} = env['{nm}']")
    lines.append(f"    return {_emit(e)}")
    src = "\n".join(lines)
    namespace = {"_np": np}
    exec(compile(src, "<sdae-expr>", "exec"), namespace)
    fn = namespace["_compiled"]
    fn.expression = e
    return fn


class CompiledVector:
    """Vector of compiled expressions evaluated against a shared environment."""

    def __init__(self, exprs: Iterable[Expression]):
        self.exprs = list(exprs)
        self._fns = [compile_expr(e) for e in self.exprs]
        self.size = len(self.exprs)

    def __call__(self, env: Mapping[str, np.ndarray], batch_shape: tuple[int, ...]) -> np.ndarray:
        out = np.empty(batch_shape + (self.size,))
        for i, fn in enumerate(self._fns):
            out[..., i] = fn(env)
        return out


class CompiledMatrix:
    """Matrix of compiled expressions evaluated against a shared environment."""

    def __init__(self, rows: Iterable[Iterable[Expression]]):
        self.exprs = [list(r) for r in rows]
        self._fns = [[compile_expr(e) for e in row] for row in self.exprs]
        self.shape = (len(self.exprs), len(self.exprs[0]) if self.exprs else 0)

    def __call__(self, env: Mapping[str, np.ndarray], batch_shape: tuple[int, ...]) -> np.ndarray:
        r, c = self.shape
        out = np.empty(batch_shape + (r, c))
        for i in range(r):
            for j in range(c):
                out[..., i, j] = self._fns[i][j](env)
        return out


def make_env(labels: Iterable[str], points: np.ndarray) -> dict[str, np.ndarray]:
    """Build an evaluation environment from coordinate columns.

    ``points`` has shape ``(..., N)`` with one column per label.
    """
    points = np.asarray(points, dtype=float)
    return {lab: points[..., i] for i, lab in enumerate(labels)}
