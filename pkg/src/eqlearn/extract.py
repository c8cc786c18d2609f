"""Analytic expression extraction from a sparse network, plus simplify/eval/render.

The extracted AST represents the network with every inactive weight treated as
exactly zero and copy chains collapsed to direct references.  Division keeps
the training-time guard semantics during evaluation (output 0 when the
denominator is at or below the guard); rendering prints a plain quotient.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .netgraph import (DEFAULT_ACTIVITY_THRESHOLD, DEFAULT_DIV_GUARD, Network,
                       UnitKind, activity)


@dataclass(frozen=True)
class Expr:
    pass


@dataclass(frozen=True)
class Constant(Expr):
    value: float


@dataclass(frozen=True)
class Variable(Expr):
    name: str


@dataclass(frozen=True)
class Unary(Expr):
    op: str  # sin | tanh | arctan
    child: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Div(Expr):
    num: Expr
    den: Expr


@dataclass(frozen=True)
class Add(Expr):
    """Weighted n-ary sum: sum(coef_i * child_i) + const."""

    terms: tuple[tuple[float, Expr], ...]
    const: float = 0.0


_UNARY_FN = {"sin": np.sin, "tanh": np.tanh, "arctan": np.arctan}


def eval_expression(expr: Expr, env: dict[str, float],
                    div_guard: float = DEFAULT_DIV_GUARD) -> float:
    """Recursive evaluation with the guarded-division convention."""
    if isinstance(expr, Constant):
        return expr.value
    if isinstance(expr, Variable):
        return env[expr.name]
    if isinstance(expr, Unary):
        return float(_UNARY_FN[expr.op](eval_expression(expr.child, env, div_guard)))
    if isinstance(expr, Mul):
        return eval_expression(expr.left, env, div_guard) * eval_expression(expr.right, env, div_guard)
    if isinstance(expr, Div):
        den = eval_expression(expr.den, env, div_guard)
        if den <= div_guard:
            return 0.0
        return eval_expression(expr.num, env, div_guard) / den
    if isinstance(expr, Add):
        total = expr.const
        for c, child in expr.terms:
            total += c * eval_expression(child, env, div_guard)
        return total
    raise TypeError(f"not an expression node: {expr!r}")


def eval_batch(expr: Expr, X: np.ndarray, input_names: tuple[str, ...],
               div_guard: float = DEFAULT_DIV_GUARD) -> np.ndarray:
    """Vectorized evaluation over a (rows, n) input matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    cols = {name: X[:, i] for i, name in enumerate(input_names)}

    def rec(e: Expr) -> np.ndarray:
        if isinstance(e, Constant):
            return np.full(X.shape[0], e.value)
        if isinstance(e, Variable):
            return cols[e.name]
        if isinstance(e, Unary):
            return _UNARY_FN[e.op](rec(e.child))
        if isinstance(e, Mul):
            return rec(e.left) * rec(e.right)
        if isinstance(e, Div):
            den = rec(e.den)
            ok = den > div_guard
            return np.where(ok, rec(e.num) / np.where(ok, den, 1.0), 0.0)
        if isinstance(e, Add):
            total = np.full(X.shape[0], e.const)
            for c, child in e.terms:
                total = total + c * rec(child)
            return total
        raise TypeError(f"not an expression node: {e!r}")

    return rec(expr)


def to_expression(net: Network,
                  threshold: float = DEFAULT_ACTIVITY_THRESHOLD) -> Expr:
    """AST of the active subnetwork; weights below the threshold become exact zeros."""
    report = activity(net, threshold)
    masked = np.where(report.active_mask, net.weights, 0.0)
    names = net.spec.input_names
    memo: dict[tuple[int, int], Expr] = {}

    def slot_expr(layer: int, slot: int) -> Expr:
        # layer is the producing layer index; layer -1 means the raw inputs
        if layer == -1:
            return Variable(names[slot])
        key = (layer, slot)
        if key in memo:
            return memo[key]
        lay = net.layout[layer]
        if slot >= lay.n_units:  # copy slot: transparent reference downwards
            e = slot_expr(layer - 1, slot - lay.n_units)
        else:
            e = unit_expr(layer, slot)
        memo[key] = e
        return e

    def affine_expr(layer: int, z_row: int) -> Expr:
        lay = net.layout[layer]
        w = masked[lay.w_offset + z_row * lay.fan_in:
                   lay.w_offset + (z_row + 1) * lay.fan_in]
        b = masked[lay.b_offset + z_row]
        terms = tuple((float(w[i]), slot_expr(layer - 1, i))
                      for i in np.flatnonzero(w))
        return Add(terms=terms, const=float(b))

    def unit_expr(layer: int, unit: int) -> Expr:
        lay = net.layout[layer]
        rows = np.flatnonzero(lay.z_unit == unit)
        kind = lay.kinds[unit]
        affines = [affine_expr(layer, r) for r in rows]
        if all(not a.terms and a.const == 0.0 for a in affines):
            # A unit with no active inputs evaluates to exactly 0 for every
            # shipped kind (g(0) == 0, 0*0 == 0, guarded division of 0 == 0).
            return Constant(0.0)
        if kind is UnitKind.IDENT:
            return affines[0]
        if kind in (UnitKind.SIN, UnitKind.TANH, UnitKind.ARCTAN):
            return Unary(kind.value, affines[0])
        if kind is UnitKind.MUL:
            return Mul(affines[0], affines[1])
        return Div(affines[0], affines[1])

    root = unit_expr(len(net.layout) - 1, 0)
    if isinstance(root, Add) and not root.terms:
        return Constant(root.const)  # bias-only model
    return root


def ast_complexity(expr: Expr) -> tuple[int, int]:
    """(links, units) of a raw extracted AST, matching the source ActivityReport.

    Links count nonzero affine coefficients and constants; units count function
    nodes.  An Add in operand position (directly under a function node, or the
    root) is a unit's affine input, not a unit itself.  Structurally identical
    subexpressions are counted once: a unit feeding several consumers appears
    once in the network but on multiple tree paths.
    """
    links = 0
    units = 0
    seen: set[tuple[bool, Expr]] = set()

    def walk(e: Expr, operand_position: bool) -> None:
        nonlocal links, units
        if isinstance(e, (Constant, Variable)):
            if isinstance(e, Constant) and e.value != 0.0:
                links += 1
            return
        key = (operand_position, e)
        if key in seen:
            return
        seen.add(key)
        if isinstance(e, Unary):
            units += 1
            walk(e.child, True)
        elif isinstance(e, Mul):
            units += 1
            walk(e.left, True)
            walk(e.right, True)
        elif isinstance(e, Div):
            units += 1
            walk(e.num, True)
            walk(e.den, True)
        elif isinstance(e, Add):
            if not operand_position:
                units += 1  # identity unit in the middle of an affine chain
            links += sum(1 for c, _ in e.terms if c != 0.0)
            links += 1 if e.const != 0.0 else 0
            for _, child in e.terms:
                walk(child, False)

    walk(expr, True)
    return links, units


def denominator_report(net: Network, X: np.ndarray,
                       div_guard: float = DEFAULT_DIV_GUARD) -> dict[str, float]:
    """Minimum denominator per live division unit over a data matrix.

    The rendered expression prints plain quotients; this certifies how far the
    denominators stay from the training-time guard on the given data.
    """
    from .netgraph import forward_batch
    _, caches = forward_batch(net, X, div_guard)
    out: dict[str, float] = {}
    for li, lay in enumerate(net.layout):
        if not lay.div_z.size:
            continue
        W = net.layer_w(li)
        b = net.layer_b(li)
        for d in range(lay.div_z.shape[0]):
            rows = lay.div_z[d]
            if any(np.any(W[z] != 0.0) or b[z] != 0.0 for z in rows):
                out[f"layer{li}_div{d}"] = float(caches[li].z[:, rows[1]].min())
    return out


def _split_coef(e: Expr) -> tuple[float, Expr | None]:
    """Factor a node into (scalar, remainder); remainder None for pure constants."""
    if isinstance(e, Constant):
        return e.value, None
    if isinstance(e, Add) and len(e.terms) == 1 and e.const == 0.0:
        return e.terms[0][0], e.terms[0][1]
    return 1.0, e


def _scaled(coef: float, node: Expr | None) -> Expr:
    if node is None:
        return Constant(coef)
    if coef == 1.0:
        return node
    return Add(terms=((coef, node),), const=0.0)


def simplify(expr: Expr, div_guard: float = DEFAULT_DIV_GUARD) -> Expr:
    """Constant folding, coefficient collapsing, affine flattening, zero dropping.

    Evaluation is preserved (up to floating-point reassociation); denominators
    are left intact so guard behaviour cannot drift.
    """
    if isinstance(expr, (Constant, Variable)):
        return expr
    if isinstance(expr, Unary):
        child = simplify(expr.child, div_guard)
        if isinstance(child, Constant):
            return Constant(float(_UNARY_FN[expr.op](child.value)))
        return Unary(expr.op, child)
    if isinstance(expr, Mul):
        left = simplify(expr.left, div_guard)
        right = simplify(expr.right, div_guard)
        cl, nl = _split_coef(left)
        cr, nr = _split_coef(right)
        coef = cl * cr
        if nl is None and nr is None:
            return Constant(coef)
        if coef == 0.0:
            return Constant(0.0)
        if nl is None:
            return _scaled(coef, nr)
        if nr is None:
            return _scaled(coef, nl)
        return _scaled(coef, Mul(nl, nr))
    if isinstance(expr, Div):
        num = simplify(expr.num, div_guard)
        den = simplify(expr.den, div_guard)
        if isinstance(num, Constant) and isinstance(den, Constant):
            if den.value <= div_guard:
                return Constant(0.0)
            return Constant(num.value / den.value)
        cn, nn = _split_coef(num)
        if nn is not None and cn != 1.0:
            # c*x / d == c * (x / d); exact under the guard (both sides are 0 when off)
            return _scaled(cn, Div(nn, den))
        return Div(num, den)
    if isinstance(expr, Add):
        terms: dict[Expr, float] = {}
        const = expr.const

        def push(coef: float, node: Expr) -> None:
            nonlocal const
            if coef == 0.0:
                return
            if isinstance(node, Constant):
                const += coef * node.value
                return
            if isinstance(node, Add):
                const += coef * node.const
                for ci, ni in node.terms:
                    push(coef * ci, ni)
                return
            terms[node] = terms.get(node, 0.0) + coef

        for c, child in expr.terms:
            push(c, simplify(child, div_guard))
        flat = tuple((c, n) for n, c in terms.items() if c != 0.0)
        if not flat:
            return Constant(const)
        if len(flat) == 1 and const == 0.0 and flat[0][0] == 1.0:
            return flat[0][1]
        return Add(terms=flat, const=const)
    raise TypeError(f"not an expression node: {expr!r}")


def _fmt_float(v: float, digits: int | None) -> str:
    if digits is None:
        text = repr(float(v))
    else:
        text = f"{v:.{digits}g}"
    return text


def render(expr: Expr, fmt: str = "plain", digits: int | None = None) -> str:
    """Deterministic, parseable plain form ('latex' gives a display variant)."""
    latex = fmt == "latex"
    if fmt not in ("plain", "latex"):
        raise ValueError(f"unknown render format {fmt}")

    def num(v: float) -> str:
        return _fmt_float(v, digits)

    def atom(e: Expr) -> str:
        # rendering that can sit inside a product without parentheses
        s = rec(e)
        if isinstance(e, Add) or (isinstance(e, Constant) and e.value < 0):
            return f"({s})"
        return s

    def rec(e: Expr) -> str:
        if isinstance(e, Constant):
            return num(e.value)
        if isinstance(e, Variable):
            return e.name
        if isinstance(e, Unary):
            name = "\\arctan" if latex and e.op == "arctan" else (
                f"\\{e.op}" if latex else e.op)
            return f"{name}({rec(e.child)})"
        if isinstance(e, Mul):
            lhs = atom(e.left)
            rhs = atom(e.right)
            if isinstance(e.right, Div):
                rhs = f"({rec(e.right)})"
            sep = " \\cdot " if latex else "*"
            return f"{lhs}{sep}{rhs}"
        if isinstance(e, Div):
            if latex:
                return f"\\frac{{{rec(e.num)}}}{{{rec(e.den)}}}"
            n = atom(e.num)
            d = atom(e.den)
            if isinstance(e.den, (Mul, Div)):
                d = f"({rec(e.den)})"
            return f"{n}/{d}"
        if isinstance(e, Add):
            parts: list[str] = []
            for c, child in e.terms:
                body = atom(child)
                if isinstance(child, Div):
                    body = f"({rec(child)})" if abs(c) != 1.0 else body
                mul = " \\cdot " if latex else "*"
                if c == 1.0:
                    piece = body
                elif c == -1.0:
                    piece = f"-{body}"
                else:
                    piece = f"{num(c)}{mul}{body}"
                parts.append(piece)
            if e.const != 0.0 or not parts:
                parts.append(num(e.const))
            text = parts[0]
            for p in parts[1:]:
                text += f" - {p[1:]}" if p.startswith("-") else f" + {p}"
            return text
        raise TypeError(f"not an expression node: {e!r}")

    return rec(expr)


_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
                    r"|([A-Za-z_][A-Za-z_0-9]*)|(.))")


class ParseError(ValueError):
    pass


def parse(text: str) -> Expr:
    """Recursive-descent parser for the plain rendering grammar."""
    tokens: list[str] = []
    for m in _TOKEN.finditer(text):
        tok = m.group(1) or m.group(2) or m.group(3)
        if tok and not tok.isspace():
            tokens.append(tok)
    pos = 0

    def peek() -> str | None:
        return tokens[pos] if pos < len(tokens) else None

    def take(expected: str | None = None) -> str:
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError("unexpected end of expression")
        tok = tokens[pos]
        if expected is not None and tok != expected:
            raise ParseError(f"expected {expected!r}, found {tok!r}")
        pos += 1
        return tok

    def parse_atom() -> Expr:
        tok = take()
        if tok == "(":
            inner = parse_sum()
            take(")")
            return inner
        if tok == "-":
            inner = parse_atom()
            if isinstance(inner, Constant):
                return Constant(-inner.value)
            return Add(terms=((-1.0, inner),), const=0.0)
        if re.fullmatch(r"(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?", tok):
            return Constant(float(tok))
        if re.fullmatch(r"[A-Za-z_][A-Za-z_0-9]*", tok):
            if tok in _UNARY_FN and peek() == "(":
                take("(")
                inner = parse_sum()
                take(")")
                return Unary(tok, inner)
            return Variable(tok)
        raise ParseError(f"unexpected token {tok!r}")

    def parse_product() -> Expr:
        node = parse_atom()
        while peek() in ("*", "/"):
            op = take()
            rhs = parse_atom()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    def parse_sum() -> Expr:
        terms: list[tuple[float, Expr]] = []
        const = 0.0
        sign = 1.0
        if peek() == "-":
            take()
            sign = -1.0
        while True:
            node = parse_product()
            if isinstance(node, Constant):
                const += sign * node.value
            else:
                terms.append((sign, node))
            nxt = peek()
            if nxt == "+":
                take()
                sign = 1.0
            elif nxt == "-":
                take()
                sign = -1.0
            else:
                break
        if not terms:
            return Constant(const)
        if len(terms) == 1 and const == 0.0 and terms[0][0] == 1.0:
            return terms[0][1]
        return Add(terms=tuple(terms), const=const)

    result = parse_sum()
    if pos != len(tokens):
        raise ParseError(f"trailing tokens at {tokens[pos:]}")
    return result
