"""Predictor formulas: parsing, printing and exact symbolic derivatives.

A formula such as ``b0 + b1*x1 + pow(x2, b2)`` is parsed into an immutable
expression tree over named parameters and covariates. For evaluation the tree
is lowered into a hash-consed DAG, differentiated symbolically once per
parameter (and parameter pair), and executed as a straight-line program over
numpy arrays. Parameters may carry leading batch dimensions, so one call can
evaluate the predictor for many parameter vectors (and many datasets) at once.

Grammar (see ``docs/formula_grammar.md``)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ("^" unary)?
    atom   := NUMBER | NAME | FUNC "(" expr ("," expr)* ")" | "(" expr ")"
    FUNC   := "exp" | "log" | "pow"
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ArityError,
    FormulaDomainError,
    FormulaSyntaxError,
    UnknownIdentifierError,
)

__all__ = [
    "Node",
    "PredictorExpr",
    "DerivBundle",
    "parse_predictor",
    "differentiate",
    "scan_identifiers",
    "FUNCTIONS",
]

FUNCTIONS = {"exp": 1, "log": 1, "pow": 2}


@dataclass(frozen=True)
class Node:
    """Expression-tree node.

    ``op`` is one of ``const``, ``param``, ``cov``, ``neg``, ``add``, ``sub``,
    ``mul``, ``div``, ``pow``, ``exp``, ``log``.
    """

    op: str
    args: tuple = ()
    value: float | None = None
    name: str | None = None

    def to_string(self) -> str:
        op = self.op
        if op == "const":
            return repr(float(self.value))
        if op in ("param", "cov"):
            return self.name
        if op == "neg":
            return f"(-{self.args[0].to_string()})"
        if op in _INFIX:
            a, b = self.args
            return f"({a.to_string()} {_INFIX[op]} {b.to_string()})"
        inner = ", ".join(a.to_string() for a in self.args)
        return f"{op}({inner})"

    def __str__(self):
        return self.to_string()


_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


# --------------------------------------------------------------------------
# Tokenizer and recursive-descent parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FormulaSyntaxError(
                f"unexpected character {text[pos]!r}", _byte_offset(text, pos), text
            )
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), _byte_offset(text, pos)))
        pos = m.end()
    tokens.append(_Token("end", "", _byte_offset(text, len(text))))
    return tokens


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


def scan_identifiers(text: str) -> list[str]:
    """Names referenced in ``text`` that are not function names, in order of appearance."""
    seen = []
    for tok in _tokenize(text):
        if tok.kind == "name" and tok.text not in FUNCTIONS and tok.text not in seen:
            seen.append(tok.text)
    return seen


class _Parser:
    def __init__(self, text, params, covariates):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.params = set(params)
        self.covariates = set(covariates)

    @property
    def tok(self):
        return self.tokens[self.i]

    def error(self, message, tok=None, cls=FormulaSyntaxError):
        tok = tok or self.tok
        return cls(message, tok.offset, self.text)

    def expect(self, text):
        if self.tok.text != text or self.tok.kind not in ("op",):
            shown = self.tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {shown!r}")
        self.i += 1

    def parse(self):
        node = self.expr()
        if self.tok.kind != "end":
            raise self.error(f"unexpected {self.tok.text!r}")
        return node

    def expr(self):
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = "add" if self.tok.text == "+" else "sub"
            self.i += 1
            node = Node(op, (node, self.term()))
        return node

    def term(self):
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = "mul" if self.tok.text == "*" else "div"
            self.i += 1
            node = Node(op, (node, self.unary()))
        return node

    def unary(self):
        if self.tok.kind == "op" and self.tok.text == "-":
            self.i += 1
            return Node("neg", (self.unary(),))
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.i += 1
            return Node("pow", (base, self.unary()))
        return base

    def atom(self):
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Node("const", value=float(tok.text))
        if tok.kind == "name":
            self.i += 1
            if tok.text in FUNCTIONS:
                return self.call(tok)
            if self.tok.kind == "op" and self.tok.text == "(":
                raise self.error(f"unknown function {tok.text!r}", tok, UnknownIdentifierError)
            if tok.text in self.params:
                return Node("param", name=tok.text)
            if tok.text in self.covariates:
                return Node("cov", name=tok.text)
            raise self.error(f"unknown identifier {tok.text!r}", tok, UnknownIdentifierError)
        if tok.kind == "op" and tok.text == "(":
            self.i += 1
            node = self.expr()
            self.expect(")")
            return node
        shown = tok.text or "end of input"
        raise self.error(f"unexpected {shown!r}")

    def call(self, fn_tok):
        fn = fn_tok.text
        if not (self.tok.kind == "op" and self.tok.text == "("):
            raise self.error(f"function {fn!r} must be called with parentheses")
        self.i += 1
        args = [self.expr()]
        while self.tok.kind == "op" and self.tok.text == ",":
            self.i += 1
            args.append(self.expr())
        self.expect(")")
        if len(args) != FUNCTIONS[fn]:
            raise self.error(
                f"{fn}() takes {FUNCTIONS[fn]} argument(s), got {len(args)}", fn_tok, ArityError
            )
        return Node(fn, tuple(args))


def parse_predictor(
    text: str, param_names: Sequence[str], covariate_names: Sequence[str]
) -> "PredictorExpr":
    """Parse a predictor formula.

    Parameters
    ----------
    text : str
        Formula text, e.g. ``"b0 + exp(b1 + b2*x)"``.
    param_names : sequence of str
        Ordered parameter names; this order defines the Jacobian columns.
    covariate_names : sequence of str
        Names that may be referenced as covariates.

    Raises
    ------
    FormulaSyntaxError
        Malformed input; ``offset`` gives the byte position.
    UnknownIdentifierError
        A name that is neither a parameter, a covariate nor a function.
    ArityError
        A function called with the wrong number of arguments.
    """
    if not isinstance(text, str) or not text.strip():
        raise FormulaSyntaxError("empty formula", 0, text or "")
    params = tuple(param_names)
    covs = tuple(covariate_names)
    if len(set(params)) != len(params):
        raise ValueError("duplicate parameter names")
    overlap = set(params) & set(covs)
    if overlap:
        raise ValueError(f"names declared as both parameter and covariate: {sorted(overlap)}")
    reserved = (set(params) | set(covs)) & set(FUNCTIONS)
    if reserved:
        raise ValueError(f"reserved function names used as identifiers: {sorted(reserved)}")
    root = _Parser(text, params, covs).parse()
    return PredictorExpr(root, params, text)


# --------------------------------------------------------------------------
# DAG lowering and symbolic differentiation


class _Dag:
    """Hash-consed expression DAG; node ids are topologically ordered."""

    def __init__(self, params):
        self.params = tuple(params)
        self.pindex = {p: i for i, p in enumerate(self.params)}
        self.ops: list[tuple] = []  # (op, payload, args)
        self.deps: list[frozenset] = []
        self.table: dict = {}
        self.dmemo: dict = {}

    # raw interning ---------------------------------------------------------
    def intern(self, op, payload, args):
        key = (op, payload, args)
        uid = self.table.get(key)
        if uid is None:
            uid = len(self.ops)
            self.ops.append(key)
            if op == "param":
                dep = frozenset([payload])
            else:
                dep = frozenset().union(*(self.deps[a] for a in args)) if args else frozenset()
            self.deps.append(dep)
            self.table[key] = uid
        return uid

    def lower(self, node: Node) -> int:
        op = node.op
        if op == "const":
            return self.intern("const", float(node.value), ())
        if op == "param":
            return self.intern("param", self.pindex[node.name], ())
        if op == "cov":
            return self.intern("cov", node.name, ())
        return self.intern(op, None, tuple(self.lower(a) for a in node.args))

    # folding constructors used while differentiating -----------------------
    def cval(self, u):
        op, payload, _ = self.ops[u]
        return payload if op == "const" else None

    def const(self, v):
        return self.intern("const", float(v), ())

    def neg(self, a):
        va = self.cval(a)
        if va is not None:
            return self.const(-va)
        op, _, args = self.ops[a]
        if op == "neg":
            return args[0]
        return self.intern("neg", None, (a,))

    def add(self, a, b):
        va, vb = self.cval(a), self.cval(b)
        if va is not None and vb is not None:
            return self.const(va + vb)
        if va == 0.0:
            return b
        if vb == 0.0:
            return a
        return self.intern("add", None, (a, b))

    def sub(self, a, b):
        va, vb = self.cval(a), self.cval(b)
        if va is not None and vb is not None:
            return self.const(va - vb)
        if vb == 0.0:
            return a
        if va == 0.0:
            return self.neg(b)
        if a == b:
            return self.const(0.0)
        return self.intern("sub", None, (a, b))

    def mul(self, a, b):
        va, vb = self.cval(a), self.cval(b)
        if va is not None and vb is not None:
            return self.const(va * vb)
        if va == 0.0 or vb == 0.0:
            return self.const(0.0)
        if va == 1.0:
            return b
        if vb == 1.0:
            return a
        if va == -1.0:
            return self.neg(b)
        if vb == -1.0:
            return self.neg(a)
        return self.intern("mul", None, (a, b))

    def div(self, a, b):
        va, vb = self.cval(a), self.cval(b)
        if va == 0.0:
            return self.const(0.0)
        if vb == 1.0:
            return a
        if va is not None and vb is not None and vb != 0.0:
            return self.const(va / vb)
        return self.intern("div", None, (a, b))

    def log(self, a):
        return self.intern("log", None, (a,))

    def pow(self, a, b):
        vb = self.cval(b)
        if vb == 1.0:
            return a
        if vb == 0.0:
            return self.const(1.0)
        return self.intern("pow", None, (a, b))

    def d(self, u, j):
        """Id of the derivative of node ``u`` with respect to parameter ``j``."""
        key = (u, j)
        hit = self.dmemo.get(key)
        if hit is not None:
            return hit
        if j not in self.deps[u]:
            res = self.const(0.0)
        else:
            op, payload, args = self.ops[u]
            if op == "param":
                res = self.const(1.0)
            elif op == "neg":
                res = self.neg(self.d(args[0], j))
            elif op == "add":
                res = self.add(self.d(args[0], j), self.d(args[1], j))
            elif op == "sub":
                res = self.sub(self.d(args[0], j), self.d(args[1], j))
            elif op == "mul":
                a, b = args
                res = self.add(self.mul(self.d(a, j), b), self.mul(a, self.d(b, j)))
            elif op == "div":
                a, b = args
                num = self.sub(self.mul(self.d(a, j), b), self.mul(a, self.d(b, j)))
                res = self.div(num, self.mul(b, b))
            elif op == "exp":
                res = self.mul(u, self.d(args[0], j))
            elif op == "log":
                res = self.div(self.d(args[0], j), args[0])
            elif op == "pow":
                a, b = args
                if not self.deps[b]:
                    # b * a^(b-1) * a'
                    res = self.mul(
                        self.mul(b, self.pow(a, self.sub(b, self.const(1.0)))), self.d(a, j)
                    )
                else:
                    # a^b * (b' log a + b a' / a)
                    inner = self.add(
                        self.mul(self.d(b, j), self.log(a)),
                        self.div(self.mul(b, self.d(a, j)), a),
                    )
                    res = self.mul(u, inner)
            else:  # pragma: no cover - const/cov have empty deps
                raise AssertionError(op)
        self.dmemo[key] = res
        return res


def _reachable(dag: _Dag, roots) -> list[int]:
    seen = set()
    stack = list(roots)
    while stack:
        u = stack.pop()
        if u in seen:
            continue
        seen.add(u)
        stack.extend(dag.ops[u][2])
    return sorted(seen)


@dataclass
class DerivBundle:
    """Predictor value with its parameter Jacobian and Hessian array.

    ``value`` has shape ``(..., n)``, ``jac`` ``(..., n, p)`` and ``hess``
    ``(..., n, p, p)``. ``invalid`` is a batch-shaped mask, set only when
    evaluating with ``errors="mask"``.
    """

    value: np.ndarray
    jac: np.ndarray | None = None
    hess: np.ndarray | None = None
    invalid: np.ndarray | None = None


class _Program:
    def __init__(self, root: Node, params):
        dag = _Dag(params)
        self.dag = dag
        p = len(params)
        self.p = p
        self.value_id = dag.lower(root)
        self.jac_ids = [dag.d(self.value_id, j) for j in range(p)]
        self.hess_ids = [[None] * p for _ in range(p)]
        for i in range(p):
            for j in range(i, p):
                h = dag.d(self.jac_ids[i], j)
                self.hess_ids[i][j] = self.hess_ids[j][i] = h
        self.order_ids = [
            _reachable(dag, [self.value_id]),
            _reachable(dag, [self.value_id, *self.jac_ids]),
            _reachable(
                dag,
                [self.value_id, *self.jac_ids, *(h for row in self.hess_ids for h in row)],
            ),
        ]

    def run(self, theta, data, n, order, errors):
        dag = self.dag
        batch = theta.shape[:-1]
        vals = {}
        invalid = np.zeros(batch, dtype=bool) if errors == "mask" else None
        full = batch + (n,)

        def flag(bad, message):
            bad = np.asarray(bad)
            if not bad.any():
                return
            if errors == "raise":
                b = np.broadcast_to(bad, full) if bad.ndim else np.full(full, True)
                t = int(np.argwhere(b)[0][-1]) + 1
                raise FormulaDomainError(message, t)
            nonlocal invalid
            b = np.broadcast_to(bad, full) if bad.ndim else np.full(full, True)
            invalid = invalid | b.any(axis=-1)

        with np.errstate(all="ignore"):
            for u in self.order_ids[order]:
                op, payload, args = dag.ops[u]
                if op == "const":
                    v = payload
                elif op == "param":
                    v = theta[..., payload, None]
                elif op == "cov":
                    v = data[payload]
                elif op == "neg":
                    v = -vals[args[0]]
                elif op == "add":
                    v = vals[args[0]] + vals[args[1]]
                elif op == "sub":
                    v = vals[args[0]] - vals[args[1]]
                elif op == "mul":
                    v = vals[args[0]] * vals[args[1]]
                elif op == "div":
                    den = vals[args[1]]
                    flag(np.equal(den, 0.0), "division by zero")
                    v = vals[args[0]] / den
                elif op == "exp":
                    v = np.exp(vals[args[0]])
                elif op == "log":
                    a = vals[args[0]]
                    flag(np.less_equal(a, 0.0), "log of a non-positive value")
                    v = np.log(a)
                elif op == "pow":
                    a, b = vals[args[0]], vals[args[1]]
                    if dag.deps[args[1]]:
                        flag(np.less_equal(a, 0.0), "pow with non-positive base and parameter exponent")
                        v = np.exp(b * np.log(a))
                    else:
                        nonint = np.not_equal(b, np.round(b))
                        bad = (np.less_equal(a, 0.0) & nonint) | (
                            np.equal(a, 0.0) & np.less(b, 0.0)
                        )
                        flag(bad, "pow with non-positive base and non-integer exponent")
                        v = np.power(a, b)
                else:  # pragma: no cover
                    raise AssertionError(op)
                vals[u] = v

        def out(u):
            return np.broadcast_to(np.asarray(vals[u], dtype=float), full)

        value = np.array(out(self.value_id))
        flag(~np.isfinite(value), "non-finite predictor value")
        jac = hess = None
        if order >= 1:
            jac = np.empty(full + (self.p,))
            for j, u in enumerate(self.jac_ids):
                jac[..., j] = out(u)
        if order >= 2:
            hess = np.empty(full + (self.p, self.p))
            for i in range(self.p):
                for j in range(i, self.p):
                    h = out(self.hess_ids[i][j])
                    hess[..., i, j] = h
                    if j != i:
                        hess[..., j, i] = h
        if invalid is not None and invalid.any():
            value[invalid] = np.nan
        return DerivBundle(value, jac, hess, invalid)


class PredictorExpr:
    """Parsed predictor formula over named parameters and covariates.

    Immutable after construction; the compiled derivative program is built
    lazily on first evaluation.
    """

    def __init__(self, root: Node, params: Sequence[str], text: str | None = None):
        self._root = root
        self._params = tuple(params)
        self._text = text if text is not None else root.to_string()
        covs = []
        _collect(root, "cov", covs)
        self._covariates = tuple(covs)
        self._program = None

    @property
    def root(self) -> Node:
        return self._root

    @property
    def params(self) -> tuple:
        return self._params

    @property
    def covariates(self) -> tuple:
        """Covariate names referenced by the formula, in order of appearance."""
        return self._covariates

    @property
    def text(self) -> str:
        return self._text

    def to_string(self) -> str:
        return self._root.to_string()

    def __repr__(self):
        return f"PredictorExpr({self._text!r}, params={self._params})"

    @property
    def program(self) -> _Program:
        if self._program is None:
            self._program = _Program(self._root, self._params)
        return self._program

    def linear_params(self) -> tuple:
        """Indices of parameters that enter the formula linearly."""
        prog = self.program
        zero = prog.dag.const(0.0)
        return tuple(
            i for i in range(prog.p) if all(prog.hess_ids[i][j] == zero for j in range(prog.p))
        )

    def is_linear(self) -> bool:
        return len(self.linear_params()) == len(self._params)

    def evaluate(
        self,
        theta,
        data: Mapping[str, np.ndarray],
        n: int | None = None,
        order: int = 2,
        errors: str = "raise",
    ) -> DerivBundle:
        """Evaluate value (and derivatives up to ``order``) at ``theta``.

        Parameters
        ----------
        theta : array_like, shape (..., p)
            Parameter values in ``self.params`` order; leading axes are batch axes.
        data : mapping
            Covariate columns of shape ``(n,)`` or ``(..., n)``.
        n : int, optional
            Number of observations; inferred from ``data`` when omitted.
        order : {0, 1, 2}
        errors : {"raise", "mask"}
            ``"raise"`` raises :class:`FormulaDomainError` naming the first
            offending observation; ``"mask"`` marks offending batch rows in
            ``DerivBundle.invalid`` and fills their values with NaN.
        """
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 0 or theta.shape[-1] != len(self._params):
            raise ValueError(
                f"expected {len(self._params)} parameter values, got shape {theta.shape}"
            )
        missing = [c for c in self._covariates if c not in data]
        if missing:
            raise KeyError(f"missing covariate column(s): {missing}")
        cols = {c: np.asarray(data[c], dtype=float) for c in self._covariates}
        if n is None:
            if not cols:
                raise ValueError("n is required when the formula has no covariates")
            n = next(iter(cols.values())).shape[-1]
        for c, v in cols.items():
            if v.shape[-1] != n:
                raise ValueError(f"covariate {c!r} has length {v.shape[-1]}, expected {n}")
        if errors not in ("raise", "mask"):
            raise ValueError("errors must be 'raise' or 'mask'")
        return self.program.run(theta, cols, int(n), order, errors)


def _collect(node: Node, op, out):
    if node.op == op and node.name not in out:
        out.append(node.name)
    for a in node.args:
        _collect(a, op, out)


def differentiate(expr: PredictorExpr, theta_part, data, n=None) -> DerivBundle:
    """Value, exact Jacobian and exact Hessian array of ``expr`` at ``theta_part``."""
    return expr.evaluate(theta_part, data, n=n, order=2)
