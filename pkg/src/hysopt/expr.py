"""Immutable scalar expression DAGs with parsing, evaluation and symbolic
forward-mode differentiation.

Every piece of dynamics, every constraint and every derivative in this
package is an :class:`Expr` tree over named scalar variables.  Nodes are
immutable after construction, so DAGs may be shared freely between threads
and reused across functions.  Construction goes through smart constructors
that fold constants and drop trivial identities (``x+0``, ``1*x``, ``x^1``),
which keeps the derivative DAGs produced by :func:`derive` compact.

Expression grammar (EBNF), also used by scenario files::

    expr    = term , { ("+" | "-") , term } ;
    term    = factor , { ("*" | "/") , factor } ;
    factor  = ("+" | "-") , factor | power ;
    power   = atom , [ "^" , factor ] ;
    atom    = NUMBER | IDENT | IDENT , "(" , expr , ")" | "(" , expr , ")" ;
    IDENT   = letter , { letter | digit | "_" } ;

Recognized function identifiers: ``sin``, ``cos``, ``exp``, ``sqrt``.  The
``^`` operator requires an exponent that folds to a constant integer.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expr",
    "ExprError",
    "ParseError",
    "EvalError",
    "ExprFunction",
    "const",
    "var",
    "sin",
    "cos",
    "exp",
    "sqrt",
    "parse_expr",
    "to_string",
    "topo_order",
    "derive",
    "substitute",
    "evaluate",
    "sum_exprs",
    "compile_exprs",
]

UNARY_KINDS = ("neg", "sin", "cos", "exp", "sqrt")
BINARY_KINDS = ("add", "sub", "mul", "div", "pow")


class ExprError(Exception):
    """Base class for expression-level failures."""


class ParseError(ExprError):
    """Syntax or name error while parsing; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class EvalError(ExprError):
    """Non-finite intermediate during evaluation; carries the node path."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{message} at node {path}")
        self.path = path


class Expr:
    """One node of an immutable expression DAG.

    ``kind`` is one of ``const``, ``var``, the unary kinds (``neg``, ``sin``,
    ``cos``, ``exp``, ``sqrt``) or the binary kinds (``add``, ``sub``,
    ``mul``, ``div``, ``pow``).  ``varmask`` is a bitmask of the variable
    indices the subtree depends on; it lets differentiation skip structurally
    zero branches without walking them.
    """

    __slots__ = ("kind", "value", "index", "name", "a", "b", "varmask")

    def __init__(self, kind, value=None, index=None, name=None, a=None, b=None):
        self.kind = kind
        self.value = value
        self.index = index
        self.name = name
        self.a = a
        self.b = b
        if kind == "const":
            self.varmask = 0
        elif kind == "var":
            self.varmask = 1 << index
        elif b is None:
            self.varmask = a.varmask
        else:
            self.varmask = a.varmask | b.varmask

    # Arithmetic sugar so model-building code reads like the math it encodes.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, other):
        return power(self, _coerce(other))

    def __repr__(self):
        return f"Expr({to_string(self)})"

    def is_const(self, value=None):
        if self.kind != "const":
            return False
        return value is None or self.value == value

    def depends_on(self, index: int) -> bool:
        return bool(self.varmask >> index & 1)


def _coerce(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return const(float(x))
    raise TypeError(f"cannot use {type(x).__name__} in an expression")


def const(value: float) -> Expr:
    return Expr("const", value=float(value))


def var(index: int, name: str | None = None) -> Expr:
    if index < 0:
        raise ExprError("variable index must be nonnegative")
    return Expr("var", index=index, name=name or f"v{index}")


_ZERO = const(0.0)
_ONE = const(1.0)


def add(a: Expr, b: Expr) -> Expr:
    if a.kind == "const" and b.kind == "const":
        return const(a.value + b.value)
    if a.is_const(0.0):
        return b
    if b.is_const(0.0):
        return a
    return Expr("add", a=a, b=b)


def sub(a: Expr, b: Expr) -> Expr:
    if a.kind == "const" and b.kind == "const":
        return const(a.value - b.value)
    if b.is_const(0.0):
        return a
    if a.is_const(0.0):
        return neg(b)
    return Expr("sub", a=a, b=b)


def mul(a: Expr, b: Expr) -> Expr:
    if a.kind == "const" and b.kind == "const":
        return const(a.value * b.value)
    # Structural zeros are essential for compact symbolic derivatives; the
    # domain contract (finite intermediates) makes 0*x == 0 sound.
    if a.is_const(0.0) or b.is_const(0.0):
        return _ZERO
    if a.is_const(1.0):
        return b
    if b.is_const(1.0):
        return a
    if a.is_const(-1.0):
        return neg(b)
    if b.is_const(-1.0):
        return neg(a)
    return Expr("mul", a=a, b=b)


def div(a: Expr, b: Expr) -> Expr:
    if a.kind == "const" and b.kind == "const" and b.value != 0.0:
        return const(a.value / b.value)
    if a.is_const(0.0) and not b.is_const(0.0):
        return _ZERO
    if b.is_const(1.0):
        return a
    return Expr("div", a=a, b=b)


def neg(a: Expr) -> Expr:
    if a.kind == "const":
        return const(-a.value)
    if a.kind == "neg":
        return a.a
    return Expr("neg", a=a)


def power(a: Expr, b: Expr) -> Expr:
    b = _coerce(b)
    if b.kind != "const" or b.value != int(b.value):
        raise ExprError("pow exponent must be a constant integer")
    n = int(b.value)
    if n == 0:
        return _ONE
    if n == 1:
        return a
    if a.kind == "const":
        return const(a.value**n)
    return Expr("pow", a=a, b=const(float(n)))


def _unary(kind: str, fn) -> Callable[[Expr], Expr]:
    def build(a) -> Expr:
        a = _coerce(a)
        if a.kind == "const":
            v = fn(a.value)
            if math.isfinite(v):
                return const(v)
        return Expr(kind, a=a)

    build.__name__ = kind
    return build


sin = _unary("sin", math.sin)
cos = _unary("cos", math.cos)
exp = _unary("exp", math.exp)
sqrt = _unary("sqrt", lambda v: math.sqrt(v) if v >= 0 else math.nan)


def sum_exprs(terms: Sequence[Expr]) -> Expr:
    """Sum as a balanced tree so DAG depth stays logarithmic."""
    terms = [t for t in terms if not t.is_const(0.0)]
    if not terms:
        return _ZERO
    while len(terms) > 1:
        terms = [
            add(terms[i], terms[i + 1]) if i + 1 < len(terms) else terms[i]
            for i in range(0, len(terms), 2)
        ]
    return terms[0]


# ---------------------------------------------------------------------------
# DAG traversal, evaluation, differentiation, substitution


def topo_order(roots: Iterable[Expr]) -> list[Expr]:
    """Children-before-parents ordering, iterative (DAGs can be deep)."""
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(r, False) for r in reversed(list(roots))]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.b is not None:
            stack.append((node.b, False))
        if node.a is not None:
            stack.append((node.a, False))
    return order


_EVAL_RULES = {
    "neg": lambda a: -a,
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "sqrt": math.sqrt,
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "pow": lambda a, b: a ** int(b),
}


def evaluate(roots: Sequence[Expr], point: Sequence[float]) -> list[float]:
    """Checked interpretation of the DAG at ``point``.

    Raises :class:`EvalError` with the path of the first offending node when
    an intermediate value is non-finite (division by zero, sqrt of a negative
    number, overflow).
    """
    vals: dict[int, float] = {}
    for node in topo_order(roots):
        k = node.kind
        if k == "const":
            v = node.value
        elif k == "var":
            if node.index >= len(point):
                raise EvalError(
                    f"variable {node.name} has index {node.index} but the "
                    f"point has {len(point)} entries",
                    _node_path(roots, node),
                )
            v = float(point[node.index])
        else:
            try:
                if node.b is None:
                    v = _EVAL_RULES[k](vals[id(node.a)])
                else:
                    v = _EVAL_RULES[k](vals[id(node.a)], vals[id(node.b)])
            except (ValueError, ZeroDivisionError, OverflowError) as e:
                raise EvalError(str(e), _node_path(roots, node)) from None
        if not math.isfinite(v):
            raise EvalError("non-finite value", _node_path(roots, node))
        vals[id(node)] = v
    return [vals[id(r)] for r in roots]


def _node_path(roots: Sequence[Expr], target: Expr) -> str:
    """Human-readable path from an output root down to ``target``."""
    for i, root in enumerate(roots):
        stack = [(root, f"outputs[{i}]")]
        visited: set[int] = set()
        while stack:
            node, path = stack.pop()
            if id(node) in visited:
                continue
            visited.add(id(node))
            label = f"{path}:{node.kind}"
            if node is target:
                return label
            if node.a is not None:
                stack.append((node.a, label + ".a"))
            if node.b is not None:
                stack.append((node.b, label + ".b"))
    return "<detached>"


def derive(roots: Sequence[Expr], wrt: int) -> list[Expr]:
    """Symbolic forward-mode derivative of each root w.r.t. variable ``wrt``.

    Shared subtrees produce shared derivative nodes, so repeated calls over a
    Jacobian reuse work through the constant-folding constructors.
    """
    bit = 1 << wrt
    d: dict[int, Expr] = {}

    def dof(node: Expr) -> Expr:
        if not node.varmask & bit:
            return _ZERO
        return d[id(node)]

    active = [n for n in topo_order(roots) if n.varmask & bit]
    for node in active:
        k = node.kind
        if k == "var":
            g = _ONE
        elif k == "neg":
            g = neg(dof(node.a))
        elif k == "sin":
            g = mul(cos(node.a), dof(node.a))
        elif k == "cos":
            g = neg(mul(sin(node.a), dof(node.a)))
        elif k == "exp":
            # Reuse the node itself: d/dx exp(u) = exp(u) * u'.
            g = mul(node, dof(node.a))
        elif k == "sqrt":
            g = div(dof(node.a), mul(const(2.0), node))
        elif k == "add":
            g = add(dof(node.a), dof(node.b))
        elif k == "sub":
            g = sub(dof(node.a), dof(node.b))
        elif k == "mul":
            g = add(mul(dof(node.a), node.b), mul(node.a, dof(node.b)))
        elif k == "div":
            g = div(
                sub(mul(dof(node.a), node.b), mul(node.a, dof(node.b))),
                mul(node.b, node.b),
            )
        elif k == "pow":
            n = int(node.b.value)
            g = mul(mul(node.b, power(node.a, const(n - 1))), dof(node.a))
        else:  # pragma: no cover - constructor guarantees kinds
            raise ExprError(f"cannot differentiate node kind {k!r}")
        d[id(node)] = g
    return [dof(r) for r in roots]


def substitute(roots: Sequence[Expr], mapping: Mapping[int, Expr]) -> list[Expr]:
    """Replace variables by expressions (keyed by variable index)."""
    out: dict[int, Expr] = {}
    for node in topo_order(roots):
        k = node.kind
        if k == "var":
            new = mapping.get(node.index, node)
        elif k == "const":
            new = node
        else:
            a = out[id(node.a)]
            b = out[id(node.b)] if node.b is not None else None
            if a is node.a and b is node.b:
                new = node
            elif k == "neg":
                new = neg(a)
            elif k in ("sin", "cos", "exp", "sqrt"):
                new = {"sin": sin, "cos": cos, "exp": exp, "sqrt": sqrt}[k](a)
            else:
                new = {"add": add, "sub": sub, "mul": mul, "div": div, "pow": power}[k](a, b)
        out[id(node)] = new
    return [out[id(r)] for r in roots]


# ---------------------------------------------------------------------------
# Printing and parsing

_PREC = {
    "add": 1,
    "sub": 1,
    "mul": 2,
    "div": 2,
    "neg": 3,
    "pow": 4,
    "const": 5,
    "var": 5,
    "sin": 5,
    "cos": 5,
    "exp": 5,
    "sqrt": 5,
}


def to_string(root: Expr) -> str:
    """Render with minimal parentheses; ``parse_expr`` round-trips it."""
    parts: dict[int, str] = {}
    for node in topo_order([root]):
        k = node.kind
        if k == "const":
            s = repr(node.value)
        elif k == "var":
            s = node.name
        elif k == "neg":
            inner = parts[id(node.a)]
            if _PREC[node.a.kind] <= _PREC["neg"]:
                inner = f"({inner})"
            s = f"-{inner}"
        elif k in ("sin", "cos", "exp", "sqrt"):
            s = f"{k}({parts[id(node.a)]})"
        elif k == "pow":
            base = parts[id(node.a)]
            if _PREC[node.a.kind] <= _PREC["pow"]:
                base = f"({base})"
            n = int(node.b.value)
            s = f"{base}^({n})" if n < 0 else f"{base}^{n}"
        else:
            op = {"add": " + ", "sub": " - ", "mul": "*", "div": "/"}[k]
            lhs = parts[id(node.a)]
            rhs = parts[id(node.b)]
            if _PREC[node.a.kind] < _PREC[k]:
                lhs = f"({lhs})"
            # Left-associative operators need parens on equal-precedence rhs.
            if _PREC[node.b.kind] < _PREC[k] or (
                _PREC[node.b.kind] == _PREC[k] and k in ("sub", "div", "add", "mul")
            ):
                rhs = f"({rhs})"
            s = f"{lhs}{op}{rhs}"
        parts[id(node)] = s
    return parts[id(root)]


_FUNCTIONS = {"sin": sin, "cos": cos, "exp": exp, "sqrt": sqrt}


class _Parser:
    def __init__(self, text: str, variables: Sequence[str]):
        self.text = text
        self.pos = 0
        self.vars = {name: i for i, name in enumerate(variables)}
        if len(self.vars) != len(variables):
            raise ExprError(f"duplicate variable names in {list(variables)}")

    def error(self, message: str, offset: int | None = None):
        raise ParseError(message, self.pos if offset is None else offset)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            self.error(f"expected {ch!r}")
        self.pos += 1

    def parse(self) -> Expr:
        e = self.expr()
        if self.peek():
            self.error(f"unexpected trailing input {self.peek()!r}")
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            ch = self.peek()
            if ch == "+":
                self.pos += 1
                e = add(e, self.term())
            elif ch == "-":
                self.pos += 1
                e = sub(e, self.term())
            else:
                return e

    def term(self) -> Expr:
        e = self.factor()
        while True:
            ch = self.peek()
            if ch == "*":
                self.pos += 1
                e = mul(e, self.factor())
            elif ch == "/":
                self.pos += 1
                e = div(e, self.factor())
            else:
                return e

    def factor(self) -> Expr:
        ch = self.peek()
        if ch == "-":
            self.pos += 1
            return neg(self.factor())
        if ch == "+":
            self.pos += 1
            return self.factor()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek() == "^":
            at = self.pos
            self.pos += 1
            exponent = self.factor()
            if exponent.kind != "const" or exponent.value != int(exponent.value):
                self.error("exponent must be a constant integer", at)
            return power(base, exponent)
        return base

    def atom(self) -> Expr:
        ch = self.peek()
        start = self.pos
        if ch == "(":
            self.pos += 1
            e = self.expr()
            self.expect(")")
            return e
        if ch.isdigit() or ch == ".":
            return const(self.number())
        if ch.isalpha() or ch == "_":
            name = self.ident()
            if self.peek() == "(":
                fn = _FUNCTIONS.get(name)
                if fn is None:
                    self.error(f"unknown function {name!r}", start)
                self.pos += 1
                arg = self.expr()
                self.expect(")")
                return fn(arg)
            if name not in self.vars:
                self.error(f"undeclared identifier {name!r}", start)
            return var(self.vars[name], name)
        self.error("expected a number, identifier or '('" if ch else "unexpected end of input")

    def number(self) -> float:
        start = self.pos
        text = self.text
        while self.pos < len(text) and (text[self.pos].isdigit() or text[self.pos] == "."):
            self.pos += 1
        if self.pos < len(text) and text[self.pos] in "eE":
            mark = self.pos
            self.pos += 1
            if self.pos < len(text) and text[self.pos] in "+-":
                self.pos += 1
            if self.pos < len(text) and text[self.pos].isdigit():
                while self.pos < len(text) and text[self.pos].isdigit():
                    self.pos += 1
            else:
                self.pos = mark
        try:
            return float(text[start : self.pos])
        except ValueError:
            self.error(f"bad number literal {text[start:self.pos]!r}", start)

    def ident(self) -> str:
        start = self.pos
        text = self.text
        while self.pos < len(text) and (text[self.pos].isalnum() or text[self.pos] == "_"):
            self.pos += 1
        return text[start : self.pos]


def parse_expr(text: str, variables: Sequence[str]) -> Expr:
    """Parse ``text`` over the declared ``variables`` into an expression DAG."""
    return _Parser(text, variables).parse()


# ---------------------------------------------------------------------------
# Compilation to plain Python for hot loops

_CHUNK_LIMIT = 30000


def compile_exprs(roots: Sequence[Expr], n_inputs: int, name: str = "expr_fn"):
    """Compile a DAG into ``f(values) -> tuple`` of plain Python floats.

    Each distinct node is emitted exactly once, so DAG sharing acts as
    common-subexpression elimination.  Functions larger than the chunk limit
    are split into pieces that communicate through a spill list; evaluation
    semantics are identical.
    """
    order = [n for n in topo_order(roots) if n.kind not in ("const", "var")]
    chunks = [order[i : i + _CHUNK_LIMIT] for i in range(0, len(order), _CHUNK_LIMIT)]
    if not chunks:
        chunks = [[]]  # outputs are bare constants/variables
    chunk_of = {}
    for ci, chunk in enumerate(chunks):
        for node in chunk:
            chunk_of[id(node)] = ci

    # Nodes referenced outside their own chunk are spilled to a shared list.
    spill: dict[int, int] = {}
    for ci, chunk in enumerate(chunks):
        for node in chunk:
            for child in (node.a, node.b):
                if child is None or child.kind in ("const", "var"):
                    continue
                if chunk_of[id(child)] != ci and id(child) not in spill:
                    spill[id(child)] = len(spill)
    for r in roots:
        if r.kind not in ("const", "var") and len(chunks) > 1 and id(r) not in spill:
            spill[id(r)] = len(spill)

    def ref(node: Expr, ci: int) -> str:
        if node.kind == "const":
            return repr(node.value)
        if node.kind == "var":
            return f"_v[{node.index}]"
        if chunk_of[id(node)] != ci:
            return f"_b[{spill[id(node)]}]"
        return f"t{id(node)}"

    fn_srcs = []
    for ci, chunk in enumerate(chunks):
        lines = [f"def _chunk{ci}(_v, _b):"]
        for node in chunk:
            k = node.kind
            a = ref(node.a, ci) if node.a is not None else None
            b = ref(node.b, ci) if node.b is not None else None
            if k == "neg":
                rhs = f"-{a}"
            elif k in ("sin", "cos", "exp", "sqrt"):
                rhs = f"_{k}({a})"
            elif k == "add":
                rhs = f"{a} + {b}"
            elif k == "sub":
                rhs = f"{a} - {b}"
            elif k == "mul":
                rhs = f"{a} * {b}"
            elif k == "div":
                rhs = f"{a} / {b}"
            elif k == "pow":
                rhs = f"{a} ** {int(node.b.value)}"
            else:  # pragma: no cover
                raise ExprError(f"cannot compile node kind {k!r}")
            lines.append(f"    t{id(node)} = {rhs}")
            if id(node) in spill:
                lines.append(f"    _b[{spill[id(node)]}] = t{id(node)}")
        if ci == len(chunks) - 1:
            out = ", ".join(ref(r, ci) for r in roots)
            lines.append(f"    return ({out}{',' if len(roots) == 1 else ''})")
        else:
            lines.append("    return None")
        fn_srcs.append("\n".join(lines))

    namespace = {"_sin": math.sin, "_cos": math.cos, "_exp": math.exp, "_sqrt": math.sqrt}
    exec(compile("\n".join(fn_srcs), f"<hysopt:{name}>", "exec"), namespace)
    chunk_fns = [namespace[f"_chunk{ci}"] for ci in range(len(chunks))]

    if len(chunk_fns) == 1:
        single = chunk_fns[0]

        def fn(values, _f=single):
            return _f(values, None)

    else:
        n_spill = len(spill)

        def fn(values, _fns=tuple(chunk_fns), _n=n_spill):
            buf = [0.0] * _n
            for f in _fns[:-1]:
                f(values, buf)
            return _fns[-1](values, buf)

    fn.__name__ = name
    return fn


class ExprFunction:
    """A vector-valued function: ordered input variables, tuple of outputs.

    All free variables of the outputs must be among the inputs.  ``eval``
    interprets the DAG with finite-value checking; ``compiled`` returns a
    fast plain-Python callable for hot loops.
    """

    def __init__(self, inputs: Sequence[str], outputs: Sequence[Expr]):
        self.inputs = tuple(inputs)
        self.outputs = tuple(outputs)
        arity = len(self.inputs)
        for out in self.outputs:
            if out.varmask >> arity:
                bad = max(i for i in range(out.varmask.bit_length()) if out.varmask >> i & 1)
                raise ExprError(
                    f"output uses variable index {bad}, but the function only "
                    f"declares {arity} inputs"
                )
        self._compiled = None

    @property
    def n_in(self) -> int:
        return len(self.inputs)

    @property
    def n_out(self) -> int:
        return len(self.outputs)

    @classmethod
    def parse(cls, inputs: Sequence[str], sources: Sequence[str]) -> "ExprFunction":
        return cls(inputs, [parse_expr(s, inputs) for s in sources])

    def eval(self, point: Sequence[float]) -> np.ndarray:
        if len(point) != self.n_in:
            raise ExprError(f"expected {self.n_in} inputs, got {len(point)}")
        return np.array(evaluate(self.outputs, point))

    __call__ = eval

    def compiled(self) -> Callable[[Sequence[float]], tuple]:
        if self._compiled is None:
            self._compiled = compile_exprs(self.outputs, self.n_in)
        return self._compiled

    def jacobian(self, wrt: Sequence[int] | None = None) -> "ExprFunction":
        """Row-major Jacobian as a new function over the same inputs.

        Output ordering is ``d outputs[i] / d inputs[j]`` with ``j`` running
        fastest, so applying ``jacobian`` twice to a scalar function yields
        its Hessian in row-major order.
        """
        cols = list(range(self.n_in)) if wrt is None else list(wrt)
        per_col = [derive(self.outputs, j) for j in cols]
        rows = []
        for i in range(self.n_out):
            rows.extend(per_col[c][i] for c in range(len(cols)))
        return ExprFunction(self.inputs, rows)

    def to_strings(self) -> list[str]:
        return [to_string(o) for o in self.outputs]

    def __repr__(self):
        outs = ", ".join(self.to_strings())
        return f"ExprFunction([{', '.join(self.inputs)}] -> [{outs}])"
