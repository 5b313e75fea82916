"""Scalar reverse-mode automatic differentiation.

Nodes live on an explicit :class:`Tape` in creation order, so a backward pass is
a single reverse sweep over a list and two sweeps over the same tape give
bit-identical gradients. Each node stores its local partial derivatives at
forward time; the backward rule is always ``parent.grad += node.grad * partial``.

Example::

    tape = Tape()
    p = tape.var(2.0)
    loss = stop_gradient(p) * p
    grads = backward(loss)
    grads[p]    # 2.0, the frozen factor is treated as a constant
"""

import math


class DomainError(ValueError):
    """Raised when an elementary op is evaluated outside its domain."""


class Node:
    __slots__ = ("value", "grad", "op", "parents", "partials", "stop_grad", "tape", "index")

    def __init__(self, tape, value, op, parents=(), partials=(), stop_grad=False):
        self.value = value
        self.grad = 0.0
        self.op = op
        self.parents = tuple(parents)
        self.partials = tuple(partials)
        self.stop_grad = stop_grad
        self.tape = tape
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    def __repr__(self):
        return f"Node(op={self.op!r}, value={self.value!r}, grad={self.grad!r})"

    # arithmetic sugar; floats are lifted to constants on this node's tape
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)


class Tape:
    """Ordered record of nodes. Parents always precede their children."""

    def __init__(self):
        self.nodes = []

    def const(self, v):
        return node_const(self, v)

    def var(self, v):
        """A differentiable leaf (a parameter)."""
        v = float(v)
        if not math.isfinite(v):
            raise ValueError(f"variable value must be finite, got {v!r}")
        return Node(self, v, "var")

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


def node_const(tape, v):
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"constant value must be finite, got {v!r}")
    return Node(tape, v, "const")


def _lift(tape, x):
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("nodes belong to different tapes")
        return x
    return node_const(tape, x)


def _tape_of(*args):
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TypeError("at least one argument must be a Node")


def _make(tape, value, op, pairs, stop_grad=False):
    # constants never receive adjoint, so they are dropped from the backward edges
    live = [(p, d) for p, d in pairs if p.op != "const"]
    return Node(
        tape,
        value,
        op,
        parents=[p for p, _ in pairs],
        partials=[(p.index, d) for p, d in live],
        stop_grad=stop_grad,
    )


def add(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    return _make(t, a.value + b.value, "add", [(a, 1.0), (b, 1.0)])


def sub(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    return _make(t, a.value - b.value, "sub", [(a, 1.0), (b, -1.0)])


def mul(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    return _make(t, a.value * b.value, "mul", [(a, b.value), (b, a.value)])


def div(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if b.value == 0.0:
        raise DomainError("division by zero")
    q = a.value / b.value
    return _make(t, q, "div", [(a, 1.0 / b.value), (b, -q / b.value)])


def neg(a):
    return _make(a.tape, -a.value, "neg", [(a, -1.0)])


def log(a):
    if a.value <= 0.0:
        raise DomainError(f"log of non-positive value {a.value!r}")
    return _make(a.tape, math.log(a.value), "log", [(a, 1.0 / a.value)])


def exp(a):
    try:
        e = math.exp(a.value)
    except OverflowError:
        e = math.inf
    return _make(a.tape, e, "exp", [(a, e)])


def pow_const(a, p):
    p = float(p)
    if a.value == 0.0 and p < 1.0:
        raise DomainError(f"0 ** {p} has no finite derivative")
    if a.value < 0.0 and not p.is_integer():
        raise DomainError(f"negative base {a.value!r} with fractional exponent {p}")
    return _make(a.tape, a.value**p, f"pow_const({p!r})", [(a, p * a.value ** (p - 1.0))])


def clamp_max(a, c):
    """min(a, c). Adjoint is 1 strictly below the ceiling and 0 at or above it."""
    c = float(c)
    if a.value < c:
        return _make(a.tape, a.value, f"clamp_max({c!r})", [(a, 1.0)])
    return _make(a.tape, c, f"clamp_max({c!r})", [(a, 0.0)])


def sigmoid_value(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def log_sigmoid_value(x):
    return min(x, 0.0) - math.log1p(math.exp(-abs(x)))


def log_sigmoid(a):
    x = a.value
    return _make(a.tape, log_sigmoid_value(x), "log_sigmoid", [(a, sigmoid_value(-x))])


# below this, 1 - exp(x) rounds to 1 in double precision
LOG1MEXP_CUTOFF = -37.0


def log1mexp_value(x):
    if x >= 0.0:
        raise DomainError(f"log(1 - exp(x)) needs x < 0, got {x!r}")
    if x < LOG1MEXP_CUTOFF:
        return 0.0
    if x > -math.log(2.0):
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


def log1mexp(a):
    """log(1 - exp(a)) for a < 0; the odds term of ORPO-style losses."""
    x = a.value
    v = log1mexp_value(x)
    d = 0.0 if x < LOG1MEXP_CUTOFF else -1.0 / math.expm1(-x)
    return _make(a.tape, v, "log1mexp", [(a, d)])


def stop_gradient(a):
    """Same value as ``a``; blocks all adjoint flow into ``a``."""
    return _make(a.tape, a.value, "stop_gradient", [(a, 0.0)], stop_grad=True)


ARITH_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "log": log,
    "exp": exp,
    "pow_const": pow_const,
    "clamp_max": clamp_max,
    "log_sigmoid": log_sigmoid,
    "log1mexp": log1mexp,
}


def arith(op, *args):
    """Dispatch an elementary op by name, e.g. ``arith("clamp_max", x, 2.0)``."""
    try:
        fn = ARITH_OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(*args)


def backward(root):
    """Reverse sweep from ``root``; returns ``{var_node: d root / d var}``.

    Gradients on every node up to ``root`` are reset first, so repeated calls
    are idempotent.
    """
    nodes = root.tape.nodes[: root.index + 1]
    for n in nodes:
        n.grad = 0.0
    root.grad = 1.0
    for n in reversed(nodes):
        if n.stop_grad or n.grad == 0.0:
            continue
        g = n.grad
        for idx, d in n.partials:
            nodes[idx].grad += g * d
    return {n: n.grad for n in nodes if n.op == "var"}
