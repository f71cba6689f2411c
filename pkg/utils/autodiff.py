"""
Differentiation engines: a reverse-mode tape over numpy arrays for training
gradients, and truncated Taylor jets for nested forward-mode derivatives.

Every elementary function here (tanh, exp, sigmoid, ...) accepts a plain
ndarray, a taped Var, or a Jet/MultiJet, so the same model code runs untaped,
taped, and with derivative channels.
"""
import logging

import numpy as np

from utils.errors import (
    PoisonedGradientError,
    PoisonedLossError,
    ShapeError,
    UnsupportedDerivativeError,
    UnsupportedPrimitiveError,
)

logger = logging.getLogger(__name__)

MAX_JET_ORDER = 3


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """
    Append-only log of array operations

    Nodes are Vars; append order is a topological order, so the backward
    sweep simply walks the log in reverse.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, var):
        self.nodes.append(var)
        return len(self.nodes) - 1

    def watch(self, value, name=None):
        """Register an array as a differentiable leaf."""
        return Var(np.asarray(value, dtype=float), self, name=name)

    def record(self, value, parents, vjps, opcode):
        return Var(value, self, tuple(parents), tuple(vjps), opcode)

    def gradient(self, loss, wrt):
        """
        Reverse sweep from a scalar loss

        Parameters:
        - loss: scalar Var recorded on this tape
        - wrt: list of leaf Vars

        Returns:
        - list of gradient arrays, one per entry of wrt (zeros if unreached)
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ShapeError("gradient requires a Var recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
        if not np.all(np.isfinite(loss.value)):
            raise PoisonedLossError(f"loss is not finite: {float(loss.value)}")

        grads = {loss.index: np.ones_like(loss.value, dtype=float)}
        for node in reversed(self.nodes[: loss.index + 1]):
            if not node.parents:
                continue
            g = grads.pop(node.index, None)
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                contribution = _unbroadcast(np.asarray(vjp(g), dtype=float), parent.value.shape)
                if not np.all(np.isfinite(contribution)):
                    raise PoisonedGradientError(
                        f"non-finite gradient at node {node.index} ({node.opcode})",
                        node_index=node.index,
                        opcode=node.opcode,
                    )
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + contribution
                else:
                    grads[parent.index] = contribution

        return [grads.get(v.index, np.zeros_like(v.value)) for v in wrt]


class Var:
    """A taped array. numpy ufuncs defer to the Var operators."""

    __array_ufunc__ = None

    def __init__(self, value, tape, parents=(), vjps=(), opcode="leaf", name=None):
        self.value = np.asarray(value)
        self.tape = tape
        self.parents = parents
        self.vjps = vjps
        self.opcode = opcode
        self.name = name
        self.index = tape._append(self)

    def __repr__(self):
        return f"Var({self.opcode}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    # arithmetic
    def __add__(self, other):
        return _binary(self, other, "add")

    def __radd__(self, other):
        return _binary(other, self, "add")

    def __sub__(self, other):
        return _binary(self, other, "sub")

    def __rsub__(self, other):
        return _binary(other, self, "sub")

    def __mul__(self, other):
        return _binary(self, other, "mul")

    def __rmul__(self, other):
        return _binary(other, self, "mul")

    def __truediv__(self, other):
        return _binary(self, other, "div")

    def __rtruediv__(self, other):
        return _binary(other, self, "div")

    def __matmul__(self, other):
        return _binary(self, other, "matmul")

    def __rmatmul__(self, other):
        return _binary(other, self, "matmul")

    def __neg__(self):
        return self.tape.record(-self.value, [self], [lambda g: -g], "neg")

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        shape = self.value.shape
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)

        def vjp(g):
            out = np.zeros(shape)
            if basic:
                out[index] = g
            else:
                np.add.at(out, index, g)
            return out

        return self.tape.record(self.value[index], [self], [vjp], "getitem")

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _value(x):
    return x.value if isinstance(x, Var) else x


def _binary(a, b, opcode):
    av, bv = _value(a), _value(b)
    if opcode == "add":
        value = av + bv
        da = lambda g: g
        db = lambda g: g
    elif opcode == "sub":
        value = av - bv
        da = lambda g: g
        db = lambda g: -g
    elif opcode == "mul":
        value = av * bv
        da = lambda g: g * bv
        db = lambda g: g * av
    elif opcode == "div":
        value = av / bv
        da = lambda g: g / bv
        db = lambda g: -g * av / (bv * bv)
    elif opcode == "matmul":
        value = av @ bv
        da = lambda g: g @ np.swapaxes(bv, -1, -2)
        db = lambda g: np.swapaxes(av, -1, -2) @ g
    else:
        raise UnsupportedPrimitiveError(f"unknown binary opcode: {opcode}")

    tape = a.tape if isinstance(a, Var) else b.tape
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(da)
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(db)
    return tape.record(value, parents, vjps, opcode)


def _unary(x, value, local, opcode):
    """Record y = f(x) with dy/dx given elementwise by `local`."""
    return x.tape.record(value, [x], [lambda g: g * local], opcode)


def linear_map(x, forward, adjoint, opcode="linear"):
    """
    Apply a linear operator as a single tape node

    Parameters:
    - x: ndarray or Var
    - forward: ndarray -> ndarray
    - adjoint: ndarray -> ndarray, the transpose of forward
    """
    if not isinstance(x, Var):
        return forward(x)
    return x.tape.record(forward(x.value), [x], [adjoint], opcode)


def _sigmoid_value(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(x):
    if isinstance(x, (Jet, MultiJet)):
        return jet_eval("tanh", x)
    if isinstance(x, Var):
        t = np.tanh(x.value)
        return _unary(x, t, 1.0 - t * t, "tanh")
    return np.tanh(x)


def exp(x):
    if isinstance(x, (Jet, MultiJet)):
        return jet_eval("exp", x)
    if isinstance(x, Var):
        e = np.exp(x.value)
        return _unary(x, e, e, "exp")
    return np.exp(x)


def sin(x):
    if isinstance(x, (Jet, MultiJet)):
        return jet_eval("sin", x)
    if isinstance(x, Var):
        return _unary(x, np.sin(x.value), np.cos(x.value), "sin")
    return np.sin(x)


def cos(x):
    if isinstance(x, (Jet, MultiJet)):
        return jet_eval("cos", x)
    if isinstance(x, Var):
        return _unary(x, np.cos(x.value), -np.sin(x.value), "cos")
    return np.cos(x)


def sigmoid(x):
    if isinstance(x, (Jet, MultiJet)):
        return jet_eval("sigmoid", x)
    if isinstance(x, Var):
        s = _sigmoid_value(x.value)
        return _unary(x, s, s * (1.0 - s), "sigmoid")
    return _sigmoid_value(x)


def swish(x):
    if isinstance(x, (Jet, MultiJet)):
        return jet_eval("swish", x)
    return x * sigmoid(x)


def reciprocal(x):
    if isinstance(x, (Jet, MultiJet)):
        return jet_eval("reciprocal", x)
    if isinstance(x, Var):
        r = 1.0 / x.value
        return _unary(x, r, -r * r, "reciprocal")
    return 1.0 / x


def power(x, exponent):
    if isinstance(x, (Jet, MultiJet)):
        return jet_eval("power", x, exponent=exponent)
    if isinstance(x, Var):
        if exponent == 2:
            return _unary(x, x.value * x.value, 2.0 * x.value, "square")
        return _unary(x, x.value ** exponent, exponent * x.value ** (exponent - 1), "power")
    if exponent == 2:
        return x * x
    return x ** exponent


def log(x):
    if isinstance(x, Var):
        return _unary(x, np.log(x.value), 1.0 / x.value, "log")
    return np.log(x)


def sqrt(x):
    if isinstance(x, Var):
        r = np.sqrt(x.value)
        return _unary(x, r, 0.5 / r, "sqrt")
    return np.sqrt(x)


ACTIVATIONS = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "swish": swish,
    "sin": sin,
    "exp": exp,
}


def get_activation(name):
    if name not in ACTIVATIONS:
        raise UnsupportedPrimitiveError(
            f"Unknown activation '{name}', expected one of {', '.join(ACTIVATIONS)}"
        )
    return ACTIVATIONS[name]


def sum(x, axis=None, keepdims=False):
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return x.tape.record(np.sum(x.value, axis=axis, keepdims=keepdims), [x], [vjp], "sum")


def mean(x, axis=None, keepdims=False):
    count = np.size(_value(x)) if axis is None else np.prod(
        [np.shape(_value(x))[a] for a in np.atleast_1d(axis)]
    )
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x, *shape):
    if len(shape) == 1 and isinstance(shape[0], tuple):
        shape = shape[0]
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    original = x.value.shape
    return x.tape.record(x.value.reshape(shape), [x], [lambda g: g.reshape(original)], "reshape")


def transpose(x):
    if not isinstance(x, Var):
        return np.transpose(x)
    return x.tape.record(x.value.T, [x], [lambda g: g.T], "transpose")


def concatenate(pieces, axis=-1):
    """Concatenate arrays and Vars; plain arrays act as constants."""
    values = [_value(p) for p in pieces]
    out = np.concatenate(values, axis=axis)
    variables = [(i, p) for i, p in enumerate(pieces) if isinstance(p, Var)]
    if not variables:
        return out

    offsets = np.cumsum([0] + [v.shape[axis] for v in values])
    parents, vjps = [], []
    for i, piece in variables:
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            return np.take(g, np.arange(lo, hi), axis=axis)

        parents.append(piece)
        vjps.append(vjp)
    return variables[0][1].tape.record(out, parents, vjps, "concat")


def zeros_like(x):
    return np.zeros(np.shape(_value(x)))


def elementary_derivatives(name, x, order, exponent=None):
    """
    Raw derivatives f(x), f'(x), ... f^(order)(x) of an elementary function

    Works for ndarrays and Vars alike; the order-0 entry is computed exactly as
    the plain function would compute it.
    """
    if name == "tanh":
        t = tanh(x)
        derivs = [t]
        if order >= 1:
            d1 = 1.0 - t * t
            derivs.append(d1)
        if order >= 2:
            derivs.append(-2.0 * t * d1)
        if order >= 3:
            derivs.append(-2.0 * d1 * (1.0 - 3.0 * t * t))
    elif name == "exp":
        e = exp(x)
        derivs = [e] * (order + 1)
    elif name == "sin":
        s, c = sin(x), cos(x)
        derivs = [s, c, -s, -c][: order + 1]
    elif name == "cos":
        s, c = sin(x), cos(x)
        derivs = [c, -s, -c, s][: order + 1]
    elif name in ("sigmoid", "swish"):
        s = sigmoid(x)
        sig = [s]
        if order >= 1:
            sig.append(s * (1.0 - s))
        if order >= 2:
            sig.append(sig[1] * (1.0 - 2.0 * s))
        if order >= 3:
            sig.append(sig[2] * (1.0 - 2.0 * s) - 2.0 * sig[1] * sig[1])
        if name == "sigmoid":
            derivs = sig
        else:
            # (x s)^(m) = m s^(m-1) + x s^(m)
            derivs = [x * s]
            for m in range(1, order + 1):
                derivs.append(m * sig[m - 1] + x * sig[m])
    elif name == "reciprocal":
        r = reciprocal(x)
        derivs = [r]
        if order >= 1:
            derivs.append(-(r * r))
        if order >= 2:
            derivs.append(2.0 * r * r * r)
        if order >= 3:
            derivs.append(-6.0 * r * r * r * r)
    elif name == "power":
        if exponent is None:
            raise UnsupportedPrimitiveError("power requires an exponent")
        derivs = [power(x, exponent)]
        coeff = 1.0
        for m in range(1, order + 1):
            coeff *= exponent - (m - 1)
            derivs.append(coeff * power(x, exponent - m))
    else:
        raise UnsupportedPrimitiveError(
            f"Unsupported jet primitive '{name}'; supported: add, mul, tanh, exp, sin, cos, "
            "sigmoid, swish, reciprocal, power"
        )
    return derivs


def faa_di_bruno(derivs, coeffs):
    """
    Compose raw outer derivatives with raw inner jet coefficients

    Parameters:
    - derivs: [f(c0), f'(c0), ...]
    - coeffs: [c0, c1, ...] of the inner jet

    Returns:
    - raw coefficients of f o c, truncated at len(coeffs) - 1
    """
    out = [derivs[0]]
    order = len(coeffs) - 1
    if order >= 1:
        out.append(derivs[1] * coeffs[1])
    if order >= 2:
        c1_sq = coeffs[1] * coeffs[1]
        out.append(derivs[2] * c1_sq + derivs[1] * coeffs[2])
    if order >= 3:
        out.append(
            derivs[3] * c1_sq * coeffs[1]
            + 3.0 * derivs[2] * coeffs[1] * coeffs[2]
            + derivs[1] * coeffs[3]
        )
    return out


def leibniz(a, b):
    """Raw coefficients of a product of two jets, truncated at the lower order."""
    order = min(len(a), len(b)) - 1
    out = [a[0] * b[0]]
    if order >= 1:
        out.append(a[1] * b[0] + a[0] * b[1])
    if order >= 2:
        out.append(a[2] * b[0] + 2.0 * a[1] * b[1] + a[0] * b[2])
    if order >= 3:
        out.append(a[3] * b[0] + 3.0 * a[2] * b[1] + 3.0 * a[1] * b[2] + a[0] * b[3])
    return out


class Jet:
    """
    Truncated Taylor jet along one direction

    coeffs[m] is the raw m-th derivative (not divided by m!). Coefficients may
    be floats, ndarrays or Vars.
    """

    __array_ufunc__ = None

    def __init__(self, coeffs):
        coeffs = list(coeffs)
        if not coeffs or len(coeffs) - 1 > MAX_JET_ORDER:
            raise UnsupportedDerivativeError(
                f"jet order must be between 0 and {MAX_JET_ORDER}, got {len(coeffs) - 1}"
            )
        self.coeffs = coeffs

    def __repr__(self):
        return f"Jet(order={self.order})"

    @property
    def order(self):
        return len(self.coeffs) - 1

    @property
    def value(self):
        return self.coeffs[0]

    def __getitem__(self, m):
        return self.coeffs[m]

    def __add__(self, other):
        if isinstance(other, Jet):
            m = min(self.order, other.order)
            return Jet([a + b for a, b in zip(self.coeffs[: m + 1], other.coeffs[: m + 1])])
        return Jet([self.coeffs[0] + other] + self.coeffs[1:])

    def __radd__(self, other):
        return Jet([other + self.coeffs[0]] + self.coeffs[1:])

    def __neg__(self):
        return Jet([-c for c in self.coeffs])

    def __sub__(self, other):
        if isinstance(other, Jet):
            m = min(self.order, other.order)
            return Jet([a - b for a, b in zip(self.coeffs[: m + 1], other.coeffs[: m + 1])])
        return Jet([self.coeffs[0] - other] + self.coeffs[1:])

    def __rsub__(self, other):
        return Jet([other - self.coeffs[0]] + [-c for c in self.coeffs[1:]])

    def __mul__(self, other):
        if isinstance(other, Jet):
            return Jet(leibniz(self.coeffs, other.coeffs))
        return Jet([c * other for c in self.coeffs])

    def __rmul__(self, other):
        return Jet([other * c for c in self.coeffs])

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * reciprocal(other)
        return Jet([c / other for c in self.coeffs])

    def __rtruediv__(self, other):
        return other * reciprocal(self)


class MultiJet:
    """
    A value with independent pure-direction jets

    tails maps a direction name ("x", "y", "t", ...) to [c1, ..., cm], the raw
    derivatives of order 1..m along that direction. Mixed derivatives are not
    carried.
    """

    __array_ufunc__ = None

    def __init__(self, value, tails=None):
        self.value = value
        self.tails = {d: list(c) for d, c in (tails or {}).items()}
        for direction, coeffs in self.tails.items():
            if len(coeffs) > MAX_JET_ORDER:
                raise UnsupportedDerivativeError(
                    f"direction '{direction}' requests order {len(coeffs)} > {MAX_JET_ORDER}"
                )

    def __repr__(self):
        orders = {d: len(c) for d, c in self.tails.items()}
        return f"MultiJet(orders={orders})"

    def jet(self, direction):
        return Jet([self.value] + self.tails.get(direction, []))

    def coefficient(self, key):
        """Raw derivative for a multi-index string such as '', 'x', 'xx' or 't'."""
        if key == "":
            return self.value
        if len(set(key)) != 1:
            raise UnsupportedDerivativeError(f"mixed derivative '{key}' is not carried")
        direction, order = key[0], len(key)
        coeffs = self.tails.get(direction, [])
        if order > len(coeffs):
            raise UnsupportedDerivativeError(f"derivative '{key}' was not requested")
        return coeffs[order - 1]

    def map_linear(self, fn):
        """Apply a linear map to the value and every coefficient."""
        return MultiJet(fn(self.value), {d: [fn(c) for c in cs] for d, cs in self.tails.items()})

    def __matmul__(self, weight):
        return self.map_linear(lambda c: c @ weight)

    def apply(self, name, exponent=None):
        order = max((len(c) for c in self.tails.values()), default=0)
        derivs = elementary_derivatives(name, self.value, order, exponent)
        tails = {}
        for direction, coeffs in self.tails.items():
            tails[direction] = faa_di_bruno(derivs, [self.value] + coeffs)[1:]
        return MultiJet(derivs[0], tails)

    def _combine(self, other, op):
        if not isinstance(other, MultiJet):
            return MultiJet(op(self.value, other), self.tails)
        tails = {}
        for direction in list(self.tails) + [d for d in other.tails if d not in self.tails]:
            a = self.tails.get(direction)
            b = other.tails.get(direction)
            if a is None:
                tails[direction] = [op(0.0, c) for c in b]
            elif b is None:
                tails[direction] = list(a)
            else:
                m = min(len(a), len(b))
                tails[direction] = [op(x, y) for x, y in zip(a[:m], b[:m])]
        return MultiJet(op(self.value, other.value), tails)

    def __add__(self, other):
        return self._combine(other, lambda a, b: a + b)

    def __radd__(self, other):
        return MultiJet(other + self.value, self.tails)

    def __sub__(self, other):
        return self._combine(other, lambda a, b: a - b)

    def __rsub__(self, other):
        return MultiJet(other - self.value, {d: [-c for c in cs] for d, cs in self.tails.items()})

    def __neg__(self):
        return MultiJet(-self.value, {d: [-c for c in cs] for d, cs in self.tails.items()})

    def __mul__(self, other):
        if not isinstance(other, MultiJet):
            return self.map_linear(lambda c: c * other)
        tails = {}
        for direction in list(self.tails) + [d for d in other.tails if d not in self.tails]:
            a = self.tails.get(direction)
            b = other.tails.get(direction)
            if a is None:
                tails[direction] = [self.value * c for c in b]
            elif b is None:
                tails[direction] = [c * other.value for c in a]
            else:
                tails[direction] = leibniz([self.value] + a, [other.value] + b)[1:]
        return MultiJet(self.value * other.value, tails)

    def __rmul__(self, other):
        return self.map_linear(lambda c: other * c)


def concatenate_jets(pieces, axis=-1):
    """
    Concatenate MultiJets (and constant arrays) along a feature axis

    Directions missing from a piece contribute zero coefficients.
    """
    orders = {}
    for piece in pieces:
        if isinstance(piece, MultiJet):
            for direction, coeffs in piece.tails.items():
                orders[direction] = max(orders.get(direction, 0), len(coeffs))

    values = [p.value if isinstance(p, MultiJet) else p for p in pieces]
    tails = {}
    for direction, order in orders.items():
        tails[direction] = []
        for m in range(order):
            column = []
            for piece, value in zip(pieces, values):
                coeffs = piece.tails.get(direction, []) if isinstance(piece, MultiJet) else []
                column.append(coeffs[m] if m < len(coeffs) else zeros_like(value))
            tails[direction].append(concatenate(column, axis=axis))
    return MultiJet(concatenate(values, axis=axis), tails)


def jet_eval(name, x, *others, exponent=None):
    """
    Propagate a jet through an elementary function

    Parameters:
    - name: add, mul, tanh, exp, sin, cos, sigmoid, swish, reciprocal or power
    - x: Jet or MultiJet
    - others: second operand for add and mul
    - exponent: exponent for power

    Returns:
    - Jet or MultiJet with exact raw derivatives up to the input order
    """
    if name == "add":
        return x + others[0]
    if name == "mul":
        return x * others[0]
    if isinstance(x, MultiJet):
        return x.apply(name, exponent)
    derivs = elementary_derivatives(name, x.coeffs[0], x.order, exponent)
    return Jet(faa_di_bruno(derivs, x.coeffs))
