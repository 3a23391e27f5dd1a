"""Reverse-mode automatic differentiation over numpy arrays, plus a small MLP.

A :class:`Tape` records every operation applied to its :class:`Var` objects.
Each node stores its parent indices and a vector-Jacobian closure; ``gradient``
walks the nodes once in reverse order. Operations accept plain numpy values as
well, in which case they fall through to numpy and nothing is recorded. That
lets the simulator and policies run the same code with or without a tape.

Conventions pinned by the tests:

* ``relu(x)`` has zero derivative at ``x == 0``.
* ``minimum(a, b)`` routes the gradient to ``a`` on ties.
* ``straight_through(x, y)`` takes its forward value from ``y`` and passes
  the incoming gradient to ``x`` wherever ``y > 0``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """A recorded operation produced (or was asked to produce) a non-finite value."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Var:
    __slots__ = ("tape", "index", "value")
    # numpy defers to our reflected operators instead of broadcasting over objects
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, {self.value!r})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Append-only record of operations.

    ``ops[k]`` names the operation of node ``k``, ``parents[k]`` holds the
    parent node indices (always smaller than ``k``) and ``vjps[k]`` maps the
    gradient of node ``k`` to one gradient per parent. Leaves have no parents.
    """

    def __init__(self, check_finite: bool = True):
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.values: list[np.ndarray] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.ops)

    def variable(self, value) -> Var:
        value = np.array(value, dtype=float)
        return self._push("leaf", value, (), None)

    def _push(self, op, value, parents, vjp) -> Var:
        index = len(self.ops)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value from '{op}' at node {index} (parents {list(parents)})")
        self.ops.append(op)
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.values.append(value)
        return Var(self, index, value)

    def gradient(self, output: Var, wrt: Sequence[Var], seed=None) -> list[np.ndarray]:
        """Gradients of ``output`` (summed if not scalar) with respect to ``wrt``."""
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        grads: list[np.ndarray | None] = [None] * (output.index + 1)
        grads[output.index] = np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=float)
        for k in range(output.index, -1, -1):
            g = grads[k]
            if g is None or not self.parents[k]:
                continue
            for p, pg in zip(self.parents[k], self.vjps[k](g)):
                if pg is None:
                    continue
                pg = _unbroadcast(np.asarray(pg, dtype=float), self.values[p].shape)
                grads[p] = pg if grads[p] is None else grads[p] + pg
        out = []
        for v in wrt:
            g = grads[v.index] if v.index < len(grads) else None
            out.append(np.zeros_like(v.value) if g is None else g)
        return out


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = x.tape
    return tape


def value(x):
    """Forward value of ``x`` whether or not it lives on a tape."""
    return x.value if isinstance(x, Var) else x


def _v(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _binary(op, a, b, fwd, vjp_a, vjp_b):
    tape = _tape_of(a, b)
    av, bv = _v(a), _v(b)
    out = fwd(av, bv)
    if tape is None:
        return out
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a.index)
        fns.append(vjp_a)
    if isinstance(b, Var):
        parents.append(b.index)
        fns.append(vjp_b)
    return tape._push(op, np.asarray(out, dtype=float), tuple(parents),
                      lambda g: [f(g, av, bv, out) for f in fns])


def _unary(op, x, fwd, vjp):
    if not isinstance(x, Var):
        return fwd(np.asarray(x, dtype=float))
    xv = x.value
    with np.errstate(over="ignore", invalid="ignore"):
        out = fwd(xv)   # overflow is reported by _push as a NumericError
    return x.tape._push(op, np.asarray(out, dtype=float), (x.index,), lambda g: [vjp(g, xv, out)])


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)


def div(a, b):
    if np.any(_v(b) == 0):
        raise NumericError("division by zero")
    return _binary("div", a, b, np.divide,
                   lambda g, a, b, o: g / b,
                   lambda g, a, b, o: -g * a / (b * b))


def minimum(a, b):
    return _binary("min", a, b, np.minimum,
                   lambda g, a, b, o: g * (a <= b),
                   lambda g, a, b, o: g * (a > b))


def maximum(a, b):
    return _binary("max", a, b, np.maximum,
                   lambda g, a, b, o: g * (a >= b),
                   lambda g, a, b, o: g * (a < b))


def relu(x):
    """``max(x, 0)``."""
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), lambda g, x, o: g * (x > 0))


def exp(x):
    return _unary("exp", x, np.exp, lambda g, x, o: g * o)


def log(x):
    if np.any(_v(x) <= 0):
        raise NumericError("log of non-positive value")
    return _unary("log", x, np.log, lambda g, x, o: g / x)


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def softplus(x):
    return _unary("softplus", x, lambda v: np.logaddexp(0.0, v), lambda g, x, o: g * sigmoid(x))


def square(x):
    return _unary("square", x, np.square, lambda g, x, o: 2.0 * g * x)


def absolute(x):
    return _unary("abs", x, np.abs, lambda g, x, o: g * np.sign(x))


def sum(x, axis=None):
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    shape = x.shape

    def vjp(g, xv, o):
        if axis is None:
            return np.broadcast_to(g, shape)
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    return _unary("sum", x, lambda v: np.sum(v, axis=axis), vjp)


def dot(a, b):
    """Inner product of two 1-D operands."""
    return sum(mul(a, b))


def _matmul_vjp_a(g, a, b, o):
    if b.ndim == 1:
        return np.multiply.outer(g, b)
    return g @ b.T


def _matmul_vjp_b(g, a, b, o):
    if a.ndim == 1:
        return np.outer(a, g) if b.ndim == 2 else a * g
    return a.T @ g


def matmul(a, b):
    """Matrix product for 1-D/2-D operands."""
    return _binary("matmul", a, b, np.matmul, _matmul_vjp_a, _matmul_vjp_b)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    src = x.shape
    return _unary("reshape", x, lambda v: np.reshape(v, shape), lambda g, x, o: np.reshape(g, src))


def getitem(x, idx):
    if not isinstance(x, Var):
        return np.asarray(x)[idx]
    src = x.shape

    def vjp(g, xv, o):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return full

    return _unary("getitem", x, lambda v: np.array(v[idx], dtype=float), vjp)


def concat(xs: Sequence, axis: int = -1):
    """Concatenate operands along ``axis``; any of them may be a Var."""
    tape = _tape_of(*xs)
    vals = [np.asarray(_v(x), dtype=float) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    var_pos = [k for k, x in enumerate(xs) if isinstance(x, Var)]

    def vjp(g):
        pieces = np.split(g, bounds, axis=axis)
        return [pieces[k] for k in var_pos]

    return tape._push("concat", out, tuple(xs[k].index for k in var_pos), vjp)


def stack(xs: Sequence, axis: int = -1):
    axis_ = axis if axis >= 0 else np.ndim(_v(xs[0])) + 1 + axis
    return concat([expand_dims(x, axis_) for x in xs], axis=axis_)


def expand_dims(x, axis):
    shape = np.expand_dims(np.asarray(_v(x)), axis).shape
    return reshape(x, shape)


def straight_through(x, forward):
    """Forward value ``forward``; backward acts as identity where ``forward > 0``."""
    forward = np.asarray(forward, dtype=float)
    if not isinstance(x, Var):
        return forward
    mask = forward > 0
    return x.tape._push("straight_through", forward, (x.index,), lambda g: [g * mask])


# ---------------------------------------------------------------------------
# multilayer perceptron

_ACTIVATIONS = {"tanh": tanh, "relu": relu, "softplus": softplus}


def param_count(sizes: Sequence[int]) -> int:
    return int(np.sum([(a + 1) * b for a, b in zip(sizes[:-1], sizes[1:])]))


@dataclass
class MlpParams:
    """Layer sizes plus one flat vector holding every weight and bias.

    Layer ``k`` occupies ``fan_in * fan_out`` weights (row-major, input-major)
    followed by ``fan_out`` biases.
    """

    sizes: tuple[int, ...]
    flat: np.ndarray
    activation: str = "tanh"
    seed: int | None = None

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.flat = np.asarray(self.flat, dtype=float)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        if self.flat.shape != (param_count(self.sizes),):
            raise ValueError(f"expected {param_count(self.sizes)} parameters, got {self.flat.shape}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, sizes, seed: int = 0, activation: str = "tanh", scale: float = 1.0,
             output_bias=None) -> "MlpParams":
        """Glorot-style normal initialisation, deterministic in ``seed``."""
        rng = np.random.default_rng(seed)
        chunks = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            chunks.append(rng.normal(0.0, scale * np.sqrt(2.0 / (a + b)), size=a * b))
            chunks.append(np.zeros(b))
        if output_bias is not None:
            chunks[-1] = chunks[-1] + np.asarray(output_bias, dtype=float)
        return cls(tuple(sizes), np.concatenate(chunks), activation, seed)

    @classmethod
    def zeros(cls, sizes, activation: str = "tanh") -> "MlpParams":
        return cls(tuple(sizes), np.zeros(param_count(sizes)), activation)

    def with_flat(self, flat) -> "MlpParams":
        return MlpParams(self.sizes, np.array(flat, dtype=float), self.activation, self.seed)

    def layers(self, theta=None):
        """Split ``theta`` (default: ``self.flat``) into ``[(W, b), ...]``."""
        theta = self.flat if theta is None else theta
        out, k = [], 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            w = reshape(getitem(theta, slice(k, k + a * b)), (a, b))
            k += a * b
            out.append((w, getitem(theta, slice(k, k + b))))
            k += b
        return out


def mlp_apply(layers, x, activation: str = "tanh"):
    act = _ACTIVATIONS[activation]
    h = x
    for k, (w, b) in enumerate(layers):
        h = add(matmul(h, w), b)
        if k < len(layers) - 1:
            h = act(h)
    return h


def mlp_forward(params: MlpParams, x, tape: Tape | None = None, theta: Var | None = None):
    """Forward pass; records on ``tape`` when ``x`` or ``theta`` is a Var.

    ``x`` may be one feature vector or a matrix with one row per sample.
    """
    width = np.shape(_v(x))[-1]
    if width != params.sizes[0]:
        raise ValueError(f"input has {width} features, network expects {params.sizes[0]}")
    if tape is not None and theta is None and not isinstance(x, Var):
        x = tape.variable(x)
    return mlp_apply(params.layers(theta), x, params.activation)


# ---------------------------------------------------------------------------
# finite-difference check

def grad_check(f: Callable[[Var], Var], point, eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` receives a leaf Var and must return a scalar Var on the same tape.
    The relative error of component k is ``|g_k - fd_k| / max(|g_k|, |fd_k|, floor)``.
    """
    point = np.array(point, dtype=float)
    tape = Tape()
    x = tape.variable(point)
    (g,) = tape.gradient(f(x), [x])
    g = g.ravel()
    fd = np.empty(point.size)
    for k in range(point.size):
        e = np.zeros(point.size)
        e[k] = eps
        hi = f(Tape().variable(point + e.reshape(point.shape))).value
        lo = f(Tape().variable(point - e.reshape(point.shape))).value
        fd[k] = (float(hi) - float(lo)) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
    return float(np.max(np.abs(g - fd) / denom))


# ---------------------------------------------------------------------------
# optimisers

@dataclass
class Adam:
    step_size: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def update(self, params: np.ndarray, grad: np.ndarray, ascend: bool = False) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        delta = self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)
        return params + delta if ascend else params - delta

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


@dataclass
class Sgd:
    step_size: float
    t: int = 0

    def update(self, params: np.ndarray, grad: np.ndarray, ascend: bool = False) -> np.ndarray:
        self.t += 1
        return params + self.step_size * grad if ascend else params - self.step_size * grad

    def state(self) -> dict:
        return {"t": self.t}


# ---------------------------------------------------------------------------
# parameter files: magic, u32 header length, JSON header, float64 LE payload

MAGIC = b"DSRCPAR1"


def save_arrays(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["arrays"] = [[name, int(np.asarray(a).size)] for name, a in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    offset = 12 + n
    arrays = {}
    for name, size in header.pop("arrays"):
        end = offset + 8 * size
        if end > len(raw):
            raise ValueError(f"{path}: truncated at byte {len(raw)} while reading {name!r}")
        arrays[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(float)
        offset = end
    return header, arrays


def save_params(path, params: MlpParams, extra: dict | None = None) -> None:
    header = {"kind": "mlp", "sizes": list(params.sizes), "activation": params.activation,
              "seed": params.seed}
    header.update(extra or {})
    save_arrays(path, header, {"flat": params.flat})


def load_params(path) -> tuple[MlpParams, dict]:
    header, arrays = load_arrays(path)
    params = MlpParams(tuple(header.pop("sizes")), arrays["flat"], header.pop("activation"),
                       header.pop("seed", None))
    return params, header
