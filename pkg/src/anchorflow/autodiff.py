"""Minimal reverse-mode differentiation over dense float64 vectors and matrices.

The engine records primitive operations on a per-call tape and supports a
single reverse sweep (vector-Jacobian product). There is no persistent graph,
no broadcasting beyond the documented primitives, and no higher-order
derivatives. Any non-finite intermediate aborts the computation with
:class:`NonFiniteValue` instead of propagating NaNs silently.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Base class for engine failures."""


class DimensionMismatch(AutodiffError):
    """Operand shapes are incompatible; the message names the offender."""


class NonFiniteValue(AutodiffError):
    """A primitive produced NaN or Inf."""


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(value: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteValue(f"non-finite value produced by {where}")


class Node:
    """One recorded value. ``parents`` pair each input with its pullback."""

    __slots__ = ("value", "parents", "recompute", "grad")

    def __init__(self, value, parents=(), recompute=None):
        self.value = value
        self.parents = parents  # tuple of (Node, pullback(grad) -> parent grad)
        self.recompute = recompute
        self.grad = None


class ComputeTape:
    """Topologically ordered record of primitive operations.

    Nodes are appended in creation order, so a reverse iteration visits each
    node exactly once after all of its consumers. ``replay`` recomputes every
    node from the recorded closures and must reproduce values bit-exactly.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: list[Node] = []
        self.param_names: dict[int, str] = {}
        self.output: Node | None = None

    # -- leaves ------------------------------------------------------------

    def input(self, value) -> Node:
        node = self._record(as_f64(value), where="input")
        self.inputs.append(node)
        return node

    def param(self, name: str, value) -> Node:
        node = self._record(as_f64(value), where=f"param '{name}'")
        self.param_names[id(node)] = name
        return node

    def constant(self, value) -> Node:
        return self._record(as_f64(value), where="constant")

    def _record(self, value, parents=(), recompute=None, where="op") -> Node:
        _check_finite(value, where)
        node = Node(value, parents, recompute)
        self.nodes.append(node)
        return node

    # -- primitives ---------------------------------------------------------

    def affine(self, x: Node, w: Node, b: Node | None = None) -> Node:
        xv, wv = x.value, w.value
        if wv.ndim != 2:
            raise DimensionMismatch(f"affine weight must be 2-D, got shape {wv.shape}")
        if xv.ndim not in (1, 2) or xv.shape[-1] != wv.shape[0]:
            raise DimensionMismatch(
                f"affine input shape {xv.shape} incompatible with weight {wv.shape}"
            )
        out = xv @ wv
        parents = [
            (x, lambda g: g @ wv.T),
            (w, (lambda g: np.outer(xv, g)) if xv.ndim == 1 else (lambda g: xv.T @ g)),
        ]
        if b is not None:
            bv = b.value
            if bv.shape != (wv.shape[1],):
                raise DimensionMismatch(
                    f"affine bias shape {bv.shape} incompatible with weight {wv.shape}"
                )
            out = out + bv
            parents.append((b, (lambda g: g) if xv.ndim == 1 else (lambda g: g.sum(axis=0))))

        def recompute():
            y = x.value @ w.value
            return y + b.value if b is not None else y

        return self._record(out, tuple(parents), recompute, where="affine")

    def tanh(self, x: Node) -> Node:
        out = np.tanh(x.value)
        return self._record(
            out, ((x, lambda g: g * (1.0 - out * out)),),
            lambda: np.tanh(x.value), where="tanh",
        )

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        return self._record(
            x.value * mask, ((x, lambda g: g * mask),),
            lambda: x.value * (x.value > 0), where="relu",
        )

    def softplus(self, x: Node) -> Node:
        out = np.logaddexp(0.0, x.value)
        sig = 0.5 * (1.0 + np.tanh(0.5 * x.value))
        return self._record(
            out, ((x, lambda g: g * sig),),
            lambda: np.logaddexp(0.0, x.value), where="softplus",
        )

    def add(self, a: Node, b: Node) -> Node:
        self._same_shape(a, b, "add")
        return self._record(
            a.value + b.value,
            ((a, lambda g: g), (b, lambda g: g)),
            lambda: a.value + b.value, where="add",
        )

    def sub(self, a: Node, b: Node) -> Node:
        self._same_shape(a, b, "sub")
        return self._record(
            a.value - b.value,
            ((a, lambda g: g), (b, lambda g: -g)),
            lambda: a.value - b.value, where="sub",
        )

    def mul(self, a: Node, b: Node) -> Node:
        self._same_shape(a, b, "mul")
        return self._record(
            a.value * b.value,
            ((a, lambda g: g * b.value), (b, lambda g: g * a.value)),
            lambda: a.value * b.value, where="mul",
        )

    def scale(self, x: Node, c: float) -> Node:
        c = float(c)
        return self._record(
            x.value * c, ((x, lambda g: g * c),),
            lambda: x.value * c, where="scale",
        )

    def sum(self, x: Node, axis: int | None = None) -> Node:
        shape = x.value.shape

        def pullback(g):
            if axis is None:
                return np.broadcast_to(g, shape).copy()
            return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

        return self._record(
            np.sum(x.value, axis=axis), ((x, pullback),),
            lambda: np.sum(x.value, axis=axis), where="sum",
        )

    def dot(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 1 or b.value.ndim != 1 or a.value.shape != b.value.shape:
            raise DimensionMismatch(
                f"dot expects matching 1-D operands, got {a.value.shape} and {b.value.shape}"
            )
        return self._record(
            np.dot(a.value, b.value),
            ((a, lambda g: g * b.value), (b, lambda g: g * a.value)),
            lambda: np.dot(a.value, b.value), where="dot",
        )

    def sqnorm(self, x: Node) -> Node:
        return self._record(
            np.sum(x.value * x.value),
            ((x, lambda g: 2.0 * g * x.value),),
            lambda: np.sum(x.value * x.value), where="sqnorm",
        )

    def logsumexp(self, x: Node, axis: int = -1) -> Node:
        m = np.max(x.value, axis=axis, keepdims=True)
        out = np.squeeze(m, axis=axis) + np.log(
            np.sum(np.exp(x.value - m), axis=axis)
        )
        soft = np.exp(x.value - np.expand_dims(out, axis))

        def pullback(g):
            return np.expand_dims(g, axis) * soft

        def recompute():
            mm = np.max(x.value, axis=axis, keepdims=True)
            return np.squeeze(mm, axis=axis) + np.log(
                np.sum(np.exp(x.value - mm), axis=axis)
            )

        return self._record(out, ((x, pullback),), recompute, where="logsumexp")

    def concat(self, parts: list[Node], axis: int = -1) -> Node:
        values = [p.value for p in parts]
        sizes = [v.shape[axis] for v in values]
        offsets = np.cumsum([0] + sizes)

        def make_pullback(i):
            lo, hi = offsets[i], offsets[i + 1]

            def pullback(g):
                index = [slice(None)] * g.ndim
                index[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
                return g[tuple(index)]

            return pullback

        parents = tuple((p, make_pullback(i)) for i, p in enumerate(parts))
        return self._record(
            np.concatenate(values, axis=axis), parents,
            lambda: np.concatenate([p.value for p in parts], axis=axis),
            where="concat",
        )

    @staticmethod
    def _same_shape(a: Node, b: Node, op: str) -> None:
        if a.value.shape != b.value.shape:
            raise DimensionMismatch(
                f"{op} expects matching shapes, got {a.value.shape} and {b.value.shape}"
            )

    # -- evaluation ----------------------------------------------------------

    def seal(self, output: Node) -> None:
        self.output = output

    def replay(self) -> np.ndarray:
        """Recompute all recorded nodes in order; returns the sealed output."""
        for node in self.nodes:
            if node.recompute is not None:
                node.value = node.recompute()
        if self.output is None:
            raise AutodiffError("tape has no sealed output")
        return self.output.value


def forward(tape_builder, *inputs):
    """Evaluate ``tape_builder(tape, *input_nodes)`` and return (value, tape)."""
    tape = ComputeTape()
    nodes = [tape.input(x) for x in inputs]
    out = tape_builder(tape, *nodes)
    tape.seal(out)
    return out.value, tape


def vjp(tape: ComputeTape, cotangent) -> tuple[list[np.ndarray], dict[str, np.ndarray]]:
    """Reverse sweep: returns gradients w.r.t. tape inputs and named parameters.

    The result is linear in ``cotangent``. Parameters registered multiple
    times under the same name have their gradients accumulated.
    """
    if tape.output is None:
        raise AutodiffError("tape has no sealed output")
    cot = as_f64(cotangent)
    out_shape = np.shape(tape.output.value)
    if cot.shape != out_shape:
        raise DimensionMismatch(
            f"cotangent shape {cot.shape} does not match output shape {out_shape}"
        )
    for node in tape.nodes:
        node.grad = None
    tape.output.grad = cot
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        for parent, pullback in node.parents:
            contrib = pullback(node.grad)
            _check_finite(contrib, "vjp pullback")
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64)
            else:
                parent.grad = parent.grad + contrib
    input_grads = [
        n.grad if n.grad is not None else np.zeros_like(n.value) for n in tape.inputs
    ]
    param_grads: dict[str, np.ndarray] = {}
    for node in tape.nodes:
        name = tape.param_names.get(id(node))
        if name is None:
            continue
        g = node.grad if node.grad is not None else np.zeros_like(node.value)
        param_grads[name] = param_grads.get(name, 0.0) + g
    return input_grads, param_grads


def central_difference(f, point, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector."""
    x = as_f64(point)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        e = np.zeros_like(xf)
        e[i] = step
        hi = float(f((xf + e).reshape(x.shape)))
        lo = float(f((xf - e).reshape(x.shape)))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteValue("non-finite function value at finite-difference probe")
        flat[i] = (hi - lo) / (2.0 * step)
    return grad


def grad_check(tape_builder, point, step: float = 1e-5) -> float:
    """Max relative error between the reverse-sweep gradient and central differences.

    Large return values signal either a wrong derivative or a nonsmooth point
    (a subgradient location is reported as unreliable rather than masked).
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    value, tape = forward(tape_builder, point)
    if np.ndim(value) != 0:
        raise DimensionMismatch("grad_check expects a scalar-valued function")
    (analytic,), _ = vjp(tape, 1.0)

    def evaluate(x):
        v, _ = forward(tape_builder, x)
        return v

    numeric = central_difference(evaluate, point, step)
    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)
    return float(np.max(err))


class ParameterStore:
    """Named dense arrays with immutable shapes and a mutation version counter."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self._arrays = {k: as_f64(v).copy() for k, v in arrays.items()}
        self._shapes = {k: v.shape for k, v in self._arrays.items()}
        self.version = 0
        self.frozen = False

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def names(self) -> list[str]:
        return list(self._arrays)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._shapes[name]

    @property
    def size(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def update(self, name: str, value: np.ndarray) -> None:
        if self.frozen:
            raise AutodiffError("parameter store is frozen")
        value = as_f64(value)
        if value.shape != self._shapes[name]:
            raise DimensionMismatch(
                f"parameter '{name}' has shape {self._shapes[name]}, got {value.shape}"
            )
        _check_finite(value, f"parameter update '{name}'")
        self._arrays[name] = value.copy()
        self.version += 1

    def freeze(self) -> None:
        self.frozen = True

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._arrays.items()}

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.state())
