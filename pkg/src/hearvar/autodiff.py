"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: it provides exactly the operators the
training pipeline composes (matrix product, elementwise arithmetic, the
three activations, concatenation, mean reduction, squared Euclidean
distance, and a guarded square root), a `Tape` that records operations in
execution order, and a finite-difference checker used as the independent
gradient oracle throughout the test suite.

Conventions:
  * everything is float64; inputs are validated to be finite at tensor
    creation, and consumers (the optimizer, the training loops) validate
    values again at pass boundaries;
  * no broadcasting - elementwise operators require exactly equal shapes,
    and `expand_rows` is the explicit way to tile a vector over a batch;
  * one tape per forward/backward pass, rebuilt every training step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeMismatch",
    "NonFinite",
    "NotScalar",
    "Tensor",
    "Tape",
    "matmul",
    "add",
    "mul",
    "sigmoid",
    "tanh",
    "relu",
    "concat_last",
    "mean_over_axis",
    "sum_all",
    "squared_distance",
    "sqrt_guarded",
    "expand_rows",
    "take_rows",
    "reshape",
    "forward_op",
    "FORWARD_OP_KINDS",
    "GradCheckReport",
    "finite_difference_check",
]

SQRT_CLAMP = 1e-12


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class NonFinite(ValueError):
    """A value that must be finite contains NaN or +/-Inf."""


class NotScalar(ValueError):
    """backward() was asked to differentiate a non-scalar tensor."""


class Tensor:
    """A dense float64 array plus its accumulated gradient.

    `grad` stays None until a backward pass deposits something; gradients
    from multiple uses of the same tensor accumulate additively.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data: np.ndarray, requires_grad: bool, tape: "Tape | None"):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Nodes are appended in execution order, which makes the list a valid
    topological order; `backward` replays it in exact reverse.
    """

    def __init__(self) -> None:
        self._nodes: list[Callable[[], None]] = []
        self._tensors: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def tensor(self, data, requires_grad: bool = False) -> Tensor:
        """Wrap an array as a leaf on this tape, validating finiteness."""
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFinite("leaf tensor contains NaN or Inf")
        t = Tensor(arr, requires_grad, self)
        self._tensors.append(t)
        return t

    def record(self, out: Tensor, backward_fn: Callable[[], None]) -> None:
        """Append a node; `backward_fn` must add into the inputs' grads."""
        self._tensors.append(out)
        self._nodes.append(backward_fn)

    def backward(self, loss: Tensor, release: bool = True) -> None:
        """Populate `grad` for every requires_grad tensor reachable from `loss`.

        A tape is single-use: with `release` (the default) the recorded graph
        is dropped afterwards, so intermediate tensors free by refcount
        instead of lingering in reference cycles until the garbage collector
        runs. Leaf tensors and their grads stay valid through the caller's
        own references. Pass release=False to keep the graph inspectable.
        """
        if loss.data.size != 1:
            raise NotScalar(f"loss has {loss.data.size} elements, expected 1")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            node()
        if release:
            self.release()

    def release(self) -> None:
        """Drop the recorded graph; use after forward-only passes as well."""
        self._nodes.clear()
        self._tensors.clear()

    def assert_finite(self) -> None:
        """Check every value and gradient recorded on this tape."""
        for t in self._tensors:
            if not np.isfinite(t.data).all():
                raise NonFinite("tensor value contains NaN or Inf")
            if t.grad is not None and not np.isfinite(t.grad).all():
                raise NonFinite("tensor gradient contains NaN or Inf")


def _tape_of(*tensors: Tensor) -> Tape:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    if tape is None:
        raise ValueError("no operand is bound to a tape")
    return tape


def _accum(t: Tensor, g: np.ndarray, copy: bool = False) -> None:
    # `copy` must be True whenever `g` aliases another tensor's grad buffer
    # (pass-through rules), otherwise later accumulation would corrupt it.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if copy else g
    else:
        t.grad += g


def _out(tape: Tape, data: np.ndarray, inputs: Sequence[Tensor]) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    return Tensor(data, rg, tape)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

# Derivative factors live in named helpers so the gradient-check suite can
# fault-inject them (see cli.gradcheck tests).
def _sigmoid_grad_factor(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def _tanh_grad_factor(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """Matrix product of two 2-D tensors, with optional transposed operands."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(
            f"matmul requires 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    am = a.data.T if transpose_a else a.data
    bm = b.data.T if transpose_b else b.data
    if am.shape[1] != bm.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {am.shape} @ {bm.shape}")
    tape = _tape_of(a, b)
    out = _out(tape, am @ bm, (a, b))
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                ga = g @ bm.T
                _accum(a, ga.T if transpose_a else ga)
            if b.requires_grad:
                gb = am.T @ g
                _accum(b, gb.T if transpose_b else gb)

        tape.record(out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    tape = _tape_of(a, b)
    out = _out(tape, a.data + b.data, (a, b))
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            _accum(a, g, copy=True)
            _accum(b, g, copy=True)

        tape.record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    tape = _tape_of(a, b)
    out = _out(tape, a.data * b.data, (a, b))
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g * b.data)
            if b.requires_grad:
                _accum(b, g * a.data)

        tape.record(out, backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    # 0.5*(tanh(x/2)+1) is the logistic function, stable at both tails and
    # noticeably cheaper than exp-based forms on this array size.
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    out = _out(tape, y, (x,))
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            _accum(x, g * _sigmoid_grad_factor(y))

        tape.record(out, backward)
    return out


def tanh(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    y = np.tanh(x.data)
    out = _out(tape, y, (x,))
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            _accum(x, g * _tanh_grad_factor(y))

        tape.record(out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    tape = _tape_of(x)
    out = _out(tape, np.maximum(x.data, 0.0), (x,))
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            # relu'(0) := 0, so an inactive hinge contributes exactly zero.
            _accum(x, g * (x.data > 0.0))

        tape.record(out, backward)
    return out


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis, preserving argument order."""
    if len(parts) < 2:
        raise ShapeMismatch("concat needs at least two inputs")
    lead = parts[0].data.shape[:-1]
    for p in parts[1:]:
        if p.data.shape[:-1] != lead:
            raise ShapeMismatch(
                f"concat shapes differ off the last axis: "
                f"{[tuple(p.data.shape) for p in parts]}"
            )
    tape = _tape_of(*parts)
    out = _out(tape, np.concatenate([p.data for p in parts], axis=-1), parts)
    if out.requires_grad:
        widths = [p.data.shape[-1] for p in parts]

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            offset = 0
            for p, w in zip(parts, widths):
                _accum(p, g[..., offset : offset + w], copy=True)
                offset += w

        tape.record(out, backward)
    return out


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    if x.data.ndim == 0 or axis >= x.data.ndim or axis < -x.data.ndim:
        raise ShapeMismatch(f"mean axis {axis} invalid for shape {x.data.shape}")
    tape = _tape_of(x)
    out = _out(tape, x.data.mean(axis=axis), (x,))
    if out.requires_grad:
        n = x.data.shape[axis]

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            _accum(x, np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

        tape.record(out, backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    tape = _tape_of(x)
    out = _out(tape, np.asarray(x.data.sum()), (x,))
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            _accum(x, np.full_like(x.data, float(g)))

        tape.record(out, backward)
    return out


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences over the last axis.

    For 1-D inputs this is the scalar squared Euclidean distance; for 2-D
    inputs it reduces each row independently, giving one value per row.
    """
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(
            f"squared_distance shapes differ: {a.data.shape} vs {b.data.shape}"
        )
    tape = _tape_of(a, b)
    diff = a.data - b.data
    out = _out(tape, np.asarray((diff * diff).sum(axis=-1)), (a, b))
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            ga = (2.0 * diff) * np.expand_dims(g, -1) if diff.ndim > 1 else (2.0 * diff) * g
            if a.requires_grad:
                _accum(a, ga)
            if b.requires_grad:
                _accum(b, -ga)

        tape.record(out, backward)
    return out


def sqrt_guarded(x: Tensor) -> Tensor:
    """Elementwise square root with the argument clamped to >= 1e-12.

    The clamped value is used in the backward rule as well, so the gradient
    stays finite at zero instead of blowing up.
    """
    tape = _tape_of(x)
    clamped = np.maximum(x.data, SQRT_CLAMP)
    y = np.sqrt(clamped)
    out = _out(tape, y, (x,))
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            _accum(x, g * (0.5 / y))

        tape.record(out, backward)
    return out


def expand_rows(v: Tensor, n: int) -> Tensor:
    """Tile a 1-D tensor into n identical rows; the explicit 'broadcast'."""
    if v.data.ndim != 1:
        raise ShapeMismatch(f"expand_rows needs a vector, got shape {v.data.shape}")
    tape = _tape_of(v)
    out = _out(tape, np.tile(v.data, (n, 1)), (v,))
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            _accum(v, g.sum(axis=0))

        tape.record(out, backward)
    return out


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice rows [start, stop) of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"take_rows needs a matrix, got shape {x.data.shape}")
    if not (0 <= start < stop <= x.data.shape[0]):
        raise ShapeMismatch(
            f"row slice [{start}, {stop}) out of range for {x.data.shape[0]} rows"
        )
    tape = _tape_of(x)
    out = _out(tape, x.data[start:stop].copy(), (x,))
    if out.requires_grad:

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop] += g

        tape.record(out, backward)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    tape = _tape_of(x)
    out = _out(tape, x.data.reshape(shape), (x,))
    if out.requires_grad:
        orig = x.data.shape

        def backward() -> None:
            g = out.grad
            if g is None:
                return
            _accum(x, g.reshape(orig), copy=True)

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Spec-level dispatcher and gradient checking
# ---------------------------------------------------------------------------

FORWARD_OP_KINDS = (
    "matmul",
    "add",
    "elementwise_mul",
    "sigmoid",
    "tanh",
    "relu",
    "concat_last_axis",
    "mean_over_axis",
    "squared_euclidean_distance",
)


def forward_op(kind: str, inputs: Sequence[Tensor], axis: int | None = None) -> Tensor:
    """Apply one of the named operator kinds to already-taped tensors.

    Validates input finiteness up front; shape checks are delegated to the
    individual operators.
    """
    for t in inputs:
        if not np.isfinite(t.data).all():
            raise NonFinite(f"{kind}: input contains NaN or Inf")
    if kind == "matmul":
        return matmul(inputs[0], inputs[1])
    if kind == "add":
        return add(inputs[0], inputs[1])
    if kind == "elementwise_mul":
        return mul(inputs[0], inputs[1])
    if kind == "sigmoid":
        return sigmoid(inputs[0])
    if kind == "tanh":
        return tanh(inputs[0])
    if kind == "relu":
        return relu(inputs[0])
    if kind == "concat_last_axis":
        return concat_last(inputs)
    if kind == "mean_over_axis":
        return mean_over_axis(inputs[0], 0 if axis is None else axis)
    if kind == "squared_euclidean_distance":
        return squared_distance(inputs[0], inputs[1])
    raise ValueError(f"unknown op kind: {kind!r}")


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients against central differences."""

    name: str
    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rtol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.rtol)

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max rel err {self.max_rel_error:.3e} (rtol {self.rtol:g})"


# Relative-error denominator floor. Central differences carry ~1e-10 of
# absolute noise at eps=1e-5, so errors on near-zero gradients are compared
# against this floor instead of exploding.
_REL_FLOOR = 1e-6


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    epsilon: float = 1e-5,
    rtol: float = 1e-4,
    name: str = "f",
) -> GradCheckReport:
    """Compare the taped gradient of f at x against central differences.

    `f` receives a leaf tensor bound to a fresh tape and must return a
    scalar tensor built from taped operations. The numeric side evaluates
    (f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps) for every element of x,
    each on its own tape, so it is independent of the backward rules.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x0 = np.asarray(x, dtype=np.float64)

    tape = Tape()
    leaf = tape.tensor(x0, requires_grad=True)
    out = f(leaf)
    tape.backward(out)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad.copy()

    def value_at(arr: np.ndarray) -> float:
        t = Tape()
        return float(f(t.tensor(arr)).data)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        probe = x0.copy().reshape(-1)
        probe[i] = orig + epsilon
        up = value_at(probe.reshape(x0.shape))
        probe[i] = orig - epsilon
        down = value_at(probe.reshape(x0.shape))
        num_flat[i] = (up - down) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(
        name=name,
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        rel_errors=rel,
        analytic=analytic,
        numeric=numeric,
        rtol=rtol,
    )
