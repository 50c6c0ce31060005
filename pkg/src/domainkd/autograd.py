"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every differentiable operation attaches a tape entry
(inputs, output, local backward rule) to its output tensor. backward()
collects the entries reachable from the loss in topological order into a
GradTape and replays them in reverse. Single-threaded by contract: a
graph must not be mutated from several threads at once.

Broadcasting is supported only over leading batch dimensions (plus
size-1 axes), which keeps every backward rule a plain sum-reduction.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes passed to an operation do not satisfy its contract."""


class ValidationError(ValueError):
    """Input values outside an operation's domain (labels, masks, ...)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class _TapeEntry:
    """One recorded operation: input/output refs plus its backward rule."""

    __slots__ = ("inputs", "output", "backward_rule")

    def __init__(self, inputs: tuple["Tensor", ...], output: "Tensor",
                 backward_rule: Callable[[], None]):
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


class GradTape:
    """Topologically ordered list of the operations reachable from one root.

    Entry i's inputs were produced by entries < i, so replaying the
    backward rules in reverse order propagates gradients correctly and,
    on identical inputs, bitwise identically across runs.
    """

    __slots__ = ("entries",)

    def __init__(self, entries: list[_TapeEntry]):
        self.entries = entries

    @staticmethod
    def from_root(root: "Tensor") -> "GradTape":
        entries: list[_TapeEntry] = []
        seen: set[int] = set()
        # Iterative DFS; graphs from long training steps exceed the
        # default recursion limit.
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                if node._entry is not None:
                    entries.append(node._entry)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._entry is not None:
                for parent in node._entry.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        return GradTape(entries)

    def replay_backward(self) -> None:
        for entry in reversed(self.entries):
            entry.backward_rule()

    def release(self) -> None:
        """Drop op records and backward closures. Entries and closures form
        reference cycles through their output tensors; breaking them here
        lets plain refcounting reclaim step memory instead of leaving
        arrays to the cycle collector."""
        for entry in self.entries:
            entry.output._entry = None
            entry.inputs = ()
            entry.backward_rule = _noop
        self.entries.clear()


def _noop() -> None:
    return None


class Tensor:
    """Dense row-major float64 array participating in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_entry")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._entry: Optional[_TapeEntry] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        """Add g into .grad. own=True hands over a freshly allocated array
        that no other node aliases, letting the first accumulation skip
        its defensive copy."""
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    def _accumulate_consumed(self, g: np.ndarray) -> None:
        """Accumulate an upstream gradient (or a view of one) whose owner's
        backward rule has already run. Replay order guarantees that buffer
        is never read again, so the first accumulation may alias it; later
        in-place additions only touch dead storage."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def backward(self, release_graph: bool = True) -> None:
        """Reverse-mode pass from this scalar; populates .grad on every
        reachable requires_grad tensor. By default the recorded graph is
        released afterwards (a graph is backpropagated once)."""
        if self.data.size != 1:
            raise DimensionError(
                f"backward() requires a scalar root, got shape {self.shape}")
        self._accumulate(np.ones_like(self.data))
        tape = GradTape.from_root(self)
        tape.replay_backward()
        if release_graph:
            tape.release()

    # Operator sugar used throughout the encoder and losses.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of this op set")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...],
            backward_rule: Callable[[], None]) -> Tensor:
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._entry = _TapeEntry(inputs, out, backward_rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`; inverse of broadcasting over leading/size-1 axes."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _acc_unbroadcast(t: Tensor, g: np.ndarray) -> None:
    reduced = _unbroadcast(g, t.data.shape)
    t._accumulate(reduced, own=reduced is not g)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward_rule():
        g = out.grad
        alias_given = False
        for t in (a, b):
            if not t.requires_grad:
                continue
            reduced = _unbroadcast(g, t.data.shape)
            if reduced is not g:
                t._accumulate(reduced, own=True)
            elif alias_given:
                t._accumulate(g)
            else:
                t._accumulate_consumed(g)
                alias_given = True

    return _record(out, (a, b), backward_rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def backward_rule():
        g = out.grad
        if a.requires_grad:
            reduced = _unbroadcast(g, a.data.shape)
            if reduced is g:
                a._accumulate_consumed(g)
            else:
                a._accumulate(reduced, own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape), own=True)

    return _record(out, (a, b), backward_rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward_rule():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape), own=True)

    return _record(out, (a, b), backward_rule)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)

    def backward_rule():
        if a.requires_grad:
            a._accumulate(out.grad * c, own=True)

    return _record(out, (a,), backward_rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (.., m, k) @ (.., k, n) -> (.., m, n)."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError as exc:
        raise DimensionError(
            f"matmul batch dimensions not broadcastable: {a.shape} vs {b.shape}"
        ) from exc

    def backward_rule():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape), own=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape), own=True)

    return _record(out, (a, b), backward_rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def backward_rule():
        if a.requires_grad:
            a._accumulate_consumed(out.grad.reshape(a.data.shape))

    return _record(out, (a,), backward_rule)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward_rule():
        if a.requires_grad:
            a._accumulate_consumed(out.grad.transpose(inverse))

    return _record(out, (a,), backward_rule)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def backward_rule():
        if a.requires_grad:
            a._accumulate(np.broadcast_to(out.grad, a.data.shape).copy(), own=True)

    return _record(out, (a,), backward_rule)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward_rule():
        if a.requires_grad:
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy(), own=True)

    return _record(out, (a,), backward_rule)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return scale(sum_axis(a, axis, keepdims), 1.0 / a.data.shape[axis])


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and int(ids.max()) >= table.data.shape[0]:
        raise ValidationError(
            f"id {int(ids.max())} out of range for table of {table.data.shape[0]} rows")
    if ids.size and int(ids.min()) < 0:
        raise ValidationError("negative id in embedding lookup")
    out = Tensor(table.data[ids])

    def backward_rule():
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1),
                      out.grad.reshape(-1, table.data.shape[-1]))

    return _record(out, (table,), backward_rule)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; smooth enough for finite-difference checks.
    c = np.sqrt(2.0 / np.pi)
    x = a.data
    x2 = x * x
    t = np.tanh(c * (x + 0.044715 * (x2 * x)))
    out = Tensor(0.5 * x * (1.0 + t))

    def backward_rule():
        if a.requires_grad:
            # local = 0.5 * ((1 + t) + x * (1 - t^2) * d_inner), fused in place
            u = t * t
            np.subtract(1.0, u, out=u)
            u *= x
            dinner = x2 * (3 * 0.044715 * c)
            dinner += c
            u *= dinner
            u += t
            u += 1.0
            u *= 0.5
            u *= out.grad
            a._accumulate(u, own=True)

    return _record(out, (a,), backward_rule)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t)

    def backward_rule():
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - t * t), own=True)

    return _record(out, (a,), backward_rule)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. Call only in training mode; p=0 is the identity."""
    if p <= 0.0:
        return a
    if p >= 1.0:
        raise ValidationError(f"dropout rate must be < 1, got {p}")
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * keep)

    def backward_rule():
        if a.requires_grad:
            a._accumulate(out.grad * keep, own=True)

    return _record(out, (a,), backward_rule)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Max-stabilized softmax over the last axis; rows sum to 1."""
    if a.ndim == 0 or a.data.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got {a.shape}")
    y = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward_rule():
        if a.requires_grad:
            g = out.grad
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._accumulate((g - dot) * y, own=True)

    return _record(out, (a,), backward_rule)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/bias."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layernorm gain/bias must have shape ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward_rule():
        g = out.grad
        if gain.requires_grad:
            axes = tuple(range(g.ndim - 1))
            gain._accumulate((g * xhat).sum(axis=axes), own=True)
        if bias.requires_grad:
            axes = tuple(range(g.ndim - 1))
            bias._accumulate(g.sum(axis=axes), own=True)
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv, own=True)

    return _record(out, (x, gain, bias), backward_rule)


def token_at(x: Tensor, position: int) -> Tensor:
    """Select one sequence position: (b, l, d) -> (b, d)."""
    if x.ndim != 3:
        raise DimensionError(f"token_at expects (b, l, d), got {x.shape}")
    out = Tensor(x.data[:, position, :])

    def backward_rule():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[:, position, :] = out.grad
            x._accumulate(g, own=True)

    return _record(out, (x,), backward_rule)


def mse(a: Tensor, b: Tensor, valid_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared difference, restricted to entries under valid_mask.

    valid_mask matches the leading axes of a/b with 0/1 entries; a leading
    index is counted once per trailing element it covers. With no valid
    entries the result is the constant 0.
    """
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    if valid_mask is None:
        denom = diff.size
        weighted = diff
        mask = None
    else:
        mask = np.asarray(valid_mask, dtype=np.float64)
        if mask.shape != a.data.shape[: mask.ndim]:
            raise DimensionError(
                f"valid_mask shape {mask.shape} does not match leading axes of {a.shape}")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValidationError("valid_mask entries must be 0 or 1")
        trailing = int(np.prod(a.data.shape[mask.ndim:], dtype=np.int64))
        n_valid = mask.sum()
        if n_valid == 0:
            return Tensor(0.0)
        denom = n_valid * trailing
        mask = mask.reshape(mask.shape + (1,) * (a.ndim - mask.ndim))
        weighted = diff * mask
    out = Tensor((weighted * diff).sum() / denom)

    def backward_rule():
        g = out.grad
        local = (2.0 / denom) * diff if mask is None else (2.0 / denom) * diff * mask
        if a.requires_grad:
            a._accumulate(g * local, own=True)
        if b.requires_grad:
            b._accumulate(-g * local, own=True)

    return _record(out, (a, b), backward_rule)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the batch, via log-sum-exp."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError(
            f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() > 1 or c != 2):
        raise ValidationError("labels must be 0 or 1 for two-class logits")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    picked = z[np.arange(n), labels]
    out = Tensor((lse - picked).mean())

    def backward_rule():
        if logits.requires_grad:
            p = np.exp(z - zmax)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            logits._accumulate(out.grad * p / n, own=True)

    return _record(out, (logits,), backward_rule)


class GradcheckReport:
    """Outcome of comparing reverse-mode gradients to central differences."""

    def __init__(self, max_rel_err: float, tol: float,
                 per_input: list[np.ndarray]):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.per_input = per_input

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"GradcheckReport({status}, max_rel_err={self.max_rel_err:.3e}, tol={self.tol:.0e})"


def gradcheck(f: Callable[..., Tensor], inputs: Iterable[Tensor],
              epsilon: float = 1e-5, tol: float = 1e-5) -> GradcheckReport:
    """Check reverse-mode gradients of scalar-valued f against central
    finite differences, elementwise, for every requires_grad input.

    The per-element error is |analytic - numeric| / max(|analytic|,
    |numeric|, 1): relative above unit scale, absolute below it. Central
    differences cannot resolve entries much below ulp(f)/epsilon, so a
    pure ratio would amplify roundoff noise on near-zero gradients of an
    order-one loss."""
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("f produced non-finite values")
    out.backward()

    max_rel = 0.0
    per_input: list[np.ndarray] = []
    for t in inputs:
        if not t.requires_grad:
            per_input.append(np.zeros(0))
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = f(*inputs).item()
            flat[i] = orig - epsilon
            down = f(*inputs).item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("f produced non-finite values during perturbation")
            num_flat[i] = (up - down) / (2.0 * epsilon)
        rel = np.abs(analytic - numeric) / np.maximum(
            np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        per_input.append(rel)
        if rel.size:
            max_rel = max(max_rel, float(rel.max()))
    return GradcheckReport(max_rel, tol, per_input)
