"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Operations record onto the innermost active :class:`Tape` of the current thread.
With no active tape they only compute values, which is how inference runs.
Gradients accumulate across backward passes until :func:`zero_grad` resets them.
"""

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from haptic_act.errors import ContractError, DimensionError

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

GELU_ALPHA = 1.702


class Tensor:
    """A row-major float64 array that may carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(
        self,
        data: object,
        requires_grad: bool = False,
        name: Optional[str] = None,
        copy: bool = True,
    ):
        """
        Create a tensor.

        Args:
            data: Anything numpy can turn into a float64 array.
            requires_grad: Whether gradients should be tracked for this tensor.
            name: Optional label used in error messages and checkpoints.
            copy: Copy the input array (library internals pass False for fresh results).
        """
        array = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(array) if requires_grad else None
        self.name = name

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False, name: Optional[str] = None) -> "Tensor":
        """Create a zero-filled tensor."""
        return cls(np.zeros(tuple(shape)), requires_grad=requires_grad, name=name, copy=False)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeNode:
    """One recorded primitive: its output, inputs and vector-Jacobian product."""

    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered record of primitive operations, in creation (topological) order."""

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    """Return the innermost tape of the current thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(op: str, out: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track, copy=False)
    if track:
        assert tape is not None
        tape.nodes.append(TapeNode(op, result, inputs, backward_fn))
    return result


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor, tape: Tape) -> None:
    """
    Propagate gradients from a scalar loss through a tape.

    Every requires_grad tensor reachable from ``loss`` has the new gradient added
    to its ``grad``; unreachable tensors are left untouched.

    Args:
        loss: Single-element tensor produced on ``tape``.
        tape: Tape that recorded the computation.

    Raises:
        ContractError: If ``loss`` has more than one element.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(tape.nodes):
        upstream = pending.pop(id(node.output), None)
        if upstream is None:
            continue
        assert node.output.grad is not None
        node.output.grad += upstream
        for tensor, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = pending[key] + grad
            else:
                pending[key] = grad
                owners[key] = tensor

    # Whatever is left belongs to leaves that no node produced.
    for key, grad in pending.items():
        leaf = owners[key]
        assert leaf.grad is not None
        leaf.grad += grad


def zero_grad(params: Iterable[Tensor]) -> None:
    """Reset accumulated gradients to zero."""
    for param in params:
        if param.grad is not None:
            param.grad.fill(0.0)


def constant(data: object) -> Tensor:
    """Wrap an array as a tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return _record("mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _record("scale", a.data * factor, (a,), lambda g: (g * factor,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-d bias to every row of a [..., d] tensor (the only broadcast supported)."""
    if bias.data.ndim != 1 or x.shape[-1:] != bias.shape:
        raise DimensionError(f"add_bias: cannot add bias {bias.shape} to rows of {x.shape}")
    width = bias.shape[0]
    return _record(
        "add_bias",
        x.data + bias.data,
        (x, bias),
        lambda g: (g, g.reshape(-1, width).sum(axis=0)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    """Clip values to [low, high]; gradient passes only where the input was inside."""
    inside = (a.data >= low) & (a.data <= high)
    return _record("clamp", np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gelu(x: Tensor) -> Tensor:
    """GELU approximated as x * sigmoid(1.702 x)."""
    s = _sigmoid(GELU_ALPHA * x.data)
    x_data = x.data

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g * (s + GELU_ALPHA * x_data * s * (1.0 - s)),)

    return _record("gelu", x_data * s, (x,), _backward)


# ---------------------------------------------------------------------------
# Shape primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of [..., m, k] and [..., k, n].

    Leading batch axes must match exactly; there is no broadcasting.

    Raises:
        DimensionError: If the inner or batch dimensions disagree.
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a_data, b_data = a.data, b.data

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return g @ np.swapaxes(b_data, -1, -2), np.swapaxes(a_data, -1, -2) @ g

    return _record("matmul", a_data @ b_data, (a, b), _backward)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        order = list(range(a.data.ndim))
        order[-1], order[-2] = order[-2], order[-1]
    else:
        order = list(axes)
    inverse = list(np.argsort(order))
    return _record(
        "transpose",
        np.ascontiguousarray(np.transpose(a.data, order)),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {original} as {tuple(shape)}") from e
    return _record("reshape", out, (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis."""
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(g, boundaries, axis=axis))

    return _record("concat", out, tuple(tensors), _backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Select a contiguous range [start, stop) along one axis."""
    index: List[object] = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)
    shape = a.shape

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _record("slice", a.data[key].copy(), (a,), _backward)


# ---------------------------------------------------------------------------
# Reductions and normalizations
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.size
    return _record("mean", np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along one axis."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), _backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize each row of a [..., d] tensor to zero mean and unit variance, then apply gain and bias.

    Raises:
        DimensionError: If d < 2 or gain/bias do not have length d.
    """
    width = x.shape[-1]
    if width < 2:
        raise DimensionError(f"layer_norm needs rows of length >= 2, got {x.shape}")
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match rows of {x.shape}")

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    gain_data = gain.data

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        d_hat = g * gain_data
        dx = inv_std * (
            d_hat
            - d_hat.mean(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, width)
        return dx, (flat_g * x_hat.reshape(-1, width)).sum(axis=0), flat_g.sum(axis=0)

    return _record("layer_norm", x_hat * gain_data + bias.data, (x, gain, bias), _backward)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    _require_same_shape("l1_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size
    sign = np.sign(diff)

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        d = sign * (float(g) / n)
        return d, -d

    return _record("l1_loss", np.array(np.abs(diff).mean()), (pred, target), _backward)


def kl_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """
    KL divergence of N(mu, exp(logvar)) from the standard normal.

    A [z] input gives -0.5 * sum(1 + logvar - mu^2 - exp(logvar)); a [B, z] input
    gives the batch mean of that per-sample quantity.
    """
    _require_same_shape("kl_gaussian", mu, logvar)
    samples = 1 if mu.data.ndim == 1 else int(np.prod(mu.shape[:-1]))
    mu_data, lv_data = mu.data, logvar.data
    var = np.exp(lv_data)
    value = -0.5 * np.sum(1.0 + lv_data - mu_data * mu_data - var) / samples

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        factor = float(g) / samples
        return mu_data * factor, -0.5 * (1.0 - var) * factor

    return _record("kl_gaussian", np.array(value), (mu, logvar), _backward)
