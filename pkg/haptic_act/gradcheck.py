"""Finite-difference verification of analytic gradients."""

from typing import Callable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from haptic_act.autograd import Tape, Tensor, backward, zero_grad
from haptic_act.errors import ContractError, NumericError

ParamSet = Union[Mapping[str, Tensor], Sequence[Tensor]]


def _as_list(params: ParamSet) -> List[Tensor]:
    if isinstance(params, Mapping):
        return list(params.values())
    return list(params)


def _evaluate(loss_fn: Callable[[], Tensor]) -> float:
    value = loss_fn().item()
    if not np.isfinite(value):
        raise NumericError(f"Loss is not finite during gradient check: {value}")
    return value


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(1e-12, |a| + |n|)."""
    return abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric))


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: ParamSet,
    h: float = 1e-5,
    n_probes: int = 64,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare backward() against central differences on randomly chosen scalars.

    ``loss_fn`` must rebuild the loss from the current parameter values and be
    deterministic. Parameters with ``requires_grad=False`` are never probed.
    After the call each probed parameter holds the analytic gradient.

    Args:
        loss_fn: Closure returning a scalar loss tensor.
        params: Parameters to probe, as a mapping or a sequence.
        h: Central-difference step.
        n_probes: Number of scalar entries to probe.
        rng: Generator used to choose probes (default: seed 0).

    Returns:
        Maximum relative error over the probes.

    Raises:
        ContractError: If h <= 0, n_probes < 1 or nothing can be probed.
        NumericError: If the loss is not finite.
    """
    if h <= 0:
        raise ContractError(f"Finite-difference step must be positive, got {h}")
    if n_probes < 1:
        raise ContractError(f"n_probes must be >= 1, got {n_probes}")
    trainable = [p for p in _as_list(params) if p.requires_grad]
    if not trainable:
        raise ContractError("No parameter requires a gradient; nothing to probe")
    rng = rng if rng is not None else np.random.default_rng(0)

    zero_grad(trainable)
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.item()):
        raise NumericError(f"Loss is not finite during gradient check: {loss.item()}")
    backward(loss, tape)

    sizes = np.array([p.size for p in trainable])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    flat_indices = rng.choice(total, size=min(n_probes, total), replace=False)

    probes: List[Tuple[Tensor, int]] = []
    for flat in sorted(int(i) for i in flat_indices):
        owner = int(np.searchsorted(offsets, flat, side="right")) - 1
        probes.append((trainable[owner], flat - int(offsets[owner])))

    worst = 0.0
    for param, index in probes:
        assert param.grad is not None
        analytic = float(param.grad.reshape(-1)[index])
        view = param.data.reshape(-1)
        original = float(view[index])
        view[index] = original + h
        plus = _evaluate(loss_fn)
        view[index] = original - h
        minus = _evaluate(loss_fn)
        view[index] = original
        numeric = (plus - minus) / (2.0 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
