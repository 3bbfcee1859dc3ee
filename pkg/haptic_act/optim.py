"""Adam optimizer over named parameter tensors."""

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from haptic_act.autograd import Tensor, zero_grad
from haptic_act.errors import ContractError, DimensionError


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], lr: float = 1e-3, **hyper: float) -> "AdamState":
        """Create zeroed moments shaped like each parameter."""
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            lr=lr,
            **hyper,
        )


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """
    Apply one bias-corrected Adam update in place.

    A parameter whose gradient is exactly zero this step keeps its value; its
    moments still decay. Every other parameter gets the standard update
    ``p -= lr * m_hat / (sqrt(v_hat) + eps)``.

    Args:
        params: Parameters by name; updated in place.
        grads: Gradients by name, shaped like the parameters.
        state: Optimizer state; moments are created lazily for new names.

    Returns:
        The same state with ``step`` incremented.

    Raises:
        DimensionError: If a gradient or moment does not match its parameter.
        ContractError: If a gradient is missing for a parameter.
    """
    if state.step < 0:
        raise ContractError(f"Adam step counter must be non-negative, got {state.step}")
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t

    for name, param in params.items():
        if name not in grads:
            raise ContractError(f"No gradient supplied for parameter '{name}'")
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.data.shape:
            raise DimensionError(f"Gradient for '{name}' has shape {grad.shape}, parameter has {param.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        if m.shape != param.data.shape or v.shape != param.data.shape:
            raise DimensionError(f"Adam moments for '{name}' do not match parameter shape {param.data.shape}")

        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        if not grad.any():
            continue
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

    return state


class Adam:
    """Convenience wrapper binding a parameter set to an AdamState."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = {name: p for name, p in params.items() if p.requires_grad}
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        """Update every parameter from its accumulated ``grad``."""
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        zero_grad(self.params.values())
