"""Composite layers built from the autograd primitives."""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from haptic_act import autograd as ag
from haptic_act.autograd import Tensor
from haptic_act.errors import ConfigurationError, DimensionError

MASK_VALUE = -1e9


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Apply ``x @ weight + bias`` to the last axis of x.

    Args:
        x: Tensor of shape [..., d_in].
        weight: Tensor of shape [d_in, d_out].
        bias: Optional tensor of shape [d_out].

    Returns:
        Tensor of shape [..., d_out].
    """
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    lead = x.shape[:-1]
    flat = x if x.data.ndim == 2 else ag.reshape(x, (-1, x.shape[-1]))
    out = ag.matmul(flat, weight)
    if bias is not None:
        out = ag.add_bias(out, bias)
    if x.data.ndim != 2:
        out = ag.reshape(out, lead + (weight.shape[1],))
    return out


@dataclass
class AttentionWeights:
    """Projection weights of one multi-head attention block.

    Keys carry no bias: a key bias shifts every score of a query by the same
    amount, so softmax ignores it and its gradient is identically zero.
    """

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor


def _split_heads(x: Tensor, batch: int, tokens: int, num_heads: int) -> Tensor:
    head_dim = x.shape[-1] // num_heads
    x = ag.reshape(x, (batch, tokens, num_heads, head_dim))
    x = ag.transpose(x, (0, 2, 1, 3))
    return ag.reshape(x, (batch * num_heads, tokens, head_dim))


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    weights: AttentionWeights,
    num_heads: int,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Scaled dot-product attention over several heads.

    Inputs are token matrices [N, d] or batches of them [B, N, d]. Each head
    attends with scale 1/sqrt(d_head); head outputs are concatenated and
    passed through the output projection.

    Args:
        query: Query tokens [.., Nq, d].
        key: Key tokens [.., Nk, d].
        value: Value tokens [.., Nk, d]; must have as many tokens as ``key``.
        weights: Projection weights.
        num_heads: Number of heads; must divide d.
        mask: Optional boolean [Nq, Nk] array; True marks pairs that may not attend.

    Returns:
        Tensor with the shape of ``query``.

    Raises:
        ConfigurationError: If d is not divisible by num_heads.
        DimensionError: If token counts or widths disagree.
    """
    d_model = query.shape[-1]
    if num_heads < 1 or d_model % num_heads != 0:
        raise ConfigurationError(f"Model dimension {d_model} is not divisible by num_heads={num_heads}")
    if key.shape != value.shape or key.shape[-1] != d_model or key.data.ndim != query.data.ndim:
        raise DimensionError(f"attention: incompatible query {query.shape}, key {key.shape}, value {value.shape}")

    batched = query.data.ndim == 3
    if not batched:
        query = ag.reshape(query, (1,) + query.shape)
        key = ag.reshape(key, (1,) + key.shape)
        value = ag.reshape(value, (1,) + value.shape)
    batch, n_query, _ = query.shape
    n_key = key.shape[1]
    if key.shape[0] != batch:
        raise DimensionError(f"attention: batch mismatch {query.shape} vs {key.shape}")
    head_dim = d_model // num_heads

    q = _split_heads(linear(query, weights.w_q, weights.b_q), batch, n_query, num_heads)
    k = _split_heads(linear(key, weights.w_k), batch, n_key, num_heads)
    v = _split_heads(linear(value, weights.w_v, weights.b_v), batch, n_key, num_heads)

    scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(head_dim))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n_query, n_key):
            raise DimensionError(f"attention: mask {mask.shape} does not match scores ({n_query}, {n_key})")
        bias = np.broadcast_to(np.where(mask, MASK_VALUE, 0.0), scores.shape)
        scores = ag.add(scores, ag.constant(bias))
    attn = ag.softmax(scores, axis=-1)

    context = ag.matmul(attn, v)
    context = ag.reshape(context, (batch, num_heads, n_query, head_dim))
    context = ag.transpose(context, (0, 2, 1, 3))
    context = ag.reshape(context, (batch, n_query, d_model))
    out = linear(context, weights.w_o, weights.b_o)
    return out if batched else ag.reshape(out, (n_query, d_model))
