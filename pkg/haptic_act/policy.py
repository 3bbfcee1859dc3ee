"""Chunking CVAE-transformer policy with an optional haptic token.

Token layout of one observation: [latent slot, proprio, force (haptic models
only), 16 image patches]. Each token is a linear projection of its input plus a
learned positional embedding. The latent slot is the bias of the latent
projection until :func:`forward` adds the projection of z.
"""

import hashlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from haptic_act import autograd as ag
from haptic_act.autograd import Tensor
from haptic_act.config import PolicyConfig
from haptic_act.env import IMAGE_SIZE, Observation
from haptic_act.errors import DimensionError
from haptic_act.functional import AttentionWeights, linear, multi_head_attention

PATCH = 8
N_PATCHES = (IMAGE_SIZE // PATCH) ** 2
PATCH_DIM = PATCH * PATCH
ACTION_DIM = 4
PROPRIO_DIM = 4
FORCE_DIM = 3
LOGVAR_CLAMP = 10.0

_ATTENTION_FIELDS = ("w_q", "b_q", "w_k", "w_v", "b_v", "w_o", "b_o")


def n_tokens(cfg: PolicyConfig) -> int:
    """Tokens per observation: latent slot, proprio, optional force, image patches."""
    return 2 + int(cfg.haptic_enabled) + N_PATCHES


def parameter_shapes(cfg: PolicyConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every parameter name and shape, in checkpoint order."""
    d, f, z, k = cfg.d_model, cfg.ffn_dim, cfg.z_dim, cfg.chunk_k
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()

    def attention(prefix: str) -> None:
        for name in _ATTENTION_FIELDS:
            shapes[f"{prefix}.{name}"] = (d, d) if name.startswith("w") else (d,)

    def norm(prefix: str) -> None:
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def ffn(prefix: str) -> None:
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    shapes["patch_embed.w"] = (PATCH_DIM, d)
    shapes["patch_embed.b"] = (d,)
    shapes["proprio_embed.w"] = (PROPRIO_DIM, d)
    shapes["proprio_embed.b"] = (d,)
    if cfg.haptic_enabled:
        shapes["force_embed.w"] = (FORCE_DIM, d)
        shapes["force_embed.b"] = (d,)
    shapes["latent_embed.w"] = (z, d)
    shapes["latent_embed.b"] = (d,)
    shapes["pos_embed"] = (n_tokens(cfg), d)
    for i in range(cfg.n_encoder_layers):
        attention(f"encoder.{i}.attn")
        norm(f"encoder.{i}.ln1")
        ffn(f"encoder.{i}.ffn")
        norm(f"encoder.{i}.ln2")
    for i in range(cfg.n_decoder_layers):
        attention(f"decoder.{i}.self_attn")
        norm(f"decoder.{i}.ln1")
        attention(f"decoder.{i}.cross_attn")
        norm(f"decoder.{i}.ln2")
        ffn(f"decoder.{i}.ffn")
        norm(f"decoder.{i}.ln3")
    shapes["queries"] = (k, d)
    shapes["action_head.w"] = (d, ACTION_DIM)
    shapes["action_head.b"] = (ACTION_DIM,)
    shapes["cvae.w1"] = (k * ACTION_DIM + PROPRIO_DIM, d)
    shapes["cvae.b1"] = (d,)
    shapes["cvae.w2"] = (d, 2 * z)
    shapes["cvae.b2"] = (2 * z,)
    return shapes


def parameter_count(cfg: PolicyConfig) -> int:
    """Closed-form number of learnable scalars."""
    d, f, z, k = cfg.d_model, cfg.ffn_dim, cfg.z_dim, cfg.chunk_k
    attention = 4 * d * d + 3 * d
    norm = 2 * d
    ffn = 2 * d * f + f + d
    embeddings = (PATCH_DIM + 1) * d + (PROPRIO_DIM + 1) * d + (z + 1) * d
    if cfg.haptic_enabled:
        embeddings += (FORCE_DIM + 1) * d
    return (
        embeddings
        + n_tokens(cfg) * d
        + cfg.n_encoder_layers * (attention + ffn + 2 * norm)
        + cfg.n_decoder_layers * (2 * attention + ffn + 3 * norm)
        + k * d
        + d * ACTION_DIM + ACTION_DIM
        + (k * ACTION_DIM + PROPRIO_DIM) * d + d
        + d * 2 * z + 2 * z
    )


class ModelParams:
    """All learnable tensors of one policy, keyed by name in checkpoint order."""

    def __init__(self, cfg: PolicyConfig, tensors: "OrderedDict[str, Tensor]"):
        expected = parameter_shapes(cfg)
        if list(tensors) != list(expected):
            raise DimensionError("Parameter names do not match the policy configuration")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise DimensionError(f"Parameter '{name}' has shape {tensors[name].shape}, expected {shape}")
        self.cfg = cfg
        self.tensors = tensors

    @classmethod
    def initialize(cls, cfg: PolicyConfig, rng: np.random.Generator) -> "ModelParams":
        """
        Draw fresh parameters.

        Weight matrices (and the positional and query embeddings) are uniform in
        [-1/sqrt(fan_in), 1/sqrt(fan_in)] with fan_in the first axis (d_model for
        the embeddings). Layer-norm gains start at one, all biases at zero.
        """
        tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape in parameter_shapes(cfg).items():
            if name.endswith(".gain"):
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                fan_in = cfg.d_model if name in ("pos_embed", "queries") else shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name, copy=False)
        return cls(cfg, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self.tensors.items())

    def values(self) -> List[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def all_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(t.data))) for t in self.tensors.values())

    def checksum(self) -> str:
        """SHA-256 over every tensor's little-endian float64 bytes, in order."""
        digest = hashlib.sha256()
        for name, tensor in self.tensors.items():
            digest.update(name.encode())
            digest.update(tensor.data.astype("<f8").tobytes())
        return digest.hexdigest()

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.cfg,
            OrderedDict((n, Tensor(t.data, requires_grad=True, name=n)) for n, t in self.tensors.items()),
        )

    def attention(self, prefix: str) -> AttentionWeights:
        return AttentionWeights(**{name: self.tensors[f"{prefix}.{name}"] for name in _ATTENTION_FIELDS})


@dataclass
class LossTerms:
    """Total objective and its two components (all scalar tensors)."""

    total: Tensor
    reconstruction: Tensor
    kl: Tensor


def _as_batch(array: np.ndarray, tail: Tuple[int, ...], label: str) -> np.ndarray:
    data = np.asarray(array, dtype=np.float64)
    if data.shape == tail:
        data = data[None]
    if data.shape[1:] != tail:
        raise DimensionError(f"{label} must have trailing shape {tail}, got {data.shape}")
    return data


def _broadcast_rows(param: Tensor, batch: int) -> Tensor:
    """Repeat a parameter over a new leading batch axis."""
    flat = ag.reshape(param, (param.size,))
    tiled = ag.add_bias(ag.constant(np.zeros((batch, param.size))), flat)
    return ag.reshape(tiled, (batch,) + param.shape)


def image_patches(images: np.ndarray) -> np.ndarray:
    """Split [B, 32, 32] images into [B, 16, 64] row-major 8x8 patches."""
    batch = images.shape[0]
    grid = IMAGE_SIZE // PATCH
    return (
        images.reshape(batch, grid, PATCH, grid, PATCH)
        .transpose(0, 1, 3, 2, 4)
        .reshape(batch, N_PATCHES, PATCH_DIM)
    )


def tokenize_arrays(
    params: ModelParams, images: np.ndarray, forces: np.ndarray, proprios: np.ndarray
) -> Tensor:
    """
    Batched tokenization.

    Args:
        params: Model parameters (their config decides whether force is used).
        images: [B, 32, 32] images.
        forces: [B, 3] force readings; ignored when haptics are disabled.
        proprios: [B, 4] gripper poses.

    Returns:
        Token tensor [B, n_tokens, d_model].
    """
    cfg = params.cfg
    images = _as_batch(images, (IMAGE_SIZE, IMAGE_SIZE), "image")
    proprios = _as_batch(proprios, (PROPRIO_DIM,), "proprio")
    batch = images.shape[0]
    if proprios.shape[0] != batch:
        raise DimensionError(f"Batch sizes differ: {batch} images, {proprios.shape[0]} proprio rows")
    d = cfg.d_model

    parts = [
        ag.reshape(_broadcast_rows(params["latent_embed.b"], batch), (batch, 1, d)),
        linear(ag.constant(proprios[:, None, :]), params["proprio_embed.w"], params["proprio_embed.b"]),
    ]
    if cfg.haptic_enabled:
        forces = _as_batch(forces, (FORCE_DIM,), "force")
        if forces.shape[0] != batch:
            raise DimensionError(f"Batch sizes differ: {batch} images, {forces.shape[0]} force rows")
        parts.append(linear(ag.constant(forces[:, None, :]), params["force_embed.w"], params["force_embed.b"]))
    parts.append(linear(ag.constant(image_patches(images)), params["patch_embed.w"], params["patch_embed.b"]))

    tokens = ag.concat(parts, axis=1)
    count = n_tokens(cfg)
    flat = ag.add_bias(ag.reshape(tokens, (batch, count * d)), ag.reshape(params["pos_embed"], (count * d,)))
    return ag.reshape(flat, (batch, count, d))


def tokenize(obs: Observation, cfg: PolicyConfig, params: ModelParams) -> Tensor:
    """
    Tokens of a single observation, shape [n_tokens, d_model].

    Raises:
        DimensionError: If the observation or parameters do not match cfg.
    """
    if params.cfg != cfg:
        raise DimensionError("Parameters were built for a different policy configuration")
    tokens = tokenize_arrays(params, obs.image[None], obs.force[None], obs.proprio[None])
    return ag.reshape(tokens, tokens.shape[1:])


def cvae_encode_batch(params: ModelParams, chunks: np.ndarray, proprios: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Posterior parameters [B, z] for [B, k, 4] chunks and [B, 4] poses."""
    cfg = params.cfg
    chunks = _as_batch(chunks, (cfg.chunk_k, ACTION_DIM), "chunk")
    proprios = _as_batch(proprios, (PROPRIO_DIM,), "proprio")
    batch = chunks.shape[0]
    inputs = np.concatenate([chunks.reshape(batch, -1), proprios], axis=1)
    hidden = ag.gelu(linear(ag.constant(inputs), params["cvae.w1"], params["cvae.b1"]))
    stats = linear(hidden, params["cvae.w2"], params["cvae.b2"])
    z = cfg.z_dim
    mu = ag.slice_axis(stats, 1, 0, z)
    logvar = ag.clamp(ag.slice_axis(stats, 1, z, 2 * z), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mu, logvar


def cvae_encode(chunk: np.ndarray, proprio: np.ndarray, params: ModelParams) -> Tuple[Tensor, Tensor]:
    """Posterior (mu, logvar), each a z_dim vector, for one demonstrated chunk."""
    mu, logvar = cvae_encode_batch(params, chunk, proprio)
    z = params.cfg.z_dim
    return ag.reshape(mu, (z,)), ag.reshape(logvar, (z,))


def sample_latent(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw z = mu + exp(0.5 * logvar) * eps with eps ~ N(0, I)."""
    eps = ag.constant(rng.standard_normal(mu.shape))
    std = ag.exp(ag.scale(ag.clamp(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP), 0.5))
    return ag.add(mu, ag.mul(std, eps))


def _feed_forward(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    hidden = ag.gelu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _norm(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ag.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def forward(tokens: Tensor, z: Tensor, params: ModelParams) -> Tensor:
    """
    Predict action chunks.

    Args:
        tokens: [n_tokens, d] or [B, n_tokens, d] from tokenize.
        z: Latent [z_dim] or [B, z_dim].
        params: Model parameters.

    Returns:
        Chunk [k, 4] (or [B, k, 4] for batched input).

    Raises:
        DimensionError: If the token count or latent width is wrong.
    """
    cfg = params.cfg
    single = tokens.data.ndim == 2
    if single:
        tokens = ag.reshape(tokens, (1,) + tokens.shape)
        z = ag.reshape(z, (1,) + z.shape)
    batch, count, d = tokens.shape
    if count != n_tokens(cfg) or d != cfg.d_model:
        raise DimensionError(f"Expected {n_tokens(cfg)} tokens of width {cfg.d_model}, got {tokens.shape[1:]}")
    if z.shape != (batch, cfg.z_dim):
        raise DimensionError(f"Latent must be [{batch}, {cfg.z_dim}], got {z.shape}")

    latent = ag.reshape(ag.matmul(z, params["latent_embed.w"]), (batch, 1, d))
    latent_slot = ag.concat([latent, ag.constant(np.zeros((batch, count - 1, d)))], axis=1)
    x = ag.add(tokens, latent_slot)

    for i in range(cfg.n_encoder_layers):
        prefix = f"encoder.{i}"
        attended = multi_head_attention(x, x, x, params.attention(f"{prefix}.attn"), cfg.n_heads)
        x = _norm(ag.add(x, attended), params, f"{prefix}.ln1")
        x = _norm(ag.add(x, _feed_forward(x, params, f"{prefix}.ffn")), params, f"{prefix}.ln2")

    y = _broadcast_rows(params["queries"], batch)
    for i in range(cfg.n_decoder_layers):
        prefix = f"decoder.{i}"
        attended = multi_head_attention(y, y, y, params.attention(f"{prefix}.self_attn"), cfg.n_heads)
        y = _norm(ag.add(y, attended), params, f"{prefix}.ln1")
        attended = multi_head_attention(y, x, x, params.attention(f"{prefix}.cross_attn"), cfg.n_heads)
        y = _norm(ag.add(y, attended), params, f"{prefix}.ln2")
        y = _norm(ag.add(y, _feed_forward(y, params, f"{prefix}.ffn")), params, f"{prefix}.ln3")

    chunk = linear(y, params["action_head.w"], params["action_head.b"])
    return ag.reshape(chunk, (cfg.chunk_k, ACTION_DIM)) if single else chunk


def loss(pred_chunk: Tensor, target_chunk: Tensor, mu: Tensor, logvar: Tensor, beta: float) -> LossTerms:
    """L1 reconstruction plus beta-weighted KL to the standard normal."""
    reconstruction = ag.l1_loss(pred_chunk, target_chunk)
    kl = ag.kl_gaussian(mu, logvar)
    return LossTerms(total=ag.add(reconstruction, ag.scale(kl, beta)), reconstruction=reconstruction, kl=kl)


def predict(obs: Observation, params: ModelParams, cfg: PolicyConfig) -> np.ndarray:
    """
    Inference with the prior mean z = 0; the chunk is clamped to [0, 1].

    Returns:
        Array [k, 4].
    """
    tokens = tokenize(obs, cfg, params)
    chunk = forward(tokens, ag.constant(np.zeros(cfg.z_dim)), params)
    return np.clip(chunk.data, 0.0, 1.0)


def parameter_groups(params: ModelParams) -> Dict[str, int]:
    """Scalar counts per top-level block, for logging."""
    groups: Dict[str, int] = {}
    for name, tensor in params.items():
        block = name.split(".")[0]
        groups[block] = groups.get(block, 0) + tensor.size
    return groups


def describe(params: ModelParams, extra: Optional[str] = None) -> str:
    parts = [f"params={params.count()}"]
    parts.extend(f"{block}={count}" for block, count in parameter_groups(params).items())
    if extra:
        parts.append(extra)
    return " ".join(parts)
