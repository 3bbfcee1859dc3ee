"""Model checkpoints: a bit-exact binary snapshot of a policy's config and parameters."""

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict

import numpy as np

from haptic_act.autograd import Tensor
from haptic_act.config import PolicyConfig
from haptic_act.errors import (
    ChecksumError,
    CheckpointError,
    ConfigurationError,
    FormatVersionError,
    OutputError,
    TruncatedFileError,
)
from haptic_act.logger import get_experiment_logger
from haptic_act.policy import ModelParams, parameter_shapes

if TYPE_CHECKING:
    from haptic_act.dataset import Dataset

CHECKPOINT_MAGIC = b"HIAM"
CHECKPOINT_VERSION = 2
HEADER = struct.Struct("<4sII")
COUNT = struct.Struct("<I")
FLOAT64 = np.dtype("<f8")
DIGEST_SIZE = hashlib.sha256().digest_size


@dataclass(frozen=True)
class TrainingProvenance:
    """The demonstration set a checkpoint was trained on."""

    dataset_seed: int = 0
    n_success: int = 0
    n_recovery: int = 0

    @classmethod
    def from_dataset(cls, dataset: "Dataset") -> "TrainingProvenance":
        return cls(dataset.base_seed, dataset.n_success, dataset.n_recovery)

    @property
    def recovery_samples(self) -> bool:
        return self.n_recovery > 0

    @property
    def recovery_fraction(self) -> float:
        total = self.n_success + self.n_recovery
        return self.n_recovery / total if total else 0.0

    def to_dict(self) -> Dict[str, int]:
        return {"dataset_seed": self.dataset_seed, "n_success": self.n_success, "n_recovery": self.n_recovery}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainingProvenance":
        return cls(int(data["dataset_seed"]), int(data["n_success"]), int(data["n_recovery"]))


@dataclass(frozen=True)
class Checkpoint:
    params: ModelParams
    provenance: TrainingProvenance


def encode_checkpoint(params: ModelParams, provenance: TrainingProvenance = TrainingProvenance()) -> bytes:
    """
    Serialize parameters in their fixed order.

    Layout: header (magic, version, config length), config JSON holding the
    policy config and the training provenance, then per tensor its name,
    rank, dims and float64 data, then a SHA-256 digest of everything before it.
    """
    document = {"policy": params.cfg.to_dict(), "training": provenance.to_dict()}
    config_json = json.dumps(document, sort_keys=True).encode()
    parts = [HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(config_json)), config_json]
    for name, tensor in params.items():
        encoded = name.encode()
        parts.append(COUNT.pack(len(encoded)))
        parts.append(encoded)
        parts.append(COUNT.pack(tensor.data.ndim))
        parts.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype=FLOAT64).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise TruncatedFileError(f"Checkpoint {self.path} ends early at byte {self.offset}")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))


def decode_checkpoint(payload: bytes, path: Path = Path("<memory>")) -> Checkpoint:
    """
    Parse checkpoint bytes into parameters and training provenance.

    Raises:
        TruncatedFileError: If the payload is shorter than its layout requires.
        ChecksumError: If the trailing digest does not match.
        FormatVersionError: If the version is unsupported.
        CheckpointError: If the magic, config or tensor list is invalid.
    """
    if len(payload) < HEADER.size + DIGEST_SIZE:
        raise TruncatedFileError(f"Checkpoint {path} is too short ({len(payload)} bytes)")
    body, digest = payload[:-DIGEST_SIZE], payload[-DIGEST_SIZE:]
    actual = hashlib.sha256(body).digest()
    if actual != digest:
        raise ChecksumError(str(path), digest.hex(), actual.hex())

    reader = _Reader(body, path)
    magic, version, config_length = reader.unpack(HEADER)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise FormatVersionError(f"Unsupported checkpoint version {version} in {path}")
    try:
        document = json.loads(reader.take(config_length))
        cfg = PolicyConfig.from_dict(document["policy"])
        provenance = TrainingProvenance.from_dict(document["training"])
    except (ValueError, TypeError, KeyError, ConfigurationError) as e:
        raise CheckpointError(f"Checkpoint {path} has an invalid config: {e}") from e

    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for expected_name, expected_shape in parameter_shapes(cfg).items():
        (name_length,) = reader.unpack(COUNT)
        name = reader.take(name_length).decode(errors="replace")
        (ndim,) = reader.unpack(COUNT)
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        if name != expected_name or shape != expected_shape:
            raise CheckpointError(
                f"Checkpoint {path} holds '{name}' {shape} where '{expected_name}' {expected_shape} is expected"
            )
        count = int(np.prod(shape))
        data = np.frombuffer(reader.take(count * FLOAT64.itemsize), dtype=FLOAT64).reshape(shape)
        tensors[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name, copy=False)
    if reader.offset != len(body):
        raise CheckpointError(f"Checkpoint {path} has {len(body) - reader.offset} trailing bytes")
    return Checkpoint(ModelParams(cfg, tensors), provenance)


def save_checkpoint(
    params: ModelParams, path: Path, provenance: TrainingProvenance = TrainingProvenance()
) -> str:
    """
    Write a checkpoint file.

    Args:
        params: Trained parameters.
        path: Destination file.
        provenance: Dataset the parameters were trained on.

    Returns:
        SHA-256 hex digest of the written file.

    Raises:
        OutputError: If the file cannot be written.
    """
    path = Path(path)
    payload = encode_checkpoint(params, provenance)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise OutputError(f"Failed to write checkpoint {path}: {e}") from e
    file_digest = hashlib.sha256(payload).hexdigest()
    get_experiment_logger().info(
        f"checkpoint_saved path={path} params={params.count()} sha256={file_digest[:12]}"
    )
    return file_digest


def read_checkpoint(path: Path) -> Checkpoint:
    """Load parameters together with the provenance recorded at save time."""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(payload, path)
