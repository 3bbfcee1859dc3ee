"""Demonstration episodes: generation with the scripted expert, dataset assembly and persistence."""

import dataclasses
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt

from haptic_act.config import N_TUBES, EnvConfig
from haptic_act.controller import rollout
from haptic_act.env import IMAGE_SIZE, Observation
from haptic_act.errors import ConfigurationError, DatasetFormatError, GenerationError, OutputError, TruncatedFileError
from haptic_act.expert import ExpertChunkPolicy
from haptic_act.logger import get_sim_logger
from haptic_act.manifest import DatasetManifest

MAX_GENERATION_ATTEMPTS = 20

EPISODE_MAGIC = b"HIA1"
HEADER = struct.Struct("<4sIII")
FLOAT32 = np.dtype("<f4")
FLOATS_PER_STEP = IMAGE_SIZE * IMAGE_SIZE + 3 + 4 + 4

FLAG_RECOVERY = 1
FLAG_PICK = 2
FLAG_DELIVERY = 4
FLAG_FORCED_SLIP = 8


class ExpertTimeout(Exception):
    """The expert did not deliver within the step budget; the episode is discarded."""


@dataclass(eq=False)
class Episode:
    """One recorded demonstration: observation t is what the expert saw before executing action t."""

    config: EnvConfig
    stream: int
    target_tube: int
    images: np.ndarray
    forces: np.ndarray
    proprios: np.ndarray
    actions: np.ndarray
    is_recovery: bool = False
    pick_success: bool = False
    delivery_success: bool = False
    forced_slip: bool = False
    grasp_attempts: int = 0
    phases: str = ""

    def __post_init__(self) -> None:
        length = len(self.actions)
        shapes = {
            "images": (self.images.shape, (length, IMAGE_SIZE, IMAGE_SIZE)),
            "forces": (self.forces.shape, (length, 3)),
            "proprios": (self.proprios.shape, (length, 4)),
            "actions": (self.actions.shape, (length, 4)),
        }
        for name, (actual, expected) in shapes.items():
            if actual != expected:
                raise DatasetFormatError(f"Episode {name} has shape {actual}, expected {expected}")
        if self.phases and len(self.phases) != length:
            raise DatasetFormatError(f"Phase trace has {len(self.phases)} entries for {length} steps")

    def __len__(self) -> int:
        return len(self.actions)

    def observation(self, t: int) -> Observation:
        return Observation(image=self.images[t], force=self.forces[t], proprio=self.proprios[t])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.config == other.config
            and self.stream == other.stream
            and self.target_tube == other.target_tube
            and self.is_recovery == other.is_recovery
            and self.pick_success == other.pick_success
            and self.delivery_success == other.delivery_success
            and self.forced_slip == other.forced_slip
            and self.grasp_attempts == other.grasp_attempts
            and self.phases == other.phases
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("images", "forces", "proprios", "actions")
            )
        )


@dataclass
class Dataset:
    """Ordered episodes plus the seed they were generated from."""

    episodes: List[Episode]
    base_seed: int = 0
    env_config: EnvConfig = field(default_factory=EnvConfig)

    @property
    def n_success(self) -> int:
        return sum(1 for e in self.episodes if not e.is_recovery)

    @property
    def n_recovery(self) -> int:
        return sum(1 for e in self.episodes if e.is_recovery)

    @property
    def recovery_fraction(self) -> float:
        return self.n_recovery / len(self.episodes) if self.episodes else 0.0

    @property
    def total_steps(self) -> int:
        return sum(len(e) for e in self.episodes)

    def without_recovery(self) -> "Dataset":
        """The ablation dataset: the same success episodes, no recovery episodes."""
        return Dataset([e for e in self.episodes if not e.is_recovery], self.base_seed, self.env_config)

    def __len__(self) -> int:
        return len(self.episodes)


def _roll_expert(config: EnvConfig, force_slip: bool, stream: int) -> Episode:
    expert = ExpertChunkPolicy()
    outcome = rollout(config, expert, m=0.0, stream=stream, force_slip_first_lift=force_slip, record_steps=True)
    result = outcome.result
    if not result.delivery_success or (force_slip and result.grasp_attempts < 2):
        get_sim_logger().info(
            f"episode_discarded rng_seed={config.rng_seed} stream={stream} steps={result.steps_used} "
            f"attempts={result.grasp_attempts} forced_slip={force_slip}"
        )
        raise ExpertTimeout(f"expert did not deliver within {config.max_steps} steps (stream {stream})")
    assert outcome.final_state is not None
    return Episode(
        config=config,
        stream=stream,
        target_tube=outcome.final_state.target_tube,
        images=np.stack(outcome.images).astype(FLOAT32),
        forces=np.stack(outcome.forces).astype(FLOAT32),
        proprios=np.stack(outcome.proprios).astype(FLOAT32),
        actions=np.stack(outcome.actions).astype(FLOAT32),
        is_recovery=force_slip,
        pick_success=result.pick_success,
        delivery_success=result.delivery_success,
        forced_slip=force_slip,
        grasp_attempts=result.grasp_attempts,
        phases=expert.phase_trace(),
    )


def generate_episode(config: EnvConfig, force_slip_on_first_attempt: bool = False) -> Episode:
    """
    Roll the scripted expert until it produces a delivered episode.

    Attempt n uses random stream n of ``config.rng_seed``, so every retry is a
    fresh draw and the result is still a pure function of the arguments.

    Args:
        config: Environment settings for this episode.
        force_slip_on_first_attempt: Force the first lift to slip, producing a recovery episode.

    Returns:
        The delivered episode.

    Raises:
        GenerationError: After MAX_GENERATION_ATTEMPTS consecutive discards.
    """
    episode: Optional[Episode] = None
    stream = 0
    try:
        for attempt in Retrying(
            stop=stop_after_attempt(MAX_GENERATION_ATTEMPTS),
            retry=retry_if_exception_type(ExpertTimeout),
        ):
            with attempt:
                stream = attempt.retry_state.attempt_number - 1
                episode = _roll_expert(config, force_slip_on_first_attempt, stream)
    except RetryError as e:
        raise GenerationError(
            f"Expert failed {MAX_GENERATION_ATTEMPTS} consecutive times for rng_seed={config.rng_seed}"
        ) from e
    assert episode is not None
    if stream:
        get_sim_logger().info(f"episode_regenerated rng_seed={config.rng_seed} discarded={stream}")
    return episode


def episode_config(template: EnvConfig, base_seed: int, index: int, target_tube: int) -> EnvConfig:
    """Per-episode settings: seed base_seed XOR index, fixed tube, no random slips."""
    return dataclasses.replace(template, rng_seed=base_seed ^ index, target_tube=target_tube, p_slip=0.0)


def build_dataset(
    n_success: int,
    n_recovery: int,
    base_seed: int,
    env_config: Optional[EnvConfig] = None,
    workers: int = 1,
) -> Dataset:
    """
    Collect success episodes followed by recovery episodes.

    Target tubes cycle 0, 1, 2, 3 over the success episodes (and separately
    over the recovery episodes). Episode i uses rng seed ``base_seed ^ i``.

    Args:
        n_success: Episodes without a forced slip.
        n_recovery: Episodes whose first lift slips.
        base_seed: Dataset seed.
        env_config: Template environment settings (default EnvConfig()).
        workers: Threads used to generate episodes; output order is unaffected.

    Returns:
        The dataset, ordered by episode index.
    """
    if n_success < 0 or n_recovery < 0 or n_success + n_recovery < 1:
        raise ConfigurationError(f"Invalid episode counts {n_success}/{n_recovery}")
    template = env_config or EnvConfig()
    jobs = [(episode_config(template, base_seed, i, i % N_TUBES), False) for i in range(n_success)]
    jobs += [
        (episode_config(template, base_seed, n_success + j, j % N_TUBES), True) for j in range(n_recovery)
    ]
    logger = get_sim_logger()
    logger.info(f"dataset_build_started n_success={n_success} n_recovery={n_recovery} base_seed={base_seed}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(lambda job: generate_episode(*job), jobs))
    else:
        episodes = [generate_episode(config, forced) for config, forced in jobs]

    dataset = Dataset(episodes, base_seed, template)
    logger.info(
        f"dataset_build_completed episodes={len(dataset)} steps={dataset.total_steps} "
        f"recovery_fraction={dataset.recovery_fraction:.2f}"
    )
    return dataset


def encode_episode(episode: Episode) -> bytes:
    """Binary layout: header (magic, length, flag bits, target tube) then float32 arrays."""
    flags = (
        FLAG_RECOVERY * episode.is_recovery
        | FLAG_PICK * episode.pick_success
        | FLAG_DELIVERY * episode.delivery_success
        | FLAG_FORCED_SLIP * episode.forced_slip
    )
    parts = [HEADER.pack(EPISODE_MAGIC, len(episode), int(flags), episode.target_tube)]
    for array in (episode.images, episode.forces, episode.proprios, episode.actions):
        parts.append(np.ascontiguousarray(array, dtype=FLOAT32).tobytes())
    return b"".join(parts)


def _decode_episode(payload: bytes, entry: Dict[str, Any], path: Path, manifest: DatasetManifest) -> Episode:
    # Expected size comes from the manifest, never from the header.
    expected = HEADER.size + int(entry["length"]) * FLOATS_PER_STEP * FLOAT32.itemsize
    if len(payload) < expected:
        raise TruncatedFileError(f"{path} is truncated: {len(payload)} bytes, manifest records {expected}")
    manifest.verify(entry, payload)
    magic, length, flags, target_tube = HEADER.unpack_from(payload)
    if magic != EPISODE_MAGIC:
        raise DatasetFormatError(f"{path} is not an episode file (magic {magic!r})")
    if length != int(entry["length"]):
        raise DatasetFormatError(f"{path} header holds {length} steps, manifest records {entry['length']}")
    if len(payload) != expected:
        raise DatasetFormatError(f"{path} has {len(payload) - expected} trailing bytes")

    arrays = []
    offset = HEADER.size
    for shape in ((length, IMAGE_SIZE, IMAGE_SIZE), (length, 3), (length, 4), (length, 4)):
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(payload, dtype=FLOAT32, count=count, offset=offset).reshape(shape).copy())
        offset += count * FLOAT32.itemsize

    return Episode(
        config=EnvConfig.from_dict(entry["config"]),
        stream=int(entry["stream"]),
        target_tube=int(target_tube),
        images=arrays[0],
        forces=arrays[1],
        proprios=arrays[2],
        actions=arrays[3],
        is_recovery=bool(flags & FLAG_RECOVERY),
        pick_success=bool(flags & FLAG_PICK),
        delivery_success=bool(flags & FLAG_DELIVERY),
        forced_slip=bool(flags & FLAG_FORCED_SLIP),
        grasp_attempts=int(entry["grasp_attempts"]),
        phases=str(entry.get("phases", "")),
    )


def save_dataset(dataset: Dataset, path: Path) -> None:
    """
    Write episode files and the manifest. Saving the same dataset twice gives identical bytes.

    Raises:
        OutputError: If the directory or a file cannot be written.
    """
    path = Path(path)
    manifest = DatasetManifest(path)
    data = manifest.create(dataset.base_seed, dataset.n_success, dataset.n_recovery)
    data["env_config"] = dataset.env_config.to_dict()
    try:
        path.mkdir(parents=True, exist_ok=True)
        for index, episode in enumerate(dataset.episodes):
            payload = encode_episode(episode)
            name = f"episode_{index:05d}.bin"
            (path / name).write_bytes(payload)
            manifest.add_episode(
                data,
                name,
                payload,
                {
                    "index": index,
                    "rng_seed": episode.config.rng_seed,
                    "stream": episode.stream,
                    "is_recovery": episode.is_recovery,
                    "forced_slip": episode.forced_slip,
                    "grasp_attempts": episode.grasp_attempts,
                    "target_tube": episode.target_tube,
                    "length": len(episode),
                    "phases": episode.phases,
                    "config": episode.config.to_dict(),
                },
            )
        manifest.write(data)
    except OSError as e:
        raise OutputError(f"Failed to write dataset to {path}: {e}") from e
    get_sim_logger().info(f"dataset_saved path={path} episodes={len(dataset)}")


def load_dataset(path: Path) -> Dataset:
    """
    Read a dataset written by save_dataset, validating every checksum.

    Raises:
        FormatVersionError: Unsupported manifest version.
        ChecksumError: An episode file does not match its recorded checksum.
        TruncatedFileError: An episode file ends early.
        DatasetFormatError: Any other structural problem.
    """
    path = Path(path)
    manifest = DatasetManifest(path)
    data = manifest.read()
    episodes = []
    for entry in data["episodes"]:
        file_path = path / entry["file"]
        try:
            payload = file_path.read_bytes()
        except OSError as e:
            raise DatasetFormatError(f"Cannot read episode file {file_path}: {e}") from e
        episode = _decode_episode(payload, entry, file_path, manifest)
        if episode.is_recovery != bool(entry["is_recovery"]):
            raise DatasetFormatError(f"{file_path} disagrees with the manifest about its recovery flag")
        episodes.append(episode)
    template = EnvConfig.from_dict(data["env_config"]) if "env_config" in data else EnvConfig()
    return Dataset(episodes, int(data["base_seed"]), template)
