"""Mini-batch sampling and the training loop of the chunking policy."""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from haptic_act.autograd import Tape, backward, constant, zero_grad
from haptic_act.config import PolicyConfig
from haptic_act.dataset import Dataset
from haptic_act.errors import ContractError, OutputError, TrainingAbortedError
from haptic_act.logger import StageTimer, get_experiment_logger
from haptic_act.optim import AdamState, adam_step
from haptic_act.policy import (
    LossTerms,
    ModelParams,
    cvae_encode_batch,
    describe,
    forward,
    loss,
    sample_latent,
    tokenize_arrays,
)

LOG_EVERY = 100
FINAL_WINDOW = 100


@dataclass
class TrainingBatch:
    images: np.ndarray
    forces: np.ndarray
    proprios: np.ndarray
    targets: np.ndarray
    episode_index: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class TrainLog:
    """Loss trace of one training run."""

    total: List[float] = field(default_factory=list)
    reconstruction: List[float] = field(default_factory=list)
    kl: List[float] = field(default_factory=list)
    wall_clock_s: float = 0.0
    params_checksum: str = ""

    def record(self, terms: LossTerms) -> None:
        self.total.append(terms.total.item())
        self.reconstruction.append(terms.reconstruction.item())
        self.kl.append(terms.kl.item())

    @property
    def steps(self) -> int:
        return len(self.total)

    @property
    def final_reconstruction(self) -> float:
        """Mean reconstruction L1 over the last FINAL_WINDOW steps (nan if no step ran)."""
        if not self.reconstruction:
            return float("nan")
        return float(np.mean(self.reconstruction[-FINAL_WINDOW:]))

    def to_csv(self, path: Path) -> None:
        """Write step, total, reconstruction, kl rows with six decimals."""
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=["step", "total", "reconstruction", "kl"], lineterminator="\n")
                writer.writeheader()
                for step, (total, recon, kl) in enumerate(zip(self.total, self.reconstruction, self.kl), start=1):
                    writer.writerow(
                        {"step": step, "total": f"{total:.6f}", "reconstruction": f"{recon:.6f}", "kl": f"{kl:.6f}"}
                    )
        except OSError as e:
            raise OutputError(f"Failed to write train log {path}: {e}") from e


def sample_training_batch(dataset: Dataset, k: int, batch_size: int, rng: np.random.Generator) -> TrainingBatch:
    """
    Draw (episode, t) pairs uniformly over every recorded step of the dataset.

    The target chunk is actions[t : t + k]; past the end of the episode the
    final action is repeated.

    Raises:
        ContractError: If the dataset has no steps.
    """
    lengths = np.array([len(e) for e in dataset.episodes], dtype=np.int64)
    if len(lengths) == 0 or lengths.sum() == 0:
        raise ContractError("Cannot sample a training batch from an empty dataset")
    if np.any(lengths < 1):
        raise ContractError("Every episode needs at least one step")
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    flat = rng.integers(0, int(offsets[-1]), size=batch_size)
    episode_index = np.searchsorted(offsets, flat, side="right") - 1
    t = flat - offsets[episode_index]

    images, forces, proprios, targets = [], [], [], []
    for e, step in zip(episode_index, t):
        episode = dataset.episodes[int(e)]
        rows = np.minimum(np.arange(int(step), int(step) + k), len(episode) - 1)
        images.append(episode.images[step])
        forces.append(episode.forces[step])
        proprios.append(episode.proprios[step])
        targets.append(episode.actions[rows])
    return TrainingBatch(
        images=np.stack(images).astype(np.float64),
        forces=np.stack(forces).astype(np.float64),
        proprios=np.stack(proprios).astype(np.float64),
        targets=np.stack(targets).astype(np.float64),
        episode_index=episode_index,
        t=t,
    )


def batch_loss(params: ModelParams, batch: TrainingBatch, rng: np.random.Generator) -> LossTerms:
    """CVAE objective of one batch against its recorded action chunks, with a sampled latent."""
    tokens = tokenize_arrays(params, batch.images, batch.forces, batch.proprios)
    mu, logvar = cvae_encode_batch(params, batch.targets, batch.proprios)
    z = sample_latent(mu, logvar, rng)
    pred = forward(tokens, z, params)
    return loss(pred, constant(batch.targets), mu, logvar, params.cfg.beta_kl)


def train(
    dataset: Dataset,
    cfg: PolicyConfig,
    log_every: int = LOG_EVERY,
    condition: Optional[str] = None,
) -> Tuple[ModelParams, TrainLog]:
    """
    Fit the policy with Adam on the CVAE objective.

    Initialization, batch sampling and latent noise use three independent
    streams spawned from ``cfg.rng_seed``, so a run is a pure function of
    (dataset, cfg).

    Args:
        dataset: Demonstrations.
        cfg: Architecture and optimization settings.
        log_every: Log a loss line every this many steps.
        condition: Optional label carried by log lines and abort errors.

    Returns:
        Final parameters and the loss trace.

    Raises:
        ContractError: If the dataset is empty.
        TrainingAbortedError: If a loss or parameter becomes non-finite.
    """
    if len(dataset) == 0:
        raise ContractError("Cannot train on an empty dataset")
    logger = get_experiment_logger()
    init_seq, batch_seq, latent_seq = np.random.SeedSequence(cfg.rng_seed % 2**64).spawn(3)
    params = ModelParams.initialize(cfg, np.random.default_rng(init_seq))
    batch_rng = np.random.default_rng(batch_seq)
    latent_rng = np.random.default_rng(latent_seq)
    state = AdamState.for_params(params.tensors, lr=cfg.lr)
    log = TrainLog()
    label = f" condition={condition}" if condition else ""

    logger.info(f"train_started{label} episodes={len(dataset)} steps={cfg.train_steps} {describe(params)}")
    timer = StageTimer().start()
    for step in range(1, cfg.train_steps + 1):
        batch = sample_training_batch(dataset, cfg.chunk_k, cfg.batch_size, batch_rng)
        zero_grad(params.values())
        with Tape() as tape:
            terms = batch_loss(params, batch, latent_rng)
        if not np.isfinite(terms.total.item()):
            raise TrainingAbortedError(step, f"non-finite loss {terms.total.item()}", condition)
        backward(terms.total, tape)
        adam_step(params.tensors, {name: p.grad for name, p in params.items()}, state)  # type: ignore[misc]
        if not params.all_finite():
            raise TrainingAbortedError(step, "non-finite parameter after update", condition)
        log.record(terms)
        if step % log_every == 0 or step == cfg.train_steps:
            logger.info(
                f"train_step{label} step={step} loss={log.total[-1]:.6f} "
                f"recon={log.reconstruction[-1]:.6f} kl={log.kl[-1]:.6f}"
            )

    log.wall_clock_s = timer.get_total_ms() / 1000.0
    log.params_checksum = params.checksum()
    logger.info(
        f"train_completed{label} steps={log.steps} wall_clock_s={log.wall_clock_s:.1f} "
        f"final_recon={log.final_reconstruction:.6f} checksum={log.params_checksum[:12]}"
    )
    return params, log
