"""Closed-loop execution: chunk buffering, temporal ensembling and rollouts."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np

from haptic_act.config import ENSEMBLE_ORIENTATIONS, EnvConfig, PolicyConfig
from haptic_act.env import EnvState, Observation, env_reset, env_step, sanitize_action
from haptic_act.errors import ConfigurationError, ContractError, DimensionError
from haptic_act.logger import get_experiment_logger
from haptic_act.policy import ModelParams, predict

LOOP_FAILURE_ATTEMPTS = 3
DEFAULT_ENSEMBLE_RATE = 0.1

# phase_flags bits in trace rows
FLAG_GRASP_ACQUIRED = 1
FLAG_SLIP = 2
FLAG_PICKED = 4
FLAG_DELIVERED = 8
FLAG_HOLDING = 16


class ChunkPolicy(Protocol):
    """Anything that maps an observation to a block of future absolute poses."""

    horizon: int

    def begin_episode(self, state: EnvState) -> None: ...

    def predict_chunk(self, obs: Observation) -> np.ndarray: ...


class TrainedPolicy:
    """A trained chunking model behind the chunk-policy interface."""

    def __init__(self, params: ModelParams, cfg: PolicyConfig):
        self.params = params
        self.cfg = cfg
        self.horizon = cfg.chunk_k

    def begin_episode(self, state: EnvState) -> None:
        pass

    def predict_chunk(self, obs: Observation) -> np.ndarray:
        return predict(obs, self.params, self.cfg)


class ChunkBuffer:
    """Overlapping predictions per absolute timestep.

    Each entry is ``(age, action)`` where age is the row of the chunk the
    action came from, i.e. how many steps before ``t`` it was predicted.
    """

    def __init__(self, horizon: int, m: float = DEFAULT_ENSEMBLE_RATE, orientation: str = "oldest"):
        if horizon < 1:
            raise ConfigurationError(f"Chunk horizon must be >= 1, got {horizon}")
        if orientation not in ENSEMBLE_ORIENTATIONS:
            raise ConfigurationError(f"Unknown ensembling orientation: {orientation!r}")
        self.horizon = horizon
        self.m = m
        self.orientation = orientation
        self.entries: Dict[int, List[Tuple[int, np.ndarray]]] = {}
        self._last_push: Optional[int] = None

    def push(self, t_now: int, chunk: np.ndarray) -> "ChunkBuffer":
        """
        Register chunk row i as a prediction for timestep t_now + i.

        Raises:
            DimensionError: If the chunk is not horizon x 4.
            ContractError: If t_now does not move forward.
        """
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.shape != (self.horizon, 4):
            raise DimensionError(f"Chunk must be {self.horizon}x4, got {chunk.shape}")
        if self._last_push is not None and t_now <= self._last_push:
            raise ContractError(f"Chunks must be pushed at increasing timesteps ({t_now} after {self._last_push})")
        self._last_push = t_now
        for t in [t for t in self.entries if t < t_now]:
            del self.entries[t]
        for age, row in enumerate(chunk):
            self.entries.setdefault(t_now + age, []).append((age, row.copy()))
        return self

    def predictions(self, t: int) -> List[Tuple[int, np.ndarray]]:
        return list(self.entries.get(t, []))

    def ensembled_action(self, t: int, m: Optional[float] = None) -> np.ndarray:
        """
        Exponentially weighted mean of all predictions for timestep t.

        Predictions are ranked from the oldest (default) or the newest; rank i
        gets weight exp(-m * i). The result is clamped to [0, 1].

        Raises:
            ContractError: If nothing was predicted for t.
        """
        return ensembled_action(self, t, self.m if m is None else m)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())


def push_chunk(buffer: ChunkBuffer, t_now: int, chunk: np.ndarray) -> ChunkBuffer:
    return buffer.push(t_now, chunk)


def ensemble_weights(count: int, m: float) -> np.ndarray:
    return np.exp(-m * np.arange(count))


def ensembled_action(buffer: ChunkBuffer, t: int, m: float = DEFAULT_ENSEMBLE_RATE) -> np.ndarray:
    predictions = buffer.entries.get(t)
    if not predictions:
        raise ContractError(f"No predictions buffered for timestep {t}")
    # Larger age means predicted earlier.
    oldest_first = buffer.orientation == "oldest"
    ranked = sorted(predictions, key=lambda entry: -entry[0] if oldest_first else entry[0])
    actions = np.stack([action for _, action in ranked])
    weights = ensemble_weights(len(ranked), m)
    mean = (weights[:, None] * actions).sum(axis=0) / weights.sum()
    return np.clip(mean, 0.0, 1.0)


@dataclass(frozen=True)
class TrialResult:
    pick_success: bool
    delivery_success: bool
    grasp_attempts: int
    loop_failure: bool
    steps_used: int


@dataclass(frozen=True)
class TraceRow:
    """One control step of a rollout, as exported to force-trace CSVs."""

    step: int
    x: float
    y: float
    z: float
    g: float
    f_x: float
    f_y: float
    f_z: float
    phase_flags: int


@dataclass
class Rollout:
    """Outcome of one closed-loop episode."""

    result: TrialResult
    trace: List[TraceRow] = field(default_factory=list)
    images: List[np.ndarray] = field(default_factory=list)
    forces: List[np.ndarray] = field(default_factory=list)
    proprios: List[np.ndarray] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)
    final_state: Optional[EnvState] = None


def rollout(
    env_config: EnvConfig,
    policy: ChunkPolicy,
    m: float = DEFAULT_ENSEMBLE_RATE,
    stream: int = 0,
    orientation: str = "oldest",
    force_slip_first_lift: bool = False,
    record_steps: bool = False,
) -> Rollout:
    """
    Run one episode: render, predict a chunk, push it, execute the ensembled action.

    A new chunk is predicted at every step, so each executed action blends up
    to ``horizon`` overlapping predictions.

    Args:
        env_config: Environment settings; together with ``stream`` they fix the episode.
        policy: Trained model or scripted expert.
        m: Ensembling rate.
        stream: Random stream index of the episode.
        orientation: Whether the oldest or the newest prediction gets the largest weight.
        force_slip_first_lift: Make the first lift with a held seed slip.
        record_steps: Keep the observations and executed actions (for datasets).

    Returns:
        Trial result, per-step trace and, if requested, the recorded steps.
    """
    state, obs = env_reset(env_config, stream)
    state.force_slip_next_lift = force_slip_first_lift
    policy.begin_episode(state)
    buffer = ChunkBuffer(policy.horizon, m, orientation)
    out = Rollout(result=TrialResult(False, False, 0, False, 0))

    t = 0
    while not state.done:
        buffer.push(t, policy.predict_chunk(obs))
        executed = np.asarray(sanitize_action(buffer.ensembled_action(t)))
        if record_steps:
            out.images.append(obs.image)
            out.forces.append(obs.force)
            out.proprios.append(obs.proprio)
            out.actions.append(executed.astype(np.float32))
        state, obs, flags = env_step(state, executed)
        t += 1
        bits = (
            FLAG_GRASP_ACQUIRED * flags.grasp_acquired
            | FLAG_SLIP * flags.slip_occurred
            | FLAG_PICKED * flags.pick_success
            | FLAG_DELIVERED * flags.delivery_success
            | FLAG_HOLDING * (state.held_seed is not None)
        )
        x, y, z, g = state.gripper
        f_x, f_y, f_z = (float(v) for v in obs.force)
        out.trace.append(TraceRow(t, x, y, z, g, f_x, f_y, f_z, int(bits)))

    out.result = TrialResult(
        pick_success=state.pick_success,
        delivery_success=state.delivery_success,
        grasp_attempts=state.grasp_attempts,
        loop_failure=(not state.delivery_success and state.grasp_attempts >= LOOP_FAILURE_ATTEMPTS),
        steps_used=t,
    )
    out.final_state = state
    get_experiment_logger().debug(
        f"rollout_done stream={stream} steps={t} pick={state.pick_success} "
        f"delivered={state.delivery_success} attempts={state.grasp_attempts}"
    )
    return out


def total_variation(actions: np.ndarray) -> float:
    """Sum of absolute step-to-step changes over all components."""
    actions = np.asarray(actions, dtype=np.float64)
    if len(actions) < 2:
        return 0.0
    return float(np.abs(np.diff(actions, axis=0)).sum())
