"""Scripted pick-and-place expert with haptic grasp verification and retry.

The expert is a finite-state machine. Every phase has a target pose; when the
gripper has met the phase's goal the machine moves on without spending a
control step, so CHECK (a pure force decision) never appears as an executed
phase.

Motions overlap wherever the dynamics allow it: the approach lowers while it
travels, the fingers pre-narrow to just above the seed diameter on the way
down, a single closing step acquires the seed, and the carry descends to the
release depth while it travels to the tube. The approach stays above
LIFT_HEIGHT with the fingers open until it is over the seed, so the seed
remains in view for the whole approach.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from haptic_act.env import (
    APERTURE_SCALE,
    GRASP_HEIGHT,
    LIFT_HEIGHT,
    MOVE_RATE,
    OCCLUDING_APERTURE,
    TUBE_Y,
    EnvState,
    Observation,
    Pose,
    Seed,
)

GRASP_FORCE_THRESHOLD = 0.4

APPROACH_HEIGHT = 0.6
GRASP_DEPTH = 0.11
# Closing starts one move step (plus slack) above the grasp depth.
CLOSE_START_HEIGHT = GRASP_DEPTH + MOVE_RATE + 0.015
RETREAT_HEIGHT = 1.0
OPEN_APERTURE = 0.6
READY_MARGIN = 0.075
CLOSED_APERTURE = 0.0
CLOSE_DONE_APERTURE = 0.2
RELEASE_APERTURE = 1.0
POSE_TOLERANCE = 1e-6

assert CLOSE_START_HEIGHT < GRASP_HEIGHT < LIFT_HEIGHT < APPROACH_HEIGHT
assert OPEN_APERTURE >= OCCLUDING_APERTURE


class ExpertPhase(enum.IntEnum):
    APPROACH = 0
    DESCEND = 1
    CLOSE = 2
    LIFT = 3
    CHECK = 4
    REAPPROACH = 5
    TRANSPORT = 6
    DESCEND_TUBE = 7
    RELEASE = 8
    RETREAT = 9
    DONE = 10

    @property
    def code(self) -> str:
        """Single hex digit used in persisted phase traces."""
        return format(int(self), "x")

    @classmethod
    def from_code(cls, code: str) -> "ExpertPhase":
        return cls(int(code, 16))


# Phase graph; REAPPROACH is entered only from CHECK.
TRANSITIONS = {
    ExpertPhase.APPROACH: (ExpertPhase.DESCEND,),
    ExpertPhase.DESCEND: (ExpertPhase.CLOSE,),
    ExpertPhase.CLOSE: (ExpertPhase.LIFT,),
    ExpertPhase.LIFT: (ExpertPhase.CHECK,),
    ExpertPhase.CHECK: (ExpertPhase.REAPPROACH, ExpertPhase.TRANSPORT),
    ExpertPhase.REAPPROACH: (ExpertPhase.CLOSE,),
    ExpertPhase.TRANSPORT: (ExpertPhase.DESCEND_TUBE,),
    ExpertPhase.DESCEND_TUBE: (ExpertPhase.RELEASE,),
    ExpertPhase.RELEASE: (ExpertPhase.RETREAT,),
    ExpertPhase.RETREAT: (ExpertPhase.DONE,),
    ExpertPhase.DONE: (),
}


@dataclass
class ExpertDecision:
    """Action to execute, the phase it belongs to, and every phase passed through to get there."""

    action: Pose
    phase: ExpertPhase
    visited: List[ExpertPhase] = field(default_factory=list)

    def transitions(self) -> List[Tuple[ExpertPhase, ExpertPhase]]:
        return list(zip(self.visited, self.visited[1:]))


def ready_aperture(diameter: float) -> float:
    """Aperture whose finger gap sits just above ``diameter``; one closing step then grips it."""
    return min(1.0, diameter / APERTURE_SCALE + READY_MARGIN)


def _reached(values: Sequence[float], targets: Sequence[float]) -> bool:
    return all(abs(a - b) <= POSE_TOLERANCE for a, b in zip(values, targets))


def _nearest_seed(state: EnvState) -> Optional[Seed]:
    x, y = state.gripper[0], state.gripper[1]
    candidates = state.graspable_seeds()
    if not candidates:
        return None
    index = min(candidates, key=lambda i: (math.hypot(state.seeds[i].x - x, state.seeds[i].y - y), i))
    return state.seeds[index]


def _f32_pose(x: float, y: float, z: float, g: float) -> Pose:
    values = np.asarray((x, y, z, g), dtype=np.float32)
    return (float(values[0]), float(values[1]), float(values[2]), float(values[3]))


def _descend_target(state: EnvState) -> Optional[Pose]:
    seed = _nearest_seed(state)
    if seed is None:
        return None
    return _f32_pose(seed.x, seed.y, GRASP_DEPTH, ready_aperture(seed.diameter))


def _over_seed_and_low(state: EnvState, target: Pose) -> bool:
    x, y, z, g = state.gripper
    return _reached((x, y, g), (target[0], target[1], target[3])) and z <= CLOSE_START_HEIGHT + POSE_TOLERANCE


def _needs_reveal(state: EnvState) -> bool:
    # Still up at lift height with narrow fingers: a dropped seed is hidden under them.
    _, _, z, g = state.gripper
    return z >= LIFT_HEIGHT and g < OCCLUDING_APERTURE - POSE_TOLERANCE


def _target(state: EnvState, phase: ExpertPhase) -> Optional[Pose]:
    """Target pose of a motion phase, or None if there is nothing to pick."""
    x, y, z, g = state.gripper
    tube_x = state.tube_positions[state.target_tube][0]
    if phase == ExpertPhase.APPROACH:
        seed = _nearest_seed(state)
        return None if seed is None else _f32_pose(seed.x, seed.y, APPROACH_HEIGHT, OPEN_APERTURE)
    if phase == ExpertPhase.DESCEND:
        return _descend_target(state)
    if phase == ExpertPhase.CLOSE:
        return _f32_pose(x, y, GRASP_DEPTH, CLOSED_APERTURE)
    if phase == ExpertPhase.LIFT:
        return _f32_pose(x, y, APPROACH_HEIGHT, CLOSED_APERTURE)
    if phase == ExpertPhase.REAPPROACH:
        if _needs_reveal(state):
            # Open just wide enough to uncover the seed while sliding over it.
            seed = _nearest_seed(state)
            return None if seed is None else _f32_pose(seed.x, seed.y, z, OCCLUDING_APERTURE)
        return _descend_target(state)
    if phase in (ExpertPhase.TRANSPORT, ExpertPhase.DESCEND_TUBE):
        return _f32_pose(tube_x, TUBE_Y, GRASP_DEPTH, CLOSED_APERTURE)
    if phase == ExpertPhase.RELEASE:
        return _f32_pose(tube_x, TUBE_Y, GRASP_DEPTH, RELEASE_APERTURE)
    if phase == ExpertPhase.RETREAT:
        return _f32_pose(x, y, RETREAT_HEIGHT, RELEASE_APERTURE)
    return _f32_pose(x, y, z, g)


def _phase_complete(state: EnvState, phase: ExpertPhase, target: Pose) -> bool:
    x, y, z, g = state.gripper
    if phase in (ExpertPhase.APPROACH, ExpertPhase.TRANSPORT):
        return _reached((x, y), target[:2])
    if phase == ExpertPhase.DESCEND:
        return _over_seed_and_low(state, target)
    if phase == ExpertPhase.REAPPROACH:
        return not _needs_reveal(state) and _over_seed_and_low(state, target)
    if phase == ExpertPhase.CLOSE:
        return state.held_seed is not None or g <= CLOSE_DONE_APERTURE + POSE_TOLERANCE
    if phase == ExpertPhase.LIFT:
        return z >= LIFT_HEIGHT and g <= CLOSED_APERTURE + POSE_TOLERANCE
    return _reached(state.gripper, target)


def plan_step(state: EnvState, phase: ExpertPhase, last_force: Sequence[float]) -> ExpertDecision:
    """
    Decide the next action, advancing through every phase whose goal is already met.

    Args:
        state: Current environment state (the expert sees true seed positions).
        phase: Phase the expert is in.
        last_force: Force vector of the latest observation; read only in CHECK.

    Returns:
        The decision, including the visited phase path.
    """
    visited = [phase]
    for _ in range(len(ExpertPhase) + 1):
        if phase == ExpertPhase.DONE:
            break
        if phase == ExpertPhase.CHECK:
            holding = abs(float(last_force[2])) >= GRASP_FORCE_THRESHOLD
            phase = ExpertPhase.TRANSPORT if holding else ExpertPhase.REAPPROACH
            visited.append(phase)
            continue
        target = _target(state, phase)
        if target is None:
            # Nothing left to pick: hold still until the episode ends.
            return ExpertDecision(_f32_pose(*state.gripper), phase, visited)
        if not _phase_complete(state, phase, target):
            return ExpertDecision(target, phase, visited)
        phase = TRANSITIONS[phase][0]
        visited.append(phase)
    return ExpertDecision(_f32_pose(*state.gripper), ExpertPhase.DONE, visited)


def expert_action(state: EnvState, phase: ExpertPhase, last_force: Sequence[float]) -> Tuple[Pose, ExpertPhase]:
    """
    Scripted expert policy.

    APPROACH travels over the nearest seed at APPROACH_HEIGHT with the fingers
    open. DESCEND lowers onto it while narrowing the fingers to
    :func:`ready_aperture`, CLOSE shuts them until the seed is held and LIFT
    raises it through LIFT_HEIGHT. CHECK reads |f_z|: below
    GRASP_FORCE_THRESHOLD the grasp is empty and the expert goes to REAPPROACH
    (reopen until the dropped seed is uncovered, then descend on its current
    position); otherwise it carries the seed down to the target tube, releases
    and retreats.

    Returns:
        The absolute target pose and the phase it belongs to.
    """
    decision = plan_step(state, phase, last_force)
    return decision.action, decision.phase


class ExpertChunkPolicy:
    """The scripted expert behind the chunk-policy interface (horizon 1)."""

    horizon = 1

    def __init__(self) -> None:
        self.state: Optional[EnvState] = None
        self.phase = ExpertPhase.APPROACH
        self.phases: List[ExpertPhase] = []
        self.transitions: List[Tuple[ExpertPhase, ExpertPhase]] = []

    def begin_episode(self, state: EnvState) -> None:
        self.state = state
        self.phase = ExpertPhase.APPROACH
        self.phases = []
        self.transitions = []

    def predict_chunk(self, obs: Observation) -> np.ndarray:
        assert self.state is not None, "begin_episode must be called first"
        decision = plan_step(self.state, self.phase, obs.force)
        self.phase = decision.phase
        self.phases.append(decision.phase)
        self.transitions.extend(decision.transitions())
        return np.asarray([decision.action], dtype=np.float64)

    def phase_trace(self) -> str:
        """Executed phases as a hex-digit string, one digit per step."""
        return "".join(phase.code for phase in self.phases)
