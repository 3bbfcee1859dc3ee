"""Planar seed-transfer environment with a soft gripper, slip events and an occluding camera.

A unit-square workspace holds a dish of seeds and four tubes. The gripper
moves toward absolute target poses under per-axis rate limits. Its force
channel is the only signal that tells a closed-and-loaded gripper apart from a
closed-and-empty one, because the closed gripper hides its contents from the
top-down camera.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from haptic_act.config import N_TUBES, EnvConfig
from haptic_act.errors import ConfigurationError, ContractError, DimensionError
from haptic_act.logger import get_sim_logger

# Geometry
DISH_CENTER = (0.5, 0.45)
DISH_RADIUS = 0.18
TUBE_XS = (0.2, 0.4, 0.6, 0.8)
TUBE_Y = 0.9
TUBE_RADIUS = 0.03
GRIPPER_START = (0.5, 0.15, 1.0, 1.0)
BASE_SEED_DIAMETER = 0.03
PLACEMENT_ATTEMPTS = 1000

# Dynamics
MOVE_RATE = 0.05
APERTURE_RATE = 0.1
GRASP_HEIGHT = 0.2
LIFT_HEIGHT = 0.5
SLIP_SCATTER = 0.03

# Soft-finger force model
APERTURE_SCALE = 0.08
CONTACT_STIFFNESS = 25.0
FORCE_CAP = 2.0
SELF_CONTACT_FORCE = 0.15
SELF_CONTACT_GAP = 0.002
FORCE_NOISE = 0.02

# Rendering
IMAGE_SIZE = 32
PIXEL = 1.0 / IMAGE_SIZE
BACKGROUND = 0.1
DISH_INTENSITY = 0.3
TUBE_INTENSITY = 0.5
TARGET_TUBE_INTENSITY = 0.7
SEED_INTENSITY = 0.9
GRIPPER_INTENSITY = 1.0
OPEN_GRIPPER_INTENSITY = 0.6
# A gripper below LIFT_HEIGHT or narrower than this hides what is under it.
OCCLUDING_APERTURE = 0.5

_PIXEL_CENTERS = (np.arange(IMAGE_SIZE) + 0.5) * PIXEL
_GRID_X, _GRID_Y = np.meshgrid(_PIXEL_CENTERS, _PIXEL_CENTERS)

Pose = Tuple[float, float, float, float]


def _f32(value: float) -> float:
    """Round to the nearest 32-bit real; poses live on this grid so recorded actions replay exactly."""
    return float(np.float32(value))


class SeedLocation(enum.Enum):
    DISH = "dish"
    GRIPPER = "gripper"
    TUBE = "tube"
    TABLE = "table"


@dataclass(frozen=True)
class Seed:
    x: float
    y: float
    diameter: float
    contrast: float
    location: SeedLocation = SeedLocation.DISH
    tube: Optional[int] = None

    @property
    def in_dish(self) -> bool:
        return self.location is SeedLocation.DISH

    def moved(self, x: float, y: float, location: SeedLocation, tube: Optional[int] = None) -> "Seed":
        return Seed(x, y, self.diameter, self.contrast, location, tube)


@dataclass
class EnvState:
    """Complete mutable state of one episode."""

    config: EnvConfig
    gripper: Pose
    seeds: List[Seed]
    held_seed: Optional[int]
    dish_center: Tuple[float, float]
    target_tube: int
    step: int = 0
    stream: int = 0
    grasp_attempts: int = 0
    pick_success: bool = False
    delivery_success: bool = False
    done: bool = False
    force_slip_next_lift: bool = False
    rng: np.random.Generator = field(default_factory=np.random.default_rng, compare=False, repr=False)

    dish_radius: float = DISH_RADIUS
    tube_positions: Tuple[Tuple[float, float], ...] = tuple((x, TUBE_Y) for x in TUBE_XS)

    @property
    def pose(self) -> Pose:
        return self.gripper

    @property
    def aperture_width(self) -> float:
        """Physical finger gap for the current aperture command."""
        return APERTURE_SCALE * self.gripper[3]

    def graspable_seeds(self) -> List[int]:
        """Indices of seeds lying free in the dish or on the table."""
        return [
            i for i, seed in enumerate(self.seeds) if seed.location in (SeedLocation.DISH, SeedLocation.TABLE)
        ]


@dataclass
class Observation:
    """One timestep of sensing; arrays are 32-bit so recorded episodes replay bit-exactly."""

    image: np.ndarray
    force: np.ndarray
    proprio: np.ndarray

    def __post_init__(self) -> None:
        if self.image.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise DimensionError(f"Observation image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {self.image.shape}")
        if self.force.shape != (3,) or self.proprio.shape != (4,):
            raise DimensionError(
                f"Observation force/proprio must be 3/4-vectors, got {self.force.shape}/{self.proprio.shape}"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.force, other.force)
            and np.array_equal(self.proprio, other.proprio)
        )


@dataclass(frozen=True)
class EventFlags:
    """Per-step events; pick/delivery success and grasp_attempts are cumulative over the episode."""

    grasp_acquired: bool = False
    slip_occurred: bool = False
    pick_success: bool = False
    delivery_success: bool = False
    episode_done: bool = False
    grasp_attempts: int = 0


def sanitize_action(action: Sequence[float]) -> Pose:
    """
    Clamp an absolute target pose to [0, 1] and round it to 32-bit reals.

    Raises:
        DimensionError: If the action is not a 4-vector.
        ContractError: If any component is not finite.
    """
    values = np.asarray(action, dtype=np.float64).reshape(-1)
    if values.shape != (4,):
        raise DimensionError(f"Action must be a 4-vector (x, y, z, g), got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ContractError(f"Action has non-finite components: {values.tolist()}")
    clipped = np.clip(values, 0.0, 1.0).astype(np.float32)
    return (float(clipped[0]), float(clipped[1]), float(clipped[2]), float(clipped[3]))


def _place_seeds(config: EnvConfig, rng: np.random.Generator, center: Tuple[float, float], count: int) -> List[Seed]:
    diameter = BASE_SEED_DIAMETER * config.seed_size_multiplier
    usable = DISH_RADIUS - diameter / 2
    if usable <= 0:
        raise ConfigurationError(f"Seeds of diameter {diameter:.3f} do not fit in the dish")
    seeds: List[Seed] = []
    for _ in range(PLACEMENT_ATTEMPTS):
        if len(seeds) == count:
            break
        radius = usable * math.sqrt(rng.random())
        angle = 2 * math.pi * rng.random()
        x = center[0] + radius * math.cos(angle)
        y = center[1] + radius * math.sin(angle)
        if all(math.hypot(x - s.x, y - s.y) >= diameter for s in seeds):
            seeds.append(Seed(x, y, diameter, config.seed_contrast))
    if len(seeds) < count:
        raise ConfigurationError(
            f"Could not place {count} seeds of diameter {diameter:.3f} after {PLACEMENT_ATTEMPTS} samples "
            f"(dish too crowded)"
        )
    return seeds


def env_reset(config: EnvConfig, stream: int = 0) -> Tuple[EnvState, Observation]:
    """
    Start a new episode.

    Args:
        config: Environment settings; ``rng_seed`` and ``stream`` together select the random stream.
        stream: Independent stream index (episode or trial number).

    Returns:
        The initial state and its observation.

    Raises:
        ConfigurationError: If the seeds cannot be placed without overlap.
    """
    rng = np.random.default_rng([config.rng_seed % 2**64, stream])
    jitter = rng.uniform(-1.0, 1.0, size=2) * config.dish_center_jitter
    center = (DISH_CENTER[0] + float(jitter[0]), DISH_CENTER[1] + float(jitter[1]))
    low, high = config.n_seeds_range
    count = int(rng.integers(low, high + 1))
    drawn_tube = int(rng.integers(N_TUBES))
    target = drawn_tube if config.target_tube is None else config.target_tube
    seeds = _place_seeds(config, rng, center, count)

    state = EnvState(
        config=config,
        gripper=tuple(_f32(v) for v in GRIPPER_START),  # type: ignore[arg-type]
        seeds=seeds,
        held_seed=None,
        dish_center=center,
        target_tube=target,
        stream=stream,
        rng=rng,
    )
    return state, render_observation(state)


def _move(current: float, target: float, rate: float) -> float:
    delta = min(max(target - current, -rate), rate)
    return _f32(current + delta)


def _inside_dish(state: EnvState, x: float, y: float) -> bool:
    return math.hypot(x - state.dish_center[0], y - state.dish_center[1]) <= state.dish_radius


def _clamp_into_dish(state: EnvState, x: float, y: float, diameter: float) -> Tuple[float, float]:
    cx, cy = state.dish_center
    limit = state.dish_radius - diameter / 2
    dx, dy = x - cx, y - cy
    dist = math.hypot(dx, dy)
    if dist <= limit or dist == 0.0:
        return x, y
    return cx + dx * limit / dist, cy + dy * limit / dist


def _tube_under(state: EnvState, x: float, y: float) -> Optional[int]:
    for index, (tx, ty) in enumerate(state.tube_positions):
        if math.hypot(x - tx, y - ty) <= TUBE_RADIUS:
            return index
    return None


def env_step(state: EnvState, action: Sequence[float]) -> Tuple[EnvState, Observation, EventFlags]:
    """
    Advance the episode by one control step. The state is updated in place.

    Args:
        state: Current episode state.
        action: Absolute target pose (x, y, z, g); clamped to [0, 1].

    Returns:
        The updated state, its observation and the step's event flags.

    Raises:
        ContractError: If the episode is already done or the action is not finite.
    """
    if state.done:
        raise ContractError(f"env_step called after the episode finished (step {state.step})")
    target = sanitize_action(action)
    logger = get_sim_logger()

    x0, y0, z0, g0 = state.gripper
    x = _move(x0, target[0], MOVE_RATE)
    y = _move(y0, target[1], MOVE_RATE)
    z = _move(z0, target[2], MOVE_RATE)
    g = _move(g0, target[3], APERTURE_RATE)
    state.gripper = (x, y, z, g)
    state.step += 1
    gap = APERTURE_SCALE * g

    grasp_acquired = False
    slip_occurred = False

    if state.held_seed is not None:
        held = state.seeds[state.held_seed]
        state.seeds[state.held_seed] = held.moved(x, y, SeedLocation.GRIPPER)
        if gap > held.diameter:
            _release(state, x, y, z)

    if state.held_seed is None and z < GRASP_HEIGHT and g < g0:
        candidates = [
            (math.hypot(x - state.seeds[i].x, y - state.seeds[i].y), i)
            for i in state.graspable_seeds()
            if gap < state.seeds[i].diameter
            and math.hypot(x - state.seeds[i].x, y - state.seeds[i].y) <= state.seeds[i].diameter / 2
        ]
        if candidates:
            _, index = min(candidates)
            state.held_seed = index
            state.seeds[index] = state.seeds[index].moved(x, y, SeedLocation.GRIPPER)
            state.grasp_attempts += 1
            grasp_acquired = True
            logger.debug(
                f"grasp_acquired stream={state.stream} step={state.step} seed={index} "
                f"attempts={state.grasp_attempts}"
            )

    if state.held_seed is not None and z0 < LIFT_HEIGHT <= z:
        forced = state.force_slip_next_lift
        state.force_slip_next_lift = False
        draw = state.rng.random()
        if forced or draw < state.config.p_slip:
            slip_occurred = True
            _drop_after_slip(state, x, y)
            logger.debug(f"slip stream={state.stream} step={state.step} forced={forced}")
        else:
            state.pick_success = True

    state.done = state.delivery_success or state.step >= state.config.max_steps
    flags = EventFlags(
        grasp_acquired=grasp_acquired,
        slip_occurred=slip_occurred,
        pick_success=state.pick_success,
        delivery_success=state.delivery_success,
        episode_done=state.done,
        grasp_attempts=state.grasp_attempts,
    )
    return state, render_observation(state), flags


def _drop_after_slip(state: EnvState, x: float, y: float) -> None:
    assert state.held_seed is not None
    seed = state.seeds[state.held_seed]
    offset = state.rng.uniform(-SLIP_SCATTER, SLIP_SCATTER, size=2)
    drop_x, drop_y = _clamp_into_dish(state, x + float(offset[0]), y + float(offset[1]), seed.diameter)
    state.seeds[state.held_seed] = seed.moved(drop_x, drop_y, SeedLocation.DISH)
    state.held_seed = None


def _release(state: EnvState, x: float, y: float, z: float) -> None:
    assert state.held_seed is not None
    index = state.held_seed
    seed = state.seeds[index]
    tube = _tube_under(state, x, y) if z < GRASP_HEIGHT else None
    if tube is not None:
        tx, ty = state.tube_positions[tube]
        state.seeds[index] = seed.moved(tx, ty, SeedLocation.TUBE, tube)
        if tube == state.target_tube and state.pick_success:
            state.delivery_success = True
            get_sim_logger().debug(f"delivered stream={state.stream} step={state.step} tube={tube}")
    elif _inside_dish(state, x, y):
        state.seeds[index] = seed.moved(x, y, SeedLocation.DISH)
    else:
        state.seeds[index] = seed.moved(x, y, SeedLocation.TABLE)
    state.held_seed = None


def expected_force(state: EnvState) -> np.ndarray:
    """Noise-free force vector for the current state."""
    gap = state.aperture_width
    if state.held_seed is not None:
        diameter = state.seeds[state.held_seed].diameter
        f_z = min(FORCE_CAP, CONTACT_STIFFNESS * max(0.0, diameter - gap))
    elif gap < SELF_CONTACT_GAP:
        f_z = SELF_CONTACT_FORCE
    else:
        f_z = 0.0
    return np.array([0.0, 0.0, f_z])


def force_readout(state: EnvState, rng: np.random.Generator) -> np.ndarray:
    """
    Read the 3-axis force sensor.

    The loaded reading saturates at FORCE_CAP: soft fingers bend around the
    seed instead of crushing it.

    Args:
        state: Current state.
        rng: Generator supplying the Gaussian sensor noise.

    Returns:
        Noisy force vector (f_x, f_y, f_z).
    """
    return expected_force(state) + rng.normal(0.0, FORCE_NOISE, size=3)


def _render_image(state: EnvState) -> np.ndarray:
    image = np.full((IMAGE_SIZE, IMAGE_SIZE), BACKGROUND)

    cx, cy = state.dish_center
    image[np.hypot(_GRID_X - cx, _GRID_Y - cy) <= state.dish_radius] = DISH_INTENSITY

    for index, (tx, ty) in enumerate(state.tube_positions):
        value = TARGET_TUBE_INTENSITY if index == state.target_tube else TUBE_INTENSITY
        image[np.hypot(_GRID_X - tx, _GRID_Y - ty) <= TUBE_RADIUS] = value
        image[_pixel_index(ty), _pixel_index(tx)] = value

    for seed in state.seeds:
        if seed.location is SeedLocation.TUBE:
            continue
        coverage = np.clip(0.5 + (seed.diameter / 2 - np.hypot(_GRID_X - seed.x, _GRID_Y - seed.y)) / PIXEL, 0.0, 1.0)
        coverage[_pixel_index(seed.y), _pixel_index(seed.x)] = 1.0
        image = (1.0 - coverage) * image + coverage * (SEED_INTENSITY * seed.contrast)

    gx, gy, gz, g = state.gripper
    row, col = _pixel_index(gy), _pixel_index(gx)
    block = (slice(max(row - 1, 0), row + 2), slice(max(col - 1, 0), col + 2))
    if gz < LIFT_HEIGHT or g < OCCLUDING_APERTURE:
        image[block] = GRIPPER_INTENSITY
    else:
        image[block] = np.maximum(image[block], OPEN_GRIPPER_INTENSITY)

    return np.clip(image, 0.0, 1.0)


def _pixel_index(coordinate: float) -> int:
    return min(max(int(math.floor(coordinate * IMAGE_SIZE)), 0), IMAGE_SIZE - 1)


def render_observation(state: EnvState) -> Observation:
    """
    Render the top-down image and read the sensors.

    Rows index y and columns index x. Draw order is background, dish, tubes,
    seeds, gripper. A low or closed gripper is an opaque 3x3 block, so it hides
    whether a seed is between its fingers.
    """
    return Observation(
        image=_render_image(state).astype(np.float32),
        force=force_readout(state, state.rng).astype(np.float32),
        proprio=np.asarray(state.gripper, dtype=np.float32),
    )
