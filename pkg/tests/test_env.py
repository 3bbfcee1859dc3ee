"""Tests for the seed-transfer environment."""

import dataclasses
import math
from typing import List

import numpy as np
import pytest

from haptic_act.config import EnvConfig
from haptic_act.env import (
    DISH_RADIUS,
    FORCE_CAP,
    FORCE_NOISE,
    IMAGE_SIZE,
    SLIP_SCATTER,
    TUBE_XS,
    TUBE_Y,
    EnvState,
    EventFlags,
    SeedLocation,
    env_reset,
    env_step,
    expected_force,
    force_readout,
    render_observation,
    sanitize_action,
)
from haptic_act.errors import ConfigurationError, ContractError, DimensionError


def one_seed_config(**overrides) -> EnvConfig:
    values = dict(n_seeds_range=(1, 1), dish_center_jitter=0.0, p_slip=0.0, target_tube=2)
    values.update(overrides)
    return EnvConfig(**values)


def drive(state: EnvState, target, steps: int) -> List[EventFlags]:
    flags = []
    for _ in range(steps):
        state, _, f = env_step(state, target)
        flags.append(f)
    return flags


def grasp_seed(state: EnvState) -> List[EventFlags]:
    """Hover onto the only seed, close on it and return the flags."""
    seed = state.seeds[0]
    flags = drive(state, (seed.x, seed.y, 0.15, 0.6), 20)
    flags += drive(state, (seed.x, seed.y, 0.15, 0.0), 5)
    return flags


def pixel(coordinate: float) -> int:
    return int(math.floor(coordinate * IMAGE_SIZE))


class TestReset:
    """Test episode initialization."""

    def test_degenerate_ranges(self):
        """Test a single seed in an unjittered dish."""
        state, obs = env_reset(one_seed_config())
        assert len(state.seeds) == 1
        assert state.dish_center == (0.5, 0.45)
        assert state.gripper == tuple(float(np.float32(v)) for v in (0.5, 0.15, 1.0, 1.0))
        assert state.seeds[0].diameter == pytest.approx(0.03)
        np.testing.assert_array_equal(obs.proprio, np.float32([0.5, 0.15, 1.0, 1.0]))

    def test_same_seed_same_state(self):
        """Test that resets are reproducible field for field."""
        config = EnvConfig(rng_seed=1234)
        first, obs_a = env_reset(config, stream=3)
        second, obs_b = env_reset(config, stream=3)
        assert first == second
        assert obs_a == obs_b
        other, _ = env_reset(config, stream=4)
        assert other.seeds != first.seeds

    def test_seeds_inside_dish_without_overlap(self):
        """Test placement over many resets."""
        config = EnvConfig(rng_seed=7, seed_size_multiplier=1.5)
        for stream in range(200):
            state, _ = env_reset(config, stream)
            cx, cy = state.dish_center
            assert abs(cx - 0.5) <= 0.05 and abs(cy - 0.45) <= 0.05
            assert 0 <= state.target_tube < 4
            for i, seed in enumerate(state.seeds):
                assert math.hypot(seed.x - cx, seed.y - cy) <= DISH_RADIUS - seed.diameter / 2 + 1e-12
                for other in state.seeds[i + 1 :]:
                    assert math.hypot(seed.x - other.x, seed.y - other.y) >= seed.diameter

    def test_all_seed_counts_occur(self):
        """Test that every count from 1 to 7 shows up."""
        counts = {len(env_reset(EnvConfig(rng_seed=5), stream)[0].seeds) for stream in range(300)}
        assert counts == set(range(1, 8))

    @pytest.mark.slow
    def test_seed_count_histogram_is_uniform(self):
        """Test the seed-count distribution with a chi-square statistic over 10000 resets."""
        observed = np.zeros(7)
        for stream in range(10000):
            observed[len(env_reset(EnvConfig(rng_seed=11), stream)[0].seeds) - 1] += 1
        expected = 10000 / 7
        chi2 = float(((observed - expected) ** 2 / expected).sum())
        # Critical value of chi-square with 6 degrees of freedom at p = 0.01.
        assert chi2 < 16.812

    def test_crowded_dish(self):
        """Test that impossible placements raise a configuration error."""
        with pytest.raises(ConfigurationError):
            env_reset(EnvConfig(n_seeds_range=(7, 7), seed_size_multiplier=5.0))
        with pytest.raises(ConfigurationError):
            env_reset(EnvConfig(seed_size_multiplier=20.0))

    def test_target_tube_override(self):
        """Test that a configured target tube wins over the drawn one."""
        for stream in range(10):
            state, _ = env_reset(EnvConfig(target_tube=3), stream)
            assert state.target_tube == 3


class TestStep:
    """Test dynamics, grasping, slips and delivery."""

    def test_fixed_point(self):
        """Test that commanding the current pose only advances the step counter."""
        state, _ = env_reset(one_seed_config())
        seeds, pose = list(state.seeds), state.gripper
        state, _, flags = env_step(state, pose)
        assert state.gripper == pose
        assert state.seeds == seeds
        assert state.step == 1
        assert flags == EventFlags()

    def test_rate_limits(self):
        """Test per-axis position and aperture limits."""
        state, _ = env_reset(one_seed_config())
        state, _, _ = env_step(state, (1.0, 0.15, 0.0, 0.0))
        x, y, z, g = state.gripper
        assert x == pytest.approx(0.55, abs=1e-7)
        assert y == pytest.approx(0.15, abs=1e-7)
        assert z == pytest.approx(0.95, abs=1e-7)
        assert g == pytest.approx(0.9, abs=1e-7)

    def test_action_sanitized(self):
        """Test clamping and rejection of malformed actions."""
        assert sanitize_action([1.5, -0.2, 0.5, 0.25]) == (1.0, 0.0, 0.5, 0.25)
        with pytest.raises(ContractError):
            sanitize_action([0.1, float("nan"), 0.1, 0.1])
        with pytest.raises(DimensionError):
            sanitize_action([0.1, 0.2, 0.3])

    def test_close_and_lift_without_slip(self):
        """Test grasp_acquired followed by pick_success with p_slip = 0."""
        state, _ = env_reset(one_seed_config())
        flags = grasp_seed(state)
        assert sum(f.grasp_acquired for f in flags) == 1
        assert state.held_seed == 0
        assert state.grasp_attempts == 1
        seed = state.seeds[0]
        flags = drive(state, (seed.x, seed.y, 0.6, 0.0), 10)
        assert not any(f.slip_occurred for f in flags)
        assert flags[-1].pick_success
        assert state.seeds[0].location is SeedLocation.GRIPPER
        assert (state.seeds[0].x, state.seeds[0].y) == state.gripper[:2]

    def test_open_gripper_does_not_grasp(self):
        """Test that an aperture wider than the seed never grasps."""
        state, _ = env_reset(one_seed_config())
        seed = state.seeds[0]
        flags = drive(state, (seed.x, seed.y, 0.15, 0.6), 20)
        flags += drive(state, (seed.x, seed.y, 0.15, 0.4), 3)
        assert not any(f.grasp_acquired for f in flags)
        assert state.held_seed is None

    def test_slip_drops_seed_into_dish(self):
        """Test that a slip at lift returns the seed near the gripper, inside the dish."""
        state, _ = env_reset(one_seed_config(p_slip=1.0))
        grasp_seed(state)
        seed = state.seeds[0]
        flags = drive(state, (seed.x, seed.y, 0.6, 0.0), 10)
        assert sum(f.slip_occurred for f in flags) == 1
        assert not state.pick_success
        assert state.held_seed is None
        dropped = state.seeds[0]
        assert dropped.location is SeedLocation.DISH
        assert math.hypot(dropped.x - seed.x, dropped.y - seed.y) <= SLIP_SCATTER * math.sqrt(2) + 1e-6
        cx, cy = state.dish_center
        assert math.hypot(dropped.x - cx, dropped.y - cy) <= DISH_RADIUS

    def test_forced_slip_overrides_probability(self):
        """Test the one-shot forced slip with p_slip = 0."""
        state, _ = env_reset(one_seed_config())
        state.force_slip_next_lift = True
        grasp_seed(state)
        seed = state.seeds[0]
        flags = drive(state, (seed.x, seed.y, 0.6, 0.0), 10)
        assert any(f.slip_occurred for f in flags)
        assert not state.force_slip_next_lift

    def _pick(self, state: EnvState) -> None:
        grasp_seed(state)
        seed = state.seeds[0]
        drive(state, (seed.x, seed.y, 0.5, 0.0), 8)
        assert state.pick_success

    def test_delivery_to_target_tube(self):
        """Test that releasing over the target tube delivers and ends the episode."""
        state, _ = env_reset(one_seed_config())
        self._pick(state)
        tube_x = TUBE_XS[state.target_tube]
        drive(state, (tube_x, TUBE_Y, 0.15, 0.0), 20)
        flags = []
        while not state.done:
            state, _, f = env_step(state, (tube_x, TUBE_Y, 0.15, 1.0))
            flags.append(f)
        assert flags[-1].delivery_success and flags[-1].episode_done
        assert flags[-1].pick_success
        assert state.seeds[0].location is SeedLocation.TUBE
        assert state.seeds[0].tube == state.target_tube
        with pytest.raises(ContractError):
            env_step(state, state.gripper)

    def test_wrong_tube_keeps_episode_running(self):
        """Test that releasing over another tube puts the seed there without delivery."""
        state, _ = env_reset(one_seed_config())
        self._pick(state)
        drive(state, (TUBE_XS[0], TUBE_Y, 0.15, 0.0), 20)
        drive(state, (TUBE_XS[0], TUBE_Y, 0.15, 1.0), 5)
        assert not state.delivery_success
        assert not state.done
        assert state.seeds[0].location is SeedLocation.TUBE
        assert state.seeds[0].tube == 0

    def test_episode_ends_at_max_steps(self):
        """Test the step budget."""
        state, _ = env_reset(one_seed_config(max_steps=5))
        flags = drive(state, state.gripper, 5)
        assert flags[-1].episode_done and not any(f.episode_done for f in flags[:-1])
        assert state.step == 5

    def test_invariants_under_random_actions(self):
        """Test conservation and monotone counters over random rollouts."""
        rng = np.random.default_rng(0)
        for stream in range(5):
            state, _ = env_reset(EnvConfig(rng_seed=99, p_slip=0.5), stream)
            n_seeds = len(state.seeds)
            attempts = 0
            picked_before = False
            while not state.done:
                seed = state.seeds[rng.integers(n_seeds)]
                action = (seed.x, seed.y, rng.uniform(0.0, 0.7), rng.uniform(0.0, 1.0))
                state, obs, flags = env_step(state, action)
                assert len(state.seeds) == n_seeds
                in_gripper = [i for i, s in enumerate(state.seeds) if s.location is SeedLocation.GRIPPER]
                assert in_gripper == ([] if state.held_seed is None else [state.held_seed])
                assert flags.grasp_attempts >= attempts
                attempts = flags.grasp_attempts
                if flags.delivery_success:
                    assert picked_before or flags.pick_success
                picked_before = picked_before or flags.pick_success
                assert expected_force(state)[2] <= FORCE_CAP
                assert state.step <= state.config.max_steps
                np.testing.assert_array_equal(obs.proprio, np.float32(state.gripper))
                assert obs.image.min() >= 0.0 and obs.image.max() <= 1.0

    def test_trajectories_are_deterministic(self):
        """Test that the same config and actions give identical observations and flags."""
        actions = np.random.default_rng(1).uniform(0.0, 1.0, size=(40, 4))
        runs = []
        for _ in range(2):
            state, obs = env_reset(EnvConfig(rng_seed=3, p_slip=0.5), 2)
            trace = [obs]
            for action in actions:
                state, obs, flags = env_step(state, action)
                trace.append((obs, flags))
            runs.append(trace)
        assert runs[0] == runs[1]


class TestForce:
    """Test the soft-finger force model."""

    def _holding(self, multiplier: float, aperture: float) -> EnvState:
        state, _ = env_reset(one_seed_config(seed_size_multiplier=multiplier))
        seed = state.seeds[0]
        state.gripper = (seed.x, seed.y, 0.15, aperture)
        state.held_seed = 0
        state.seeds[0] = seed.moved(seed.x, seed.y, SeedLocation.GRIPPER)
        return state

    def test_no_contact(self):
        """Test that an open, empty gripper feels nothing."""
        state, _ = env_reset(one_seed_config())
        np.testing.assert_array_equal(expected_force(state), [0.0, 0.0, 0.0])

    def test_loaded_in_distribution(self):
        """Test the closed grip on a default seed."""
        assert expected_force(self._holding(1.0, 0.0))[2] == pytest.approx(0.75)

    def test_oversized_seed_exceeds_training_force(self):
        """Test the 2.63x seed reads near the cap."""
        f_z = expected_force(self._holding(2.63, 0.0))[2]
        assert f_z == pytest.approx(1.9725, abs=1e-9)
        assert f_z > 0.75

    def test_self_contact(self):
        """Test the empty-closure reading."""
        state, _ = env_reset(one_seed_config())
        state.gripper = (0.5, 0.15, 0.15, 0.0)
        assert expected_force(state)[2] == 0.15
        state.gripper = (0.5, 0.15, 0.15, 0.5)
        assert expected_force(state)[2] == 0.0

    def test_no_crush(self):
        """Test saturation for every aperture and seed size."""
        for multiplier in (0.5, 1.0, 2.63, 5.0):
            for aperture in np.linspace(0.0, 1.0, 21):
                assert expected_force(self._holding(multiplier, float(aperture)))[2] <= FORCE_CAP

    def test_noise_statistics(self):
        """Test that readout noise is zero-mean with the configured spread."""
        state = self._holding(1.0, 0.0)
        rng = np.random.default_rng(0)
        readings = np.array([force_readout(state, rng) for _ in range(4000)])
        np.testing.assert_allclose(readings.mean(axis=0), [0.0, 0.0, 0.75], atol=0.002)
        np.testing.assert_allclose(readings.std(axis=0), [FORCE_NOISE] * 3, rtol=0.1)


class TestRender:
    """Test the top-down camera."""

    def test_empty_workspace(self):
        """Test that only dish, tubes and gripper differ from the background."""
        state, _ = env_reset(one_seed_config())
        state.seeds = []
        image = render_observation(state).image
        allowed = np.float32([0.1, 0.3, 0.5, 0.6, 0.7])
        assert np.all(np.isin(image, allowed))
        assert image[0, 0] == np.float32(0.1)

    def test_target_tube_is_brighter(self):
        """Test tube intensities."""
        state, _ = env_reset(one_seed_config())
        image = render_observation(state).image
        for index, tube_x in enumerate(TUBE_XS):
            expected = 0.7 if index == state.target_tube else 0.5
            assert image[pixel(TUBE_Y), pixel(tube_x)] == np.float32(expected)

    def test_low_contrast_seed(self):
        """Test that a 0.1-contrast seed renders at 0.09."""
        state, _ = env_reset(one_seed_config(seed_contrast=0.1))
        seed = state.seeds[0]
        image = render_observation(state).image
        assert image[pixel(seed.y), pixel(seed.x)] == pytest.approx(0.09, abs=1e-6)

    def test_tubed_seed_not_drawn(self):
        """Test that a delivered seed disappears from the image."""
        state, _ = env_reset(one_seed_config())
        before = render_observation(state).image
        seed = state.seeds[0]
        state.seeds[0] = seed.moved(TUBE_XS[0], TUBE_Y, SeedLocation.TUBE, 0)
        after = render_observation(state).image
        assert after[pixel(seed.y), pixel(seed.x)] != before[pixel(seed.y), pixel(seed.x)]
        assert after[pixel(TUBE_Y), pixel(TUBE_XS[0])] == np.float32(0.5)

    def test_occlusion_hides_the_grasp(self):
        """Test that loaded and empty closed grippers look identical but feel different."""
        rng = np.random.default_rng(42)
        for trial in range(100):
            base, _ = env_reset(EnvConfig(rng_seed=int(rng.integers(2**31))), trial)
            index = int(rng.integers(len(base.seeds)))
            seed = base.seeds[index]
            pose = (seed.x, seed.y, float(rng.uniform(0.0, 1.0)), 0.0)

            loaded = dataclasses.replace(base, seeds=list(base.seeds), gripper=pose, held_seed=index)
            loaded.seeds[index] = seed.moved(seed.x, seed.y, SeedLocation.GRIPPER)
            empty = dataclasses.replace(base, seeds=list(base.seeds), gripper=pose, held_seed=None)

            np.testing.assert_array_equal(render_observation(loaded).image, render_observation(empty).image)
            assert expected_force(loaded)[2] - expected_force(empty)[2] >= 0.5
