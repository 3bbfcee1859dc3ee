"""Tests for chunk buffering, temporal ensembling and rollouts."""

import numpy as np
import pytest

from haptic_act.config import EnvConfig, PolicyConfig
from haptic_act.controller import (
    FLAG_DELIVERED,
    FLAG_GRASP_ACQUIRED,
    FLAG_HOLDING,
    ChunkBuffer,
    TrainedPolicy,
    ensembled_action,
    push_chunk,
    rollout,
    total_variation,
)
from haptic_act.env import EnvState, Observation
from haptic_act.errors import ConfigurationError, ContractError, DimensionError
from haptic_act.expert import GRASP_FORCE_THRESHOLD, ExpertChunkPolicy
from haptic_act.policy import ModelParams


class HoldPolicy:
    """Keeps commanding the pose the episode started in."""

    def __init__(self, horizon: int = 3):
        self.horizon = horizon
        self.pose = np.zeros(4)

    def begin_episode(self, state: EnvState) -> None:
        self.pose = np.asarray(state.gripper)

    def predict_chunk(self, obs: Observation) -> np.ndarray:
        return np.tile(self.pose, (self.horizon, 1))


def weighted_oracle(chunks, t: int, m: float) -> np.ndarray:
    """Predictions for t, oldest first, with weights exp(-m * i)."""
    predictions = [chunk[t - start] for start, chunk in sorted(chunks.items()) if 0 <= t - start < len(chunk)]
    weights = np.exp(-m * np.arange(len(predictions)))
    return (weights[:, None] * np.stack(predictions)).sum(axis=0) / weights.sum()


class TestEnsembling:
    """Test the exponentially weighted ensemble."""

    def test_random_buffers_match_oracle(self):
        """Test 1000 random buffers against a direct weighted mean."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            k = int(rng.integers(1, 11))
            m = float(rng.uniform(0.0, 1.0))
            t = int(rng.integers(0, 20))
            starts = [s for s in range(max(0, t - k + 1), t + 1) if rng.random() < 0.7] or [t]
            chunks = {s: rng.uniform(0.0, 1.0, size=(k, 4)) for s in starts}
            buffer = ChunkBuffer(k, m)
            for start in starts:
                push_chunk(buffer, start, chunks[start])
            np.testing.assert_allclose(ensembled_action(buffer, t, m), weighted_oracle(chunks, t, m), atol=1e-12)

    def test_single_prediction(self):
        """Test that one prediction is returned as is."""
        buffer = ChunkBuffer(3).push(0, np.full((3, 4), 0.25))
        np.testing.assert_array_equal(buffer.ensembled_action(2), np.full(4, 0.25))

    def test_zero_rate_is_plain_mean(self):
        """Test m = 0."""
        buffer = ChunkBuffer(2, m=0.0)
        buffer.push(0, np.array([[0.0] * 4, [0.2] * 4]))
        buffer.push(1, np.array([[0.6] * 4, [0.0] * 4]))
        np.testing.assert_allclose(buffer.ensembled_action(1), np.full(4, 0.4), atol=1e-15)

    def test_orientation(self):
        """Test oldest-first against newest-first weighting."""
        old, new = np.array([[0.0] * 4, [0.0] * 4]), np.array([[1.0] * 4, [1.0] * 4])
        oldest = ChunkBuffer(2, m=1.0).push(0, old).push(1, new).ensembled_action(1)
        newest = ChunkBuffer(2, m=1.0, orientation="newest").push(0, old).push(1, new).ensembled_action(1)
        expected = 1.0 / (1.0 + np.e)
        np.testing.assert_allclose(oldest, np.full(4, expected), atol=1e-15)
        np.testing.assert_allclose(newest, np.full(4, 1.0 - expected), atol=1e-15)
        assert oldest[0] < 0.5 < newest[0]

    def test_result_is_clamped(self):
        """Test the [0, 1] clamp on the ensembled action."""
        buffer = ChunkBuffer(1).push(0, np.array([[1.5, -0.5, 0.5, 0.5]]))
        np.testing.assert_array_equal(buffer.ensembled_action(0), [1.0, 0.0, 0.5, 0.5])

    def test_old_timesteps_pruned(self):
        """Test that the buffer forgets timesteps already executed."""
        buffer = ChunkBuffer(3).push(0, np.zeros((3, 4))).push(2, np.zeros((3, 4)))
        assert sorted(buffer.entries) == [2, 3, 4]
        assert len(buffer) == 4
        assert len(buffer.predictions(2)) == 2


class TestBufferErrors:
    """Test push and lookup preconditions."""

    def test_wrong_chunk_shape(self):
        with pytest.raises(DimensionError):
            ChunkBuffer(3).push(0, np.zeros((2, 4)))

    def test_time_must_advance(self):
        buffer = ChunkBuffer(2).push(3, np.zeros((2, 4)))
        with pytest.raises(ContractError):
            buffer.push(3, np.zeros((2, 4)))

    def test_nothing_buffered(self):
        with pytest.raises(ContractError):
            ChunkBuffer(2).ensembled_action(0)

    def test_invalid_settings(self):
        with pytest.raises(ConfigurationError):
            ChunkBuffer(0)
        with pytest.raises(ConfigurationError):
            ChunkBuffer(2, orientation="middle")


class TestTotalVariation:
    def test_values(self):
        """Test the summed absolute differences."""
        actions = np.array([[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.5]])
        assert total_variation(actions) == pytest.approx(2.5)
        assert total_variation(actions[:1]) == 0.0

    def test_ensembling_smooths(self):
        """Test that blending jittery chunks lowers total variation."""
        rng = np.random.default_rng(4)
        raw = rng.uniform(0.3, 0.7, size=(60, 5, 4))
        buffer = ChunkBuffer(5, m=0.1)
        blended = []
        for t, chunk in enumerate(raw):
            buffer.push(t, chunk)
            blended.append(buffer.ensembled_action(t))
        assert total_variation(np.array(blended)) < total_variation(raw[:, 0])


class TestRollout:
    """Test closed-loop episodes."""

    def test_hold_policy_times_out(self):
        """Test a policy that never moves."""
        outcome = rollout(EnvConfig(max_steps=10), HoldPolicy())
        assert outcome.result.steps_used == 10
        assert not outcome.result.delivery_success
        assert not outcome.result.loop_failure
        assert [row.step for row in outcome.trace] == list(range(1, 11))
        assert not outcome.images

    def test_expert_rollout_flags(self):
        """Test trace flags of a delivered episode."""
        config = EnvConfig(rng_seed=2, p_slip=0.0)
        outcome = rollout(config, ExpertChunkPolicy(), m=0.0, record_steps=True)
        assert outcome.result.delivery_success
        assert outcome.trace[-1].phase_flags & FLAG_DELIVERED
        assert any(row.phase_flags & FLAG_GRASP_ACQUIRED for row in outcome.trace)
        assert any(row.phase_flags & FLAG_HOLDING for row in outcome.trace)
        assert len(outcome.actions) == outcome.result.steps_used == len(outcome.trace)
        assert outcome.final_state is not None and outcome.final_state.done

    def test_force_trace_of_successful_pick(self):
        """Test that f_z rises above the grasp threshold only while the seed is held shut."""
        outcome = rollout(EnvConfig(rng_seed=2, p_slip=0.0), ExpertChunkPolicy(), m=0.0)
        assert outcome.result.delivery_success
        trace = outcome.trace
        first_grasp = next(i for i, row in enumerate(trace) if row.phase_flags & FLAG_GRASP_ACQUIRED)
        assert first_grasp > 0
        assert all(abs(row.f_z) < 0.1 for row in trace[:first_grasp])
        clamped = [row for row in trace if row.phase_flags & FLAG_HOLDING and row.g <= 0.1]
        assert len(clamped) >= 5
        assert all(row.f_z > GRASP_FORCE_THRESHOLD for row in clamped)
        assert trace[-1].phase_flags & FLAG_DELIVERED
        assert not trace[-1].phase_flags & FLAG_HOLDING
        assert abs(trace[-1].f_z) < 0.1

    def test_repeated_slips_are_loop_failures(self):
        """Test that an expert whose every lift slips ends in a loop failure."""
        outcome = rollout(EnvConfig(rng_seed=3, p_slip=1.0), ExpertChunkPolicy(), m=0.0)
        assert not outcome.result.pick_success
        assert outcome.result.grasp_attempts >= 3
        assert outcome.result.loop_failure

    def test_trained_policy_is_deterministic(self):
        """Test that a trained model gives the same trace twice."""
        cfg = PolicyConfig(d_model=8, n_heads=2, ffn_dim=16, z_dim=4, chunk_k=3, n_encoder_layers=1, n_decoder_layers=1)
        params = ModelParams.initialize(cfg, np.random.default_rng(0))
        config = EnvConfig(rng_seed=5, max_steps=8)
        first = rollout(config, TrainedPolicy(params, cfg), stream=1)
        second = rollout(config, TrainedPolicy(params, cfg), stream=1)
        assert first.trace == second.trace
        assert first.result == second.result
        assert len(first.trace) == 8
