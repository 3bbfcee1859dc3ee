"""Tests for demonstration generation and dataset persistence."""

import json
import tempfile
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from haptic_act.config import EnvConfig
from haptic_act.dataset import (
    MAX_GENERATION_ATTEMPTS,
    ExpertTimeout,
    build_dataset,
    generate_episode,
    load_dataset,
    save_dataset,
)
from haptic_act.env import env_reset, env_step
from haptic_act.errors import (
    ChecksumError,
    ConfigurationError,
    DatasetFormatError,
    FormatVersionError,
    GenerationError,
    TruncatedFileError,
)
from haptic_act.manifest import MANIFEST_NAME


@pytest.fixture(scope="module")
def small_dataset():
    """Four success episodes and one recovery episode."""
    return build_dataset(4, 1, base_seed=7)


class TestBuildDataset:
    """Test dataset assembly."""

    def test_layout(self, small_dataset):
        """Test ordering, tube cycling and seeds."""
        assert len(small_dataset) == 5
        assert [e.target_tube for e in small_dataset.episodes] == [0, 1, 2, 3, 0]
        assert [e.is_recovery for e in small_dataset.episodes] == [False] * 4 + [True]
        assert [e.config.rng_seed for e in small_dataset.episodes] == [7 ^ i for i in range(5)]
        assert all(e.config.p_slip == 0.0 for e in small_dataset.episodes)
        assert small_dataset.recovery_fraction == pytest.approx(0.2)

    def test_every_episode_delivers(self, small_dataset):
        """Test that only delivered episodes are kept."""
        for episode in small_dataset.episodes:
            assert episode.delivery_success
            assert len(episode.phases) == len(episode)
        recovery = small_dataset.episodes[-1]
        assert recovery.forced_slip and recovery.grasp_attempts >= 2

    def test_without_recovery(self, small_dataset):
        """Test the ablation subset."""
        subset = small_dataset.without_recovery()
        assert len(subset) == 4
        assert subset.n_recovery == 0
        assert subset.episodes == small_dataset.episodes[:4]

    def test_invalid_counts(self):
        """Test that an empty request is rejected."""
        with pytest.raises(ConfigurationError):
            build_dataset(0, 0, base_seed=1)
        with pytest.raises(ConfigurationError):
            build_dataset(-1, 2, base_seed=1)

    def test_workers_do_not_change_output(self, small_dataset):
        """Test that threaded generation gives the same episodes."""
        assert build_dataset(4, 1, base_seed=7, workers=3).episodes == small_dataset.episodes

    def test_replay_reproduces_observations(self, small_dataset):
        """Test that recorded actions replay to the recorded observations."""
        for episode in (small_dataset.episodes[1], small_dataset.episodes[-1]):
            state, obs = env_reset(episode.config, episode.stream)
            state.force_slip_next_lift = episode.forced_slip
            for t in range(len(episode)):
                assert obs == episode.observation(t)
                state, obs, flags = env_step(state, episode.actions[t])
            assert flags.delivery_success
            assert flags.grasp_attempts == episode.grasp_attempts


class TestGenerateEpisode:
    """Test the retry loop around the expert."""

    def test_gives_up_after_max_attempts(self):
        """Test that consecutive timeouts raise a generation error."""
        with patch("haptic_act.dataset._roll_expert", side_effect=ExpertTimeout("timeout")) as roll:
            with pytest.raises(GenerationError):
                generate_episode(EnvConfig(rng_seed=3))
        assert roll.call_count == MAX_GENERATION_ATTEMPTS

    def test_retries_on_fresh_streams(self):
        """Test that attempt n uses stream n."""
        episode = object()
        with patch(
            "haptic_act.dataset._roll_expert",
            side_effect=[ExpertTimeout("a"), ExpertTimeout("b"), episode],
        ) as roll:
            assert generate_episode(EnvConfig(rng_seed=3), True) is episode
        assert [c.args[2] for c in roll.call_args_list] == [0, 1, 2]
        assert all(c.args[1] is True for c in roll.call_args_list)


class TestPersistence:
    """Test save/load and integrity checks."""

    def test_round_trip(self, small_dataset):
        """Test that a loaded dataset equals the saved one."""
        with tempfile.TemporaryDirectory() as tmpdir:
            save_dataset(small_dataset, Path(tmpdir))
            loaded = load_dataset(Path(tmpdir))
            assert loaded.episodes == small_dataset.episodes
            assert loaded.base_seed == 7
            assert loaded.env_config == small_dataset.env_config

    def test_saves_are_byte_identical(self, small_dataset):
        """Test deterministic file contents."""
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            save_dataset(small_dataset, Path(a))
            save_dataset(small_dataset, Path(b))
            names = sorted(p.name for p in Path(a).iterdir())
            assert names == sorted(p.name for p in Path(b).iterdir())
            for name in names:
                assert (Path(a) / name).read_bytes() == (Path(b) / name).read_bytes()

    def test_manifest_contents(self, small_dataset):
        """Test the recorded counts and per-episode metadata."""
        with tempfile.TemporaryDirectory() as tmpdir:
            save_dataset(small_dataset, Path(tmpdir))
            data = json.loads((Path(tmpdir) / MANIFEST_NAME).read_text())
            assert data["format_version"] == 1
            assert (data["n_success"], data["n_recovery"]) == (4, 1)
            assert data["base_seed"] == 7
            assert [e["file"] for e in data["episodes"]] == [f"episode_{i:05d}.bin" for i in range(5)]
            assert data["episodes"][4]["is_recovery"] is True

    def test_corrupt_byte(self, small_dataset):
        """Test that one flipped byte is caught and the file named."""
        with tempfile.TemporaryDirectory() as tmpdir:
            save_dataset(small_dataset, Path(tmpdir))
            target = Path(tmpdir) / "episode_00002.bin"
            payload = bytearray(target.read_bytes())
            payload[len(payload) // 2] ^= 0xFF
            target.write_bytes(bytes(payload))
            with pytest.raises(ChecksumError, match="episode_00002.bin") as exc_info:
                load_dataset(Path(tmpdir))
            assert exc_info.value.path.endswith("episode_00002.bin")

    def test_corrupt_header_byte(self, small_dataset):
        """Test that a damaged length field is a checksum failure, not a truncation."""
        with tempfile.TemporaryDirectory() as tmpdir:
            save_dataset(small_dataset, Path(tmpdir))
            target = Path(tmpdir) / "episode_00000.bin"
            payload = bytearray(target.read_bytes())
            payload[4] ^= 0xFF
            target.write_bytes(bytes(payload))
            with pytest.raises(ChecksumError, match="episode_00000.bin"):
                load_dataset(Path(tmpdir))

    def test_truncated_file(self, small_dataset):
        """Test that a short episode file is reported as truncated."""
        with tempfile.TemporaryDirectory() as tmpdir:
            save_dataset(small_dataset, Path(tmpdir))
            target = Path(tmpdir) / "episode_00001.bin"
            target.write_bytes(target.read_bytes()[:-16])
            with pytest.raises(TruncatedFileError):
                load_dataset(Path(tmpdir))

    def test_version_mismatch(self, small_dataset):
        """Test that another format version is refused."""
        with tempfile.TemporaryDirectory() as tmpdir:
            save_dataset(small_dataset, Path(tmpdir))
            manifest_path = Path(tmpdir) / MANIFEST_NAME
            data = json.loads(manifest_path.read_text())
            data["format_version"] = 2
            manifest_path.write_text(json.dumps(data))
            with pytest.raises(FormatVersionError):
                load_dataset(Path(tmpdir))

    def test_missing_manifest(self):
        """Test loading a directory that is not a dataset."""
        with tempfile.TemporaryDirectory() as tmpdir:
            with pytest.raises(DatasetFormatError):
                load_dataset(Path(tmpdir))

    def test_observations_are_float32(self, small_dataset):
        """Test the stored dtype."""
        episode = small_dataset.episodes[0]
        for array in (episode.images, episode.forces, episode.proprios, episode.actions):
            assert array.dtype == np.float32
