"""Tests for logger setup and stage timing."""

import logging
import tempfile
from logging.handlers import RotatingFileHandler
from pathlib import Path
from unittest.mock import patch

import pytest

from haptic_act.logger import StageTimer, env_log_level, get_logger, get_sim_logger, setup_logger


class TestSetupLogger:
    """Test handler configuration."""

    def test_handlers(self):
        """Test one stdout handler and one rotating file handler."""
        with tempfile.TemporaryDirectory() as tmpdir:
            log_file = Path(tmpdir) / "nested" / "sim.log"
            logger = setup_logger("test_handlers", log_file=log_file, max_bytes=1024, backup_count=2)
            assert logger.name == "haptic_act.test_handlers"
            assert not logger.propagate
            file_handlers = [h for h in logger.handlers if isinstance(h, RotatingFileHandler)]
            assert len(logger.handlers) == 2 and len(file_handlers) == 1
            assert file_handlers[0].maxBytes == 1024 and file_handlers[0].backupCount == 2

            logger.info("episode_collected stream=3")
            file_handlers[0].flush()
            assert "episode_collected stream=3" in log_file.read_text()
            for handler in logger.handlers:
                handler.close()

    def test_no_duplicate_handlers(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            setup_logger("test_dupes", log_file=Path(tmpdir) / "a.log")
            logger = setup_logger("test_dupes", log_file=Path(tmpdir) / "a.log", level=logging.DEBUG)
            assert len(logger.handlers) == 2
            assert logger.level == logging.DEBUG
            for handler in logger.handlers:
                handler.close()

    def test_log_dir_from_environment(self, monkeypatch):
        """Test that HAPTIC_ACT_LOG_DIR decides the default file location."""
        with tempfile.TemporaryDirectory() as tmpdir:
            monkeypatch.setenv("HAPTIC_ACT_LOG_DIR", str(Path(tmpdir) / "logs"))
            logger = setup_logger("test_env_dir")
            assert (Path(tmpdir) / "logs" / "test_env_dir.log").exists()
            for handler in logger.handlers:
                handler.close()

    def test_level_from_environment(self, monkeypatch):
        monkeypatch.setenv("HAPTIC_ACT_LOG_LEVEL", "warning")
        assert env_log_level() == logging.WARNING
        monkeypatch.setenv("HAPTIC_ACT_LOG_LEVEL", "chatty")
        assert env_log_level() == logging.INFO
        monkeypatch.delenv("HAPTIC_ACT_LOG_LEVEL")
        assert env_log_level() == logging.INFO


class TestGetLogger:
    """Test the shared component loggers."""

    def test_cached(self):
        assert get_sim_logger() is get_logger("sim")
        assert get_logger("experiment").name == "haptic_act.experiment"

    def test_unknown_component(self):
        with pytest.raises(ValueError, match="Unknown log component"):
            get_logger("renderer")


class TestStageTimer:
    """Test stage timing."""

    def test_tracks_stages(self):
        clock = iter([0.0, 1.0, 1.5, 2.0, 2.25, 3.0])
        with patch("haptic_act.logger.time.perf_counter", side_effect=lambda: next(clock)):
            timer = StageTimer()
            timer.start()
            with timer.track("train"):
                pass
            with timer.track("train"):
                pass
            assert timer.get_timing("train") == 750.0
            assert timer.get_timing("eval") is None
            assert timer.stages == {"train": 750.0}
            assert timer.format_log("grid_completed") == "grid_completed total_ms=3000.00 train_ms=750.00"

    def test_not_started(self):
        timer = StageTimer()
        assert timer.get_total_ms() == 0.0
        assert timer.format_log() == "total_ms=0.00"
