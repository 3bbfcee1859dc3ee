"""Dataset manifest: counts, seeds, format version and per-file checksums."""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict

from haptic_act.errors import ChecksumError, DatasetFormatError, FormatVersionError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


def bytes_checksum(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class DatasetManifest:
    """Manages the manifest file of one dataset directory."""

    def __init__(self, dataset_dir: Path):
        """
        Initialize manifest.

        Args:
            dataset_dir: Directory holding manifest.json and the episode files.
        """
        self.dataset_dir = Path(dataset_dir)
        self.manifest_path = self.dataset_dir / MANIFEST_NAME

    def create(self, base_seed: int, n_success: int, n_recovery: int) -> Dict[str, Any]:
        """Return a fresh, empty manifest document (not yet written)."""
        total = n_success + n_recovery
        return {
            "format_version": FORMAT_VERSION,
            "base_seed": base_seed,
            "n_success": n_success,
            "n_recovery": n_recovery,
            "recovery_fraction": n_recovery / total if total else 0.0,
            "episodes": [],
        }

    def read(self) -> Dict[str, Any]:
        """
        Read and validate the manifest file.

        Raises:
            DatasetFormatError: If the manifest is missing or malformed.
            FormatVersionError: If it was written by an unsupported format version.
        """
        if not self.manifest_path.exists():
            raise DatasetFormatError(f"No manifest found at {self.manifest_path}")
        try:
            with open(self.manifest_path) as f:
                data: Dict[str, Any] = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"Malformed manifest {self.manifest_path}: {e}") from e
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise FormatVersionError(
                f"Unsupported dataset format version {version} in {self.manifest_path} (expected {FORMAT_VERSION})"
            )
        episodes = data.get("episodes")
        if not isinstance(episodes, list):
            raise DatasetFormatError(f"Manifest {self.manifest_path} has no episode list")
        n_recovery = sum(1 for e in episodes if e.get("is_recovery"))
        if data.get("n_recovery") != n_recovery or data.get("n_success") != len(episodes) - n_recovery:
            raise DatasetFormatError(
                f"Manifest counts ({data.get('n_success')}/{data.get('n_recovery')}) do not match its "
                f"{len(episodes)} episode entries"
            )
        return data

    def write(self, data: Dict[str, Any]) -> None:
        """Write the manifest canonically (sorted keys, two-space indent)."""
        self.dataset_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    def add_episode(self, data: Dict[str, Any], file_name: str, payload: bytes, metadata: Dict[str, Any]) -> None:
        """
        Append an episode entry with the checksum of its file contents.

        Args:
            data: Manifest document being built.
            file_name: Episode file name relative to the dataset directory.
            payload: Exact bytes written to that file.
            metadata: Per-episode fields (seeds, flags, phase trace, config snapshot).
        """
        entry = dict(metadata)
        entry["file"] = file_name
        entry["sha256"] = bytes_checksum(payload)
        data["episodes"].append(entry)

    def verify(self, entry: Dict[str, Any], payload: bytes) -> None:
        """
        Check the bytes read from an episode file against its recorded checksum.

        Raises:
            ChecksumError: If the bytes do not hash to the recorded value.
        """
        path = self.dataset_dir / entry["file"]
        actual = bytes_checksum(payload)
        if actual != entry["sha256"]:
            raise ChecksumError(str(path), entry["sha256"], actual)
