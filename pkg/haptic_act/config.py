"""Experiment configuration: environment, policy, dataset and harness settings.

Values are resolved with the precedence CLI flags > config file > environment
variables > defaults. Config files are YAML or TOML with one section per
settings group (``env``, ``policy``, ``dataset``, ``harness``).
"""

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

import yaml

from haptic_act.errors import ConfigurationError

try:
    import tomli  # type: ignore[import-not-found]
except ImportError:
    tomli = None

N_TUBES = 4
ENSEMBLE_ORIENTATIONS = ("oldest", "newest")

T = TypeVar("T")


@dataclass(frozen=True)
class EnvConfig:
    """Settings of the seed-transfer environment."""

    n_seeds_range: Tuple[int, int] = (1, 7)
    dish_center_jitter: float = 0.05
    seed_size_multiplier: float = 1.0
    seed_contrast: float = 1.0
    p_slip: float = 0.3
    max_steps: int = 125
    rng_seed: int = 0
    target_tube: Optional[int] = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """Raise ConfigurationError if any field is out of range."""
        low, high = self.n_seeds_range
        if low < 1 or low > high:
            raise ConfigurationError(f"Invalid n_seeds_range: {self.n_seeds_range} (need 1 <= lower <= upper)")
        if self.dish_center_jitter < 0:
            raise ConfigurationError(f"Invalid dish_center_jitter: {self.dish_center_jitter}")
        if self.seed_size_multiplier <= 0:
            raise ConfigurationError(f"Invalid seed_size_multiplier: {self.seed_size_multiplier}")
        if not 0.0 < self.seed_contrast <= 1.0:
            raise ConfigurationError(f"Invalid seed_contrast: {self.seed_contrast} (must be in (0, 1])")
        if not 0.0 <= self.p_slip <= 1.0:
            raise ConfigurationError(f"Invalid p_slip: {self.p_slip} (must be in [0, 1])")
        if self.max_steps < 1:
            raise ConfigurationError(f"Invalid max_steps: {self.max_steps}")
        if self.target_tube is not None and not 0 <= self.target_tube < N_TUBES:
            raise ConfigurationError(f"Invalid target_tube: {self.target_tube} (must be 0..{N_TUBES - 1})")

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "EnvConfig":
        return _section_from_mapping(cls, values, "env")


@dataclass(frozen=True)
class PolicyConfig:
    """Architecture and training hyperparameters of the chunking policy."""

    chunk_k: int = 10
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    ffn_dim: int = 128
    z_dim: int = 16
    beta_kl: float = 10.0
    haptic_enabled: bool = True
    lr: float = 1e-3
    train_steps: int = 3000
    batch_size: int = 8
    rng_seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """Raise ConfigurationError if the architecture cannot be built."""
        for name in ("chunk_k", "d_model", "n_heads", "ffn_dim", "z_dim", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"Invalid {name}: {getattr(self, name)} (must be >= 1)")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.n_encoder_layers < 0 or self.n_decoder_layers < 0:
            raise ConfigurationError("Layer counts must be non-negative")
        if self.beta_kl < 0:
            raise ConfigurationError(f"Invalid beta_kl: {self.beta_kl}")
        if self.lr <= 0:
            raise ConfigurationError(f"Invalid lr: {self.lr}")
        if self.train_steps < 0:
            raise ConfigurationError(f"Invalid train_steps: {self.train_steps}")

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "PolicyConfig":
        return _section_from_mapping(cls, values, "policy")


@dataclass(frozen=True)
class DatasetProfile:
    """How many success and recovery demonstrations to collect."""

    n_success: int = 160
    n_recovery: int = 40
    name: str = "scaled"

    PRESETS = {"scaled": (160, 40), "small": (40, 10)}

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.n_success < 0 or self.n_recovery < 0:
            raise ConfigurationError(
                f"Episode counts must be non-negative, got {self.n_success}/{self.n_recovery}"
            )
        if self.n_success + self.n_recovery < 1:
            raise ConfigurationError("A dataset needs at least one episode")

    @property
    def total(self) -> int:
        return self.n_success + self.n_recovery

    @property
    def recovery_fraction(self) -> float:
        return self.n_recovery / self.total

    @classmethod
    def preset(cls, name: str) -> "DatasetProfile":
        """Return a named profile ("scaled" or "small")."""
        if name not in cls.PRESETS:
            raise ConfigurationError(f"Unknown dataset profile '{name}' (known: {', '.join(cls.PRESETS)})")
        n_success, n_recovery = cls.PRESETS[name]
        return cls(n_success=n_success, n_recovery=n_recovery, name=name)

    def with_recovery_fraction(self, fraction: float) -> "DatasetProfile":
        """
        Keep the total episode count and re-split it at the given recovery fraction.

        Args:
            fraction: Share of recovery episodes in [0, 1].

        Returns:
            New profile named after the fraction, e.g. ``scaled@0.30``.
        """
        if not 0.0 <= fraction <= 1.0:
            raise ConfigurationError(f"Invalid recovery fraction: {fraction}")
        n_recovery = int(round(self.total * fraction))
        return DatasetProfile(
            n_success=self.total - n_recovery,
            n_recovery=n_recovery,
            name=f"{self.name}@{fraction:.2f}",
        )

    def without_recovery(self) -> "DatasetProfile":
        """The ablation profile: same success episodes, no recovery episodes."""
        return DatasetProfile(n_success=self.n_success, n_recovery=0, name=f"{self.name}-norecovery")

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "DatasetProfile":
        values = dict(values)
        if set(values) == {"name"}:
            return cls.preset(values["name"])
        return _section_from_mapping(cls, values, "dataset")


@dataclass(frozen=True)
class HarnessConfig:
    """Evaluation and experiment-driver settings."""

    master_seed: int = 0
    n_eval_trials: int = 100
    ensemble_m: float = 0.1
    ensemble_orientation: str = "oldest"
    workers: int = 1
    force_traces: int = 1
    recovery_fractions: Tuple[float, ...] = (0.0, 0.1, 0.2, 0.3)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.n_eval_trials < 0:
            raise ConfigurationError(f"Invalid n_eval_trials: {self.n_eval_trials}")
        if self.ensemble_m < 0:
            raise ConfigurationError(f"Invalid ensemble_m: {self.ensemble_m}")
        if self.ensemble_orientation not in ENSEMBLE_ORIENTATIONS:
            raise ConfigurationError(
                f"Invalid ensemble_orientation: {self.ensemble_orientation!r} "
                f"(expected one of {', '.join(ENSEMBLE_ORIENTATIONS)})"
            )
        if self.workers < 1:
            raise ConfigurationError(f"Invalid workers: {self.workers}")
        if self.force_traces < 0:
            raise ConfigurationError(f"Invalid force_traces: {self.force_traces}")
        for fraction in self.recovery_fractions:
            if not 0.0 <= fraction <= 1.0:
                raise ConfigurationError(f"Invalid recovery fraction: {fraction}")

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "HarnessConfig":
        return _section_from_mapping(cls, values, "harness")


def _to_plain(config: object) -> Dict[str, Any]:
    """Convert a config dataclass into JSON/YAML-friendly primitives."""
    plain: Dict[str, Any] = {}
    for key, value in dataclasses.asdict(config).items():  # type: ignore[call-overload]
        plain[key] = list(value) if isinstance(value, tuple) else value
    return plain


def _section_from_mapping(cls: Type[T], values: Mapping[str, Any], section: str) -> T:
    """
    Build a config dataclass from a mapping, rejecting unknown keys.

    Args:
        cls: Config dataclass to build.
        values: Raw key-value pairs from a file section or a snapshot.
        section: Section name used in error messages.

    Returns:
        The validated config instance.
    """
    if not isinstance(values, Mapping):
        raise ConfigurationError(f"Section '{section}' must be a mapping, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"Unknown key(s) in '{section}' section: {', '.join(unknown)}")
    kwargs = {key: tuple(value) if isinstance(value, list) else value for key, value in values.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"Invalid value in '{section}' section: {e}") from e


_SECTIONS: Dict[str, Type[Any]] = {
    "env": EnvConfig,
    "policy": PolicyConfig,
    "dataset": DatasetProfile,
    "harness": HarnessConfig,
}


class ExperimentConfig:
    """Manages experiment configuration from config file, environment variables and CLI flags."""

    DEFAULT_CONFIG_DIR = Path.home() / ".haptic-act"
    DEFAULT_CONFIG_YAML = DEFAULT_CONFIG_DIR / "config.yaml"
    DEFAULT_CONFIG_TOML = DEFAULT_CONFIG_DIR / "config.toml"

    def __init__(self, config_file: Optional[Path] = None, master_seed: Optional[int] = None):
        """
        Initialize experiment configuration.

        Args:
            config_file: Optional path to config file. If None, uses HAPTIC_ACT_CONFIG or the
                        default locations.
            master_seed: Master seed from the CLI. If None, reads from config file, then
                        HAPTIC_ACT_SEED, then defaults to 0.
        """
        # Track which settings were provided via CLI args
        self._cli_overrides: set = set()

        config_data = self._load_config_file(config_file)

        self.env: EnvConfig = EnvConfig.from_dict(config_data.get("env") or {})
        self.policy: PolicyConfig = PolicyConfig.from_dict(config_data.get("policy") or {})
        self.dataset: DatasetProfile = DatasetProfile.from_dict(config_data.get("dataset") or {})
        self.harness: HarnessConfig = HarnessConfig.from_dict(config_data.get("harness") or {})

        if master_seed is not None:
            self.overridden("harness", master_seed=master_seed)
        elif "master_seed" not in (config_data.get("harness") or {}):
            env_seed = self._get_seed_from_env()
            if env_seed is not None:
                self.harness = dataclasses.replace(self.harness, master_seed=env_seed)

    @property
    def cli_overrides(self) -> frozenset:
        """Dotted names (``section.field``) of the settings that came from the CLI."""
        return frozenset(self._cli_overrides)

    def overridden(self, section: str, **values: Any) -> "ExperimentConfig":
        """
        Apply CLI overrides to one section; ``None`` values are ignored.

        Args:
            section: One of ``env``, ``policy``, ``dataset``, ``harness``.
            **values: Field values to replace.

        Returns:
            This configuration, for chaining.
        """
        if section not in _SECTIONS:
            raise ConfigurationError(f"Unknown config section '{section}'")
        updates = {key: value for key, value in values.items() if value is not None}
        if not updates:
            return self
        current = getattr(self, section)
        merged = current.to_dict()
        merged.update(updates)
        setattr(self, section, _section_from_mapping(_SECTIONS[section], merged, section))
        self._cli_overrides.update(f"{section}.{key}" for key in updates)
        return self

    def to_dict(self) -> Dict[str, Any]:
        """Return a snapshot of every section."""
        return {name: getattr(self, name).to_dict() for name in _SECTIONS}

    def _load_config_file(self, config_file: Optional[Path] = None) -> Dict[str, Any]:
        """
        Load raw sections from a config file.

        Args:
            config_file: Optional path to config file. If None, checks HAPTIC_ACT_CONFIG
                        and then the default locations.

        Returns:
            Dictionary of section name to raw key-value mapping.
        """
        if config_file:
            config_path = Path(config_file)
            if not config_path.exists():
                raise ConfigurationError(f"Config file not found: {config_path}")
        elif os.environ.get("HAPTIC_ACT_CONFIG"):
            config_path = Path(os.environ["HAPTIC_ACT_CONFIG"])
            if not config_path.exists():
                raise ConfigurationError(f"HAPTIC_ACT_CONFIG points to a missing file: {config_path}")
        elif self.DEFAULT_CONFIG_YAML.exists():
            config_path = self.DEFAULT_CONFIG_YAML
        elif self.DEFAULT_CONFIG_TOML.exists():
            config_path = self.DEFAULT_CONFIG_TOML
        else:
            return {}

        if config_path.suffix in (".yaml", ".yml"):
            config = self._load_from_yaml(config_path)
        elif config_path.suffix == ".toml":
            config = self._load_from_toml(config_path)
        else:
            raise ConfigurationError(f"Unsupported config file type: {config_path.suffix}")

        unknown = sorted(set(config) - set(_SECTIONS))
        if unknown:
            raise ConfigurationError(f"Unknown section(s) in {config_path}: {', '.join(unknown)}")
        return config

    def _load_from_yaml(self, config_path: Path) -> Dict[str, Any]:
        """Load configuration sections from YAML file."""
        try:
            with open(config_path) as f:
                config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Failed to parse {config_path}: {e}") from e
        if config is None:
            return {}
        if not isinstance(config, dict):
            raise ConfigurationError(f"Config file {config_path} must contain a mapping")
        return config

    def _load_from_toml(self, config_path: Path) -> Dict[str, Any]:
        """Load configuration sections from TOML file."""
        if tomli is None:
            raise ConfigurationError(
                "tomli is required for TOML config files. Install it with: pip install tomli"
            )
        try:
            with open(config_path, "rb") as f:
                config: Dict[str, Any] = tomli.load(f)  # type: ignore[possibly-missing-attribute]
        except tomli.TOMLDecodeError as e:  # type: ignore[possibly-missing-attribute]
            raise ConfigurationError(f"Failed to parse {config_path}: {e}") from e
        return config

    def _get_seed_from_env(self) -> Optional[int]:
        """Get the master seed from the HAPTIC_ACT_SEED environment variable."""
        raw = os.environ.get("HAPTIC_ACT_SEED", "").strip()
        if not raw:
            return None
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigurationError(f"HAPTIC_ACT_SEED must be an integer, got {raw!r}") from e
