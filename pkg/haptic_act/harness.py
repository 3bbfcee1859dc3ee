"""Experiment driver: the 2x2 condition grid, novel-object evaluation and the recovery-fraction sweep."""

import dataclasses
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from haptic_act.checkpoint import TrainingProvenance
from haptic_act.config import DatasetProfile, EnvConfig, ExperimentConfig, PolicyConfig
from haptic_act.controller import ChunkPolicy, TraceRow, TrainedPolicy, TrialResult, rollout
from haptic_act.dataset import Dataset, build_dataset
from haptic_act.errors import ConfigurationError
from haptic_act.logger import StageTimer, get_experiment_logger
from haptic_act.policy import ModelParams
from haptic_act.training import TrainLog, train

PolicyFactory = Callable[[], ChunkPolicy]


def derive_seed(master_seed: int, *labels: str) -> int:
    """
    Mix a master seed with string labels into an independent 63-bit seed.

    The seed is the first eight bytes (little-endian) of
    sha256("<master>:<label>:<label>...") with the top bit cleared.
    """
    text = ":".join([str(master_seed), *labels])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


@dataclass(frozen=True)
class ObjectVariant:
    """A test object: seed size relative to the training object, and its visual contrast."""

    name: str
    size_multiplier: float
    contrast: float = 1.0

    def __post_init__(self) -> None:
        if self.size_multiplier <= 0:
            raise ConfigurationError(f"Variant '{self.name}' needs a positive size multiplier")
        if not 0.0 < self.contrast <= 1.0:
            raise ConfigurationError(f"Variant '{self.name}' needs a contrast in (0, 1]")

    def apply(self, env_config: EnvConfig) -> EnvConfig:
        return dataclasses.replace(env_config, seed_size_multiplier=self.size_multiplier, seed_contrast=self.contrast)


# Longest-dimension ratios against the 8.9 mm training seed.
DEFAULT_VARIANTS: Tuple[ObjectVariant, ...] = (
    ObjectVariant("control", 1.0),
    ObjectVariant("dried_blueberry", 1.16),
    ObjectVariant("frozen_blueberry", 1.49),
    ObjectVariant("cranberry", 1.51),
    ObjectVariant("soybean", 1.56, contrast=0.1),
    ObjectVariant("coffee_bean", 1.62),
    ObjectVariant("almond", 2.63),
)


@dataclass(frozen=True)
class ConditionSpec:
    """One cell of the training grid."""

    haptic: bool
    recovery_samples: bool
    n_eval_trials: int = 100
    eval_seed: int = 0
    policy_overrides: Tuple[Tuple[str, object], ...] = ()

    @property
    def name(self) -> str:
        return f"{'haptic' if self.haptic else 'nohaptic'}-{'recovery' if self.recovery_samples else 'norecovery'}"

    def policy_config(self, base: PolicyConfig, train_seed: int) -> PolicyConfig:
        return dataclasses.replace(
            base, haptic_enabled=self.haptic, rng_seed=train_seed, **dict(self.policy_overrides)
        )


def grid_conditions(n_eval_trials: int, eval_seed: int) -> List[ConditionSpec]:
    """The four conditions, haptic-with-recovery first."""
    return [
        ConditionSpec(haptic, recovery, n_eval_trials, eval_seed)
        for recovery in (True, False)
        for haptic in (True, False)
    ]


@dataclass(frozen=True)
class ResultRow:
    """Aggregated trial outcomes of one condition or object variant."""

    name: str
    haptic: bool
    recovery_samples: bool
    recovery_fraction: float
    variant: str
    size_multiplier: float
    contrast: float
    n_trials: int
    n_pick: int
    n_delivery: int
    total_grasp_attempts: int
    n_loop_failure: int
    dataset_seed: int
    train_seed: int
    eval_seed: int

    @classmethod
    def from_trials(cls, trials: Sequence[TrialResult], **labels: object) -> "ResultRow":
        return cls(
            n_trials=len(trials),
            n_pick=sum(t.pick_success for t in trials),
            n_delivery=sum(t.delivery_success for t in trials),
            total_grasp_attempts=sum(t.grasp_attempts for t in trials),
            n_loop_failure=sum(t.loop_failure for t in trials),
            **labels,  # type: ignore[arg-type]
        )

    def _rate(self, count: int) -> float:
        return count / self.n_trials if self.n_trials else 0.0

    @property
    def pick_rate(self) -> float:
        return self._rate(self.n_pick)

    @property
    def delivery_rate(self) -> float:
        return self._rate(self.n_delivery)

    @property
    def mean_grasp_attempts(self) -> float:
        return self._rate(self.total_grasp_attempts)

    @property
    def loop_failure_rate(self) -> float:
        return self._rate(self.n_loop_failure)


@dataclass
class TrainedModel:
    params: ModelParams
    log: TrainLog
    provenance: TrainingProvenance = field(default_factory=TrainingProvenance)


@dataclass
class ResultsTable:
    """
    Rows of one experiment plus the artifacts needed to report on it.

    ``traces`` maps a trace key such as ``haptic-recovery_000`` to the per-step
    rows of that evaluation trial; ``models`` holds the trained policies by
    condition name.
    """

    kind: str
    rows: List[ResultRow] = field(default_factory=list)
    traces: Dict[str, List[TraceRow]] = field(default_factory=dict)
    models: Dict[str, TrainedModel] = field(default_factory=dict, compare=False)

    def row(self, name: str) -> ResultRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def __iter__(self) -> Iterator[ResultRow]:
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class Evaluation:
    trials: List[TrialResult]
    traces: Dict[int, List[TraceRow]]


def evaluate(
    make_policy: PolicyFactory,
    env_config: EnvConfig,
    n_trials: int,
    m: float = 0.1,
    orientation: str = "oldest",
    workers: int = 1,
    traced: int = 0,
) -> Evaluation:
    """
    Run paired evaluation trials.

    Trial i always uses random stream i of ``env_config``, so two policies
    evaluated with the same config face identical dishes and slip draws.

    Args:
        make_policy: Builds a fresh policy per trial.
        env_config: Environment settings; its rng_seed is the evaluation seed.
        n_trials: Number of trials.
        m: Ensembling rate.
        orientation: Ensembling orientation.
        workers: Threads running trials; results are merged by trial index.
        traced: Keep the per-step trace of the first this many trials.

    Returns:
        Trial results in index order and the kept traces.
    """

    def run(trial: int) -> Tuple[TrialResult, List[TraceRow]]:
        outcome = rollout(env_config, make_policy(), m=m, stream=trial, orientation=orientation)
        return outcome.result, outcome.trace

    if workers > 1 and n_trials > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, range(n_trials)))
    else:
        outcomes = [run(trial) for trial in range(n_trials)]
    return Evaluation(
        trials=[result for result, _ in outcomes],
        traces={trial: trace for trial, (_, trace) in enumerate(outcomes) if trial < traced},
    )


class _Seeds:
    def __init__(self, master_seed: int):
        self.master = master_seed
        self.dataset = derive_seed(master_seed, "dataset")
        self.train = derive_seed(master_seed, "train")
        self.eval = derive_seed(master_seed, "eval")


def _eval_env(config: ExperimentConfig, seeds: _Seeds) -> EnvConfig:
    return dataclasses.replace(config.env, rng_seed=seeds.eval, target_tube=None)


def _collect(config: ExperimentConfig, profile: DatasetProfile, seeds: _Seeds, timer: StageTimer) -> Dataset:
    with timer.track("collect"):
        return build_dataset(
            profile.n_success, profile.n_recovery, seeds.dataset, config.env, workers=config.harness.workers
        )


def _train_and_evaluate(
    table: ResultsTable,
    name: str,
    dataset: Dataset,
    policy_cfg: PolicyConfig,
    eval_env: EnvConfig,
    n_trials: int,
    config: ExperimentConfig,
    seeds: _Seeds,
    timer: StageTimer,
    labels: Dict[str, object],
) -> None:
    harness = config.harness
    with timer.track("train"):
        params, log = train(dataset, policy_cfg, condition=name)
    table.models[name] = TrainedModel(params, log, TrainingProvenance.from_dataset(dataset))
    with timer.track("eval"):
        evaluation = evaluate(
            lambda: TrainedPolicy(params, policy_cfg),
            eval_env,
            n_trials,
            harness.ensemble_m,
            harness.ensemble_orientation,
            harness.workers,
            harness.force_traces,
        )
    row = ResultRow.from_trials(
        evaluation.trials,
        name=name,
        recovery_fraction=dataset.recovery_fraction,
        variant="control",
        size_multiplier=eval_env.seed_size_multiplier,
        contrast=eval_env.seed_contrast,
        dataset_seed=seeds.dataset,
        train_seed=seeds.train,
        eval_seed=seeds.eval,
        **labels,
    )
    table.rows.append(row)
    for trial, trace in evaluation.traces.items():
        table.traces[f"{name}_{trial:03d}"] = trace
    get_experiment_logger().info(
        f"condition_evaluated condition={name} trials={row.n_trials} pick_rate={row.pick_rate:.3f} "
        f"delivery_rate={row.delivery_rate:.3f} loop_failure_rate={row.loop_failure_rate:.3f}"
    )


def run_grid(config: ExperimentConfig) -> ResultsTable:
    """
    Train and evaluate the four {haptic, no-haptic} x {recovery, no-recovery} models.

    One dataset is collected; the no-recovery conditions train on its success
    episodes only. All four models share the training seed and face the same
    evaluation trials.

    Raises:
        TrainingAbortedError: Labelled with the condition whose training diverged.
    """
    logger = get_experiment_logger()
    seeds = _Seeds(config.harness.master_seed)
    timer = StageTimer()
    timer.start()
    logger.info(
        f"grid_started master_seed={seeds.master} dataset_seed={seeds.dataset} "
        f"train_seed={seeds.train} eval_seed={seeds.eval} trials={config.harness.n_eval_trials}"
    )

    dataset = _collect(config, config.dataset, seeds, timer)
    subsets = {True: dataset, False: dataset.without_recovery()}
    eval_env = _eval_env(config, seeds)
    table = ResultsTable(kind="grid")
    for spec in grid_conditions(config.harness.n_eval_trials, seeds.eval):
        _train_and_evaluate(
            table,
            spec.name,
            subsets[spec.recovery_samples],
            spec.policy_config(config.policy, seeds.train),
            dataclasses.replace(eval_env, rng_seed=spec.eval_seed),
            spec.n_eval_trials,
            config,
            seeds,
            timer,
            {"haptic": spec.haptic, "recovery_samples": spec.recovery_samples},
        )

    logger.info(timer.format_log("grid_completed"))
    return table


def run_generalization(
    params: ModelParams,
    config: ExperimentConfig,
    variants: Sequence[ObjectVariant] = DEFAULT_VARIANTS,
    name: str = "haptic-recovery",
    provenance: Optional[TrainingProvenance] = None,
) -> ResultsTable:
    """
    Evaluate one trained model on every object variant.

    Every variant uses the grid's evaluation seed, so the control variant
    reproduces the model's in-distribution grid cell trial for trial. Rows
    are labelled with ``provenance`` when given, otherwise with the
    configured dataset profile.
    """
    logger = get_experiment_logger()
    seeds = _Seeds(config.harness.master_seed)
    harness = config.harness
    eval_env = _eval_env(config, seeds)
    if provenance is None:
        provenance = TrainingProvenance(seeds.dataset, config.dataset.n_success, config.dataset.n_recovery)
    table = ResultsTable(kind="generalization")
    timer = StageTimer()
    timer.start()
    for variant in variants:
        with timer.track(variant.name):
            evaluation = evaluate(
                lambda: TrainedPolicy(params, params.cfg),
                variant.apply(eval_env),
                harness.n_eval_trials,
                harness.ensemble_m,
                harness.ensemble_orientation,
                harness.workers,
                harness.force_traces,
            )
        row = ResultRow.from_trials(
            evaluation.trials,
            name=name,
            haptic=params.cfg.haptic_enabled,
            recovery_samples=provenance.recovery_samples,
            recovery_fraction=provenance.recovery_fraction,
            variant=variant.name,
            size_multiplier=variant.size_multiplier,
            contrast=variant.contrast,
            dataset_seed=provenance.dataset_seed,
            train_seed=params.cfg.rng_seed,
            eval_seed=seeds.eval,
        )
        table.rows.append(row)
        for trial, trace in evaluation.traces.items():
            table.traces[f"{variant.name}_{trial:03d}"] = trace
        logger.info(
            f"variant_evaluated variant={variant.name} size={variant.size_multiplier} "
            f"pick_rate={row.pick_rate:.3f} delivery_rate={row.delivery_rate:.3f} "
            f"loop_failure_rate={row.loop_failure_rate:.3f}"
        )
    logger.info(timer.format_log("generalization_completed"))
    return table


def run_recovery_sweep(config: ExperimentConfig, fractions: Optional[Sequence[float]] = None) -> ResultsTable:
    """
    Train the haptic model at several recovery-episode fractions of a fixed dataset size.

    Args:
        config: Experiment settings; the dataset profile's total is kept.
        fractions: Recovery fractions; defaults to ``config.harness.recovery_fractions``.
    """
    fractions = tuple(config.harness.recovery_fractions if fractions is None else fractions)
    logger = get_experiment_logger()
    seeds = _Seeds(config.harness.master_seed)
    eval_env = _eval_env(config, seeds)
    table = ResultsTable(kind="sweep")
    timer = StageTimer()
    timer.start()
    policy_cfg = dataclasses.replace(config.policy, haptic_enabled=True, rng_seed=seeds.train)
    for fraction in fractions:
        profile = config.dataset.with_recovery_fraction(fraction)
        dataset = _collect(config, profile, seeds, timer)
        _train_and_evaluate(
            table,
            f"haptic@{fraction:.2f}",
            dataset,
            policy_cfg,
            eval_env,
            config.harness.n_eval_trials,
            config,
            seeds,
            timer,
            {"haptic": True, "recovery_samples": profile.n_recovery > 0},
        )
    logger.info(timer.format_log("sweep_completed"))
    return table
