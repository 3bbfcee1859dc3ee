"""Result emission: CSV tables, force traces and a markdown summary rendered from them."""

import csv
import dataclasses
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from haptic_act.controller import TraceRow
from haptic_act.errors import OutputError
from haptic_act.harness import ResultRow, ResultsTable
from haptic_act.logger import get_experiment_logger

TABLE_FILES = {
    "grid": "grid.csv",
    "generalization": "generalization.csv",
    "sweep": "sweep.csv",
    "eval": "eval.csv",
}
REPORT_NAME = "report.md"
TRACE_PREFIX = "force_trace_"

RESULT_COLUMNS = [
    "name",
    "haptic",
    "recovery_samples",
    "recovery_fraction",
    "variant",
    "size_multiplier",
    "contrast",
    "n_trials",
    "pick_rate",
    "delivery_rate",
    "mean_grasp_attempts",
    "loop_failure_rate",
    "n_pick",
    "n_delivery",
    "n_loop_failure",
    "dataset_seed",
    "train_seed",
    "eval_seed",
]
TRACE_COLUMNS = [f.name for f in dataclasses.fields(TraceRow)]

Record = Dict[str, str]


def row_label(kind: str) -> str:
    """Column naming the rows of a table kind; force-trace keys start with it."""
    return "variant" if kind == "generalization" else "name"


def format_value(value: object) -> str:
    """Serialize one CSV cell: floats with six decimals, booleans as true/false."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def result_record(row: ResultRow) -> Record:
    return {column: format_value(getattr(row, column)) for column in RESULT_COLUMNS}


def trace_record(row: TraceRow) -> Record:
    return {column: format_value(getattr(row, column)) for column in TRACE_COLUMNS}


def write_csv(path: Path, columns: List[str], records: Sequence[Record]) -> None:
    """
    Write records with a header line; an empty sequence gives a header-only file.

    Raises:
        OutputError: If the file cannot be written.
    """
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            writer.writerows(records)
    except OSError as e:
        raise OutputError(f"Failed to write {path}: {e}") from e


def read_csv(path: Path) -> List[Record]:
    try:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise OutputError(f"Failed to read {path}: {e}") from e


class ReportFormatter:
    """Formats saved result tables as a markdown report."""

    TITLES = {
        "grid": "Condition grid",
        "generalization": "Novel objects",
        "sweep": "Recovery-fraction sweep",
        "eval": "Evaluation",
    }

    def format_report(self, tables: Dict[str, List[Record]], traces: Dict[str, List[Record]]) -> str:
        """
        Format the whole report.

        Args:
            tables: Records per table kind, as read from the CSV files.
            traces: Records per trace key, as read from the force-trace files.

        Returns:
            Markdown text.
        """
        sections = ["# Results", ""]
        for kind in TABLE_FILES:
            if kind in tables:
                sections.append(self.format_table(kind, tables[kind]))
        if traces:
            sections.append(self.format_traces(traces))
        return "\n".join(sections).rstrip("\n") + "\n"

    def format_table(self, kind: str, records: List[Record]) -> str:
        """
        Format one table with trial counts and the seeds behind it.

        Args:
            kind: Key of TABLE_FILES.
            records: CSV records of that table.

        Returns:
            A markdown section.
        """
        lines = [f"## {self.TITLES[kind]}", ""]
        if not records:
            lines += ["No trials.", ""]
            return "\n".join(lines)

        label = row_label(kind)
        lines.append(f"| {label} | trials | pick rate | delivery rate | mean grasp attempts | loop-failure rate |")
        lines.append("|---|---|---|---|---|---|")
        for record in records:
            lines.append(
                f"| {record[label]} | {record['n_trials']} | {record['pick_rate']} | {record['delivery_rate']} "
                f"| {record['mean_grasp_attempts']} | {record['loop_failure_rate']} |"
            )
        lines.append("")
        lines.append(self._format_seeds(records))
        lines.append("")
        return "\n".join(lines)

    def format_traces(self, traces: Dict[str, List[Record]]) -> str:
        lines = ["## Force traces", "", "| trace | steps | peak f_z |", "|---|---|---|"]
        for key in sorted(traces):
            records = traces[key]
            peak = max((float(r["f_z"]) for r in records), default=0.0)
            lines.append(f"| {TRACE_PREFIX}{key}.csv | {len(records)} | {peak:.6f} |")
        lines.append("")
        return "\n".join(lines)

    def _format_seeds(self, records: List[Record]) -> str:
        seen = []
        for record in records:
            seeds = (record["dataset_seed"], record["train_seed"], record["eval_seed"])
            if seeds not in seen:
                seen.append(seeds)
        return "\n".join(f"Seeds: dataset={d} train={t} eval={e}" for d, t, e in seen)


def _collect_saved(
    out_dir: Path, kinds: Optional[Sequence[str]] = None
) -> Tuple[Dict[str, List[Record]], Dict[str, List[Record]]]:
    wanted = [kind for kind in TABLE_FILES if kinds is None or kind in kinds]
    paths = {kind: out_dir / TABLE_FILES[kind] for kind in wanted}
    tables = {kind: read_csv(path) for kind, path in paths.items() if path.exists()}
    # A trace belongs to a loaded table when its key is one of that table's row labels plus a trial suffix.
    owners = {record[row_label(kind)] for kind, records in tables.items() for record in records}
    traces = {}
    for path in sorted(out_dir.glob(f"{TRACE_PREFIX}*.csv")):
        key = path.stem[len(TRACE_PREFIX) :]
        if key.rpartition("_")[0] in owners:
            traces[key] = read_csv(path)
    return tables, traces


def regenerate_report(in_dir: Path, out_dir: Optional[Path] = None, kinds: Optional[Sequence[str]] = None) -> Path:
    """
    Render report.md from the CSV files saved in ``in_dir``.

    Only tables of ``kinds`` (every kind when None) are read, and only force
    traces whose key names a row of those tables, so files left in the
    directory by other runs stay out of the report.

    Args:
        in_dir: Directory holding grid/generalization/sweep CSVs and force traces.
        out_dir: Where report.md goes; defaults to ``in_dir``.
        kinds: Table kinds to include.

    Returns:
        Path of the written report.

    Raises:
        OutputError: If no result CSV is found or a file cannot be read or written.
    """
    in_dir = Path(in_dir)
    out_dir = Path(out_dir) if out_dir is not None else in_dir
    tables, traces = _collect_saved(in_dir, kinds)
    if not tables:
        raise OutputError(f"No result CSV files found in {in_dir}")
    report_path = out_dir / REPORT_NAME
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path.write_text(ReportFormatter().format_report(tables, traces))
    except OSError as e:
        raise OutputError(f"Failed to write {report_path}: {e}") from e
    return report_path


def emit_report(tables: Sequence[ResultsTable], out_dir: Path) -> List[Path]:
    """
    Write one CSV per table, one CSV per kept force trace, and report.md.

    The report is rendered from the CSVs as written, so regenerating it from
    the saved files later yields the same text.

    Returns:
        Paths of every written file, report last.
    """
    out_dir = Path(out_dir)
    written: List[Path] = []
    for table in tables:
        path = out_dir / TABLE_FILES[table.kind]
        write_csv(path, RESULT_COLUMNS, [result_record(row) for row in table.rows])
        written.append(path)
        for key, trace in table.traces.items():
            trace_path = out_dir / f"{TRACE_PREFIX}{key}.csv"
            write_csv(trace_path, TRACE_COLUMNS, [trace_record(row) for row in trace])
            written.append(trace_path)
    report_path = regenerate_report(out_dir, kinds=[table.kind for table in tables])
    written.append(report_path)
    get_experiment_logger().info(f"report_written out_dir={out_dir} files={len(written)}")
    return written
