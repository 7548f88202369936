"""Result files and the statistics computed over them."""
import csv
import io
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from models import IterationTrace

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iter", "start_us", "end_us", "bucket_id", "issue_us", "complete_us"]
MICROBENCH_COLUMNS = ["op_kind", "size_bytes", "mode", "mean_us", "stddev_us", "repetitions"]
SWEEP_COLUMNS = ["inject_us", "mean_us", "stddev_us"]
FIDELITY_COLUMNS = ["model", "iterations", "baseline_mean_us", "baseline_stddev_us", "emulated_mean_us",
                    "emulated_stddev_us", "relative_error", "baseline_cpu_share", "emulated_cpu_share"]

Row = Mapping[str, object]


def _cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def write_csv(path: Union[str, Path], rows: Iterable[Row], columns: Optional[Sequence[str]] = None,
              deterministic: bool = False) -> Path:
    """
    Write rows as UTF-8 CSV with a header row.

    Column order is `columns`, or the keys of the first row. Unless
    `deterministic` is set, the file starts with a ``# generated ...`` comment.

    Args:
        path: Output file; parent directories are created
        rows: Mappings from column name to value
        columns: Column order (required when rows is empty)
        deterministic: Omit the timestamp comment so reruns are byte-identical

    Returns:
        Path: The written file
    """
    rows = list(rows)
    if columns is None:
        if not rows:
            raise ValueError("columns are required to write an empty table")
        columns = list(rows[0].keys())
    buf = io.StringIO()
    if not deterministic:
        buf.write(f"# generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])

    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue(), encoding="utf-8")
    logger.info(f"Wrote {len(rows)} rows to {out}")
    return out


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    """Read a file written by write_csv; comment lines are skipped, values stay strings."""
    with open(path, encoding="utf-8", newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def trace_rows(traces: Sequence[IterationTrace]) -> List[Dict[str, object]]:
    rows: List[Dict[str, object]] = []
    for trace in traces:
        for bucket in trace.buckets:
            rows.append({"iter": trace.iteration, "start_us": trace.start_us, "end_us": trace.end_us,
                         "bucket_id": bucket.bucket_id, "issue_us": bucket.issue_us,
                         "complete_us": bucket.complete_us})
        if not trace.buckets:
            rows.append({"iter": trace.iteration, "start_us": trace.start_us, "end_us": trace.end_us})
    return rows


def write_trace_csv(path: Union[str, Path], traces: Sequence[IterationTrace], deterministic: bool = False) -> Path:
    return write_csv(path, trace_rows(traces), TRACE_COLUMNS, deterministic)


def iteration_times(rows: Iterable[Mapping[str, str]]) -> List[float]:
    """Per-iteration times from trace CSV rows, in iteration order."""
    spans: Dict[int, Tuple[float, float]] = {}
    for row in rows:
        spans[int(row["iter"])] = (float(row["start_us"]), float(row["end_us"]))
    return [end - start for _, (start, end) in sorted(spans.items())]


def mean_stddev(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for fewer than two values)."""
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        raise ValueError("no values to summarize")
    stddev = float(data.std(ddof=1)) if data.size > 1 else 0.0
    return float(data.mean()), stddev


def relative_error(emulated: float, baseline: float) -> float:
    if baseline == 0:
        return 0.0 if emulated == 0 else float("inf")
    return abs(emulated - baseline) / baseline


def fit_tail_slope(points: Sequence[Tuple[float, float]], knee_us: float) -> Optional[float]:
    """
    Least-squares slope of mean iteration time over injected delay, using points with d > knee.

    Returns None when fewer than two distinct delays lie past the knee.
    """
    tail = [(d, y) for d, y in points if d > knee_us]
    if len({d for d, _ in tail}) < 2:
        return None
    x = np.array([d for d, _ in tail], dtype=np.float64)
    y = np.array([v for _, v in tail], dtype=np.float64)
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def marginal_slope(points: Sequence[Tuple[float, float]], upper_us: float) -> Optional[float]:
    """Least-squares slope over points with d ≤ upper_us."""
    head = [(d, y) for d, y in points if d <= upper_us]
    if len({d for d, _ in head}) < 2:
        return None
    slope, _ = np.polyfit([d for d, _ in head], [y for _, y in head], 1)
    return float(slope)
