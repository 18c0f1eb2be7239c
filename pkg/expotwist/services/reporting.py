"""CSV persistence with fixed column orders.

Floats are written with 17 significant digits so a reload is bit-exact.
"""

import csv
import logging
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Sequence, Union

from pydantic import BaseModel

from expotwist.core.utils import format_row
from expotwist.schemas.reports import EntropyReport, MeanFieldResult, RankingReport, ResidualReport

logger = logging.getLogger(__name__)

ENTROPY_COLUMNS = ("n_paths", "Z_hat", "minus_log_Z", "mean_phi", "entropy", "gap", "ess")
RANKING_COLUMNS = ("policy_name", "J", "stderr", "gap_to_minus_logZ")
RESIDUAL_COLUMNS = ("bin_lo", "bin_hi", "mean", "stderr", "z")
NODE_COLUMNS = ("t", "x", "residual")
TRACE_COLUMNS = ("iter", "c", "m", "objective", "entropy")
SUMMARY_COLUMNS = ("pipeline", "name", "passed", "value", "reference", "tolerance", "detail")

Row = Union[Mapping[str, Any], BaseModel]


def _as_mapping(row: Row) -> Mapping[str, Any]:
    return row.model_dump() if isinstance(row, BaseModel) else row


def write_report(rows: Iterable[Row], path: Path, columns: Sequence[str]) -> Path:
    """One header line plus one line per row; a row missing a column is an error."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            count = 0
            for row in rows:
                data = _as_mapping(row)
                missing = [c for c in columns if c not in data]
                if missing:
                    raise KeyError(f"row lacks column(s) {', '.join(missing)}")
                writer.writerow(format_row(data[c] for c in columns))
                count += 1
    except OSError as e:
        raise OSError(f"could not write report {path}: {e}") from e
    logger.debug(f"Wrote {count} row(s) to {path}")
    return path


def read_report(path: Path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# --- Row adapters ---

def entropy_rows(report: EntropyReport) -> List[dict]:
    return [{
        "n_paths": report.n_paths,
        "Z_hat": report.z_hat,
        "minus_log_Z": report.minus_log_z,
        "mean_phi": report.mean_phi,
        "entropy": report.entropy,
        "gap": report.gap,
        "ess": report.ess,
    }]


def ranking_rows(report: RankingReport) -> List[dict]:
    return [row.model_dump() for row in report.rows]


def residual_rows(report: ResidualReport) -> List[dict]:
    return [{"bin_lo": r.lo, "bin_hi": r.hi, "mean": r.mean, "stderr": r.stderr, "z": r.z} for r in report.rows]


def node_rows(report: ResidualReport) -> List[dict]:
    # long format: one line per node, coordinates joined by ';'
    return [{"t": n.t, "x": ";".join(format(c, ".17g") for c in n.x), "residual": n.residual}
            for n in report.nodes]


def trace_rows(result: MeanFieldResult) -> List[dict]:
    return [step.model_dump() for step in result.trace]
