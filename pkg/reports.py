import csv
import io
import json
import os
import shutil
import tempfile
from typing import Iterable, List, Optional, Sequence, Tuple

from logger import setup_logger
from models.cost import CostCurvePoint
from models.estimate import UtilityPrivacyRow
from models.scenario import EpochRecord, SimulationReport

logger = setup_logger()

TABLE1_HEADER = ["p", "q", "eta_mc", "eta_analytic", "epsilon_paper", "epsilon_strict"]
TABLE2_HEADER = ["epsilon", "cost"]
COST_CURVE_HEADER = ["epsilon", "private_cost", "nonprivate_cost", "favored"]
SIMULATION_HEADER = ["epoch", "poi_id", "true_count", "estimate_raw", "estimate_clamped",
                     "ci_low", "ci_high", "wait_minutes"]
BREAKEVEN_COMMENT = "# breakeven_epsilon="


def safe_replace(target_path: str, content: str) -> bool:
    """
    Writes content to a temp file next to target_path, then moves it into place.
    An existing target is kept as .bak until the move succeeds and restored on failure.
    """
    target_dir = os.path.dirname(os.path.abspath(target_path))
    os.makedirs(target_dir, exist_ok=True)
    backup_path = target_path + ".bak"

    fd, temp_path = tempfile.mkstemp(prefix=".tmp_", dir=target_dir)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(content)

        if os.path.exists(target_path):
            if os.path.exists(backup_path):
                os.remove(backup_path)
            os.rename(target_path, backup_path)

        shutil.move(temp_path, target_path)

        if os.path.exists(backup_path):
            try:
                os.remove(backup_path)
            except OSError as e:
                logger.warning(f"Could not delete backup {backup_path}: {e}")
        logger.info(f"WROTE: path=\"{target_path}\" bytes={len(content.encode('utf-8'))}")
        return True

    except Exception as e:
        logger.error(f"Failed to write {target_path}: {e}")
        if os.path.exists(backup_path) and not os.path.exists(target_path):
            try:
                os.rename(backup_path, target_path)
                logger.info("Restored previous file.")
            except OSError as rb_e:
                logger.critical(f"CRITICAL: Failed to restore {target_path}: {rb_e}")
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


def _num(value: Optional[float]) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for comment in comments:
        buf.write(comment + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_num(v) for v in row])
    return buf.getvalue()


def read_csv(path: str) -> Tuple[List[str], List[dict]]:
    """Returns (comment lines, rows as dicts of strings)."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        lines = f.read().splitlines()
    comments = [line for line in lines if line.startswith("#")]
    body = [line for line in lines if not line.startswith("#")]
    return comments, list(csv.DictReader(body))


def format_aligned(header: Sequence[str], rows: Iterable[Sequence], digits: int = 4) -> str:
    cells = [list(header)] + [
        [f"{v:.{digits}f}" if isinstance(v, float) else str(v) for v in row] for row in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)


# -- tables -----------------------------------------------------------------

def table1_rows(rows: List[UtilityPrivacyRow]) -> List[list]:
    return [[r.p, r.q, r.eta_mc, r.eta_analytic, r.epsilon_paper, r.epsilon_strict] for r in rows]


def write_table1(rows: List[UtilityPrivacyRow], out_dir: str) -> str:
    path = os.path.join(out_dir, "table1.csv")
    safe_replace(path, csv_text(TABLE1_HEADER, table1_rows(rows)))
    return path


def read_table1(path: str) -> List[UtilityPrivacyRow]:
    _, rows = read_csv(path)
    return [UtilityPrivacyRow(**{k: float(v) for k, v in row.items()}) for row in rows]


def write_table2(rows: List[Tuple[float, float]], out_dir: str) -> str:
    path = os.path.join(out_dir, "table2.csv")
    safe_replace(path, csv_text(TABLE2_HEADER, [[eps, round(cost)] for eps, cost in rows]))
    return path


def write_cost_curve(points: List[CostCurvePoint], breakeven: Optional[float], out_dir: str) -> str:
    path = os.path.join(out_dir, "cost_curve.csv")
    comment = BREAKEVEN_COMMENT + ("" if breakeven is None else repr(breakeven))
    rows = [[p.epsilon, p.private_cost, p.nonprivate_cost, p.participation_favored] for p in points]
    safe_replace(path, csv_text(COST_CURVE_HEADER, rows, comments=[comment]))
    return path


def read_cost_curve(path: str) -> Tuple[Optional[float], List[CostCurvePoint]]:
    comments, rows = read_csv(path)
    breakeven = None
    for comment in comments:
        if comment.startswith(BREAKEVEN_COMMENT) and comment[len(BREAKEVEN_COMMENT):]:
            breakeven = float(comment[len(BREAKEVEN_COMMENT):])
    points = [
        CostCurvePoint(
            epsilon=float(row["epsilon"]),
            private_cost=float(row["private_cost"]),
            nonprivate_cost=float(row["nonprivate_cost"]),
            participation_favored=row["favored"] == "true",
        )
        for row in rows
    ]
    return breakeven, points


# -- simulation -------------------------------------------------------------

def simulation_rows(records: List[EpochRecord]) -> List[list]:
    rows = []
    for r in records:
        est = r.estimate
        rows.append([
            r.epoch_index, r.poi_id, r.true_count,
            est.y_a_raw if est else None, est.y_a_clamped if est else None,
            est.ci95_low if est else None, est.ci95_high if est else None,
            r.wait_estimate_minutes,
        ])
    return rows


def _opt_float(text: str) -> Optional[float]:
    return float(text) if text else None


def read_simulation(path: str) -> List[list]:
    """Rows of simulation.csv typed as simulation_rows produces them."""
    _, rows = read_csv(path)
    return [
        [int(row["epoch"]), row["poi_id"], int(row["true_count"])]
        + [_opt_float(row[key]) for key in SIMULATION_HEADER[3:]]
        for row in rows
    ]


def write_simulation(report: SimulationReport, out_dir: str) -> Tuple[str, str]:
    csv_path = os.path.join(out_dir, "simulation.csv")
    json_path = os.path.join(out_dir, "summary.json")
    safe_replace(csv_path, csv_text(SIMULATION_HEADER, simulation_rows(report.per_epoch)))
    summary = {
        "records": len(report.per_epoch),
        "coverage_fraction": report.coverage_fraction,
        "cost_comparison": report.cost_comparison.model_dump(mode="json"),
    }
    safe_replace(json_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
