from pathlib import Path
from typing import Dict, List, Sequence
import logging

import openpyxl
from openpyxl.styles import Font, PatternFill, Alignment
import pandas as pd

from errors import RunArtifactError
from evaluation import EvalResult
from trainer import LossPoint

logger = logging.getLogger(__name__)

REPORT_FILE = "report.csv"

# headline metrics first, then the breakdown columns
REPORT_COLUMNS = [
    "strategy",
    "scheme",
    "nodes",
    "throughput",
    "speedup",
    "gpu_util_pct",
    "comm_overhead_ms",
    "comm_share_pct",
    "memory_util_pct",
    "wall_time_ms",
    "bubble_fraction",
]

MARKDOWN_HEADERS = {
    "strategy": "Scheme",
    "throughput": "Throughput (samples/s)",
    "speedup": "Speedup",
    "gpu_util_pct": "GPU Util %",
    "comm_overhead_ms": "Comm Overhead (ms/iter)",
    "comm_share_pct": "Comm Share %",
    "memory_util_pct": "Memory Util %",
}

TIMELINE_COLUMNS = ["strategy", "iter", "device", "event_kind", "start_s", "end_s"]


def report_frame(results: List[Dict]) -> pd.DataFrame:
    """One row per simulated strategy, in config order."""
    rows = []
    for result in results:
        row, report = result["row"], result["report"]
        rows.append({
            "strategy": row.name,
            "scheme": row.scheme,
            "nodes": row.nodes,
            "throughput": report.throughput,
            "speedup": report.speedup,
            "gpu_util_pct": 100 * report.device_utilization,
            "comm_overhead_ms": report.comm_overhead_ms,
            "comm_share_pct": 100 * report.comm_share,
            "memory_util_pct": 100 * report.memory_utilization,
            "wall_time_ms": report.wall_time_ms,
            "bubble_fraction": report.profile.bubble_fraction,
        })
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    frame["nodes"] = frame["nodes"].astype("Int64")
    return frame


def timeline_frame(results: List[Dict]) -> pd.DataFrame:
    rows = [
        (result["row"].name, rec.iteration, rec.device, rec.event_kind, rec.start_s, rec.end_s)
        for result in results
        for rec in result["report"].trace
    ]
    return pd.DataFrame(rows, columns=TIMELINE_COLUMNS)


def write_csv(frame: pd.DataFrame, path: Path, float_format: str = "%.6f") -> Path:
    frame.to_csv(path, index=False, float_format=float_format, lineterminator="\n")
    return path


def _cell(value, digits: int) -> str:
    if value is None or (isinstance(value, float) and pd.isna(value)) or value is pd.NA:
        return ""
    if isinstance(value, float):
        return f"{value:,.{digits}f}"
    return str(value)


def markdown_table(frame: pd.DataFrame, headers: Dict[str, str] | None = None, digits: int = 2) -> str:
    """Pipe table with numeric columns right-aligned."""
    headers = headers or {c: c for c in frame.columns}
    columns = list(headers)
    lines = [
        "| " + " | ".join(headers[c] for c in columns) + " |",
        "|" + "|".join("---:" if pd.api.types.is_numeric_dtype(frame[c]) else "---" for c in columns) + "|",
    ]
    for _, row in frame.iterrows():
        lines.append("| " + " | ".join(_cell(row[c], digits) for c in columns) + " |")
    return "\n".join(lines) + "\n"


def write_report_markdown(frame: pd.DataFrame, path: Path, title: str = "Simulated schemes") -> Path:
    shown = frame.copy()
    shown["speedup"] = shown["speedup"].map(lambda v: f"{v:.2f}x")
    text = f"# {title}\n\n" + markdown_table(shown, MARKDOWN_HEADERS)
    path.write_text(text, encoding="utf-8")
    return path


def export_to_excel(frame: pd.DataFrame, output_path: Path) -> Path:
    """
    Export the report table to a styled Excel sheet

    Args:
        frame: Report table from report_frame
        output_path: Path to Excel output file
    """
    wb = openpyxl.Workbook()
    ws = wb.active
    ws.title = "Simulated schemes"

    ws.append(list(frame.columns))

    header_fill = PatternFill(start_color="4472C4", end_color="4472C4", fill_type="solid")
    header_font = Font(bold=True, color="FFFFFF")
    for cell in ws[1]:
        cell.fill = header_fill
        cell.font = header_font
        cell.alignment = Alignment(horizontal="center", vertical="center")

    for record in frame.itertuples(index=False):
        ws.append([None if pd.isna(v) else v for v in record])

    # highlight the fastest scheme
    if len(frame):
        best_row = int(frame["throughput"].to_numpy().argmax()) + 2
        for cell in ws[best_row]:
            cell.fill = PatternFill(start_color="C6EFCE", end_color="C6EFCE", fill_type="solid")
            cell.font = Font(color="006100", bold=True)

    for row_idx in range(2, ws.max_row + 1):
        for cell in ws[row_idx]:
            if isinstance(cell.value, float):
                cell.number_format = "0.00"

    for column in ws.columns:
        max_length = max(len(str(cell.value)) if cell.value is not None else 0 for cell in column)
        ws.column_dimensions[column[0].column_letter].width = min(max_length + 2, 50)

    wb.save(output_path)
    logger.info("saved Excel report to %s", output_path)
    return output_path


def loss_curve_frame(curves: Dict[str, List[LossPoint]]) -> pd.DataFrame:
    rows = [(name, point.step, point.loss) for name, points in curves.items() for point in points]
    return pd.DataFrame(rows, columns=["variant", "step", "loss"])


def eval_frame(results: Dict[str, EvalResult]) -> pd.DataFrame:
    rows = [
        (name, r.hr_at_10, r.ndcg_at_10, r.num_eval_users, r.skipped)
        for name, r in results.items()
    ]
    return pd.DataFrame(rows, columns=["variant", "hr_at_10", "ndcg_at_10", "num_eval_users", "skipped"])


def residual_frame(observed: Dict[str, float], residuals: Dict[str, float]) -> pd.DataFrame:
    rows = [(name, observed[name], observed[name] * (1 + r), r) for name, r in residuals.items()]
    return pd.DataFrame(rows, columns=["anchor", "observed", "simulated", "residual"])


def load_run(run_dir: Path) -> pd.DataFrame:
    run_dir = Path(run_dir)
    report = run_dir / REPORT_FILE
    if not run_dir.is_dir():
        raise RunArtifactError(f"run directory not found: {run_dir}")
    if not report.exists():
        raise RunArtifactError(f"{run_dir} has no {REPORT_FILE}")
    frame = pd.read_csv(report)
    missing = [c for c in REPORT_COLUMNS if c not in frame.columns]
    if missing:
        raise RunArtifactError(f"{report} lacks columns {missing}")
    if frame.empty:
        raise RunArtifactError(f"{report} has no rows")
    frame["nodes"] = frame["nodes"].astype("Int64")
    return frame


def _ordering_note(frame: pd.DataFrame) -> str:
    share = frame.groupby("scheme")["comm_share_pct"].mean()
    if not {"model", "data", "hybrid"} <= set(share.index):
        return "Ordering model > data > hybrid: not applicable (schemes missing)."
    holds = share["model"] > share["data"] > share["hybrid"]
    values = ", ".join(f"{s} {share[s]:.1f}%" for s in ("model", "data", "hybrid"))
    return f"Ordering model > data > hybrid: {'holds' if holds else 'does not hold'} ({values})."


def scalability_table(frame: pd.DataFrame) -> str:
    scaled = frame.dropna(subset=["nodes"])
    scaled = scaled[scaled["scheme"] != "baseline"]
    if scaled.empty:
        return "No rows carry a node count.\n"
    schemes = list(dict.fromkeys(scaled["scheme"]))
    lines = [
        "| Nodes | " + " | ".join(f"{s} throughput | {s} speedup" for s in schemes) + " |",
        "|---:|" + "---:|---:|" * len(schemes),
    ]
    for nodes, group in scaled.groupby("nodes", sort=True):
        cells = []
        for scheme in schemes:
            match = group[group["scheme"] == scheme]
            if match.empty:
                cells += ["", ""]
            else:
                cells += [f"{match['throughput'].iloc[0]:,.0f}", f"{match['speedup'].iloc[0]:.2f}x"]
        lines.append(f"| {nodes} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def combined_report(run_dirs: Sequence[Path]) -> str:
    """
    Combine several simulate runs into one markdown document

    Raises:
        RunArtifactError: no runs, or a run lacks its report
    """
    if not run_dirs:
        raise RunArtifactError("no run directories given")
    frames = []
    for run_dir in run_dirs:
        frame = load_run(run_dir)
        frame.insert(0, "run", Path(run_dir).name)
        frames.append(frame)
    frame = pd.concat(frames, ignore_index=True)

    comm = frame[["run", "strategy", "scheme", "comm_share_pct", "comm_overhead_ms"]]
    util = frame[["run", "strategy", "scheme", "gpu_util_pct", "memory_util_pct"]]
    parts = [
        "# Combined report\n",
        "## Communication share of iteration time\n",
        markdown_table(comm, {
            "run": "Run", "strategy": "Scheme", "comm_share_pct": "Comm Share %",
            "comm_overhead_ms": "Comm Overhead (ms/iter)",
        }),
        _ordering_note(frame) + "\n",
        "## Resource utilization\n",
        markdown_table(util, {
            "run": "Run", "strategy": "Scheme", "gpu_util_pct": "GPU Util %", "memory_util_pct": "Memory Util %",
        }),
        "## Scalability\n",
        scalability_table(frame),
    ]
    return "\n".join(parts)
