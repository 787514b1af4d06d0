"""
Export functionality for ReplySonor results.
Supports JSON and CSV; CSV files are the plot-ready outputs of training,
benchmarking and ablation runs.
"""

import csv
import json
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

from .errors import InvariantViolation

LOSS_CURVE_COLUMNS = ("step", "loss", "per_feature_losses", "lr")
BENCH_COLUMNS = ("retrieve_m", "recall_at_30", "speedup_vs_exhaustive", "qps")
ABLATION_COLUMNS = ("model", "loss", "k", "seed", "p_at_1")


class ExportManager:
    """Handles exporting results to various formats."""

    def __init__(self):
        self.supported_formats = ["json", "csv"]

    def export(self, data: Any, output_path: Path, format: str = "json", columns: Sequence[str] = ()):
        """
        Export data to the specified format.

        Args:
            data: A JSON-able object (json) or a list of row mappings (csv)
            output_path: Output file path
            format: Export format (json, csv)
            columns: Column order for CSV output
        """
        format = format.lower()

        if format not in self.supported_formats:
            raise InvariantViolation(
                f"Unsupported format: {format}. Supported: {', '.join(self.supported_formats)}"
            )

        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)

        if format == "json":
            self._export_json(data, output_path)
        else:
            self._export_csv(data, output_path, columns)

    def _export_json(self, data: Any, output_path: Path):
        """Export as JSON."""
        if is_dataclass(data):
            data = asdict(data)
        with open(output_path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
            f.write("\n")

    def _export_csv(self, rows: Iterable[Dict[str, Any]], output_path: Path, columns: Sequence[str]):
        """Export as CSV; ``columns`` fixes the header and order."""
        rows = list(rows)
        if not columns:
            if not rows:
                raise InvariantViolation("CSV export needs columns or at least one row")
            columns = list(rows[0])
        with open(output_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)

    # ---- row builders ------------------------------------------------------

    @staticmethod
    def loss_curve_rows(reports: Iterable) -> List[Dict[str, Any]]:
        """One row per LossReport; per-feature losses are joined with ';'."""
        return [
            {
                "step": r.step,
                "loss": f"{r.loss:.6f}",
                "per_feature_losses": ";".join(f"{v:.6f}" for v in r.per_feature),
                "lr": f"{r.lr:g}",
            }
            for r in reports
        ]

    @staticmethod
    def bench_rows(points: Iterable) -> List[Dict[str, Any]]:
        return [
            {
                "retrieve_m": p.retrieve_m,
                "recall_at_30": f"{p.recall_at_30:.6f}",
                "speedup_vs_exhaustive": f"{p.speedup_vs_exhaustive:.4f}",
                "qps": f"{p.qps:.2f}",
            }
            for p in points
        ]

    @staticmethod
    def ablation_rows(table) -> List[Dict[str, Any]]:
        return [
            {"model": r.model, "loss": r.loss, "k": r.k, "seed": r.seed, "p_at_1": f"{r.p_at_1:.6f}"}
            for r in table.rows
        ]

    def export_loss_curve(self, reports: Iterable, output_path: Path):
        self.export(self.loss_curve_rows(reports), output_path, "csv", LOSS_CURVE_COLUMNS)

    def export_bench(self, points: Iterable, output_path: Path):
        self.export(self.bench_rows(points), output_path, "csv", BENCH_COLUMNS)

    def export_ablation(self, table, output_path: Path):
        self.export(self.ablation_rows(table), output_path, "csv", ABLATION_COLUMNS)
