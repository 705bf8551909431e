# GroupWeightOpt
# Copyright (C) 2024  GroupWeightOpt contributors

# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as
# published by the Free Software Foundation, either version 3 of the
# License, or (at your option) any later version.

# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.

# You should have received a copy of the GNU Affero General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

from __future__ import annotations

import dataclasses
import datetime
from pathlib import Path
from typing import ClassVar, Iterator, Optional, Sequence

import xlsxwriter

import config
import log_config
import misc
from comparison import ComparisonResult, MetricSummary
from datafile import write_table
from metrics import significance_marker
from theory import LinRegDGP, SimulationPoint, expected_loss_approx, theory_curve

log = log_config.getLogger(__name__)


@dataclasses.dataclass
class ReportEntry:
    """One row of a CSV table and of an Excel sheet.

    CSV headers are the field names, Excel headers the `_labels` of the
    subclass. Fields whose name ends with `_pct` hold percentages.
    """

    sheet: ClassVar[str] = "virtual"

    @classmethod
    def fields(cls) -> tuple[dataclasses.Field, ...]:
        return dataclasses.fields(cls)

    @classmethod
    def field_names(cls) -> Iterator[str]:
        return (field.name for field in cls.fields())

    @classmethod
    def _labels(cls) -> list[str]:
        return list(cls.field_names())

    @classmethod
    def labels(cls) -> list[str]:
        return list(cls.field_names())

    @classmethod
    def excel_labels(cls) -> list[str]:
        labels = cls._labels()
        assert len(labels) == len(cls.fields())
        return labels

    @classmethod
    def excel_field_and_width(cls) -> Iterator[tuple[dataclasses.Field, float]]:
        for field, label in zip(cls.fields(), cls.excel_labels()):
            if field.name in ("method", "metric"):
                width = 24.0
            elif field.name.endswith("_pct"):
                width = 13.0
            else:
                width = max(10.0, min(len(label) * 0.9, 18.0))
            yield field, width

    def values(self) -> Iterator:
        return (getattr(self, f) for f in self.field_names())

    def excel_values(self) -> Iterator:
        for value in self.values():
            # Excel has no representation of nan/inf.
            yield misc.to_jsonable(value)


@dataclasses.dataclass
class OptimalWeightEntry(ReportEntry):
    sheet = "Optimal weights"

    n: int
    d: int
    p_train: float
    p_test: float
    optimal_p: float
    variance_bias_ratio: float
    bias_sq: float
    variance: float
    expected_loss: float

    @classmethod
    def _labels(cls) -> list[str]:
        return [
            "n",
            "d",
            "p train",
            "p test",
            "optimal p",
            "variance/bias ratio",
            "squared bias",
            "variance",
            "expected loss",
        ]


@dataclasses.dataclass
class SimulationEntry(ReportEntry):
    sheet = "Simulation"

    p: float
    bias_sq: float
    variance: float
    expected_loss: float
    simulated_mean: float
    simulated_se: float
    z_score: float
    replications: int
    failures: int


@dataclasses.dataclass
class ComparisonEntry(ReportEntry):
    sheet = "Comparison"

    method: str
    sweep: str
    sweep_value: Optional[float]
    seeds: int
    weighted_average_standard_pct: float
    weighted_average_standard_se_pct: float
    weighted_average_optimized_pct: float
    weighted_average_optimized_se_pct: float
    weighted_average_difference_pct: float
    weighted_average_ci_low_pct: float
    weighted_average_ci_high_pct: float
    weighted_average_p_value: float
    weighted_average_marker: str
    worst_group_standard_pct: float
    worst_group_standard_se_pct: float
    worst_group_optimized_pct: float
    worst_group_optimized_se_pct: float
    worst_group_difference_pct: float
    worst_group_ci_low_pct: float
    worst_group_ci_high_pct: float
    worst_group_p_value: float
    worst_group_marker: str

    @classmethod
    def _labels(cls) -> list[str]:
        metric_labels = [
            "standard (%)",
            "standard SE",
            "optimized (%)",
            "optimized SE",
            "difference",
            "90% CI low",
            "90% CI high",
            "p-value",
            "sig.",
        ]
        return (
            ["Method", "Sweep", "Sweep value", "Seeds"]
            + [f"Weighted avg. {label}" for label in metric_labels]
            + [f"Worst group {label}" for label in metric_labels]
        )


@dataclasses.dataclass
class SeedEntry(ReportEntry):
    sheet = "Seeds"

    method: str
    sweep_value: Optional[float]
    seed: int
    weighted_average_standard_pct: float
    weighted_average_optimized_pct: float
    worst_group_standard_pct: float
    worst_group_optimized_pct: float
    standard_objective: float
    optimized_objective: float
    selected_step: int


def theory_entries(
    dgp: LinRegDGP, p_test: float, n_grid: Sequence[int]
) -> list[OptimalWeightEntry]:
    entries = []
    for n, p_star in theory_curve(dgp, p_test, n_grid):
        point = expected_loss_approx(dgp, p_test, p_star, n)
        entries.append(
            OptimalWeightEntry(
                n=n,
                d=dgp.d,
                p_train=dgp.p_train,
                p_test=p_test,
                optimal_p=p_star,
                variance_bias_ratio=point.variance_bias_ratio,
                bias_sq=point.bias_sq,
                variance=point.variance,
                expected_loss=point.expected_loss,
            )
        )
    return entries


def simulation_entries(
    dgp: LinRegDGP, p_test: float, n: int, points: Sequence[SimulationPoint]
) -> list[SimulationEntry]:
    """Simulated risk next to the bias-variance approximation at each p."""
    entries = []
    for point in points:
        approx = expected_loss_approx(dgp, p_test, point.p, n)
        z = (
            (point.mean_risk - approx.expected_loss) / point.standard_error
            if point.standard_error > 0
            else float("nan")
        )
        entries.append(
            SimulationEntry(
                p=point.p,
                bias_sq=approx.bias_sq,
                variance=approx.variance,
                expected_loss=approx.expected_loss,
                simulated_mean=point.mean_risk,
                simulated_se=point.standard_error,
                z_score=z,
                replications=point.replications,
                failures=point.failures,
            )
        )
    return entries


def _metric_columns(summary: MetricSummary, prefix: str) -> dict:
    low, high = summary.test.confidence_interval
    return {
        f"{prefix}_standard_pct": 100 * summary.standard_mean,
        f"{prefix}_standard_se_pct": 100 * summary.standard_se,
        f"{prefix}_optimized_pct": 100 * summary.optimized_mean,
        f"{prefix}_optimized_se_pct": 100 * summary.optimized_se,
        f"{prefix}_difference_pct": 100 * summary.test.mean_difference,
        f"{prefix}_ci_low_pct": 100 * low,
        f"{prefix}_ci_high_pct": 100 * high,
        f"{prefix}_p_value": summary.test.p_value,
        f"{prefix}_marker": significance_marker(summary.test.p_value),
    }


def comparison_entry(
    result: ComparisonResult, sweep: str = "none", sweep_value: Optional[float] = None
) -> ComparisonEntry:
    return ComparisonEntry(
        method=result.setup.method.value,
        sweep=sweep,
        sweep_value=sweep_value,
        seeds=len(result.outcomes),
        **_metric_columns(
            result.summary("weighted_average_accuracy"), "weighted_average"
        ),
        **_metric_columns(result.summary("worst_group_accuracy"), "worst_group"),
    )


def seed_entries(
    result: ComparisonResult, sweep_value: Optional[float] = None
) -> list[SeedEntry]:
    return [
        SeedEntry(
            method=result.setup.method.value,
            sweep_value=sweep_value,
            seed=o.seed,
            weighted_average_standard_pct=100 * o.standard.weighted_average_accuracy,
            weighted_average_optimized_pct=100 * o.optimized.weighted_average_accuracy,
            worst_group_standard_pct=100 * o.standard.worst_group_accuracy,
            worst_group_optimized_pct=100 * o.optimized.worst_group_accuracy,
            standard_objective=o.standard_objective,
            optimized_objective=o.optimized_objective,
            selected_step=o.selected_step,
        )
        for o in result.outcomes
    ]


def export_csv(path: Path, entries: Sequence[ReportEntry]) -> Path:
    assert entries, "nothing to export"
    ReportType = type(entries[0])
    assert all(type(e) is ReportType for e in entries)
    rows = [list(e.values()) for e in entries]
    return write_table(path, ReportType.labels(), rows)


def export_comparison_as_excel(
    file_path: Path, entries: Sequence[ReportEntry], command: str
) -> Path:
    """Write one sheet per entry type plus a general sheet.

    Args:
        file_path (Path): Target xlsx file.
        entries (Sequence[ReportEntry]): Rows of all sheets.
        command (str): Command line of the run.

    Returns:
        Path: `file_path`
    """
    wb = xlsxwriter.Workbook(file_path)
    pct_format = wb.add_format({"num_format": "0.000"})
    number_format = wb.add_format({"num_format": "0.000000"})
    header_format = wb.add_format(
        {
            "bold": True,
            "border": 5,
            "align": "center",
            "valign": "vcenter",
            "text_wrap": True,
        }
    )

    #
    # General
    #
    ws_general = wb.add_worksheet("General")
    row = 0
    ws_general.merge_range(row, 0, 0, 1, "General", header_format)
    row += 1
    ws_general.write_row(row, 0, ["Command", command])
    row += 1
    ws_general.write_row(
        row, 0, ["Created", datetime.datetime.now().strftime("%Y-%m-%d %H:%M")]
    )
    row += 1
    ws_general.write_row(row, 0, ["Software", f"{config.PROGRAM} {config.VERSION}"])
    row += 1
    commit_hash = misc.get_current_commit_hash(default="undetermined")
    ws_general.write_row(row, 0, ["Version (Commit)", commit_hash])
    ws_general.set_column(0, 0, 20)
    ws_general.set_column(1, 1, 48)
    ws_general.freeze_panes(1, 0)

    #
    # Sheets per entry type
    #
    for sheet, sheet_entries in misc.group_by(list(entries), "sheet").items():
        ReportType = type(sheet_entries[0])
        ws = wb.add_worksheet(sheet)

        labels = ReportType.excel_labels()
        ws.write_row(0, 0, labels, header_format)
        ws.set_row(0, 45)
        ws.autofilter(0, 0, 0, len(labels) - 1)

        for row, entry in enumerate(sheet_entries, 1):
            ws.write_row(row, 0, entry.excel_values())

        for col, (field, width) in enumerate(ReportType.excel_field_and_width()):
            if field.name.endswith("_pct"):
                cell_format = pct_format
            elif field.type in ("float", "Optional[float]"):
                cell_format = number_format
            else:
                cell_format = None
            ws.set_column(col, col, width, cell_format)
        ws.freeze_panes(1, 0)

    wb.close()
    log.info(f"Exported tables to {file_path}")
    return file_path
