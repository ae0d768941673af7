"""
Workbook export
Writes run records and acceptance reports to an .xlsx workbook: a summary
sheet with provenance, then one results sheet per experiment.
"""
import json
import logging
import math
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import openpyxl
from openpyxl.styles import Border, Font, PatternFill, Side

from fklab.acceptance import AcceptanceReport
from fklab.records import RESULT_COLUMNS, RunRecord

logger = logging.getLogger(__name__)


class RunWorkbook:
    """
    Builds a workbook from one or more RunRecords. The first sheet is a
    summary; every record adds a sheet of its long-format results.
    """

    HEADER_FONT = Font(bold=True, size=14)
    SECTION_FONT = Font(bold=True, size=11)
    LABEL_FONT = Font(bold=True)
    PASS_FONT = Font(color="006100")
    FAIL_FONT = Font(bold=True, color="9C0006")

    THIN_BORDER = Border(
        left=Side(style="thin"),
        right=Side(style="thin"),
        top=Side(style="thin"),
        bottom=Side(style="thin"),
    )

    HEADER_FILL = PatternFill(start_color="4472C4", end_color="4472C4", fill_type="solid")
    SECTION_FILL = PatternFill(start_color="D9E2F3", end_color="D9E2F3", fill_type="solid")

    def __init__(self, title: str = "Feynman-Kac runs"):
        self.wb = openpyxl.Workbook()
        self.title = title
        self.date = datetime.now().strftime("%Y-%m-%d")
        self._summary_row = 0
        self._sheet_names: List[str] = []

    def _set_column_widths(self, ws, widths: Dict[str, int]):
        for col, width in widths.items():
            ws.column_dimensions[col].width = width

    def _add_header(self, ws, title: str, row: int = 1):
        ws.cell(row=row, column=1, value=title).font = self.HEADER_FONT
        ws.merge_cells(start_row=row, start_column=1, end_row=row, end_column=4)

    def _add_section_header(self, ws, title: str, row: int):
        cell = ws.cell(row=row, column=1, value=title)
        cell.font = self.SECTION_FONT
        cell.fill = self.SECTION_FILL
        ws.merge_cells(start_row=row, start_column=1, end_row=row, end_column=4)

    def _add_table_header(self, ws, headers: Iterable[str], row: int):
        for col, header in enumerate(headers, 1):
            cell = ws.cell(row=row, column=col, value=header)
            cell.font = Font(bold=True, color="FFFFFF")
            cell.fill = self.HEADER_FILL
            cell.border = self.THIN_BORDER

    @staticmethod
    def _cell_value(value: Any):
        """Excel has no NaN or inf; those become empty or text cells."""
        if isinstance(value, float):
            if math.isnan(value):
                return None
            if math.isinf(value):
                return "inf" if value > 0 else "-inf"
        if isinstance(value, (list, tuple, dict)):
            return json.dumps(value, default=str)
        return value

    def _unique_name(self, name: str) -> str:
        base = name[:28]
        candidate, i = base, 1
        while candidate in self._sheet_names:
            i += 1
            candidate = f"{base[:25]} ({i})"
        self._sheet_names.append(candidate)
        return candidate

    def _summary_sheet(self):
        ws = self.wb.active
        if self._summary_row == 0:
            ws.title = "Summary"
            self._sheet_names.append("Summary")
            self._set_column_widths(ws, {"A": 28, "B": 40, "C": 18, "D": 18})
            self._add_header(ws, self.title)
            ws.cell(row=3, column=1, value="Date:").font = self.LABEL_FONT
            ws.cell(row=3, column=2, value=self.date)
            self._summary_row = 5
        return ws

    def add_run(self, record: RunRecord) -> str:
        """Summary section plus a results sheet; returns the sheet name."""
        ws = self._summary_sheet()
        row = self._summary_row
        self._add_section_header(ws, f"{record.config.experiment.upper()} RUN", row)
        row += 1
        entries = [("wall time (s)", round(record.wall_time, 3)), ("version", record.version)]
        entries += [(f"provenance.{k}", v) for k, v in record.provenance.items()]
        entries += [(f"summary.{k}", v) for k, v in record.summary.items()]
        for label, value in entries:
            ws.cell(row=row, column=1, value=label).font = self.LABEL_FONT
            ws.cell(row=row, column=2, value=self._cell_value(value))
            row += 1
        self._summary_row = row + 1

        name = self._unique_name(record.config.experiment)
        sheet = self.wb.create_sheet(title=name)
        self._set_column_widths(sheet, {"A": 14, "B": 28, "C": 12, "D": 12, "E": 16,
                                        "F": 14, "G": 11, "H": 16, "I": 16})
        self._add_table_header(sheet, RESULT_COLUMNS, 1)
        for r, values in enumerate(record.results[RESULT_COLUMNS].itertuples(index=False), 2):
            for c, value in enumerate(values, 1):
                cell = sheet.cell(row=r, column=c, value=self._cell_value(value))
                cell.border = self.THIN_BORDER
        sheet.freeze_panes = "A2"
        return name

    def add_acceptance(self, report: AcceptanceReport) -> str:
        ws = self._summary_sheet()
        row = self._summary_row
        self._add_section_header(ws, f"ACCEPTANCE ({report.tier.upper()} TIER)", row)
        row += 1
        for label, value in (("seed", report.seed), ("workers", report.workers),
                             ("all passed", "Yes" if report.passed else "No"),
                             ("executed", f"{report.executed_fraction:.0%}")):
            ws.cell(row=row, column=1, value=label).font = self.LABEL_FONT
            ws.cell(row=row, column=2, value=value)
            row += 1
        self._summary_row = row + 1

        name = self._unique_name("acceptance")
        sheet = self.wb.create_sheet(title=name)
        headers = ["Item", "Status", "Measured", "Target", "Tolerance", "Samples", "Seconds", "Error"]
        self._set_column_widths(sheet, {"A": 30, "B": 10, "C": 14, "D": 44, "E": 28,
                                        "F": 10, "G": 10, "H": 50})
        self._add_table_header(sheet, headers, 1)
        for r, item in enumerate(report.items, 2):
            status = "PASS" if item.passed else ("ERROR" if item.error else "FAIL")
            values = [item.name, status, item.measured, item.target, item.tolerance,
                      item.n_samples, round(item.seconds, 2), item.error]
            for c, value in enumerate(values, 1):
                cell = sheet.cell(row=r, column=c, value=self._cell_value(value))
                cell.border = self.THIN_BORDER
            sheet.cell(row=r, column=2).font = self.PASS_FONT if item.passed else self.FAIL_FONT
        sheet.freeze_panes = "A2"
        return name

    def save(self, output_path: Union[str, Path]) -> str:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        self._summary_sheet()
        self.wb.save(output_path)
        logger.info("workbook saved to %s", output_path)
        return str(output_path)


def export_workbook(records: Iterable[RunRecord], output_path: Union[str, Path],
                    acceptance: Union[AcceptanceReport, None] = None) -> str:
    workbook = RunWorkbook()
    for record in records:
        workbook.add_run(record)
    if acceptance is not None:
        workbook.add_acceptance(acceptance)
    return workbook.save(output_path)


def workbook_from_runs(run_dirs: Iterable[Union[str, Path]], output_path: Union[str, Path]) -> str:
    """Reload finished runs from their output directories and export them."""
    return export_workbook([RunRecord.load(d) for d in run_dirs], output_path)
