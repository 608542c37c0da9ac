"""
Run Summary Workbook
Collects every CSV table of a run folder into summary.xlsx: one sheet per
table plus an overview sheet with the pass/fail counts.
"""

import glob
import json
import os
from datetime import datetime
from typing import Dict, List

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter

HEADER_FILL = PatternFill(start_color="1E7B34", end_color="1E7B34", fill_type="solid")
HEADER_FONT = Font(bold=True, color="FFFFFF", size=11)
FAIL_FILL = PatternFill(start_color="FFCCCC", end_color="FFCCCC", fill_type="solid")
COLUMN_WIDTH = 22
MAX_SHEET_NAME = 31


def _sheet_name(path: str, used: Dict[str, int]) -> str:
    base = os.path.splitext(os.path.basename(path))[0][:MAX_SHEET_NAME]
    count = used.get(base, 0)
    used[base] = count + 1
    return base if count == 0 else f"{base[:MAX_SHEET_NAME - 3]}_{count}"


def _write_header(ws, headers: List[str]):
    for col, header in enumerate(headers, 1):
        cell = ws.cell(row=1, column=col, value=header)
        cell.fill = HEADER_FILL
        cell.font = HEADER_FONT
        cell.alignment = Alignment(horizontal='center', wrap_text=True)
        ws.column_dimensions[get_column_letter(col)].width = COLUMN_WIDTH
    ws.freeze_panes = 'A2'


def _write_table(ws, table: pd.DataFrame):
    _write_header(ws, [str(c) for c in table.columns])
    failed_col = list(table.columns).index('passed') + 1 if 'passed' in table.columns else None
    for row_idx, row in enumerate(table.itertuples(index=False), 2):
        for col, value in enumerate(row, 1):
            ws.cell(row=row_idx, column=col, value=value.item() if hasattr(value, 'item') else value)
        if failed_col and not bool(row[failed_col - 1]):
            for col in range(1, len(row) + 1):
                ws.cell(row=row_idx, column=col).fill = FAIL_FILL


def create_summary_workbook(folder: str) -> str:
    """Write <folder>/summary.xlsx and return its path."""
    paths = sorted(glob.glob(os.path.join(folder, '*.csv')))
    if not paths:
        raise FileNotFoundError(f"no CSV tables in {folder}")

    wb = Workbook()
    overview = wb.active
    overview.title = "Overview"
    _write_header(overview, ['Table', 'Rows', 'Checks', 'Failed'])

    used: Dict[str, int] = {}
    for row_idx, path in enumerate(paths, 2):
        table = pd.read_csv(path)
        name = _sheet_name(path, used)
        _write_table(wb.create_sheet(name), table)
        checks = int(table['passed'].size) if 'passed' in table.columns else 0
        failed = int((~table['passed'].astype(bool)).sum()) if checks else 0
        for col, value in enumerate([name, len(table), checks, failed], 1):
            overview.cell(row=row_idx, column=col, value=value)
        if failed:
            overview.cell(row=row_idx, column=4).fill = FAIL_FILL

    footer = len(paths) + 3
    overview.cell(row=footer, column=1, value="Generated:").font = Font(bold=True)
    overview.cell(row=footer, column=2, value=datetime.now().strftime('%Y-%m-%d %H:%M:%S'))
    failures_path = os.path.join(folder, 'failures.json')
    if os.path.exists(failures_path):
        with open(failures_path, 'r', encoding='utf-8') as f:
            failures = json.load(f)
        overview.cell(row=footer + 1, column=1, value="Recorded failures:").font = Font(bold=True)
        overview.cell(row=footer + 1, column=2, value=len(failures))

    out = os.path.join(folder, 'summary.xlsx')
    wb.save(out)
    return out
