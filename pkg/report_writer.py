"""
Run Reports
Output folders and report files for verification runs.

Outputs are saved to: outputs/YYYY-MM-DD_NNN/ (or the folder given with --out)
  - <suite>.csv       - pandas table, floats as %.10e
  - <suite>.txt       - plain-text report
  - failures.json     - [{"suite", "check", "value", "limit"}]
"""

import glob
import json
import os
from datetime import datetime
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import OUTPUTS_DIR

CHECK_COLUMNS = ['check', 'value', 'limit', 'passed']
FLOAT_FORMAT = '%.10e'


def checks_frame(rows: Iterable[Tuple[str, float, float]]) -> pd.DataFrame:
    """Check table from (check, value, limit) rows; a check passes when value <= limit."""
    records = []
    for check, value, limit in rows:
        value = float(value)
        records.append({'check': check, 'value': value, 'limit': float(limit),
                        'passed': bool(np.isfinite(value) and value <= limit)})
    return pd.DataFrame(records, columns=CHECK_COLUMNS)


def get_run_info(outputs_dir: str = OUTPUTS_DIR, today: Optional[str] = None):
    """Get today's date and next run number"""
    today = today or datetime.now().strftime('%Y-%m-%d')
    run_nums = []
    for path in glob.glob(os.path.join(outputs_dir, f'{today}_*')):
        try:
            run_nums.append(int(os.path.basename(path).split('_')[-1]))
        except ValueError:
            pass
    next_run = max(run_nums) + 1 if run_nums else 1
    return today, next_run, f"{today}_{next_run:03d}"


def create_output_folder(out: Optional[str] = None, outputs_dir: str = OUTPUTS_DIR) -> str:
    """Create the run folder: `out` when given, else the next dated run folder."""
    if out is None:
        _, _, run_id = get_run_info(outputs_dir)
        out = os.path.join(outputs_dir, run_id)
    os.makedirs(out, exist_ok=True)
    return out


def write_table(folder: str, suite: str, table: pd.DataFrame) -> str:
    path = os.path.join(folder, f'{suite}.csv')
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_text(folder: str, suite: str, lines: Sequence[str]) -> str:
    path = os.path.join(folder, f'{suite}.txt')
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')
    return path


def check_lines(title: str, table: pd.DataFrame) -> List[str]:
    """Plain-text rendering of a check table."""
    lines = [title, '=' * 80]
    for row in table.itertuples(index=False):
        status = 'PASS' if row.passed else 'FAIL'
        lines.append(f"  {status}  {row.check:<40} {row.value:.3e}  (limit {row.limit:.1e})")
    return lines


def failures_from(suite: str, table: pd.DataFrame) -> List[Dict]:
    """Failed rows of a check table in the failures.json layout."""
    if 'passed' not in table.columns:
        return []
    failed = table[~table['passed'].astype(bool)]
    return [{'suite': suite, 'check': str(row.check), 'value': float(row.value), 'limit': float(row.limit)}
            for row in failed.itertuples(index=False)]


def write_failures(folder: str, failures: List[Dict]) -> str:
    path = os.path.join(folder, 'failures.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(failures, f, indent=2)
    return path
