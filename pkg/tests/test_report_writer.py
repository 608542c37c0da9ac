import json
import os

import numpy as np
import pandas as pd
import pytest
from openpyxl import load_workbook

from report_workbook import create_summary_workbook
from report_writer import (
    CHECK_COLUMNS, check_lines, checks_frame, create_output_folder, failures_from, get_run_info, write_failures,
    write_table,
)


def test_checks_frame_passes_at_limit():
    table = checks_frame([('exact', 1e-6, 1e-6), ('over', 2.0, 1.0), ('nan', np.nan, 1.0)])
    assert list(table.columns) == CHECK_COLUMNS
    assert table['passed'].tolist() == [True, False, False]


def test_failures_layout():
    table = checks_frame([('ok', 0.0, 1.0), ('bad', 3.0, 1.0)])
    assert failures_from('block', table) == [{'suite': 'block', 'check': 'bad', 'value': 3.0, 'limit': 1.0}]
    assert failures_from('block', pd.DataFrame({'time': [0.0]})) == []


def test_check_lines_render_status():
    lines = check_lines('BLOCK', checks_frame([('ok', 0.0, 1.0), ('bad', 3.0, 1.0)]))
    assert lines[1] == '=' * 80
    assert 'PASS' in lines[2] and 'FAIL' in lines[3]


def test_run_numbers_increase(tmp_path):
    outputs = str(tmp_path)
    os.makedirs(os.path.join(outputs, '2026-01-02_001'))
    os.makedirs(os.path.join(outputs, '2026-01-02_007'))
    assert get_run_info(outputs, '2026-01-02')[2] == '2026-01-02_008'
    assert get_run_info(outputs, '2026-01-03')[2] == '2026-01-03_001'


def test_output_folder_and_tables(tmp_path):
    folder = create_output_folder(str(tmp_path / 'run'))
    path = write_table(folder, 'norms', pd.DataFrame({'p': [2.0], 'measured': [0.123456789012]}))
    assert open(path).read().splitlines()[1] == '2.0000000000e+00,1.2345678901e-01'
    failures = [{'suite': 'x', 'check': 'y', 'value': 1.0, 'limit': 0.0}]
    with open(write_failures(folder, failures)) as f:
        assert json.load(f) == failures


def test_summary_workbook(tmp_path):
    folder = str(tmp_path)
    write_table(folder, 'block', checks_frame([('ok', 0.0, 1.0), ('bad', 3.0, 1.0)]))
    write_table(folder, 'norms', pd.DataFrame({'p': [2.0, 3.0]}))
    write_failures(folder, [{'suite': 'block', 'check': 'bad', 'value': 3.0, 'limit': 1.0}])
    wb = load_workbook(create_summary_workbook(folder))
    assert wb.sheetnames == ['Overview', 'block', 'norms']
    overview = wb['Overview']
    assert [c.value for c in overview[2]] == ['block', 2, 2, 1]
    assert [c.value for c in overview[3]] == ['norms', 2, 0, 0]
    assert overview.cell(row=6, column=2).value == 1


def test_summary_workbook_needs_tables(tmp_path):
    with pytest.raises(FileNotFoundError):
        create_summary_workbook(str(tmp_path))
