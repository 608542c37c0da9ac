import json
import os

import pytest

from cli import COMMANDS, SUITES, build_parser, main
from field_io import read_field


@pytest.mark.parametrize('argv', [[], ['verify'], ['verify', 'everything'], ['iterate', 'now']])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_empty_config_exits_2(tmp_path):
    path = tmp_path / 'empty.cfg'
    path.write_text('# only a comment\n', encoding='utf-8')
    assert main(['check', 'params', '--config', str(path), '--out', str(tmp_path / 'run')]) == 2


def test_bad_config_exits_2(tmp_path):
    path = tmp_path / 'bad.cfg'
    path.write_text('colour = red\n', encoding='utf-8')
    assert main(['check', 'params', '--config', str(path)]) == 2
    assert main(['check', 'params', '--config', str(tmp_path / 'missing.cfg')]) == 2


def test_every_command_has_a_suite():
    names = {f"{c} {t}" if t else c for c, targets in COMMANDS.items() for t in (targets or (None,))}
    assert names - {'report'} == set(SUITES)
    assert build_parser().parse_args(['verify', 'block', '--grid', '64']).grid == 64


def test_paper_constraints_pass(tmp_path, capsys):
    folder = tmp_path / 'params'
    assert main(['check', 'params', '--mode', 'paper', '--out', str(folder)]) == 0
    assert 'ALL CHECKS PASSED' in capsys.readouterr().out
    for name in ('constraints.csv', 'constraints_improved.csv', 'schedule.csv', 'constraints.txt'):
        assert os.path.exists(folder / name)
    with open(folder / 'failures.json') as f:
        assert json.load(f) == []


def test_stage0_shear_run(tmp_path):
    folder = tmp_path / 'shear'
    assert main(['stage0', 'shear', '--grid', '32', '--out', str(folder)]) == 0
    snapshot = read_field(str(folder / 'stage0_shear.field'))
    assert len(snapshot) == 9
    assert snapshot.grid.resolution == 32


def test_report_collects_tables(tmp_path):
    folder = tmp_path / 'params'
    main(['check', 'params', '--mode', 'paper', '--out', str(folder)])
    assert main(['report', '--out', str(folder)]) == 0
    assert os.path.exists(folder / 'summary.xlsx')
    assert main(['report']) == 2
    assert main(['report', '--out', str(tmp_path / 'nothing')]) == 1
