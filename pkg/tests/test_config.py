from fractions import Fraction

import pytest

from config import (
    GRID_RESOLUTION, PAPER_EXPONENTS, TOY_LAMBDA0, ConfigError, RunConfig, load_config, parse_value, read_entries,
)


def _write(tmp_path, text):
    path = tmp_path / 'run.cfg'
    path.write_text(text, encoding='utf-8')
    return str(path)


@pytest.mark.parametrize('raw, expected', [
    ('yes', True),
    ('off', False),
    ('none', None),
    ('128', 128),
    ('1/245', Fraction(1, 245)),
    ('0.05', 0.05),
    ('paper', 'paper'),
])
def test_parse_value(raw, expected):
    assert parse_value(raw) == expected


def test_defaults_without_file():
    config = load_config()
    assert config.grid == GRID_RESOLUTION
    assert config.mode == 'toy'
    assert config.base_frequency() == TOY_LAMBDA0


def test_file_overrides_and_exact_fractions(tmp_path):
    path = _write(tmp_path, "# paper run\nmode = paper\ngrid = 128  # coarse\nmu = 53/10\nbeta = 0.004\n")
    config = load_config(path)
    assert config.mode == 'paper'
    assert config.grid == 128
    exponents = config.exponents()
    assert exponents['mu'] == Fraction(53, 10)
    assert exponents['beta'] == Fraction(1, 250)
    assert exponents['kappa'] == PAPER_EXPONENTS['kappa']


def test_unknown_key_names_line(tmp_path):
    path = _write(tmp_path, "grid = 64\nwidth = 3\n")
    with pytest.raises(ConfigError, match=':2:'):
        load_config(path)


def test_malformed_line(tmp_path):
    with pytest.raises(ConfigError):
        read_entries(_write(tmp_path, "grid 64\n"))


def test_bad_mode(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "mode = huge\n"))


def test_comment_only_file_is_empty(tmp_path):
    assert read_entries(_write(tmp_path, "# nothing here\n\n")) == {}


def test_cli_overrides_skip_none():
    config = RunConfig().with_overrides(grid=64, seed=None)
    assert config.grid == 64
    assert config.seed == RunConfig().seed
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(colour='red')
