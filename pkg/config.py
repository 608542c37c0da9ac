"""
Run Configuration
Default settings for the convex-integration toolkit and a loader for plain
key=value configuration files.

Defaults live here as module constants so scripts can simply
`from config import GRID_RESOLUTION, RESIDUAL_TOL`. A config file overrides
any of them:

    # toy run
    mode = toy
    grid = 128
    lambda0 = 4
    beta = 1/245
"""

import os
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from typing import Any, Dict, Optional

# Grid
SIDE_LENGTH = 1.0
GRID_RESOLUTION = 256
DEALIAS = True

# Tolerances
SPECTRAL_TOL = 1e-10
RESIDUAL_TOL = 1e-5
ODE_TOL = 1e-10

# Paper schedule (exact rationals)
PAPER_EXPONENTS = {
    'beta': Fraction(1, 245),
    'mu': Fraction(53, 10),
    'kappa': Fraction(3),
    'sigma': Fraction(110),
    'n': Fraction(16),
    'alpha': Fraction(1, 10**5),
    'pbar': Fraction(6501, 6500),
}

# Toy schedule: one full stage fits a desk-size grid
TOY_EXPONENTS = {
    'beta': Fraction(1, 245),
    'mu': Fraction(6, 5),
    'kappa': Fraction(1),
    'sigma': Fraction(2),
    'n': Fraction(16),
    'alpha': Fraction(1, 100),
    'pbar': Fraction(6501, 6500),
}
PAPER_LAMBDA0 = 2
TOY_LAMBDA0 = 4

# Building blocks
BLOCK_ALPHA = Fraction(1, 5)
TOY_BLOCK_ALPHA = Fraction(1, 2)
TOY_BLOCK_RADIUS = 0.05
DIPOLE_R = 0.05

# Stage assembly
CELL_INDEX = 5
CELL_SAMPLES = 256
TOY_DELTA_NEXT = 1.0e5

# Reproducibility and output
SEED = 20240601
OUTPUTS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'outputs')


class ConfigError(ValueError):
    """Raised for unreadable or unknown configuration entries."""


@dataclass(frozen=True)
class RunConfig:
    mode: str = 'toy'
    side_length: float = SIDE_LENGTH
    grid: int = GRID_RESOLUTION
    seed: int = SEED
    tol: float = SPECTRAL_TOL
    residual_tol: float = RESIDUAL_TOL
    lambda0: Optional[int] = None
    sigma: Optional[Fraction] = None
    beta: Optional[Fraction] = None
    mu: Optional[Fraction] = None
    kappa: Optional[Fraction] = None
    n: Optional[Fraction] = None
    alpha: Optional[Fraction] = None
    pbar: Optional[Fraction] = None
    block_alpha: Fraction = TOY_BLOCK_ALPHA
    block_radius: float = TOY_BLOCK_RADIUS
    smoothing_ell: Optional[float] = None
    delta_next: Optional[float] = TOY_DELTA_NEXT
    r_next: Optional[float] = None
    cell_index: int = CELL_INDEX
    cell_samples: int = CELL_SAMPLES
    dealias: bool = DEALIAS
    freeze_prefix: Optional[float] = None
    r: float = DIPOLE_R
    out: Optional[str] = None

    def exponents(self) -> Dict[str, Fraction]:
        """Mode defaults with any explicitly configured exponent applied."""
        base = dict(PAPER_EXPONENTS if self.mode == 'paper' else TOY_EXPONENTS)
        for key in base:
            value = getattr(self, key)
            if value is not None:
                base[key] = Fraction(value)
        return base

    def base_frequency(self) -> int:
        if self.lambda0 is not None:
            return int(self.lambda0)
        return PAPER_LAMBDA0 if self.mode == 'paper' else TOY_LAMBDA0

    def with_overrides(self, **overrides: Any) -> 'RunConfig':
        """Return a copy with every non-None override applied (CLI flags)."""
        clean = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(clean) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}")
        return replace(self, **clean)


def parse_value(raw: str) -> Any:
    """Parse a config value: bool, int, exact fraction, float or string."""
    text = raw.strip()
    lowered = text.lower()
    if lowered in ('true', 'yes', 'on'):
        return True
    if lowered in ('false', 'no', 'off'):
        return False
    if lowered in ('none', ''):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    if '/' in text:
        try:
            return Fraction(text)
        except (ValueError, ZeroDivisionError):
            pass
    try:
        return float(text)
    except ValueError:
        return text


def _coerce(name: str, value: Any) -> Any:
    if value is None:
        return None
    if name in ('sigma', 'beta', 'mu', 'kappa', 'n', 'alpha', 'pbar', 'block_alpha'):
        return Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(10**9)
    if name in ('grid', 'seed', 'lambda0', 'cell_index', 'cell_samples'):
        return int(value)
    if name in ('side_length', 'tol', 'residual_tol', 'block_radius', 'smoothing_ell',
                'delta_next', 'r_next', 'freeze_prefix', 'r'):
        return float(value)
    if name == 'dealias':
        return bool(value)
    return str(value)


def read_entries(path: str) -> Dict[str, Any]:
    """Read raw key=value entries from a config file."""
    entries = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{path}:{line_no}: expected key = value, got '{line}'")
            key, value = line.split('=', 1)
            entries[key.strip().lower()] = (parse_value(value), line_no)
    return entries


def load_config(path: Optional[str] = None) -> RunConfig:
    """Load a RunConfig from a key=value file (defaults when path is None)."""
    config = RunConfig()
    if path is None:
        return config

    known = {f.name for f in fields(RunConfig)}
    values = {}
    for key, (value, line_no) in read_entries(path).items():
        if key not in known:
            raise ConfigError(f"{path}:{line_no}: unknown key '{key}'")
        values[key] = _coerce(key, value)

    if values.get('mode') not in (None, 'paper', 'toy'):
        raise ConfigError(f"mode must be 'paper' or 'toy', got '{values['mode']}'")
    return replace(config, **values)
