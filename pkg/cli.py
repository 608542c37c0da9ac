"""
Convex Integration Toolkit
Runs the verification suites, the exact parameter checker and the stage
constructions, writing every table to a run folder.

Usage:
    python cli.py verify dipole --r 0.05
    python cli.py verify antidiv|block|decomposition|cancellation [--grid N] [--seed N]
    python cli.py check params --mode paper
    python cli.py stage0 shear|endpoints
    python cli.py iterate --config toy.cfg --out outputs/toy
    python cli.py report --out outputs/toy

Outputs (one run folder, outputs/YYYY-MM-DD_NNN unless --out is given):
    - <suite>.csv / <suite>.txt   Tables and plain-text check reports
    - failures.json               Failed checks (possibly empty)
    - *.field                     Binary field snapshots (stage0, iterate)
    - summary.xlsx                Workbook of every CSV (report)
"""

import argparse
import os
import sys
from typing import Callable, Dict, List

import numpy as np
import pandas as pd

from anti_divergence import verify_antidivergence
from cancellation import cancellation_checks
from config import BLOCK_ALPHA, ConfigError, RunConfig, load_config, read_entries
from field_io import write_field
from iteration import (
    ParameterSchedule, ToyOverrides, assemble_stage, boundary_deltas, cell_times, check_constraints,
    constraint_lines, diagnostics, stage0_endpoints, stage0_shear, stage_checks, stage_residual,
)
from lamb_chaplygin import DipoleParams, fit_exponents, mean_velocity, norm_sweep, verify_decomposition, verify_dipole
from moving_block import toy_block, verify_block
from report_workbook import create_summary_workbook
from report_writer import (
    check_lines, checks_frame, create_output_folder, failures_from, write_failures, write_table, write_text,
)
from spectral_torus import SpaceTimeField, TorusGrid, TorusScalarField, TorusVectorField, space_time_norm
from stress_decomposition import trajectory_ratio, verify_stress_decomposition

COMMANDS = {
    'verify': ('dipole', 'antidiv', 'block', 'decomposition', 'cancellation'),
    'check': ('params',),
    'stage0': ('shear', 'endpoints'),
    'iterate': (),
    'report': (),
}
DIPOLE_RADII = (0.05, 0.02, 0.01)
ANTIDIV_SAMPLES = 100
DECOMPOSITION_LAMBDA = 16
DECOMPOSITION_TAU = 1.0 / 16.0
CANCELLATION_LAMBDAS = (16, 24, 32)
CANCELLATION_TAU = 0.1
# sampling resolves every grid mode of the moving profile, so the sweep caps the grid
CANCELLATION_RESOLUTION = 64
BLOCK_SAMPLES = 8
# trapezoid error of the C^{1,1} core on the default grid
BLOCK_SOURCE_TOL = 1e-3
ENDPOINT_EPS = 0.1
SNAPSHOT_FRAMES = 9


def banner(title: str, detail: str = ''):
    print(f"\n{'=' * 80}")
    print(f"  {title.upper()}")
    if detail:
        print(f"  {detail}")
    print(f"{'=' * 80}")


class Run:
    """Output folder and failure list of one command."""

    def __init__(self, config: RunConfig, folder: str):
        self.config = config
        self.folder = folder
        self.failures: List[Dict] = []

    @property
    def grid(self) -> TorusGrid:
        return TorusGrid(self.config.side_length, self.config.grid)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.config.seed)

    def table(self, name: str, table: pd.DataFrame):
        write_table(self.folder, name, table)
        print(f"  Saved: {name}.csv ({len(table)} rows)")

    def checks(self, suite: str, table: pd.DataFrame, title: str):
        write_table(self.folder, suite, table)
        write_text(self.folder, suite, check_lines(title, table))
        for row in table.itertuples(index=False):
            status = 'OK' if row.passed else 'FAIL'
            print(f"  [{status}] {row.check:<40} {row.value:.3e}  (limit {row.limit:.1e})")
        self.failures += failures_from(suite, table)

    def error(self, suite: str, exc: Exception):
        print(f"  [FAIL] {suite}: {exc}")
        self.failures.append({'suite': suite, 'check': type(exc).__name__, 'value': None, 'limit': None,
                              'message': str(exc)})

    def snapshot(self, name: str, field_):
        write_field(os.path.join(self.folder, name), field_)
        print(f"  Saved: {name}")


def _snapshot_frames(series: SpaceTimeField) -> SpaceTimeField:
    keep = np.zeros(len(series), dtype=bool)
    keep[np.unique(np.linspace(0, len(series) - 1, SNAPSHOT_FRAMES).round().astype(int))] = True
    return series.restrict(keep)


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def verify_dipole_suite(run: Run):
    params = DipoleParams(r=run.config.r, alpha=float(BLOCK_ALPHA))
    mean = mean_velocity(params)
    print(f"  Mean of W_r / r at r = {params.r:g}: ({mean[0]:.4f}, {mean[1]:.4f})")
    radii = tuple(sorted({params.r, *DIPOLE_RADII}, reverse=True))
    checks = pd.concat([verify_dipole(params, run.rng()), verify_decomposition(params, radii)], ignore_index=True)
    run.checks('dipole', checks, 'DIPOLE IDENTITIES')
    sweep = norm_sweep(radii, alpha=params.alpha, quantities=('W', 'DW', 'divW'))
    run.table('dipole_norms', sweep)
    run.table('dipole_exponents', fit_exponents(sweep, params.alpha))


def verify_antidiv_suite(run: Run):
    checks = verify_antidivergence(run.rng(), run.grid, ANTIDIV_SAMPLES)
    run.checks('antidiv', checks, 'ANTI-DIVERGENCE ROUND TRIPS')


def verify_block_suite(run: Run):
    config = run.config
    grid = run.grid
    ell = config.smoothing_ell or max(config.block_radius / 50.0, 4.0 * grid.spacing)
    block = toy_block(grid, config.block_radius, ell, float(config.block_alpha), use_mask=config.dealias)
    residual, norms, checks = verify_block(block, BLOCK_SAMPLES, config.residual_tol, source_tol=BLOCK_SOURCE_TOL)
    run.table('block_residual', residual)
    run.table('block_norms', norms)
    run.checks('block', checks, 'MOVING BLOCK')


def verify_decomposition_suite(run: Run):
    checks = verify_stress_decomposition(run.rng(), run.grid, DECOMPOSITION_LAMBDA, 1.0, DECOMPOSITION_TAU)
    run.checks('decomposition', checks, 'STRESS DECOMPOSITION')


def verify_cancellation_suite(run: Run):
    grid = TorusGrid(run.config.side_length, min(run.config.grid, CANCELLATION_RESOLUTION))
    x = 2.0 * np.pi * grid.coordinates / grid.side_length
    amplitude = TorusScalarField(grid, 1.0 + 0.25 * np.sin(x[0]) * np.cos(x[1]) + 0.1 * np.cos(x[0]))
    sweep, checks = cancellation_checks(amplitude, CANCELLATION_LAMBDAS, CANCELLATION_TAU, run.rng())
    run.table('cancellation_sweep', sweep)
    run.checks('cancellation', checks, 'CANCELLATION')


def check_params_suite(run: Run):
    schedule = ParameterSchedule.from_config(run.config)
    improved = ParameterSchedule.from_config(run.config, improved=True)
    table = check_constraints(schedule)
    for row in table.itertuples(index=False):
        print(f"  [{'OK' if row.passed else 'FAIL'}] {row.constraint:<48} margin {row.margin}")
    run.table('constraints', table)
    run.table('constraints_improved', check_constraints(improved))
    run.table('schedule', schedule.table())
    write_text(run.folder, 'constraints', constraint_lines(schedule) + [''] + constraint_lines(improved))
    if schedule.mode == 'paper':
        run.failures += [{'suite': 'constraints', 'check': row.constraint, 'value': row.margin_float, 'limit': 0.0}
                         for row in table.itertuples(index=False) if not row.passed]
    else:
        print("  Toy mode: inequalities are reported, not enforced")


def _stage0(run: Run, kind: str):
    config = run.config
    grid = run.grid
    times = np.linspace(0.0, 1.0, config.cell_samples + 1)
    if kind == 'shear':
        state = stage0_shear(ParameterSchedule.from_config(config), grid, times, config.dealias)
    else:
        x = 2.0 * np.pi * grid.coordinates / grid.side_length
        zero = np.zeros_like(x[0])
        u_start = TorusVectorField(grid, np.stack([np.sin(x[1]), zero]))
        u_end = TorusVectorField(grid, np.stack([zero, np.sin(2.0 * x[0])]))
        state = stage0_endpoints(u_start, u_end, ENDPOINT_EPS, times, config.dealias)
    residual = stage_residual(state)
    run.table(f'stage0_{kind}_residual', residual)
    run.checks(f'stage0_{kind}', stage_checks(state, residual, config.tol), f'STAGE 0 ({kind.upper()})')
    run.snapshot(f'stage0_{kind}.field', _snapshot_frames(state.velocity))


def stage0_shear_suite(run: Run):
    _stage0(run, 'shear')


def stage0_endpoints_suite(run: Run):
    _stage0(run, 'endpoints')


def iterate_suite(run: Run):
    config = run.config
    grid = run.grid
    schedule = ParameterSchedule.from_config(config)
    k = config.cell_index
    times = cell_times(schedule, 0, k, config.cell_samples)
    print(f"  Stage 1: lambda = {schedule.frequency(1)}, tau = {schedule.tau(1):g}, interval {k}, "
          f"{times.size} samples on a {grid.resolution}^2 grid")
    state0 = stage0_shear(schedule, grid, times, config.dealias)
    residual0 = stage_residual(state0)
    run.table('stage0_residual', residual0)

    overrides = ToyOverrides.from_config(config, grid)
    new, parts = assemble_stage(state0, schedule, overrides, k)
    residual = stage_residual(new)
    run.table('stage1_residual', residual)
    measured = diagnostics(new, parts.mollified, pbar=float(schedule.pbar), delta_next=overrides.delta_next)
    run.table('stage1_diagnostics', measured)
    run.table('stage1_energy', measured[['time', 'energy']])
    run.table('stage1_stress_parts', pd.DataFrame(
        [{'part': name, 'stress_l1': space_time_norm(F, 'sup', 1.0)} for name, F in parts.stress_parts.items()],
        columns=['part', 'stress_l1']))
    run.table('stage1_cells', pd.DataFrame([{
        'direction': cell.i + 1, 'eta': cell.eta, 'x0_1': cell.choice.x0[0], 'x0_2': cell.choice.x0[1],
        'period': cell.period.period, 'count': cell.period.count, 'window': cell.period.window,
        'closure_defect': cell.closure_defect(),
        'trajectory_ratio': trajectory_ratio(cell.directions.lam, cell.r_next, overrides.delta_next, cell.partition.tau),
    } for cell in parts.cells]))

    boundary = boundary_deltas(new, parts.mollified, schedule.tau(1))
    run.table('stage1_boundary', boundary)
    scale = max(space_time_norm(new.velocity, 'sup', np.inf), 1.0)
    anchoring = float(boundary['velocity_delta'].max()) / scale if len(boundary) else 0.0
    checks = pd.concat([
        stage_checks(state0, residual0, config.tol),
        stage_checks(new, residual, config.residual_tol),
        checks_frame([('stage1_boundary_anchoring', anchoring, 1e-10)]),
    ], ignore_index=True)
    run.checks('iterate', checks, 'STAGE ITERATION')
    run.snapshot('stage1.field', new.velocity.frame(len(new.times) - 1))


SUITES: Dict[str, Callable[[Run], None]] = {
    'verify dipole': verify_dipole_suite,
    'verify antidiv': verify_antidiv_suite,
    'verify block': verify_block_suite,
    'verify decomposition': verify_decomposition_suite,
    'verify cancellation': verify_cancellation_suite,
    'check params': check_params_suite,
    'stage0 shear': stage0_shear_suite,
    'stage0 endpoints': stage0_endpoints_suite,
    'iterate': iterate_suite,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Convex-integration toolkit on the 2-torus')
    parser.add_argument('command', nargs='?', choices=sorted(COMMANDS), help='Command to run')
    parser.add_argument('target', nargs='?', help='Subcommand (verify, check and stage0)')
    parser.add_argument('--config', help='key=value configuration file')
    parser.add_argument('--out', help='Output directory (default: outputs/YYYY-MM-DD_NNN)')
    parser.add_argument('--seed', type=int, help='Seed for randomized checks')
    parser.add_argument('--grid', type=int, help='Grid resolution N')
    parser.add_argument('--mode', choices=['paper', 'toy'], help='Parameter schedule')
    parser.add_argument('--tol', type=float, help='Spectral tolerance')
    parser.add_argument('--r', type=float, help='Dipole core radius')
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage()
        return 2
    targets = COMMANDS[args.command]
    if targets and args.target not in targets:
        parser.print_usage()
        print(f"{args.command}: choose one of {', '.join(targets)}")
        return 2
    if not targets and args.target is not None:
        parser.print_usage()
        print(f"{args.command} takes no subcommand, got '{args.target}'")
        return 2

    try:
        if args.config is not None and not read_entries(args.config):
            parser.print_usage()
            print(f"{args.config}: configuration file is empty")
            return 2
        config = load_config(args.config).with_overrides(
            out=args.out, seed=args.seed, grid=args.grid, mode=args.mode, tol=args.tol, r=args.r)
    except (ConfigError, OSError) as e:
        print(f"Config error: {e}")
        return 2

    if args.command == 'report':
        if config.out is None:
            print("report needs --out (or out = ... in the config) naming a run folder")
            return 2
        banner('run summary workbook', f"Folder: {config.out}")
        try:
            path = create_summary_workbook(config.out)
        except FileNotFoundError as e:
            print(f"  [FAIL] report: {e}")
            return 1
        print(f"  Saved: {path}")
        return 0

    name = args.command if not targets else f"{args.command} {args.target}"
    folder = create_output_folder(config.out)
    run = Run(config, folder)
    banner(name, f"Mode: {config.mode}  Grid: {config.grid}  Seed: {config.seed}  Output: {folder}")
    try:
        SUITES[name](run)
    except Exception as e:
        run.error(name.replace(' ', '_'), e)
    write_failures(folder, run.failures)

    print(f"\n{'=' * 80}")
    print(f"  {'ALL CHECKS PASSED' if not run.failures else f'{len(run.failures)} FAILURE(S)'}")
    print(f"{'=' * 80}\n")
    return 0 if not run.failures else 1


if __name__ == "__main__":
    sys.exit(main())
