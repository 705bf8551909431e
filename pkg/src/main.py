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

"""Command line interface.

Every command writes into its own run directory (export/<command>_revNNN
unless --output is given) together with a manifest.json listing all
emitted files with their sha256 digest.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import itertools
import os
import shlex
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, TypeVar

import numpy as np

import config
import core
import log_config
import misc
import report
from bilevel import (
    BilevelConfig,
    optimize_dfr,
    optimize_gdro,
    optimize_gw_erm,
    optimize_jtt,
    optimize_subg,
)
from comparison import ComparisonSetup, run_comparison, run_sweep
from datafile import (
    RunManifest,
    load_csv,
    read_run_config,
    read_shift,
    write_csv,
    write_shift,
    write_trace,
    write_weights,
)
from estimators import PenaltySpec, SolverConfig
from synthetic import SyntheticShiftSpec, generate_balanced_test, generate_spurious
from theory import LinRegDGP, simulate_mse
from weights import ShiftSpec

log = log_config.getLogger(__name__)

EnumT = TypeVar("EnumT", bound=Enum)


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit code 1)."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise core.DomainError(message)


def parse_grid(text: str, integer: bool = False) -> list[float]:
    """Parse `a,b,c` or a log-spaced range `start:stop[:points_per_decade]`.

    >>> parse_grid("1e2:1e4:1")
    [100.0, 1000.0, 10000.0]
    """
    try:
        if ":" in text:
            parts = [float(x) for x in text.split(":")]
            if len(parts) not in (2, 3) or parts[0] <= 0 or parts[1] < parts[0]:
                raise ValueError(text)
            per_decade = int(parts[2]) if len(parts) == 3 else 10
            decades = np.log10(parts[1]) - np.log10(parts[0])
            count = max(2, int(round(decades * per_decade)) + 1)
            grid = np.logspace(np.log10(parts[0]), np.log10(parts[1]), count)
            values = [float(v) for v in grid]
        else:
            values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise core.DomainError(f"invalid grid {text!r}") from e
    if not values:
        raise core.DomainError(f"empty grid {text!r}")
    if integer:
        return [float(v) for v in dict.fromkeys(int(round(v)) for v in values)]
    return values


class Options:
    """Merged options: flag, then --config file, then config.ini default."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.args = args
        self.file: dict[str, Any] = {}
        if args.config is not None:
            self.file = read_run_config(Path(args.config))
        self.snapshot: dict[str, Any] = {}

    def get(self, name: str, default: Any = None, cast: Callable = lambda x: x) -> Any:
        value = getattr(self.args, name, None)
        if value is None:
            value = self.file.get(name, default)
        if value is not None:
            try:
                value = cast(value)
            except (TypeError, ValueError) as e:
                raise core.DomainError(f"invalid value for {name}: {value!r}") from e
        self.snapshot[name] = value
        return value

    def require(self, name: str, cast: Callable = lambda x: x) -> Any:
        value = self.get(name, cast=cast)
        if value is None:
            raise core.DomainError(f"--{name.replace('_', '-')} is required")
        return value

    def choice(self, name: str, kind: type[EnumT], default: Any = None) -> EnumT:
        """Enum member named by a flag or the --config file.

        Raises:
            core.DomainError: Missing without `default`, or not a member value.
        """
        if default is None:
            text = self.require(name, str)
        else:
            text = self.get(name, default, str)
        try:
            return kind(text)
        except ValueError as e:
            allowed = ", ".join(str(m.value) for m in kind)
            raise core.DomainError(
                f"invalid value for {name}: {text!r} (expected one of {allowed})"
            ) from e


def _bilevel_config(opts: Options, seed: int) -> BilevelConfig:
    penalty = PenaltySpec(
        opts.choice("penalty", core.PenaltyKind, config.PENALTY.value),
        opts.get("penalty_strength", config.PENALTY_STRENGTH, float),
        config.SMOOTHING_EPSILON,
    )
    solver = SolverConfig(
        max_iterations=opts.get("max_iterations", config.MAX_ITERATIONS, int)
    )
    return BilevelConfig(
        learning_rate=opts.get("learning_rate", config.LEARNING_RATE, float),
        momentum=opts.get("momentum", config.MOMENTUM, float),
        max_steps=opts.get("steps", config.MAX_STEPS, int),
        q_learning_rate=opts.get("q_learning_rate", config.Q_LEARNING_RATE, float),
        damping=opts.get("damping", config.IFT_DAMPING, float),
        penalty=penalty,
        solver=solver,
        seed=seed,
        stratified_split=opts.get("stratified", False, bool),
    )


def _generator(opts: Options, seed: int) -> SyntheticShiftSpec:
    defaults = SyntheticShiftSpec()
    return SyntheticShiftSpec(
        n=opts.get("n", defaults.n, int),
        d=opts.get("d", defaults.d, int),
        class_balance=opts.get("class_balance", defaults.class_balance, float),
        spurious_strength=opts.get(
            "spurious_strength", defaults.spurious_strength, float
        ),
        core_strength=opts.get("core_strength", defaults.core_strength, float),
        minority_fraction=opts.get(
            "minority_fraction", defaults.minority_fraction, float
        ),
        noise_sd=opts.get("noise_sd", defaults.noise_sd, float),
        seed=seed,
    )


def _dgp(
    opts: Options, d: Optional[int] = None, p_tr: Optional[float] = None
) -> LinRegDGP:
    return LinRegDGP(
        a1=opts.get("a_diff", 1.0, float),
        a0=0.0,
        sigma2=opts.get("sigma2", 1.0, float),
        d=opts.get("d", 10, int) if d is None else d,
        p_train=opts.get("p_tr", 0.9, float) if p_tr is None else p_tr,
    )


#
# Commands
#


def cmd_theory(opts: Options, out: Path, manifest: RunManifest) -> None:
    p_test = opts.get("p_te", 0.5, float)
    n_grid = [int(n) for n in parse_grid(opts.get("n_grid", "1e2:1e7"), integer=True)]
    if d_text := opts.get("d_grid", None, str):
        d_grid = [int(d) for d in parse_grid(d_text, integer=True)]
    else:
        d_grid = [opts.get("d", 10, int)]
    if p_tr_text := opts.get("p_tr_grid", None, str):
        p_tr_grid = parse_grid(p_tr_text)
    else:
        p_tr_grid = [opts.get("p_tr", 0.9, float)]

    entries: list[report.OptimalWeightEntry] = []
    for d, p_tr in itertools.product(d_grid, p_tr_grid):
        entries.extend(report.theory_entries(_dgp(opts, d, p_tr), p_test, n_grid))
    manifest.add_output(report.export_csv(out / "theory.csv", entries))


def cmd_simulate(opts: Options, out: Path, manifest: RunManifest) -> None:
    dgp = _dgp(opts)
    p_test = opts.get("p_te", 0.5, float)
    n = opts.get("n", 5000, int)
    seed = opts.require("seed", int)
    manifest.seeds = [seed]
    default_grid = ",".join(f"{p:g}" for p in np.linspace(0, 1, 11))
    p_grid = parse_grid(opts.get("p_grid", default_grid))
    points = simulate_mse(
        dgp,
        p_test,
        p_grid,
        n,
        opts.get("reps", 1000, int),
        seed,
        workers=opts.get("workers", config.WORKERS, int),
    )
    entries = report.simulation_entries(dgp, p_test, n, points)
    manifest.add_output(report.export_csv(out / "simulation.csv", entries))


def cmd_gen_data(opts: Options, out: Path, manifest: RunManifest) -> None:
    seed = opts.require("seed", int)
    manifest.seeds = [seed]
    spec = _generator(opts, seed)
    data, shift = generate_spurious(spec)
    manifest.add_output(write_csv(out / "train.csv", data))
    manifest.add_output(write_shift(out / "shift.json", shift))
    if test_size := opts.get("test_size", None, int):
        test = generate_balanced_test(spec, test_size, [seed, 1])
        manifest.add_output(write_csv(out / "test.csv", test))


def _shift(opts: Options, manifest: RunManifest) -> ShiftSpec:
    path = Path(opts.require("shift", str))
    manifest.add_input(path)
    return read_shift(path)


def cmd_optimize(opts: Options, out: Path, manifest: RunManifest) -> None:
    seed = opts.require("seed", int)
    manifest.seeds = [seed]
    method = opts.choice("method", core.Method)
    cfg = _bilevel_config(opts, seed)
    data_path = Path(opts.require("data", str))
    data = load_csv(data_path)
    manifest.add_input(data_path)
    n_train = round(opts.get("train_fraction", config.TRAIN_FRACTION, float) * data.n)

    if method == core.Method.GW_ERM:
        result = optimize_gw_erm(data, _shift(opts, manifest), n_train, cfg)
    elif method == core.Method.SUBG:
        result = optimize_subg(data, _shift(opts, manifest), n_train, cfg)
    elif method == core.Method.DFR:
        ensemble_size = opts.get("ensemble_size", config.ENSEMBLE_SIZE, int)
        result = optimize_dfr(
            data, _shift(opts, manifest), cfg, ensemble_size, n_train
        )
    elif method == core.Method.GDRO:
        result = optimize_gdro(data, n_train, cfg)
    else:
        result = optimize_jtt(data, n_train, cfg)

    manifest.add_output(write_trace(out / "trace.jsonl", result.trace))
    manifest.add_output(write_weights(out / "weights.json", result))


def cmd_compare(opts: Options, out: Path, manifest: RunManifest) -> None:
    seed = opts.require("seed", int)
    seeds = [seed + i for i in range(opts.get("seeds", config.SEEDS, int))]
    manifest.seeds = seeds
    setup = ComparisonSetup(
        method=opts.choice("method", core.Method),
        generator=_generator(opts, seed),
        bilevel=_bilevel_config(opts, seed),
        train_fraction=opts.get("train_fraction", config.TRAIN_FRACTION, float),
        data_fraction=opts.get("data_fraction", 1.0, float),
        test_size=opts.get("test_size", 10_000, int),
        ensemble_size=opts.get("ensemble_size", config.ENSEMBLE_SIZE, int),
    )
    workers = opts.get("workers", config.WORKERS, int)

    entries: list[report.ReportEntry] = []
    seed_rows: list[report.ReportEntry] = []
    sweep_name = opts.get("sweep", None, str)
    if sweep_name is None:
        result = run_comparison(setup, seeds, workers)
        entries.append(report.comparison_entry(result))
        seed_rows.extend(report.seed_entries(result))
    else:
        sweep = opts.choice("sweep", core.Sweep)
        values = parse_grid(opts.require("sweep_values", str))
        for value, result in run_sweep(setup, sweep, values, seeds, workers):
            entries.append(report.comparison_entry(result, sweep.value, value))
            seed_rows.extend(report.seed_entries(result, value))

    manifest.add_output(report.export_csv(out / "comparison.csv", entries))
    manifest.add_output(report.export_csv(out / "seeds.csv", seed_rows))
    if opts.get("excel", config.EXPORT_EXCEL, bool):
        xlsx = report.export_comparison_as_excel(
            out / "comparison.xlsx", entries + seed_rows, manifest.command
        )
        manifest.add_output(xlsx)


COMMANDS: dict[str, Callable[[Options, Path, RunManifest], None]] = {
    "theory": cmd_theory,
    "simulate": cmd_simulate,
    "gen-data": cmd_gen_data,
    "optimize": cmd_optimize,
    "compare": cmd_compare,
}


#
# Parser
#


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--output", help="run directory (default export/<cmd>_revNNN)")


def _add_dgp(p: argparse.ArgumentParser) -> None:
    p.add_argument("--p-tr", dest="p_tr", type=float)
    p.add_argument("--p-te", dest="p_te", type=float)
    p.add_argument("--d", type=int)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--a-diff", dest="a_diff", type=float, help="a1 - a0")


def _add_generator(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--class-balance", dest="class_balance", type=float)
    p.add_argument("--spurious-strength", dest="spurious_strength", type=float)
    p.add_argument("--core-strength", dest="core_strength", type=float)
    p.add_argument("--minority-fraction", dest="minority_fraction", type=float)
    p.add_argument("--noise-sd", dest="noise_sd", type=float)
    p.add_argument("--test-size", dest="test_size", type=int)


def _add_bilevel(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=[m.value for m in core.Method])
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--q-learning-rate", dest="q_learning_rate", type=float)
    p.add_argument("--damping", type=float)
    p.add_argument("--penalty", choices=[k.value for k in core.PenaltyKind])
    p.add_argument("--penalty-strength", dest="penalty_strength", type=float)
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--ensemble-size", dest="ensemble_size", type=int)
    p.add_argument("--stratified", action="store_true", default=None)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog=config.PROGRAM.lower())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("theory", help="optimal p over grids of n, d and p_tr")
    _add_common(p)
    _add_dgp(p)
    p.add_argument("--n-grid", dest="n_grid", help="a,b,c or start:stop[:per_decade]")
    p.add_argument("--d-grid", dest="d_grid", help="dimensions, overrides --d")
    p.add_argument("--p-tr-grid", dest="p_tr_grid", help="overrides --p-tr")

    p = sub.add_parser("simulate", help="Monte Carlo risk of weighted least squares")
    _add_common(p)
    _add_dgp(p)
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--p-grid", dest="p_grid")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("gen-data", help="spurious correlation dataset")
    _add_common(p)
    _add_generator(p)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("optimize", help="optimize weights on a dataset file")
    _add_common(p)
    _add_bilevel(p)
    p.add_argument("--data", help="dataset CSV")
    p.add_argument("--shift", help="shift JSON")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("compare", help="standard vs. optimized weights over seeds")
    _add_common(p)
    _add_generator(p)
    _add_bilevel(p)
    p.add_argument("--seed", type=int, help="first seed")
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--data-fraction", dest="data_fraction", type=float)
    p.add_argument("--sweep", choices=[s.value for s in core.Sweep])
    p.add_argument("--sweep-values", dest="sweep_values")
    p.add_argument("--workers", type=int)
    p.add_argument("--excel", action="store_true", default=None)
    return parser


def _output_dir(args: argparse.Namespace) -> Path:
    out = (
        Path(args.output)
        if args.output
        else misc.get_next_file_path(config.EXPORT_PATH, args.command, "")
    )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run(args: argparse.Namespace, argv: Sequence[str], out: Path) -> None:
    """Dispatch the command. The manifest is written even if it fails."""
    manifest = RunManifest(command=shlex.join(argv), config={}, seeds=[])
    opts: Optional[Options] = None
    try:
        if args.config is not None:
            manifest.add_input(Path(args.config))
        opts = Options(args)
        COMMANDS[args.command](opts, out, manifest)
    except Exception as e:
        manifest.error = f"{type(e).__name__}: {e}"
        raise
    finally:
        if opts is not None:
            manifest.config = opts.snapshot
        manifest.write(out / "manifest.json")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out: Optional[Path] = None
    try:
        args = build_parser().parse_args(argv)
        out = _output_dir(args)
        _run(args, argv, out)
        status = 0
    except core.ValidationError as e:
        print(f"error[validation]: {type(e).__name__}: {e}", file=sys.stderr)
        status = 1
    except (NotImplementedError, OSError) as e:
        print(f"error[validation]: {type(e).__name__}: {e}", file=sys.stderr)
        status = 1
    except core.NumericalError as e:
        print(f"error[numerical]: {type(e).__name__}: {e}", file=sys.stderr)
        status = 2

    # Save log
    if out is not None and config.TMP_LOG_FILEPATH.exists():
        log_config.shutdown()
        os.replace(config.TMP_LOG_FILEPATH, out / "run.log")
    if out is not None:
        print(f"Results saved at {out}" if status == 0 else f"Run log saved at {out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
