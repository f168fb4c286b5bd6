"""Command line entry point: run, footprint, validate."""
from __future__ import annotations

import os
import sys

import click
import numpy as np

from . import harness, scenario
from .scenario import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INFEASIBLE = 0, 1, 2, 3


def _load_base(path):
    """Scenario dict, with config errors reported as path:line: message."""
    data, text = scenario.load_scenario_text(path)
    try:
        scenario.build_config(data, np.random.default_rng(0))
    except ConfigError as exc:
        raise ConfigError(f"{path}:{scenario.key_line(text, exc.key)}: {exc}") from None
    return data


def _fail(msg, code):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _prepare_out(out):
    try:
        os.makedirs(out, exist_ok=True)
        probe = os.path.join(out, ".write-test")
        with open(probe, "w", encoding="utf-8") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        _fail(f"cannot write to {out}: {exc.strerror}", EXIT_IO)


@click.group()
def main():
    """Cell-free ISAC activation and beamforming simulator."""


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path())
@click.option("--sweep", "sweep_path", required=True, type=click.Path())
@click.option("--algo", "algos", multiple=True, required=True, type=click.Choice(harness.ALGORITHMS))
@click.option("--seed", default=0, type=click.IntRange(0, 2 ** 64 - 1))
@click.option("--out", required=True, type=click.Path())
@click.option("--rho", default=0.05, type=click.FloatRange(min=0, min_open=True))
@click.option("--eta", default=15.0, type=click.FloatRange(min=0))
@click.option("--tol", default=1e-3, type=click.FloatRange(min=0, min_open=True))
@click.option("--jobs", default=1, type=click.IntRange(min=1))
def run(scenario_path, sweep_path, algos, seed, out, rho, eta, tol, jobs):
    """Monte Carlo sweep; writes trials.csv, results.csv, timings.csv, traces.csv."""
    try:
        base = _load_base(scenario_path)
        spec = harness.load_sweep_text(sweep_path, base, algos, out)
    except ConfigError as exc:
        _fail(str(exc), EXIT_CONFIG)
    except OSError as exc:
        _fail(f"cannot read input: {exc}", EXIT_IO)
    _prepare_out(out)
    try:
        results = harness.run_sweep(spec, seed, harness.SolverOptions(rho, eta, tol), jobs)
    except OSError as exc:
        _fail(f"cannot write results: {exc}", EXIT_IO)
    for r in results:
        click.echo(f"{spec.param}={r[0]:g} {r[1]:9s} U={r[2]:.4f} outage={r[4]:.2f} n={r[6]}")
    if all(r[4] == 1.0 for r in results):
        _fail("every trial was infeasible", EXIT_INFEASIBLE)
    sys.exit(EXIT_OK)


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path())
@click.option("--algo", required=True, type=click.Choice(harness.ALGORITHMS))
@click.option("--seed", default=0, type=click.IntRange(0, 2 ** 64 - 1))
@click.option("--out", required=True, type=click.Path())
@click.option("--rho", default=0.05, type=click.FloatRange(min=0, min_open=True))
@click.option("--eta", default=15.0, type=click.FloatRange(min=0))
@click.option("--tol", default=1e-3, type=click.FloatRange(min=0, min_open=True))
def footprint(scenario_path, algo, seed, out, rho, eta, tol):
    """Solve one instance and write its radiation grid to footprint.csv."""
    try:
        base = _load_base(scenario_path)
    except ConfigError as exc:
        _fail(str(exc), EXIT_CONFIG)
    except OSError as exc:
        _fail(f"cannot read input: {exc}", EXIT_IO)
    _prepare_out(out)
    rng_inst, _ = harness.trial_streams(seed, 0)
    cfg = scenario.build_config(base, rng_inst)
    channels = scenario.sample_channels(cfg, rng_inst)
    arng = np.random.default_rng(np.random.SeedSequence([seed, 0, harness.ALGORITHMS.index(algo)]))
    rep = harness.run_algorithm(algo, cfg, channels, arng, harness.SolverOptions(rho, eta, tol))
    if rep.outage:
        _fail("instance is infeasible for this algorithm", EXIT_INFEASIBLE)
    try:
        harness.footprint_dump(cfg, channels, rep.solution, os.path.join(out, "footprint.csv"))
    except OSError as exc:
        _fail(f"cannot write footprint: {exc}", EXIT_IO)
    click.echo(f"{algo}: a={''.join(str(int(v)) for v in rep.a)} U={rep.U:.4f}")
    sys.exit(EXIT_OK)


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path())
def validate(scenario_path):
    """Check a scenario file and print its realized dimensions."""
    try:
        base = _load_base(scenario_path)
    except ConfigError as exc:
        _fail(str(exc), EXIT_CONFIG)
    except OSError as exc:
        _fail(f"cannot read input: {exc}", EXIT_IO)
    cfg = scenario.build_config(base, np.random.default_rng(0))
    click.echo(f"ok: B={cfg.B} K={cfg.K} Q={cfg.Q} N_tx={cfg.N_tx} N_bs={cfg.N_bs} grid={cfg.X}x{cfg.Y}")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
