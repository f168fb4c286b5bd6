"""Monte Carlo sweeps: trial dispatch, CSV emission and radiation footprints."""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines, brb, comm, sca, scenario
from .model import ProblemData
from .scenario import ConfigError

ALGORITHMS = ("mobrb", "sca") + baselines.SCHEMES
SWEEP_PARAMS = {"power": "p_max_dbm", "B": "B", "N_tx": "N_tx", "KQ": "KQ"}

TRIAL_COLUMNS = ["value", "trial", "algorithm", "status", "utility", "U_C", "U_R", "cost",
                 "a", "n_solves", "iterations"]
RESULT_COLUMNS = ["value", "algorithm", "mean_utility", "stderr_utility", "outage",
                  "mean_n_solves", "trials"]
TIMING_COLUMNS = ["value", "trial", "algorithm", "runtime_s"]
TRACE_COLUMNS = ["value", "trial", "algorithm", "iteration", "objective"]
FOOTPRINT_COLUMNS = ["x", "y", "radiation_dbm", "mask_dbm", "monitored"]


@dataclass
class SolverOptions:
    rho: float = 0.05
    eta: float = 15.0
    tol: float = 1e-3


@dataclass
class SweepSpec:
    param: str
    grid: list
    trials: int = 20
    algorithms: tuple = ("sca",)
    base: dict = field(default_factory=dict)
    out: str = "out"

    def validate(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(f"param must be one of {sorted(SWEEP_PARAMS)}", "param")
        if not self.grid:
            raise ConfigError("grid must be nonempty", "grid")
        if int(self.trials) != self.trials or self.trials < 1:
            raise ConfigError("trials must be a positive integer", "trials")
        for algo in self.algorithms:
            if algo not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm '{algo}'", None)
        for v in self.grid:
            # realizing each point once catches values the base config cannot take
            scenario.build_config(point_spec(self.base, self.param, v), np.random.default_rng(0))
        return self


def point_spec(base, param, value):
    spec = dict(base)
    if param == "KQ":
        spec["K"] = spec["Q"] = int(value)
    elif param == "power":
        spec["p_max_dbm"] = float(value)
    else:
        spec[SWEEP_PARAMS[param]] = int(value)
    return spec


def load_sweep_text(path, base, algorithms, out):
    """Read a sweep JSON file ({"param", "grid", "trials"}); ConfigError carries the line."""
    data, text = scenario.load_scenario_text(path)
    unknown = set(data) - {"param", "grid", "trials"}
    try:
        if unknown:
            raise ConfigError(f"unknown key '{sorted(unknown)[0]}'", sorted(unknown)[0])
        spec = SweepSpec(data.get("param", "power"), list(data.get("grid", [])),
                         data.get("trials", 20), tuple(algorithms), base, out)
        return spec.validate()
    except ConfigError as exc:
        raise ConfigError(f"{path}:{scenario.key_line(text, exc.key)}: {exc}") from None


def trial_streams(master, trial):
    """(instance rng, algorithm rng) for one trial; shared across sweep points."""
    ss = np.random.SeedSequence([int(master), int(trial)])
    inst, algo = ss.spawn(2)
    return np.random.default_rng(inst), np.random.default_rng(algo)


def run_algorithm(name, cfg, channels, rng, opts: SolverOptions, data=None):
    data = data or ProblemData(cfg, channels)
    if name == "mobrb":
        return brb.mo_brb_solve(cfg, channels, rho=opts.rho, data=data)
    if name == "sca":
        return sca.sca_solve(cfg, channels, eta=opts.eta, conv_tol=opts.tol, data=data)
    return baselines.run_baseline(name, cfg, channels, rng, eta=opts.eta, conv_tol=opts.tol, data=data)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def run_trial(job):
    """One (point, trial): every algorithm on the same instance.

    Returns (trial rows, timing rows, trace rows).
    """
    base, param, value, trial, master, algorithms, opts = job
    rng_inst, rng_algo = trial_streams(master, trial)
    rows, timings, traces = [], [], []
    cfg = scenario.build_config(point_spec(base, param, value), rng_inst)
    channels = scenario.sample_channels(cfg, rng_inst)
    data = ProblemData(cfg, channels)
    for algo in algorithms:
        # each algorithm sees the same baseline draw regardless of list order
        arng = np.random.default_rng(np.random.SeedSequence([int(master), int(trial), ALGORITHMS.index(algo)]))
        t0 = time.perf_counter()
        rep = run_algorithm(algo, cfg, channels, arng, opts, data)
        dt = time.perf_counter() - t0
        u = rep.utility
        ok = not rep.outage
        a = "" if rep.a is None else "".join(str(int(round(v))) for v in rep.a)
        rows.append([value, trial, algo, rep.status, rep.U if ok else 0.0,
                     u.U_C if (ok and u) else 0.0, u.U_R if (ok and u) else 0.0,
                     u.cost if (ok and u) else 0.0, a, rep.n_solves, len(rep.trace)])
        timings.append([value, trial, algo, dt])
        traces.extend([value, trial, algo, i, obj] for i, obj in enumerate(rep.trace))
    del rng_algo
    return rows, timings, traces


def aggregate(trial_rows):
    """Per (value, algorithm) summary; outage trials count as zero utility."""
    groups = {}
    for r in trial_rows:
        groups.setdefault((r[0], r[2]), []).append(r)
    out = []
    for (value, algo), rs in groups.items():
        u = np.array([float(r[4]) for r in rs])
        n = len(rs)
        se = float(np.std(u, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        out.append([value, algo, float(u.mean()), se,
                    sum(r[3] == "outage" for r in rs) / n,
                    float(np.mean([float(r[9]) for r in rs])), n])
    return out


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_trials(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = []
        for r in rd:
            rows.append([float(r[0]), int(r[1]), r[2], r[3], float(r[4]), float(r[5]), float(r[6]),
                         float(r[7]), r[8], int(r[9]), int(r[10])])
    return header, rows


def run_sweep(spec: SweepSpec, master_seed=0, opts: SolverOptions | None = None, jobs=1):
    """Run every (point, trial), write trials/results/timings/traces CSVs; returns the result rows."""
    opts = opts or SolverOptions()
    os.makedirs(spec.out, exist_ok=True)
    work = [(spec.base, spec.param, v, t, master_seed, tuple(spec.algorithms), opts)
            for v in spec.grid for t in range(spec.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(run_trial, work))
    else:
        parts = [run_trial(w) for w in work]
    trials = [r for p in parts for r in p[0]]
    timings = [r for p in parts for r in p[1]]
    traces = [r for p in parts for r in p[2]]
    results = aggregate(trials)
    write_csv(os.path.join(spec.out, "trials.csv"), TRIAL_COLUMNS, trials)
    write_csv(os.path.join(spec.out, "results.csv"), RESULT_COLUMNS, results)
    write_csv(os.path.join(spec.out, "timings.csv"), TIMING_COLUMNS, timings)
    write_csv(os.path.join(spec.out, "traces.csv"), TRACE_COLUMNS, traces)
    with open(os.path.join(spec.out, "sweep.json"), "w", encoding="utf-8") as fh:
        json.dump({"param": spec.param, "grid": list(spec.grid), "trials": spec.trials,
                   "algorithms": list(spec.algorithms), "seed": int(master_seed),
                   "rho": opts.rho, "eta": opts.eta, "tol": opts.tol}, fh, indent=1)
    return results


def footprint_grid(cfg, channels, solution):
    """Rows (x, y, M*I in dBm, mask in dBm, monitored flag) over the whole grid."""
    rad = comm.radiation_all(solution, channels, cfg)
    mon = {tuple(c) for c in channels.S_o}
    rows = []
    for x in range(cfg.X):
        for y in range(cfg.Y):
            rows.append([x + 1, y + 1, float(scenario.watt_to_dbm(rad[x, y])),
                         float(scenario.watt_to_dbm(cfg.i_max[x, y])), int((x + 1, y + 1) in mon)])
    return rows


def footprint_dump(cfg, channels, solution, path):
    rows = footprint_grid(cfg, channels, solution)
    write_csv(path, FOOTPRINT_COLUMNS, rows)
    return rows
