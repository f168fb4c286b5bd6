import json

import numpy as np
import pytest
from click.testing import CliRunner

from isacopt import comm, harness, scenario
from isacopt.cli import main

from instances import SMALL, small

BASE = dict(SMALL, c_min=[1.0])


def sweep(tmp_path, name, algos=("priomax", "random"), grid=(10, 20), trials=2, seed=5):
    spec = harness.SweepSpec("power", list(grid), trials, tuple(algos), BASE, str(tmp_path / name)).validate()
    return spec, harness.run_sweep(spec, seed)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweeps")
    return tmp, sweep(tmp, "a"), sweep(tmp, "b")


def test_row_counts(runs):
    tmp, _, _ = runs
    _, rows = harness.read_trials(tmp / "a" / "trials.csv")
    assert len(rows) == 2 * 2 * 2
    res = (tmp / "a" / "results.csv").read_text().splitlines()
    assert len(res) == 1 + 2 * 2


def test_single_trial(tmp_path):
    _, res = sweep(tmp_path, "one", algos=("priomax",), grid=(20,), trials=1)
    assert len(res) == 1 and res[0][-1] == 1 and res[0][3] == 0.0


def test_byte_identical_reruns(runs):
    tmp, _, _ = runs
    for name in ("trials.csv", "results.csv", "traces.csv"):
        assert (tmp / "a" / name).read_bytes() == (tmp / "b" / name).read_bytes()


def test_results_recomputable_from_trials(runs):
    tmp, (_, results), _ = runs
    _, rows = harness.read_trials(tmp / "a" / "trials.csv")
    for value, algo, mean, se, outage, _, n in results:
        u = np.array([r[4] for r in rows if r[0] == value and r[2] == algo])
        assert len(u) == n
        assert mean == pytest.approx(u.mean(), rel=1e-9, abs=1e-12)
        assert se == pytest.approx(u.std(ddof=1) / np.sqrt(n), rel=1e-9, abs=1e-12)
        st = [r[3] for r in rows if r[0] == value and r[2] == algo]
        assert outage == pytest.approx(st.count("outage") / n)


def test_common_instances_across_points():
    a = harness.trial_streams(3, 1)[0]
    b = harness.trial_streams(3, 1)[0]
    c = harness.trial_streams(3, 2)[0]
    x, y, z = a.random(4), b.random(4), c.random(4)
    assert np.array_equal(x, y) and not np.array_equal(x, z)


def test_sweep_validation():
    with pytest.raises(scenario.ConfigError):
        harness.SweepSpec("nope", [1], 1, ("sca",), BASE).validate()
    with pytest.raises(scenario.ConfigError):
        harness.SweepSpec("power", [], 1, ("sca",), BASE).validate()
    with pytest.raises(scenario.ConfigError):
        harness.SweepSpec("B", [0], 1, ("sca",), BASE).validate()


def test_footprint_matches_radiation(tmp_path):
    cfg, ch = small(2)
    rng = np.random.default_rng(0)
    B, K, N = cfg.B, cfg.K, cfg.N_tx
    sol = comm.Beamformers(np.ones(B), 1e-3 * (rng.standard_normal((B, K, N)) + 0j),
                           1e-3 * (rng.standard_normal((B, N, N)) + 0j)).lift()
    rows = harness.footprint_dump(cfg, ch, sol, tmp_path / "f.csv")
    rad = comm.radiation_all(sol, ch, cfg)
    for x, y, dbm, mask, mon in rows:
        assert dbm == pytest.approx(10 * np.log10(rad[x - 1, y - 1] * 1e3))
        assert mask == pytest.approx(10 * np.log10(cfg.i_max[x - 1, y - 1] * 1e3))
        assert mon == int((x, y) in set(ch.S_o))
    zero = harness.footprint_grid(cfg, ch, comm.LiftedSolution.zeros(B, K, N))
    assert all(r[2] == -200.0 for r in zero)


# ------------------------------------------------------------------- CLI

def write(path, obj):
    path.write_text(json.dumps(obj, indent=1))
    return str(path)


def test_cli_validate(tmp_path):
    r = CliRunner().invoke(main, ["validate", "--scenario", write(tmp_path / "s.json", BASE)])
    assert r.exit_code == 0 and "B=3" in r.output


def test_cli_config_error_has_line(tmp_path):
    path = write(tmp_path / "s.json", dict(BASE, N_bs=0))
    r = CliRunner().invoke(main, ["validate", "--scenario", path])
    assert r.exit_code == 1
    line = [i for i, s in enumerate((tmp_path / "s.json").read_text().splitlines(), 1) if '"N_bs"' in s][0]
    assert f"s.json:{line}:" in r.output


def test_cli_unknown_key(tmp_path):
    r = CliRunner().invoke(main, ["validate", "--scenario", write(tmp_path / "s.json", dict(BASE, bogus=1))])
    assert r.exit_code == 1 and "bogus" in r.output


def test_cli_missing_file(tmp_path):
    r = CliRunner().invoke(main, ["validate", "--scenario", str(tmp_path / "none.json")])
    assert r.exit_code == 2


def test_cli_run_and_unwritable(tmp_path):
    sc = write(tmp_path / "s.json", BASE)
    sw = write(tmp_path / "w.json", {"param": "power", "grid": [20], "trials": 1})
    out = tmp_path / "out"
    r = CliRunner().invoke(main, ["run", "--scenario", sc, "--sweep", sw, "--algo", "priomax", "--out", str(out)])
    assert r.exit_code == 0, r.output
    assert (out / "results.csv").exists()
    blocker = tmp_path / "file"
    blocker.write_text("")
    r = CliRunner().invoke(main, ["run", "--scenario", sc, "--sweep", sw, "--algo", "priomax",
                                  "--out", str(blocker / "sub")])
    assert r.exit_code == 2


def test_cli_all_infeasible(tmp_path):
    sc = write(tmp_path / "s.json", dict(BASE, c_min=[500.0]))
    sw = write(tmp_path / "w.json", {"param": "power", "grid": [20], "trials": 1})
    r = CliRunner().invoke(main, ["run", "--scenario", sc, "--sweep", sw, "--algo", "priomax",
                                  "--out", str(tmp_path / "o")])
    assert r.exit_code == 3
    r = CliRunner().invoke(main, ["footprint", "--scenario", sc, "--algo", "priomax", "--out", str(tmp_path / "f")])
    assert r.exit_code == 3


def test_cli_bad_sweep_key(tmp_path):
    sc = write(tmp_path / "s.json", BASE)
    sw = write(tmp_path / "w.json", {"param": "power", "grid": [20], "tirals": 1})
    r = CliRunner().invoke(main, ["run", "--scenario", sc, "--sweep", sw, "--algo", "sca", "--out", str(tmp_path / "o")])
    assert r.exit_code == 1 and "w.json:" in r.output


def test_cli_footprint(tmp_path):
    sc = write(tmp_path / "s.json", BASE)
    r = CliRunner().invoke(main, ["footprint", "--scenario", sc, "--algo", "priomax", "--out", str(tmp_path / "f")])
    if r.exit_code == 0:
        lines = (tmp_path / "f" / "footprint.csv").read_text().splitlines()
        assert lines[0] == "x,y,radiation_dbm,mask_dbm,monitored"
        assert len(lines) == 1 + 49
    else:
        assert r.exit_code == 3
