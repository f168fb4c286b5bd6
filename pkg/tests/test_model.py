import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isacopt import comm, conic, model
from isacopt.comm import Beamformers, LiftedSolution
from isacopt.model import BranchDomain

from instances import random_psd, small

LN2 = np.log(2.0)


@pytest.fixture(scope="module")
def inst():
    cfg, ch = small(1)
    return cfg, ch, model.ProblemData(cfg, ch)


# ------------------------------------------------------------ domains/box

def test_domain_screen_and_cost():
    cost = np.array([3.0, 1.0, 2.0])
    root = BranchDomain.root(3)
    assert root.screen(2) and root.min_cost(cost) == 1.0
    assert not BranchDomain((0, 0, 0)).screen(2)
    assert not BranchDomain((1, 1, 1)).screen(2)
    assert BranchDomain((1, None, 1)).min_cost(cost) == 5.0
    assert BranchDomain((None, 0, 1)).label() == "*01"


def test_box_bounds_root(inst):
    cfg, ch, _ = inst
    zmin, zmax = model.box_bounds(cfg, ch)
    assert np.allclose(zmin[:cfg.K], cfg.c_min * LN2)
    assert zmin[cfg.K] == 0 and zmin[cfg.K + 1] == 0
    assert zmax[cfg.K] == pytest.approx(np.sum(cfg.w_r))
    assert zmax[cfg.K + 1] == pytest.approx(cfg.o_max - cfg.o_min)
    for k in range(cfg.K):
        amp = sum(np.sqrt(cfg.p_max[b]) * np.linalg.norm(ch.gc[b, k]) for b in range(cfg.B))
        assert zmax[k] == pytest.approx(np.log1p(amp ** 2 / cfg.sigma))


def test_box_bounds_shrink_with_domain(inst):
    cfg, ch, _ = inst
    _, root = model.box_bounds(cfg, ch)
    for fixed in itertools.product((None, 0, 1), repeat=cfg.B):
        dom = BranchDomain(fixed)
        if not dom.support:
            continue
        _, zmax = model.box_bounds(cfg, ch, dom)
        assert np.all(zmax <= root + 1e-12)


def test_rate_box_bound_dominates_coherent_rate(inst):
    cfg, ch, _ = inst
    rng = np.random.default_rng(0)
    _, zmax = model.box_bounds(cfg, ch)
    B, K, N = ch.gc.shape
    for _ in range(200):
        wc = rng.standard_normal((B, K, N)) + 1j * rng.standard_normal((B, K, N))
        wc *= np.sqrt(cfg.p_max)[:, None, None] / np.linalg.norm(wc, axis=(1, 2))[:, None, None]
        sol = Beamformers(np.ones(B), wc, np.zeros((B, N, N), complex)).lift()
        assert np.all(comm.rates(sol, ch, cfg) * LN2 <= zmax[:K] + 1e-9)


# --------------------------------------------------------------- objective

def test_objective_eval_matches_formula(inst):
    cfg, _, _ = inst
    K = cfg.K
    z = np.concatenate([cfg.c_min * LN2 * 2, [0.5, cfg.o_max - np.log(cfg.op_cost[0])]])
    aC, aR, aA = cfg.alpha
    U_C = np.sum(cfg.w_c * 2.0)
    expect = U_C ** aC * 0.5 ** aR / cfg.op_cost[0] ** aA
    val, lin = model.objective_eval(z, cfg)
    assert lin == pytest.approx(expect, rel=1e-12)
    assert val == pytest.approx(np.log(expect), rel=1e-12)
    z[K] = 0.0
    assert model.objective_eval(z, cfg) == (-np.inf, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 5.0), min_size=3, max_size=3), st.integers(0, 2), st.floats(1e-3, 1.0))
def test_objective_increasing(z, n, dz):
    cfg, _ = small(1)
    z = np.array(z)
    up = z.copy()
    up[n] += dz
    assert model.objective_eval(up, cfg)[0] > model.objective_eval(z, cfg)[0]


# ------------------------------------------------------------ feasibility

def test_feasibility_witness_meets_targets(inst):
    cfg, ch, data = inst
    t = model.FeasibilityTemplate(data, BranchDomain.root(cfg.B))
    zmin, _ = model.box_bounds(cfg, ch)
    ok, w = t.check(zmin)
    assert ok
    viol = comm.audit(w, ch, cfg, data.ing)[0]
    for key in ("C1", "C2", "C3", "C4"):
        assert viol[key] <= 1e-5
    assert np.all(comm.bs_powers(w) <= w.a * cfg.p_max * (1 + 1e-5))
    assert 1 - 1e-6 <= w.a.sum() <= cfg.N_bs + 1e-6


def test_all_off_domain_is_empty(inst):
    cfg, ch, data = inst
    t = model.FeasibilityTemplate(data, BranchDomain((0,) * cfg.B))
    assert t.empty
    assert t.check(np.zeros(cfg.K + 2)) == (False, None)
    assert model.build_feasibility(cfg, ch, BranchDomain((0,) * cfg.B), np.zeros(cfg.K + 2), data) is None


def test_feasibility_is_monotone_along_ray(inst):
    cfg, ch, data = inst
    t = model.FeasibilityTemplate(data, BranchDomain.root(cfg.B))
    zmin, zmax = model.box_bounds(cfg, ch)
    flags = [t.check(zmin + d * (zmax - zmin))[0] for d in np.linspace(0, 1, 9)]
    # feasible prefix, then infeasible
    assert flags[0]
    first_bad = flags.index(False) if False in flags else len(flags)
    assert not any(flags[first_bad:])


# -------------------------------------------------------------------- C17

def pd2(rng):
    M = rng.standard_normal((2, 2))
    return M @ M.T + 0.1 * np.eye(2)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 5.0))
def test_footnote_matches_inverse(seed, eps):
    J = pd2(np.random.default_rng(seed))
    d = np.max(np.diag(np.linalg.inv(J)))
    if abs(d - eps) < 1e-9:
        return
    assert model.footnote_holds(J, eps) == (d <= eps)


def test_footnote_rejects_nonpositive_diagonal():
    assert not model.footnote_holds(np.array([[0.0, 0.0], [0.0, 1.0]]), 1.0)


@pytest.mark.parametrize("seed", range(8))
def test_emit_c17_through_conic(seed):
    rng = np.random.default_rng(seed)
    J = pd2(rng)
    d = np.max(np.diag(np.linalg.inv(J)))
    for eps, expect in ((0.8 * d, False), (1.25 * d, True)):
        pb = conic.ProgramBuilder()
        j = pb.real("j", 3)
        e = pb.real("e")
        aux = pb.real("aux", 3)
        A = conic.Affine.var
        pb.zero(A(j[0]) - J[0, 0], A(j[1]) - J[1, 1], A(j[2]) - J[0, 1], A(e) - eps)
        model.emit_c17(pb, {(0, 0): A(j[0]), (1, 1): A(j[1]), (0, 1): A(j[2])}, A(e),
                       [A(i) for i in aux])
        ok, _ = conic.check_feasible(pb.build("feasibility"))
        assert ok == expect


# ------------------------------------------------------ rank-one extraction

def chan(gc):
    return SimpleNamespace(gc=np.asarray(gc, complex))


def test_extract_identity_example():
    sol = LiftedSolution(np.ones(1), np.eye(2, dtype=complex)[None], np.zeros((1, 2, 2), complex))
    out = model.rank_one_extract(sol, chan([[[1.0, 0.0]]]))
    assert np.allclose(out.vc[0], [[1, 0], [0, 0]])
    assert np.allclose(out.vr[0], [[0, 0], [0, 1]])


def test_extract_keeps_aligned_rank_one():
    rng = np.random.default_rng(3)
    w = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    sol = LiftedSolution(np.ones(2), np.outer(w, w.conj())[None], np.zeros((2, 2, 2), complex))
    g = rng.standard_normal((2, 1, 2)) + 1j * rng.standard_normal((2, 1, 2))
    out = model.rank_one_extract(sol, chan(g))
    assert np.allclose(out.vc[0], sol.vc[0])
    assert np.allclose(out.vr, 0)


@pytest.mark.parametrize("seed", range(100))
def test_extract_invariants(seed):
    rng = np.random.default_rng(seed)
    B, K, N = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    gc = rng.standard_normal((B, K, N)) + 1j * rng.standard_normal((B, K, N))
    sol = LiftedSolution(np.ones(B), np.stack([random_psd(rng, B * N) for _ in range(K)]),
                         np.stack([random_psd(rng, N) for _ in range(B)]))
    ch = chan(gc)
    out = model.rank_one_extract(sol, ch)
    F0, H0 = comm.signal_interference(sol, ch, 1.0)
    F1, H1 = comm.signal_interference(out, ch, 1.0)
    assert np.allclose(F1, F0, rtol=1e-9)
    assert np.all(H1 <= H0 * (1 + 1e-9))
    assert np.allclose(comm.bs_powers(out), comm.bs_powers(sol), rtol=1e-9)
    assert out.min_eig() >= -1e-9 * np.max(np.abs(sol.vc))
    for k in range(K):
        assert np.linalg.matrix_rank(out.vc[k], tol=1e-8 * np.abs(out.vc[k]).max()) <= 1


def test_recover_beamformers_round_trip():
    rng = np.random.default_rng(5)
    B, K, N = 2, 2, 3
    wc = rng.standard_normal((B, K, N)) + 1j * rng.standard_normal((B, K, N))
    wr = rng.standard_normal((B, N, N)) + 1j * rng.standard_normal((B, N, N))
    bf = Beamformers(np.ones(B), wc, wr)
    back = model.recover_beamformers(bf.lift())
    lifted = back.lift()
    assert np.allclose(lifted.vc, bf.lift().vc)
    assert np.allclose(lifted.vr, bf.lift().vr)


def test_recover_beamformers_errors():
    sol = LiftedSolution(np.array([0.5]), np.eye(2, dtype=complex)[None], np.zeros((1, 2, 2), complex))
    with pytest.raises(ValueError):
        model.recover_beamformers(sol)
    sol.a = np.ones(1)
    with pytest.raises(model.RankError):
        model.recover_beamformers(sol)
