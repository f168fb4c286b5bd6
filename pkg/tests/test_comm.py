import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isacopt import comm
from isacopt.comm import Beamformers, LiftedSolution

import instances


def random_beams(rng, B, K, N, a=None, scale=1e-2):
    a = np.ones(B) if a is None else np.asarray(a, float)
    wc = scale * (rng.standard_normal((B, K, N)) + 1j * rng.standard_normal((B, K, N)))
    wr = scale * (rng.standard_normal((B, N, N)) + 1j * rng.standard_normal((B, N, N)))
    return Beamformers(a, wc, wr)


def vector_rates(bf, channels, sigma):
    """|sum_b g_bk^H w_bk|^2 over interference from other users' beams plus noise."""
    B, K, N = bf.wc.shape
    out = np.zeros(K)
    for k in range(K):
        amp = [sum(bf.a[b] * channels.gc[b, k].conj() @ bf.wc[b, j] for b in range(B)) for j in range(K)]
        p = np.abs(np.array(amp)) ** 2
        out[k] = np.log2(1 + p[k] / (p.sum() - p[k] + sigma))
    return out


def test_rate_equal_signal_and_noise_is_one_bit():
    cfg, ch = instances.small(1)
    g = ch.gc[:, 0, :].reshape(-1)
    w = g / np.linalg.norm(g) ** 2 * np.sqrt(cfg.sigma)
    sol = LiftedSolution(np.ones(cfg.B), np.outer(w, w.conj())[None], np.zeros((cfg.B, cfg.N_tx, cfg.N_tx), complex))
    assert comm.rate(0, sol, ch, cfg) == pytest.approx(1.0, rel=1e-12)


def test_zero_solution_metrics():
    cfg, ch = instances.small(1)
    sol = LiftedSolution.zeros(cfg.B, cfg.K, cfg.N_tx)
    assert np.all(comm.rates(sol, ch, cfg) == 0)
    assert np.all(comm.radiation_all(sol, ch, cfg) == 0)
    assert np.all(comm.bs_powers(sol) == 0)


def test_lifted_rates_match_vector_form(rng):
    for seed in range(5):
        cfg, ch = instances.instance(instances.DESK, seed)
        bf = random_beams(rng, cfg.B, cfg.K, cfg.N_tx, a=[1, 0, 1, 1])
        got = comm.rates(bf.lift(), ch, cfg)
        assert np.allclose(got, vector_rates(bf, ch, cfg.sigma), rtol=1e-10)


def test_bs_power_block_trace(rng):
    cfg, ch = instances.instance(instances.DESK, 0)
    bf = random_beams(rng, cfg.B, cfg.K, cfg.N_tx, a=[1, 1, 0, 1])
    ref = bf.a * (np.sum(np.abs(bf.wc) ** 2, axis=(1, 2)) + np.sum(np.abs(bf.wr) ** 2, axis=(1, 2)))
    assert np.allclose(comm.bs_powers(bf.lift()), ref, rtol=1e-12)


def test_power_additive_over_users(rng):
    cfg, _ = instances.instance(instances.DESK, 0)
    sol = random_beams(rng, cfg.B, cfg.K, cfg.N_tx).lift()
    parts = []
    for k in range(cfg.K):
        s = sol.copy()
        s.vc = s.vc[k:k + 1]
        s.vr = np.zeros_like(s.vr)
        parts.append(comm.bs_powers(s))
    s = sol.copy()
    s.vc = np.zeros_like(s.vc)
    assert np.allclose(comm.bs_powers(sol), sum(parts) + comm.bs_powers(s), rtol=1e-12)


def radiation_monte_carlo(sol, channels, cfg, x, y, n, rng):
    """Sample mean and standard error of M |h^H x|^2 power with Rician NLoS draws."""
    B, K, N = sol.dims
    gl = channels.gl[:, x, y, :]
    kb = channels.kbar[:, x, y]
    nl = np.sqrt(kb[:, None, None] / 2) * (rng.standard_normal((B, n, N)) + 1j * rng.standard_normal((B, n, N)))
    h = gl[:, None, :] + nl                       # (B, n, N)
    hs = h.transpose(1, 0, 2).reshape(n, B * N)   # stacked over BSs
    val = np.real(np.einsum("ni,kij,nj->n", hs.conj(), sol.vc, hs))
    for b in range(B):
        val += np.real(np.einsum("ni,ij,nj->n", h[b].conj(), sol.vr[b], h[b]))
    val *= cfg.M
    return val.mean(), val.std(ddof=1) / np.sqrt(n)


def test_radiation_matches_monte_carlo(rng):
    cfg, ch = instances.instance(instances.DESK, 3)
    sol = random_beams(rng, cfg.B, cfg.K, cfg.N_tx, a=[1, 1, 0, 1]).lift()
    rad = comm.radiation_all(sol, ch, cfg)
    for x, y in [(0, 0), (3, 4), (6, 2)]:
        mean, se = radiation_monte_carlo(sol, ch, cfg, x, y, 100_000, rng)
        assert abs(mean - rad[x, y]) <= 3 * se


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-6, 100.0))
def test_radiation_linear_in_scale(c):
    rng = np.random.default_rng(0)
    cfg, ch = instances.small(1)
    sol = random_beams(rng, cfg.B, cfg.K, cfg.N_tx).lift()
    assert np.allclose(comm.radiation_all(sol.scaled(c), ch, cfg), c * comm.radiation_all(sol, ch, cfg),
                       rtol=1e-12, atol=0)


def test_radiation_outside_monitored_set_raises(rng):
    cfg, ch = instances.small(1)
    sol = random_beams(rng, cfg.B, cfg.K, cfg.N_tx).lift()
    cell = sorted(ch.S_rc)[0]
    with pytest.raises(ValueError):
        comm.radiation(cell, sol, ch, cfg)
    x, y = ch.S_o[0]
    assert comm.radiation((x, y), sol, ch, cfg) == comm.radiation_all(sol, ch, cfg)[x - 1, y - 1]


def test_utility_normalizations(rng):
    from dataclasses import replace
    cfg, ch = instances.instance(instances.DESK, 1)
    sol = random_beams(rng, cfg.B, cfg.K, cfg.N_tx, a=[1, 0, 0, 0], scale=1e-1).lift()
    u0 = comm.utilities(sol, ch, cfg)
    # thresholds set to the achieved metrics: rates at C_min give U_C = 1,
    # CRBs at their caps give U_R = 0
    cfg1 = replace(cfg, c_min=u0.rates, eps_d_max=u0.eps_d, eps_v_max=u0.eps_v)
    u = comm.utilities(sol, ch, cfg1)
    assert u.U_C == pytest.approx(1.0, rel=1e-12)
    assert u.U_R == pytest.approx(0.0, abs=1e-12)
    # slack caps and unit cost: U = U_C^aC U_R^aR
    cfg2 = replace(cfg1, eps_d_max=u0.eps_d * 2, eps_v_max=u0.eps_v * 2, op_cost=np.array([1.0, 2, 2, 2]),
                   i_max=np.full_like(cfg.i_max, 1e3), p_max=np.full(cfg.B, 1e3))
    u = comm.utilities(sol, ch, cfg2)
    assert u.feasible and u.cost == 1.0
    assert u.U_R == pytest.approx(0.5, rel=1e-12)
    assert u.U == pytest.approx(0.5 ** cfg.alpha[1], rel=1e-10)


def test_utility_components(rng):
    cfg, ch = instances.instance(instances.DESK, 1)
    bf = random_beams(rng, cfg.B, cfg.K, cfg.N_tx, a=[1, 1, 0, 0], scale=1e-1)
    sol = bf.lift()
    u = comm.utilities(sol, ch, cfg)
    r = vector_rates(bf, ch, cfg.sigma)
    assert u.U_C == pytest.approx(np.sum(cfg.w_c * r / cfg.c_min), rel=1e-10)
    assert u.cost == pytest.approx(cfg.op_cost[0] + cfg.op_cost[1])
    ur = np.sum(cfg.w_r * (1 - np.maximum(u.eps_d / cfg.eps_d_max, u.eps_v / cfg.eps_v_max)))
    assert u.U_R == pytest.approx(ur)
    if u.feasible:
        aC, aR, aA = cfg.alpha
        assert u.U == pytest.approx(u.U_C ** aC * u.U_R ** aR / u.cost ** aA)
    else:
        assert u.U == 0.0


def test_audit_flags_power_and_activation():
    cfg, ch = instances.small(1)
    sol = LiftedSolution.zeros(cfg.B, cfg.K, cfg.N_tx)
    sol.vr[0] = np.eye(cfg.N_tx) * cfg.p_max[0]          # 2x the cap, BS inactive
    viol, *_ = comm.audit(sol, ch, cfg)
    assert viol["C5"] > 0.5
    assert viol["C7"] == 1.0
    sol.a[0] = 1.0
    sol.vr[0] = np.eye(cfg.N_tx) * cfg.p_max[0] / cfg.N_tx
    viol, *_ = comm.audit(sol, ch, cfg)
    assert viol["C5"] == pytest.approx(0.0, abs=1e-12)
    assert viol["C7"] <= 0
