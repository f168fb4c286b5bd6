"""Rates, powers, radiation footprint and utilities of a candidate solution."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sensing


@dataclass
class LiftedSolution:
    a: np.ndarray    # (B,)
    vc: np.ndarray   # (K, B*N, B*N) complex
    vr: np.ndarray   # (B, N, N) complex

    @classmethod
    def zeros(cls, B, K, N):
        return cls(np.zeros(B), np.zeros((K, B * N, B * N), complex), np.zeros((B, N, N), complex))

    @property
    def dims(self):
        B, N = self.vr.shape[:2]
        return B, self.vc.shape[0], N

    def scaled(self, c):
        return LiftedSolution(self.a.copy(), self.vc * c, self.vr * c)

    def copy(self):
        return LiftedSolution(self.a.copy(), self.vc.copy(), self.vr.copy())

    def min_eig(self):
        mats = list(self.vc) + list(self.vr)
        return min(float(np.linalg.eigvalsh(0.5 * (m + m.conj().T))[0]) for m in mats)


@dataclass
class Beamformers:
    a: np.ndarray    # (B,)
    wc: np.ndarray   # (B, K, N) communication beams per BS
    wr: np.ndarray   # (B, N, N) sensing beams per BS

    def lift(self) -> LiftedSolution:
        B, K, N = self.wc.shape
        stacked = (self.a[:, None, None] * self.wc).transpose(1, 0, 2).reshape(K, B * N)
        vc = np.einsum("ki,kj->kij", stacked, stacked.conj())
        vr = np.einsum("b,bij,bkj->bik", self.a, self.wr, self.wr.conj())
        return LiftedSolution(self.a.copy(), vc, vr)


def _stack(gc):
    """(B, K, N) -> (K, B*N)."""
    B, K, N = gc.shape
    return gc.transpose(1, 0, 2).reshape(K, B * N)


def signal_interference(sol, channels, sigma):
    """F_k and H_k (with noise) for every user."""
    G = _stack(channels.gc)
    # P[k, j] = g_k^H V_j g_k
    P = np.real(np.einsum("ki,jil,kl->kj", G.conj(), sol.vc, G))
    F = np.diag(P).copy()
    H = P.sum(axis=1) - F + sigma
    return F, H


def rates(sol, channels, cfg):
    F, H = signal_interference(sol, channels, cfg.sigma)
    return np.log2(1.0 + F / H)


def rate(k, sol, channels, cfg):
    return float(rates(sol, channels, cfg)[k])


def bs_power(b, sol):
    N = sol.vr.shape[1]
    sl = slice(b * N, (b + 1) * N)
    return float(np.real(np.trace(sol.vc[:, sl, sl], axis1=1, axis2=2).sum() + np.trace(sol.vr[b])))


def bs_powers(sol):
    return np.array([bs_power(b, sol) for b in range(sol.vr.shape[0])])


def radiation_all(sol, channels, cfg):
    """M * I_xy on every sub-region, shape (X, Y)."""
    B, X, Y, N = channels.gl.shape
    K = sol.vc.shape[0]
    out = np.zeros((X, Y))
    vc_diag = np.real(np.stack([np.trace(sol.vc[:, b * N:(b + 1) * N, b * N:(b + 1) * N],
                                         axis1=1, axis2=2) for b in range(B)]))  # (B, K)
    tr_vr = np.real(np.trace(sol.vr, axis1=1, axis2=2))
    for x in range(X):
        for y in range(Y):
            g = channels.gl[:, x, y, :].reshape(B * N)
            kb = channels.kbar[:, x, y]
            coh = np.real(np.einsum("i,kij,j->", g.conj(), sol.vc, g))
            scat = float(kb @ vc_diag.sum(axis=1))
            sens = sum(np.real(channels.gl[b, x, y].conj() @ sol.vr[b] @ channels.gl[b, x, y])
                       for b in range(B))
            out[x, y] = coh + scat + sens + float(kb @ tr_vr)
    return cfg.M * out


def radiation(xy, sol, channels, cfg):
    if tuple(xy) not in set(channels.S_o):
        raise ValueError(f"sub-region {xy} is not in S_o")
    x, y = xy
    return float(radiation_all(sol, channels, cfg)[x - 1, y - 1])


@dataclass
class UtilityBreakdown:
    rates: np.ndarray
    eps_d: np.ndarray
    eps_v: np.ndarray
    U_C: float
    U_R: float
    cost: float
    U: float
    feasible: bool
    violations: dict = field(default_factory=dict)


def audit(sol, channels, cfg, ing=None):
    """Normalized slack of each P0 constraint class (positive = violated)."""
    if ing is None:
        ing = sensing.fim_ingredients(cfg, channels)
    r = rates(sol, channels, cfg)
    lam = sensing.lambda_sensing(sol, channels)
    eps_d, eps_v = sensing.crb_all(sensing.assemble_fim(ing, lam))
    rad = radiation_all(sol, channels, cfg)
    mask = np.zeros(rad.shape, bool)
    for x, y in channels.S_o:
        mask[x - 1, y - 1] = True
    p = bs_powers(sol)
    a = sol.a
    n_act = float(np.sum(a))
    with np.errstate(invalid="ignore"):
        viol = {
            "C1": float(np.max(1.0 - r / cfg.c_min)),
            "C2": float(np.max(eps_d / cfg.eps_d_max - 1.0)),
            "C3": float(np.max(eps_v / cfg.eps_v_max - 1.0)),
            "C4": float(np.max((rad / cfg.i_max - 1.0)[mask])) if mask.any() else -1.0,
            "C5": float(np.max((p - a * cfg.p_max) / cfg.p_max)),
            "C7": float(max(1.0 - n_act, n_act - cfg.N_bs)),
        }
    return viol, r, eps_d, eps_v


def utilities(sol, channels, cfg, ing=None, tol=1e-6):
    viol, r, eps_d, eps_v = audit(sol, channels, cfg, ing)
    U_C = float(np.sum(cfg.w_c * r / cfg.c_min))
    U_R = float(np.sum(cfg.w_r * (1.0 - np.maximum(eps_d / cfg.eps_d_max, eps_v / cfg.eps_v_max))))
    cost = float(sol.a @ cfg.op_cost)
    feasible = all(np.isfinite(v) and v <= tol for v in viol.values())
    if feasible and U_R >= 0 and cost > 0:
        aC, aR, aA = cfg.alpha
        U = U_C ** aC * max(U_R, 0.0) ** aR / cost ** aA
    else:
        U = 0.0
    return UtilityBreakdown(r, eps_d, eps_v, U_C, U_R, cost, float(U), feasible, viol)
