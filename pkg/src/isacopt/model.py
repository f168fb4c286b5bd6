"""Transformed problem: conic builders, box bounds, objective and rank-one extraction.

Auxiliary vector layout: ``z = (z_1..z_K, z_R, z_A)`` with rates in nats.

Internally every program works in normalized units: beamforming matrices are
divided by a reference power ``p_ref`` (see ``power_scale``), channels are scaled so that the noise power
is one, radiation rows are divided by the mask value, and CRB variables are
divided by their caps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import comm, conic, sensing
from .comm import Beamformers, LiftedSolution

LN2 = np.log(2.0)


# ------------------------------------------------------------------ domains

@dataclass(frozen=True)
class BranchDomain:
    """Per-BS sub-domain: 0 or 1 when fixed, None when relaxed to [0, 1]."""

    fixed: tuple

    @classmethod
    def root(cls, B):
        return cls((None,) * B)

    @classmethod
    def pattern(cls, a):
        return cls(tuple(int(round(v)) for v in a))

    @property
    def B(self):
        return len(self.fixed)

    @property
    def relaxed(self):
        return [b for b, v in enumerate(self.fixed) if v is None]

    @property
    def is_integer(self):
        return all(v is not None for v in self.fixed)

    @property
    def support(self):
        return [b for b, v in enumerate(self.fixed) if v != 0]

    def screen(self, n_bs):
        """True if some integer completion satisfies 1 <= sum(a) <= n_bs."""
        ones = sum(1 for v in self.fixed if v == 1)
        return ones <= n_bs and ones + len(self.relaxed) >= 1

    def with_value(self, b, v):
        f = list(self.fixed)
        f[b] = v
        return BranchDomain(tuple(f))

    def min_cost(self, cost):
        ones = [b for b, v in enumerate(self.fixed) if v == 1]
        if ones:
            return float(np.sum(cost[ones]))
        rel = self.relaxed
        return float(np.min(cost[rel])) if rel else np.inf

    def label(self):
        return "".join("*" if v is None else str(v) for v in self.fixed)


# ------------------------------------------------------------- objective/box

def objective_eval(z, cfg):
    """(log-domain utility, linear utility) of an auxiliary vector."""
    z = np.asarray(z, dtype=float)
    K = cfg.K
    aC, aR, aA = cfg.alpha
    uc = float(np.sum(cfg.w_c * z[:K] / (cfg.c_min * LN2)))
    zr = float(z[K])
    if uc <= 0 or zr <= 0:
        return -np.inf, 0.0
    val = aC * np.log(uc) + aR * np.log(zr) + aA * (z[K + 1] - cfg.o_max)
    return float(val), float(np.exp(val))


def box_bounds(cfg, channels, domain: BranchDomain | None = None):
    """(z_min, z_max). Rate bound is the coherent-combining capacity over the
    BSs allowed by the domain; z_A bound uses the cheapest admissible cost."""
    K = cfg.K
    if domain is None:
        domain = BranchDomain.root(cfg.B)
    sup = domain.support
    zmin = np.concatenate([cfg.c_min * LN2, [0.0, 0.0]])
    zmax = np.empty(K + 2)
    for k in range(K):
        amp = np.sum(np.sqrt(cfg.p_max[sup]) * np.linalg.norm(channels.gc[sup, k], axis=1))
        zmax[k] = np.log1p(amp ** 2 / cfg.sigma)
    zmax[K] = float(np.sum(cfg.w_r))
    zmax[K + 1] = cfg.o_max - np.log(domain.min_cost(cfg.op_cost)) if sup else 0.0
    zmax = np.maximum(zmax, zmin)
    return zmin, zmax


# ------------------------------------------------------------- problem data

def power_scale(cfg, channels):
    """Normalization power: max p_max, lowered to the largest per-BS isotropic
    power that keeps the radiation mask when that is smaller."""
    p = float(np.max(cfg.p_max))
    if not channels.S_o:
        return p
    N = channels.gl.shape[-1]
    xs = np.array([x - 1 for x, _ in channels.S_o])
    ys = np.array([y - 1 for _, y in channels.S_o])
    gain = np.sum(np.abs(channels.gl[:, xs, ys]) ** 2, axis=-1) / N + channels.kbar[:, xs, ys]
    p_rad = np.min(cfg.i_max[xs, ys] / (cfg.M * gain), axis=1)
    return min(p, float(np.max(p_rad)))


class ProblemData:
    """Per-instance normalized coefficient data shared by all programs."""

    def __init__(self, cfg, channels):
        self.cfg = cfg
        self.ch = channels
        self.ing = sensing.fim_ingredients(cfg, channels)
        B, X, Y, N = channels.gl.shape
        self.B, self.K, self.Q, self.N = B, cfg.K, cfg.Q, N
        self.S_o = list(channels.S_o)
        self.p_ref = power_scale(cfg, channels)
        self.scale = np.sqrt(self.p_ref / cfg.sigma)
        self.gcn = channels.gc * self.scale
        self.rad_w = np.array([cfg.M * self.p_ref / cfg.i_max[x - 1, y - 1] for x, y in self.S_o])


class Handles:
    pass


def _block_embed(blocks, sup, N):
    """Block-diagonal matrix over the support from a dict b -> N x N."""
    n = len(sup) * N
    out = np.zeros((n, n), complex)
    for i, b in enumerate(sup):
        if b in blocks:
            out[i * N:(i + 1) * N, i * N:(i + 1) * N] = blocks[b]
    return out


def emit_c17(pb: conic.ProgramBuilder, J, e, aux):
    """max diag(J^-1) <= e for a 2x2 block J = {(0,0), (1,1), (0,1)} of affine entries.

    Footnote form: J00 - 1/e >= J01^2/J11 and J11 - 1/e >= J01^2/J00, with
    s >= 1/e, t1 >= J01^2/J11, t2 >= J01^2/J00 as rotated cones.
    """
    s, t1, t2 = aux
    pb.rsoc(s, e, conic.Affine(const=1.0), label="C17h")
    pb.rsoc(t1, J[(1, 1)], J[(0, 1)], label="C17r")
    pb.rsoc(t2, J[(0, 0)], J[(0, 1)], label="C17r")
    pb.nonneg(J[(0, 0)] - s - t1, J[(1, 1)] - s - t2, label="C17")


def footnote_holds(J, eps, tol=0.0):
    """Closed-form footnote test of max diag(J^-1) <= eps for a PSD 2x2 J."""
    j00, j11, j01 = J[0, 0], J[1, 1], J[0, 1]
    if j00 <= 0 or j11 <= 0:
        return False
    return bool(min(j00 - 1 / eps - j01 ** 2 / j11, j11 - 1 / eps - j01 ** 2 / j00) >= -tol)


def _emit_common(pb: conic.ProgramBuilder, data: ProblemData, dom: BranchDomain):
    """Variables and domain-independent constraints: C7, C11-C13, C17, C18, a-box."""
    cfg, ch = data.cfg, data.ch
    B, K, Q, N = data.B, data.K, data.Q, data.N
    sup = dom.support
    ns = len(sup) * N
    h = Handles()
    h.sup, h.ns = sup, ns
    h.a = pb.real("a", B)
    h.vc = [pb.herm(f"vc{k}", ns) for k in range(K)]
    h.vr = {b: pb.herm(f"vr{b}", N) for b in sup}
    h.eps = pb.real("eps", 2 * Q)        # normalized eps_D then eps_V
    h.epsR = pb.real("epsR", Q)
    h.aux = pb.real("aux", 2 * Q * 3)    # (s, t1, t2) per (X, q)
    A = conic.Affine.var
    # activation domain and C7
    for b, v in enumerate(dom.fixed):
        if v is None:
            pb.nonneg(A(h.a[b]), 1 - A(h.a[b]), label="abox")
        else:
            pb.zero(A(h.a[b]) - float(v), label="afix")
    tot = conic.lin_sum([A(i) for i in h.a])
    pb.nonneg(tot - 1.0, cfg.N_bs - tot, label="C7")
    # C11 per-BS power
    eyeN = np.eye(N)
    for i, b in enumerate(sup):
        sel = {b: eyeN}
        row = conic.lin_sum([vk.trace(_block_embed(sel, sup, N)) for vk in h.vc]) + h.vr[b].trace(eyeN)
        pb.nonneg(A(h.a[b], cfg.p_max[b] / data.p_ref) - row, label="C11")
    # C12, C13
    for q in range(Q):
        for x in range(2):
            pb.nonneg(1 - A(h.eps[x * Q + q]), label="C13")
            pb.nonneg(1 - A(h.eps[x * Q + q]) - A(h.epsR[q]), label="C12")
    # C17 in footnote form
    caps = (cfg.eps_d_max, cfg.eps_v_max)
    Hs = (data.ing.HD, data.ing.HV)
    for x in range(2):
        for q in range(Q):
            w = caps[x][q] * data.p_ref
            # J is divided by d and s, t scale with it; d is the geometric midpoint
            # between unit scale and the full-power scale of J
            d = max(1.0, w * float(np.max(np.abs(Hs[x][sup, q]).reshape(len(sup), -1).max(axis=1)
                                           * np.sum(np.abs(ch.gr[sup, q]) ** 2, axis=1)))) ** 0.5 if sup else 1.0
            w = w / d
            J = {}
            for (j, l) in ((0, 0), (1, 1), (0, 1)):
                blocks = {b: w * Hs[x][b, q, j, l] * np.outer(ch.gr[b, q], ch.gr[b, q].conj()) for b in sup}
                Cvc = _block_embed(blocks, sup, N)
                J[(j, l)] = conic.lin_sum([vk.trace(Cvc) for vk in h.vc] +
                                          [h.vr[b].trace(blocks[b]) for b in sup])
            base = 3 * (x * Q + q)
            emit_c17(pb, J, A(h.eps[x * Q + q]) * d, [A(h.aux[base + i]) for i in range(3)])
    # C18 radiation on S_o
    rows = []
    for r, (x, y) in enumerate(data.S_o):
        g = ch.gl[sup, x - 1, y - 1, :].reshape(ns)
        kb = ch.kbar[:, x - 1, y - 1]
        Gt = np.outer(g, g.conj()) + np.diag(np.repeat(kb[sup], N))
        row = conic.lin_sum([vk.trace(Gt) for vk in h.vc] +
                            [h.vr[b].trace(np.outer(ch.gl[b, x - 1, y - 1], ch.gl[b, x - 1, y - 1].conj())
                                           + kb[b] * eyeN) for b in sup])
        rows.append(row * data.rad_w[r])
    h.rad = rows
    if rows:
        pb.nonneg(*[1 - r for r in rows], label="C18")
    # rate coefficient vectors over each user block
    h.gvec = []
    for k in range(K):
        g = data.gcn[sup, k, :].reshape(ns)
        h.gvec.append(h.vc[0].coef_vector(np.outer(g, g.conj())))
    h.vc_cols = np.concatenate([vk.indices for vk in h.vc])
    h.n2 = ns * ns
    return h


def _power_objective(h):
    return conic.lin_sum([vk.trace(np.eye(h.ns)) for vk in h.vc] +
                         [v.trace(np.eye(v.n)) for v in h.vr.values()])


def decode(data, h, prog, x):
    """Physical LiftedSolution from a witness vector."""
    B, K, N = data.B, data.K, data.N
    sol = LiftedSolution.zeros(B, K, N)
    sol.a = np.clip(x[h.a], 0.0, 1.0)
    idx = np.concatenate([np.arange(b * N, (b + 1) * N) for b in h.sup])
    for k, vk in enumerate(h.vc):
        sol.vc[k][np.ix_(idx, idx)] = _psd_part(vk.value(x)) * data.p_ref
    for b, v in h.vr.items():
        sol.vr[b] = _psd_part(v.value(x)) * data.p_ref
    return sol


def _psd_part(X):
    """Drop the (solver-noise) negative eigenvalues of a Hermitian matrix."""
    w, U = np.linalg.eigh(0.5 * (X + X.conj().T))
    if w[0] >= 0:
        return X
    w = np.maximum(w, 0.0)
    return (U * w) @ U.conj().T


class FeasibilityTemplate:
    """Static part of the feasibility program for one branch domain."""

    def __init__(self, data: ProblemData, dom: BranchDomain):
        self.data, self.dom = data, dom
        self.empty = not dom.screen(data.cfg.N_bs) or not dom.support
        if self.empty:
            return
        pb = conic.ProgramBuilder()
        self.h = _emit_common(pb, data, dom)
        self.power = _power_objective(self.h)
        pb.minimize(self.power)
        self.base = pb.build("feasibility")
        self.c_power = self.base.c.copy()

    def dynamic_group(self, zhat):
        data, h = self.data, self.h
        cfg = data.cfg
        K, Q = data.K, data.Q
        rows_c, cols_c, vals_c, consts = [], [], [], []
        for k in range(K):
            ck = np.expm1(zhat[k])
            for j in range(K):
                coef = h.gvec[k] / ck if j == k else -h.gvec[k]
                rows_c.append(np.full(h.n2, k))
                cols_c.append(h.vc[j].indices)
                vals_c.append(coef)
            consts.append(-1.0)
        # C22
        rows_c.append(np.full(Q, K))
        cols_c.append(h.epsR)
        vals_c.append(cfg.w_r)
        consts.append(-float(zhat[K]))
        # C23 in exponential-cost form, normalized
        f = np.exp(zhat[K + 1] - cfg.o_max)
        rows_c.append(np.full(data.B, K + 1))
        cols_c.append(h.a)
        vals_c.append(-cfg.op_cost * f)
        consts.append(1.0)
        A = sp.csr_matrix((np.concatenate(vals_c), (np.concatenate(rows_c), np.concatenate(cols_c))),
                          shape=(K + 2, self.base.n))
        return conic.Group("nonneg", A, np.array(consts), 0, "C21-23")

    def program(self, zhat, mode="feasibility", extra=()):
        g = self.dynamic_group(zhat)
        c = self.c_power if mode == "optimize" else np.zeros(self.base.n)
        return self.base.with_groups([g, *extra], c=c, mode=mode)

    def check(self, zhat, tol=conic.FEAS_TOL):
        """(feasible, witness LiftedSolution or None)."""
        if self.empty:
            return False, None
        st, x = conic.solve(self.program(zhat), tol=tol)
        if not st.ok:
            return False, None
        return True, decode(self.data, self.h, self.base, x)

    def min_power(self, zhat, fix_vc: LiftedSolution | None = None, margin=0.0):
        """Minimum-power point meeting the targets; optionally with V^C pinned
        and the radiation mask tightened by a relative ``margin`` (scalar or per
        monitored cell). The result is unverified; callers audit it."""
        if self.empty:
            return None
        extra = []
        if fix_vc is not None:
            extra.append(self._pin_group(fix_vc))
        margin = np.broadcast_to(np.asarray(margin, float), (len(self.h.rad),))
        if np.any(margin > 0):
            extra.append(conic.rows_to_group("nonneg", [(1 - m) - r for m, r in zip(margin, self.h.rad)],
                                             self.base.n, "C18-margin"))
        st, x = conic.solve(self.program(zhat, "optimize", extra), tol=conic.FEAS_TOL,
                            keep_inaccurate=True)
        if x is None or st.status == conic.Status.INFEASIBLE:
            return None
        return decode(self.data, self.h, self.base, x)

    def _pin_group(self, sol):
        data, h = self.data, self.h
        N = data.N
        idx = np.concatenate([np.arange(b * N, (b + 1) * N) for b in h.sup])
        cols, vals = [], []
        for k, vk in enumerate(h.vc):
            cols.append(vk.indices)
            vals.append(vk.params(sol.vc[k][np.ix_(idx, idx)] / data.p_ref))
        cols = np.concatenate(cols)
        m = cols.size
        A = sp.csr_matrix((np.ones(m), (np.arange(m), cols)), shape=(m, self.base.n))
        return conic.Group("zero", A, -np.concatenate(vals), 0, "pin")


def build_feasibility(cfg, channels, domain, zhat, data=None):
    """Feasibility program at ``zhat`` (None when the domain is empty)."""
    data = data or ProblemData(cfg, channels)
    t = FeasibilityTemplate(data, domain)
    return None if t.empty else t.program(np.asarray(zhat, float))


# --------------------------------------------------------------- extraction

def rank_one_extract(sol: LiftedSolution, channels, gain_floor=1e-300):
    """Rank-one communication covariances; the removed part moves to sensing."""
    B, K, N = sol.dims
    G = comm._stack(channels.gc)
    out = sol.copy()
    delta = np.zeros_like(sol.vc[0])
    for k in range(K):
        V = 0.5 * (sol.vc[k] + sol.vc[k].conj().T)
        g = G[k]
        Vg = V @ g
        gain = float(np.real(g.conj() @ Vg))
        if gain > gain_floor:
            w = Vg / np.sqrt(gain)
            Vs = np.outer(w, w.conj())
        else:
            Vs = np.zeros_like(V)
        out.vc[k] = Vs
        delta += V - Vs
    for b in range(B):
        d = delta[b * N:(b + 1) * N, b * N:(b + 1) * N]
        out.vr[b] = sol.vr[b] + 0.5 * (d + d.conj().T)
    return out


class RankError(ValueError):
    pass


def _psd_sqrt(V):
    lam, U = np.linalg.eigh(0.5 * (V + V.conj().T))
    return (U * np.sqrt(np.clip(lam, 0, None))) @ U.conj().T


def recover_beamformers(sol: LiftedSolution, rank_tol=1e-6) -> Beamformers:
    B, K, N = sol.dims
    a = np.asarray(sol.a, float)
    if np.any(np.abs(a - np.round(a)) > 1e-9):
        raise ValueError("activation vector is not binary")
    a = np.round(a)
    wc = np.zeros((B, K, N), complex)
    for k in range(K):
        lam, U = np.linalg.eigh(0.5 * (sol.vc[k] + sol.vc[k].conj().T))
        top = lam[-1]
        if top <= 0:
            continue
        if lam[-2] > rank_tol * top:
            raise RankError(f"user {k} covariance has rank > 1")
        w = np.sqrt(top) * U[:, -1]
        wc[:, k, :] = w.reshape(B, N)
    wr = np.stack([_psd_sqrt(sol.vr[b]) for b in range(B)])
    return Beamformers(a, wc, wr)


# ------------------------------------------------------------------ reports

@dataclass
class SolveReport:
    algorithm: str
    status: str                       # "ok" or "outage"
    a: np.ndarray | None = None
    solution: LiftedSolution | None = None
    beamformers: Beamformers | None = None
    utility: comm.UtilityBreakdown | None = None
    z: np.ndarray | None = None
    bound: float = np.nan
    trace: list = field(default_factory=list)
    n_solves: int = 0
    info: dict = field(default_factory=dict)

    @property
    def U(self):
        return self.utility.U if (self.utility is not None and self.status == "ok") else 0.0

    @property
    def outage(self):
        return self.status != "ok"


REPAIR_STEPS = (1.0, 0.99, 0.95, 0.8, 0.5, 0.0)
RAD_ROUNDS = 4
RAD_PAD = 1e-4


def _mask_ratio(sol, data):
    """M*I / I_max on each monitored cell."""
    rad = comm.radiation_all(sol, data.ch, data.cfg)
    return np.array([rad[x - 1, y - 1] / data.cfg.i_max[x - 1, y - 1] for x, y in data.S_o])


def _rank_one(V, data, a):
    """Rank-one extraction, beamformer recovery and re-lift; returns (lifted, beamformers, utility)."""
    V.a = np.asarray(a, float)
    bf = recover_beamformers(rank_one_extract(V, data.ch))
    lifted = bf.lift()
    return lifted, bf, comm.utilities(lifted, data.ch, data.cfg, data.ing)


def finalize(data: ProblemData, a, zhat, witness: LiftedSolution | None, algorithm, backoff=1e-6):
    """Power polish at the targets, rank-one extraction, audit and repair.

    The polish is retried with a slightly tightened radiation mask when the
    extracted point misses the audit by solver noise; after that the rank-one
    comm part is pinned and the sensing part re-solved at backed-off targets.
    Returns (SolveReport, number of conic solves used).
    """
    cfg = data.cfg
    dom = BranchDomain.pattern(a)
    a = np.asarray(dom.fixed, float)
    tmpl = FeasibilityTemplate(data, dom)
    n_solves = 0
    if tmpl.empty:
        return SolveReport(algorithm, "outage", a=a), 0
    zmin, _ = box_bounds(cfg, data.ch, dom)
    zt = zmin + (1 - backoff) * (np.asarray(zhat, float) - zmin)
    best = None
    margin = np.zeros(len(data.S_o))
    for _ in range(RAD_ROUNDS):
        V = tmpl.min_power(zt, margin=margin)
        n_solves += 1
        if V is None:
            break
        cand = _rank_one(V, data, a)
        if best is None or cand[2].feasible:
            best = cand
        if cand[2].feasible:
            break
        # extraction moves part of V^C's coherent radiation around; tighten the
        # cells it pushed over the mask by the observed excess and retry
        excess = _mask_ratio(cand[0], data) - 1.0
        if not np.any(excess > 0):
            break
        margin = np.minimum(margin + np.maximum(excess, 0) + RAD_PAD * (excess > 0), 0.5)
    if best is None and witness is not None:
        best = _rank_one(witness.copy(), data, a)
    if best is None:
        return SolveReport(algorithm, "outage", a=a), n_solves
    repaired = False
    for frac in REPAIR_STEPS if not best[2].feasible else ():
        Vr = tmpl.min_power(zmin + frac * (zt - zmin), fix_vc=best[0])
        n_solves += 1
        if Vr is None:
            continue
        Vr.vc = best[0].vc
        cand = _rank_one(Vr, data, a)
        if cand[2].feasible:
            best, repaired = cand, True
            break
    lifted, bf, util = best
    status = "ok" if util.feasible else "outage"
    return SolveReport(algorithm, status, a=lifted.a, solution=lifted, beamformers=bf if util.feasible else None,
                       utility=util, z=np.asarray(zhat, float), info={"repair": repaired}), n_solves
