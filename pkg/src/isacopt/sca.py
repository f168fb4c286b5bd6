"""Penalty-based successive convex approximation over (a, V, z)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import comm, conic, model, sensing
from .model import BranchDomain, ProblemData, SolveReport

LN2 = np.log(2.0)
STEP_TOL = 1e-5
AUDIT_TOL = 1e-6
MONO_TOL = 1e-6


# ---------------------------------------------------------------- minorants

def minorant_rate(V, V_i, k, channels, sigma):
    """Concave lower bound of ln(1 + F_k/H_k) around V_i (nats)."""
    F, H = comm.signal_interference(V, channels, sigma)
    Fi, Hi = comm.signal_interference(V_i, channels, sigma)
    F, H, Fi, Hi = F[k], H[k], Fi[k], Hi[k]
    r = Fi / Hi
    return float(np.log1p(r) - r + 2 * np.sqrt(Fi) * np.sqrt(max(F, 0.0)) / Hi
                 - Fi * (F + H) / (Hi * (Fi + Hi)))


def rate_minorant_scalar(F, H, Fi, Hi):
    r = Fi / Hi
    return np.log1p(r) - r + 2 * np.sqrt(Fi * np.maximum(F, 0.0)) / Hi - Fi * (F + H) / (Hi * (Fi + Hi))


def dc_rate_bound(F, H, Fi, Hi):
    """Lower bound ln(F + H) - ln(Hi) + 1 - H/Hi of ln(1 + F/H), tight at H = Hi."""
    return np.log(F + H) - np.log(Hi) + 1.0 - H / Hi


def minorant_ghat(a, a_i):
    a, a_i = np.asarray(a, float), np.asarray(a_i, float)
    return float(a_i @ a_i + 2 * a_i @ (a - a_i))


def upsilon(z_a, o_max):
    return float(np.exp(o_max - z_a))


def minorant_upsilon(z_a, z_a_i, o_max):
    return float(np.exp(o_max - z_a_i) * (1.0 - (z_a - z_a_i)))


def penalty(a):
    a = np.asarray(a, float)
    return float(np.sum(a) - a @ a)


# ----------------------------------------------------------------- program

class ScaTemplate:
    """Convex step program around the current iterate.

    ``rate_form`` picks the rate surrogate: "dc" linearizes only -ln(H) in
    ln(F + H) - ln(H); "sqrt" is ``rate_minorant_scalar``. Both are tight
    lower bounds at the expansion point; "sqrt" needs cancellation to about
    1/SINR and stalls the conic solver at high SINR.
    """

    def __init__(self, data: ProblemData, dom: BranchDomain, rate_form="dc"):
        if rate_form not in ("dc", "sqrt"):
            raise ValueError(f"unknown rate_form {rate_form!r}")
        self.data, self.dom, self.rate_form = data, dom, rate_form
        cfg = data.cfg
        K = data.K
        pb = conic.ProgramBuilder()
        h = model._emit_common(pb, data, dom)
        A = conic.Affine.var
        h.zc = pb.real("zc", K)
        h.zr = pb.real("zr")
        h.za = pb.real("za")
        h.lc = pb.real("lc")
        h.lr = pb.real("lr")
        h.sq = pb.real("sq", K)
        for k in range(K):
            pb.nonneg(A(h.zc[k]) - cfg.c_min[k] * LN2, label="C14")
        span = cfg.o_max - cfg.o_min
        pb.nonneg(A(h.za), span - A(h.za), label="C19")
        pb.nonneg(conic.lin_sum([A(h.epsR[q], cfg.w_r[q]) for q in range(data.Q)]) - A(h.zr), label="C22")
        uc = conic.lin_sum([A(h.zc[k], cfg.w_c[k] / (cfg.c_min[k] * LN2)) for k in range(K)])
        # interference is nonnegative under PSD V, but the dc surrogate weighs it
        # by 1/H_i; explicit rows hold it to the solver tolerance
        for k in range(K):
            gk = h.gvec[k] / np.linalg.norm(h.gvec[k])
            rows = [conic.Affine(h.vc[j].indices, gk) for j in range(K) if j != k]
            if rows:
                pb.nonneg(*rows, label="Hnonneg")
        pb.exp(A(h.lc), conic.Affine(const=1.0), uc, label="logUC")
        pb.exp(A(h.lr), conic.Affine(const=1.0), A(h.zr), label="logzR")
        self.h = h
        self.base = pb.build("optimize")

    def _rate_rows(self, Fi, Hi):
        """(rows, cols, vals, consts, cone groups) of the K rate surrogates."""
        h, K, n = self.h, self.data.K, self.base.n
        rows, cols, vals, consts, cones = [], [], [], [], []
        for k in range(K):
            Ti = Fi[k] + Hi[k]
            if self.rate_form == "dc":
                # zc <= sq + ln(Ti/Hi) + 1 - H/Hi with exp(sq) <= T/Ti;
                # H/Hi = (T - F)/Hi, all O(1) at any SINR
                for j in range(K):
                    rows.append(np.full(h.n2, k))
                    cols.append(h.vc[j].indices)
                    vals.append((0.0 if j == k else -1.0 / Hi[k]) * h.gvec[k])
                rows.append(np.array([k, k]))
                cols.append(np.array([h.sq[k], h.zc[k]]))
                vals.append(np.array([1.0, -1.0]))
                consts.append(np.log(Ti / Hi[k]) + 1.0 - 1.0 / Hi[k])
                T = conic.lin_sum([conic.Affine(h.vc[j].indices, h.gvec[k] / Ti) for j in range(K)]) + 1.0 / Ti
                cones.append(conic.rows_to_group("exp", [conic.Affine.var(h.sq[k]), conic.Affine(const=1.0), T],
                                                 n, "logT"))
            else:
                r = Fi[k] / Hi[k]
                c = Fi[k] / (Hi[k] * Ti)
                # row divided by 1 + r: at high SNR the terms are O(r) and nearly cancel
                s = 1.0 / (1.0 + r)
                for j in range(K):
                    rows.append(np.full(h.n2, k))
                    cols.append(h.vc[j].indices)
                    vals.append(-s * c * h.gvec[k])
                # sq_k stands for sqrt(F_k / F_i), see the cones below
                rows.append(np.array([k, k]))
                cols.append(np.array([h.sq[k], h.zc[k]]))
                vals.append(np.array([2 * r * s, -s]))
                consts.append(s * (np.log1p(r) - r - c))
                y = conic.Affine(h.vc[k].indices, h.gvec[k] / Fi[k])
                u = conic.Affine.var(h.sq[k])
                cones.append(conic.rows_to_group("soc", [y + 1.0, 2 * u, y - 1.0], n, "sqrtF"))
        return rows, cols, vals, consts, cones

    def program(self, a_i, Fi, Hi, za_i, eta, penalized=True):
        data, h = self.data, self.h
        cfg = data.cfg
        K, n = data.K, self.base.n
        rows, cols, vals, consts, cones = self._rate_rows(Fi, Hi)
        # linearized cost bound, divided by exp(o_max - za_i)
        f = np.exp(za_i - cfg.o_max)
        rows.append(np.full(data.B + 1, K))
        cols.append(np.concatenate([h.a, [h.za]]))
        vals.append(np.concatenate([-cfg.op_cost * f, [-1.0]]))
        consts.append(1.0 + za_i)
        Amat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(K + 1, n))
        g = conic.Group("nonneg", Amat, np.array(consts), 0, "C26-27")
        aC, aR, aA = cfg.alpha
        c = np.zeros(n)
        c[h.lc] = -aC
        c[h.lr] = -aR
        c[h.za] = -aA
        if penalized:
            c[h.a] += eta * (1.0 - 2.0 * np.asarray(a_i))
        return self.base.with_groups([g, *cones], c=c, mode="optimize")

    def step(self, sol, z_a, eta, penalized=True, a_lin=None):
        data = self.data
        F, H = comm.signal_interference(sol, data.ch, data.cfg.sigma)
        Fi, Hi = F / data.cfg.sigma, H / data.cfg.sigma
        prog = self.program(sol.a if a_lin is None else a_lin, Fi, Hi, z_a, eta, penalized)
        # surrogate rows only steer the step; the decoded point is audited instead
        st, x = conic.solve(prog, tol=STEP_TOL, keep_inaccurate=True)
        self.last_status = st
        if x is None:
            return None
        new = model.decode(data, self.h, prog, x)
        # the achieved metrics dominate the surrogate values, so use them directly
        return new, metric_z(new, data), _audit_ok(new, data)


def metric_z(sol, data):
    """Auxiliary vector implied by a solution's own metrics."""
    cfg = data.cfg
    F, H = comm.signal_interference(sol, data.ch, cfg.sigma)
    lam = sensing.lambda_sensing(sol, data.ch)
    ed, ev = sensing.crb_all(sensing.assemble_fim(data.ing, lam))
    ur = float(np.sum(cfg.w_r * (1 - np.maximum(ed / cfg.eps_d_max, ev / cfg.eps_v_max))))
    cost = float(sol.a @ cfg.op_cost)
    za = min(max(cfg.o_max - np.log(cost), 0.0), cfg.o_max - cfg.o_min) if cost > 0 else 0.0
    return np.concatenate([np.log1p(F / H), [max(ur, 0.0), za]])


def p6_objective(z, a, cfg, eta, penalized=True):
    val, _ = model.objective_eval(z, cfg)
    return val - (eta * penalty(a) if penalized else 0.0)


@dataclass
class ScaState:
    i: int
    a: np.ndarray
    sol: comm.LiftedSolution
    z: np.ndarray
    trace: list = field(default_factory=list)
    eta: float = 15.0
    stop: str = "max_iter"


def sca_iterate(data, dom, sol0, eta=15.0, conv_tol=1e-3, max_iter=30, neutral_start=False):
    """Run SCA from a feasible lifted point. Returns (ScaState, number of solves).

    With ``neutral_start`` the first penalty linearization is taken at a = 1/2,
    where its gradient vanishes, so the first step sees only the utility.
    """
    cfg = data.cfg
    penalized = not dom.is_integer
    forms = {"dc": ScaTemplate(data, dom)}
    z = metric_z(sol0, data)
    state = ScaState(0, sol0.a.copy(), sol0, z, [p6_objective(z, sol0.a, cfg, eta, penalized)], eta)
    n = 0
    for i in range(1, max_iter + 1):
        a_lin = np.full(cfg.B, 0.5) if (neutral_start and i == 1) else None
        prev = state.trace[-1]
        # the sqrt surrogate is conditioned differently; it is tried once when
        # the dc step cannot be used
        for form in FALLBACK:
            if form not in forms:
                forms[form] = ScaTemplate(data, dom, rate_form=form)
            out, reason = _try_step(forms[form], data, state, prev, eta, penalized, a_lin)
            n += 1
            if out is not None:
                break
        if out is None:
            state.stop = reason
            break
        sol, z, obj = out
        state = ScaState(i, sol.a.copy(), sol, z, state.trace + [obj], eta)
        if np.isfinite(prev) and abs(obj - prev) < conv_tol:
            state.stop = "converged"
            break
    return state, n


FALLBACK = ("dc", "sqrt")


def _try_step(tmpl, data, state, prev, eta, penalized, a_lin):
    """((sol, z, objective), None) for an accepted step, else (None, stop reason)."""
    out = tmpl.step(state.sol, state.z[-1], eta, penalized, a_lin)
    if out is None:
        return None, "step_failed"
    sol, z, ok = out
    obj = p6_objective(z, sol.a, data.cfg, eta, penalized)
    if ok and not (np.isfinite(prev) and obj < prev - MONO_TOL):
        return (sol, z, obj), None
    # an inexact subproblem solve went downhill; backtrack along the segment
    out = _backtrack(data, state.sol, sol, prev, eta, penalized)
    if out is None:
        return None, "decrease" if ok else "step_failed"
    return out, None


BACKTRACK = (0.5, 0.25, 0.125)


def _audit_ok(sol, data):
    viol = comm.audit(sol, data.ch, data.cfg, data.ing)[0]
    return all(np.isfinite(v) and v <= AUDIT_TOL for v in viol.values())


def _backtrack(data, old, new, prev, eta, penalized):
    """First audited point old + t (new - old) that does not lower the objective."""
    cfg = data.cfg
    for t in BACKTRACK:
        mix = comm.LiftedSolution((1 - t) * old.a + t * new.a, (1 - t) * old.vc + t * new.vc,
                                  (1 - t) * old.vr + t * new.vr)
        if not _audit_ok(mix, data):
            continue
        z = metric_z(mix, data)
        obj = p6_objective(z, mix.a, cfg, eta, penalized)
        if obj >= prev - MONO_TOL:
            return mix, z, obj
    return None


def _round(a, n_bs):
    a = np.asarray(a, float)
    r = (a >= 0.5).astype(float)
    order = np.argsort(-a, kind="stable")
    while r.sum() > n_bs:
        on = [b for b in order[::-1] if r[b] == 1]
        r[on[0]] = 0
    if r.sum() < 1:
        r[order[0]] = 1
    return r


def _candidate_patterns(a, n_bs, limit=5):
    """Rounded pattern first, then other admissible patterns by L1 distance to a."""
    import itertools
    first = tuple(_round(a, n_bs).astype(int))
    others = [p for p in itertools.product((0, 1), repeat=len(a)) if 1 <= sum(p) <= n_bs and p != first]
    others.sort(key=lambda p: (np.abs(np.array(p) - a).sum(), p))
    return [first] + others[:limit - 1]


def _fixed_pattern_run(data, pattern, eta, conv_tol, max_iter, start=None):
    dom = BranchDomain(tuple(int(v) for v in pattern))
    ft = model.FeasibilityTemplate(data, dom)
    n = 0
    if ft.empty:
        return None, n
    sol0 = None
    if start is not None:
        cand = start.copy()
        cand.a = np.array(pattern, float)
        v = comm.audit(cand, data.ch, data.cfg, data.ing)[0]
        if all(val <= 1e-7 for val in v.values()):
            sol0 = cand
    if sol0 is None:
        zmin, _ = model.box_bounds(data.cfg, data.ch, dom)
        ok, sol0 = ft.check(zmin)
        n += 1
        if not ok:
            return None, n
    state, m = sca_iterate(data, dom, sol0, eta, conv_tol, max_iter)
    return state, n + m


def sca_solve(cfg, channels, eta=15.0, conv_tol=1e-3, max_iter=30, data=None,
              fixed_a=None, starts=("relaxed", "priority"), algorithm=None) -> SolveReport:
    """Penalty SCA. With ``fixed_a`` the activation is held fixed (baseline mode)."""
    data = data or ProblemData(cfg, channels)
    n_solves = 0
    if fixed_a is not None:
        algorithm = algorithm or "fixed"
        state, n = _fixed_pattern_run(data, fixed_a, eta, conv_tol, max_iter)
        n_solves += n
        if state is None:
            return SolveReport(algorithm, "outage", a=np.asarray(fixed_a, float), n_solves=n_solves)
        rep, m = model.finalize(data, state.a, state.z, state.sol, algorithm)
        rep.trace = state.trace
        rep.n_solves = n_solves + m
        return rep

    algorithm = algorithm or "sca"
    root = BranchDomain.root(cfg.B)
    ft = model.FeasibilityTemplate(data, root)
    zmin, _ = model.box_bounds(cfg, channels, root)
    ok, sol_relaxed = ft.check(zmin)
    n_solves += 1
    if not ok:
        return SolveReport(algorithm, "outage", n_solves=n_solves)
    best = None
    joint_trace = None
    stops = {}
    for start in starts:
        if start == "relaxed":
            sol0 = sol_relaxed
        else:
            from .baselines import priority_scores
            pr = priority_scores(channels, cfg)
            order = np.argsort(-pr, kind="stable")
            a0 = np.zeros(cfg.B)
            a0[order[:cfg.N_bs]] = 1.0
            dom0 = BranchDomain.pattern(a0)
            t0 = model.FeasibilityTemplate(data, dom0)
            ok0, sol0 = t0.check(model.box_bounds(cfg, channels, dom0)[0])
            n_solves += 1
            if not ok0:
                continue
        state, n = sca_iterate(data, root, sol0, eta, conv_tol, max_iter,
                               neutral_start=(start == "relaxed"))
        n_solves += n
        if joint_trace is None:
            joint_trace = state.trace
        stops[start] = state.stop
        for pattern in _candidate_patterns(state.a, cfg.N_bs):
            fin, n = _fixed_pattern_run(data, pattern, eta, conv_tol, max_iter, start=state.sol)
            n_solves += n
            if fin is None:
                continue
            rep, m = model.finalize(data, fin.a, fin.z, fin.sol, algorithm)
            n_solves += m
            if rep.status == "ok":
                rep.trace = state.trace
                rep.info["fixed_trace"] = fin.trace
                rep.info["start"] = start
                rep.info["relaxed_a"] = state.a
                if best is None or rep.U > best.U:
                    best = rep
                break
    if best is None:
        best = SolveReport(algorithm, "outage", trace=joint_trace or [])
    best.n_solves = n_solves
    best.info["stops"] = stops
    return best
