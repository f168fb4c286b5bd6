"""Branch-and-bound over BS activations with polyblock bounding of each branch."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import model, polyblock
from .model import BranchDomain, ProblemData, SolveReport

INT_TOL = 1e-6


def branch(dom: BranchDomain, b=None):
    rel = dom.relaxed
    if not rel:
        raise ValueError("cannot branch an integer domain")
    if b is None:
        b = rel[0]
    if dom.fixed[b] is not None:
        raise ValueError(f"coordinate {b} is already fixed")
    return dom.with_value(b, 0), dom.with_value(b, 1)


@dataclass
class Node:
    dom: BranchDomain
    bound: float
    res: polyblock.MOResult | None = None


@dataclass
class BranchTree:
    live: list = field(default_factory=list)
    incumbent: tuple | None = None     # (a, lb, z, witness)
    q_lb: float = -np.inf
    q_ub: float = np.inf
    rows: list = field(default_factory=list)


class BranchSolver:
    """Runs the inner MO problem on branch domains of one instance."""

    def __init__(self, data: ProblemData, rho=0.05, rho2=None):
        self.data = data
        self.rho = rho
        self.rho2 = rho2
        self.n_checks = 0
        self._tmpl = {}

    def template(self, dom):
        if dom not in self._tmpl:
            self._tmpl[dom] = model.FeasibilityTemplate(self.data, dom)
        return self._tmpl[dom]

    def solve(self, dom, lb=-np.inf, vertices=None):
        cfg = self.data.cfg
        if not dom.screen(cfg.N_bs):
            return polyblock.MOResult(-np.inf, -np.inf, None, None, "infeasible")
        t = self.template(dom)
        zmin, zmax = model.box_bounds(cfg, self.data.ch, dom)
        res = polyblock.solve_mo(lambda z: model.objective_eval(z, cfg)[1], t.check, zmin, zmax,
                                 rho=self.rho, rho2=self.rho2, lb=lb, vertices=vertices)
        self.n_checks += res.n_checks
        return res


def _integer_witness(res, dom):
    if res.witness is None or not np.isfinite(res.lb) or res.lb <= 0:
        return None
    a = np.asarray(res.witness.a)
    if np.all(np.abs(a - np.round(a)) <= INT_TOL):
        return np.round(a)
    return None


def _branch_var(dom, res):
    rel = dom.relaxed
    if res is not None and res.witness is not None:
        a = np.asarray(res.witness.a)
        frac = [min(a[b], 1 - a[b]) for b in rel]
        if max(frac) > INT_TOL:
            return rel[int(np.argmax(frac))]
    return rel[0]


def mo_brb_solve(cfg, channels, rho=0.05, rho2=None, data=None, inner=None) -> SolveReport:
    """Global search over activation patterns.

    ``inner(dom, lb, vertices)`` may replace the MO bounding step (it must
    return a ``MOResult``); it defaults to :class:`BranchSolver`.
    """
    data = data or ProblemData(cfg, channels)
    solver = BranchSolver(data, rho, rho2)
    inner = inner or solver.solve
    B = cfg.B
    tree = BranchTree()
    root = Node(BranchDomain.root(B), np.inf)
    tree.live = [root]
    cur = root
    status = "maxiter"
    for it in range(2 ** B):
        if cur.dom.is_integer:
            status = "optimal"
            break
        b = _branch_var(cur.dom, cur.res)
        tree.live.remove(cur)
        for child_dom in branch(cur.dom, b):
            if cur.bound < tree.q_lb:
                tree.rows.append((it, child_dom.label(), cur.bound, "pruned-parent"))
                continue
            warm = cur.res.vertices if cur.res is not None and cur.res.vertices else None
            res = inner(child_dom, tree.q_lb, warm)
            node = Node(child_dom, res.bound, res)
            tree.rows.append((it, child_dom.label(), res.bound, res.status))
            if not np.isfinite(res.bound) or res.status == "infeasible":
                continue
            a_int = _integer_witness(res, child_dom)
            if a_int is not None:
                if res.lb > tree.q_lb:
                    tree.q_lb = res.lb
                    tree.incumbent = (a_int, res.lb, res.z, res.witness)
                node.dom = BranchDomain.pattern(a_int)
            tree.live.append(node)
        tree.live = [n for n in tree.live if n.bound >= tree.q_lb]
        if not tree.live:
            status = "optimal"
            break
        cur = max(tree.live, key=lambda n: (n.bound, [-1 if v is None else v for v in n.dom.fixed]))
        tree.q_ub = cur.bound
    else:
        if cur.dom.is_integer:
            status = "optimal"
    n_solves = solver.n_checks
    if tree.incumbent is None:
        rep = SolveReport("mobrb", "outage", bound=tree.q_ub, n_solves=n_solves,
                          info={"branch_rows": tree.rows, "search": status})
        return rep
    a, lb, z, wit = tree.incumbent
    rep, extra = model.finalize(data, a, z, wit, "mobrb")
    rep.bound = tree.q_ub
    rep.n_solves = n_solves + extra
    rep.info.update({"branch_rows": tree.rows, "search": status, "lb": lb})
    return rep


def feasible_patterns(B, n_bs):
    for a in itertools.product((0, 1), repeat=B):
        if 1 <= sum(a) <= n_bs:
            yield a


def exhaustive_solve(cfg, channels, rho=0.05, rho2=None, data=None):
    """Solve every admissible pattern with the MO solver; returns (best a, best lb, per-pattern dict)."""
    data = data or ProblemData(cfg, channels)
    solver = BranchSolver(data, rho, rho2)
    out = {}
    for a in feasible_patterns(cfg.B, cfg.N_bs):
        res = solver.solve(BranchDomain(a))
        out[a] = res
    best = max(out, key=lambda a: (out[a].lb, tuple(-v for v in a)))
    return best, out[best].lb, out
