"""Outer polyblock monotonic optimization with bisection projection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DUP_TOL = 1e-9


@dataclass
class Polyblock:
    zmin: np.ndarray
    vertices: list
    values: list
    lb: float = -np.inf
    ub: float = np.inf

    def add(self, v, val):
        """Insert a vertex unless it is (near-)duplicated or dominated; drop vertices it dominates."""
        for u in self.vertices:
            if np.all(v <= u + DUP_TOL):
                return False
        keep = [i for i, u in enumerate(self.vertices) if not np.all(u <= v + DUP_TOL)]
        self.vertices = [self.vertices[i] for i in keep] + [v]
        self.values = [self.values[i] for i in keep] + [val]
        return True

    def best(self):
        """Index of the vertex with the largest value; ties broken lexicographically."""
        top = max(self.values)
        cand = [i for i, val in enumerate(self.values) if val == top]
        return min(cand, key=lambda i: tuple(self.vertices[i]))

    def pop(self, i):
        v, val = self.vertices.pop(i), self.values.pop(i)
        return v, val


@dataclass
class MOResult:
    bound: float
    lb: float
    z: np.ndarray | None
    witness: object
    status: str
    trace: list = field(default_factory=list)
    vertices: list = field(default_factory=list)
    n_checks: int = 0


def project(oracle, zstar, zmin, rho2, start_witness=None):
    """Bisection on delta in [0, 1] along zmin -> zstar.

    Returns (delta_lo, delta_hi, witness at delta_lo, number of oracle calls).
    ``zmin`` is assumed feasible.
    """
    zstar = np.asarray(zstar, float)
    zmin = np.asarray(zmin, float)
    if np.allclose(zstar, zmin, atol=0, rtol=0):
        return 1.0, 1.0, start_witness, 0
    ok, w = oracle(zstar)
    calls = 1
    if ok:
        return 1.0, 1.0, w, calls
    lo, hi, w_lo = 0.0, 1.0, start_witness
    while hi - lo > rho2:
        mid = 0.5 * (lo + hi)
        ok, w = oracle(zmin + mid * (zstar - zmin))
        calls += 1
        if ok:
            lo, w_lo = mid, w
        else:
            hi = mid
    return lo, hi, w_lo, calls


def split_vertex(zstar, proj, zmin, rho2):
    """New vertices z* - (z* - proj)_n e_n, skipping unchanged or near-zmin coordinates."""
    out = []
    for n in range(len(zstar)):
        if zstar[n] - proj[n] <= DUP_TOL:
            continue
        if proj[n] - zmin[n] <= rho2:
            continue
        v = np.array(zstar, float)
        v[n] = proj[n]
        out.append(v)
    return out


def solve_mo(objective: Callable, oracle: Callable, zmin, zmax, rho=0.05, rho2=None,
             lb=-np.inf, vertices=None, max_vertices=5000, max_iter=5000):
    """Maximize an increasing ``objective`` over the normal set described by ``oracle``.

    ``oracle(z)`` returns (feasible, witness). ``lb`` is an external lower bound
    used only in the stopping rule. ``vertices`` seeds the polyblock (each is
    clipped to ``zmax``); by default the single vertex ``zmax`` is used.
    """
    zmin = np.asarray(zmin, float)
    zmax = np.asarray(zmax, float)
    if rho2 is None:
        rho2 = min(1e-2, rho / 5)
    ok, w0 = oracle(zmin)
    n_checks = 1
    if not ok:
        return MOResult(-np.inf, -np.inf, None, None, "infeasible", n_checks=n_checks)
    best_z, best_w, own_lb = zmin.copy(), w0, objective(zmin)
    pb = Polyblock(zmin, [], [])
    seeds = [zmax] if vertices is None else [np.minimum(v, zmax) for v in vertices]
    for v in seeds:
        if np.all(v >= zmin - DUP_TOL):
            pb.add(np.maximum(v, zmin), objective(v))
    trace = []
    status = "optimal"
    it = 0
    while True:
        ub = max(pb.values) if pb.values else own_lb
        ub = max(ub, own_lb)
        LB = max(lb, own_lb)
        trace.append((it, own_lb, ub, len(pb.vertices)))
        if not pb.vertices or ub <= (1 + rho) * LB:
            break
        if it >= max_iter or len(pb.vertices) >= max_vertices:
            status = "maxiter"
            break
        i = pb.best()
        zstar, _ = pb.pop(i)
        lo, hi, w, calls = project(oracle, zstar, zmin, rho2, w0)
        n_checks += calls
        p_lo = zmin + lo * (zstar - zmin)
        p_hi = zmin + hi * (zstar - zmin)
        val = objective(p_lo)
        if val > own_lb:
            best_z, best_w, own_lb = p_lo, w, val
        if hi < 1.0:
            for v in split_vertex(zstar, p_hi, zmin, rho2):
                pb.add(v, objective(v))
        else:
            # feasible vertex: keep it so the vertex set stays an outer approximation
            pb.add(zstar, objective(zstar))
        it += 1
    return MOResult(ub, own_lb, best_z, best_w, status, trace, list(pb.vertices), n_checks)
