"""Small conic modelling layer over Clarabel.

Programs are built from real scalar/vector blocks and complex Hermitian
blocks. A Hermitian n x n block is stored as n^2 reals: the diagonal, then
Re and Im of the strict upper triangle (``np.triu_indices(n, 1)`` order).
Its PSD constraint is the real 2n x 2n embedding [[Re X, -Im X], [Im X, Re X]].

Every constraint group stores ``A x + b`` and the cone it must lie in.
Solver witnesses are re-checked by :func:`max_violation`, which works on
the stored rows and uses dense eigenvalues for PSD groups.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import clarabel
import numpy as np
import scipy.sparse as sp

FEAS_TOL = 1e-7
OPT_TOL = 1e-8
MAX_ITER = 200
SQRT2 = np.sqrt(2.0)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"
    ILL_POSED = "Ill-posed"


@dataclass
class SolveStatus:
    status: Status
    primal_residual: float = np.nan
    dual_residual: float = np.nan
    objective: float = np.nan
    iterations: int = 0
    max_violation: float = np.nan

    @property
    def ok(self):
        return self.status in (Status.OPTIMAL, Status.FEASIBLE)


class Affine:
    """Sparse affine scalar function of the variable vector."""

    __slots__ = ("idx", "coef", "const")

    def __init__(self, idx=(), coef=(), const=0.0):
        self.idx = np.asarray(idx, dtype=np.int64).ravel()
        self.coef = np.asarray(coef, dtype=float).ravel()
        self.const = float(const)

    @classmethod
    def var(cls, i, c=1.0):
        return cls([i], [c])

    def _lift(self, other):
        return other if isinstance(other, Affine) else Affine(const=other)

    def __add__(self, other):
        o = self._lift(other)
        return Affine(np.concatenate([self.idx, o.idx]), np.concatenate([self.coef, o.coef]),
                      self.const + o.const)

    __radd__ = __add__

    def __neg__(self):
        return Affine(self.idx, -self.coef, -self.const)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, s):
        return Affine(self.idx, self.coef * float(s), self.const * float(s))

    __rmul__ = __mul__

    def __truediv__(self, s):
        return self * (1.0 / float(s))

    def value(self, x):
        return float(self.coef @ x[self.idx] + self.const) if self.idx.size else self.const


def lin_sum(terms):
    terms = list(terms)
    if not terms:
        return Affine()
    return Affine(np.concatenate([t.idx for t in terms]), np.concatenate([t.coef for t in terms]),
                  sum(t.const for t in terms))


@dataclass(frozen=True)
class HermVar:
    offset: int
    n: int

    @property
    def size(self):
        return self.n * self.n

    @property
    def indices(self):
        return np.arange(self.offset, self.offset + self.size)

    def coef_vector(self, C):
        """Coefficients c with Tr(C X) = c . params(X) for Hermitian C."""
        C = np.asarray(C, dtype=complex)
        C = 0.5 * (C + C.conj().T)
        iu = np.triu_indices(self.n, 1)
        return np.concatenate([C.real.diagonal(), 2 * C.real[iu], 2 * C.imag[iu]])

    def trace(self, C, scale=1.0):
        return Affine(self.indices, scale * self.coef_vector(C))

    def trace_rows(self, Cs):
        """Dense (m, n^2) coefficient block for several trace functionals."""
        return np.stack([self.coef_vector(C) for C in Cs])

    def value(self, x):
        n = self.n
        p = x[self.offset:self.offset + self.size]
        X = np.diag(p[:n]).astype(complex)
        iu = np.triu_indices(n, 1)
        m = len(iu[0])
        X[iu] = p[n:n + m] + 1j * p[n + m:]
        X[(iu[1], iu[0])] = p[n:n + m] - 1j * p[n + m:]
        return X

    def params(self, X):
        iu = np.triu_indices(self.n, 1)
        return np.concatenate([X.real.diagonal(), X.real[iu], X.imag[iu]])


@lru_cache(maxsize=None)
def _psd_map(n):
    """(svec row, param offset, coefficient) for the realified 2n embedding."""
    iu_pos = {}
    iu = np.triu_indices(n, 1)
    m = len(iu[0])
    for k, (i, j) in enumerate(zip(*iu)):
        iu_pos[(i, j)] = k

    def re_entry(i, j):
        if i == j:
            return i, 1.0
        if i < j:
            return n + iu_pos[(i, j)], 1.0
        return n + iu_pos[(j, i)], 1.0

    def im_entry(i, j):
        if i == j:
            return None, 0.0
        if i < j:
            return n + m + iu_pos[(i, j)], 1.0
        return n + m + iu_pos[(j, i)], -1.0

    rows, cols, vals = [], [], []
    row = 0
    N2 = 2 * n
    for c in range(N2):
        for r in range(c + 1):
            scale = 1.0 if r == c else SQRT2
            if r < n and c < n:
                p, s = re_entry(r, c)
            elif r >= n and c >= n:
                p, s = re_entry(r - n, c - n)
            elif r < n <= c:
                p, s = im_entry(r, c - n)
                s = -s
            else:  # r >= n > c cannot happen in upper triangle
                p, s = None, 0.0
            if p is not None and s != 0.0:
                rows.append(row)
                cols.append(p)
                vals.append(s * scale)
            row += 1
    return np.array(rows), np.array(cols), np.array(vals), row


@lru_cache(maxsize=None)
def _svec_index(n2):
    r, c = [], []
    for cc in range(n2):
        for rr in range(cc + 1):
            r.append(rr)
            c.append(cc)
    r, c = np.array(r), np.array(c)
    return r, c, np.where(r == c, 1.0, 1.0 / SQRT2)


def svec_to_mat(v, n2):
    """Inverse of the scaled upper-triangle column-major packing."""
    r, c, w = _svec_index(n2)
    S = np.zeros((n2, n2))
    S[r, c] = v * w
    S[c, r] = v * w
    return S


@dataclass
class Group:
    kind: str          # zero | nonneg | soc | exp | psd
    A: sp.csr_matrix
    b: np.ndarray
    order: int = 0     # matrix order for psd groups
    label: str = ""

    @property
    def m(self):
        return self.A.shape[0]


@dataclass
class ConeProgram:
    n: int
    c: np.ndarray
    groups: list
    blocks: dict = field(default_factory=dict)
    mode: str = "feasibility"
    c0: float = 0.0
    base: "ConeProgram | None" = None
    _stack: tuple | None = None

    def with_groups(self, extra, c=None, mode=None):
        """Program sharing this one's groups (and their stacked matrix) plus ``extra``."""
        return ConeProgram(self.n, self.c if c is None else c, self.groups + list(extra),
                           self.blocks, self.mode if mode is None else mode, self.c0, base=self)

    def stacked(self):
        """(-A, b, cones) for Clarabel, reusing the base program's stack."""
        if self._stack is None:
            if self.base is not None:
                A0, b0, c0 = self.base.stacked()
                extra = [g for g in self.groups[len(self.base.groups):] if g.m > 0]
            else:
                A0, b0, c0 = sp.csc_matrix((0, self.n)), np.zeros(0), []
                extra = [g for g in self.groups if g.m > 0]
            for g in extra:
                if g.A.shape[1] != self.n:
                    raise ValueError("constraint width does not match variable count")
            A = sp.vstack([A0] + [-g.A for g in extra], format="csc") if extra else A0
            b = np.concatenate([b0] + [g.b for g in extra])
            self._stack = (A, b, c0 + [_cone(g) for g in extra])
        return self._stack

    def value(self, name, x):
        blk = self.blocks[name]
        return blk.value(x) if isinstance(blk, HermVar) else x[blk]


def rows_to_group(kind, rows, n, label="", order=0):
    ri, ci, vi = [], [], []
    b = np.empty(len(rows))
    for r, aff in enumerate(rows):
        ri.append(np.full(aff.idx.size, r))
        ci.append(aff.idx)
        vi.append(aff.coef)
        b[r] = aff.const
    if rows:
        A = sp.csr_matrix((np.concatenate(vi), (np.concatenate(ri), np.concatenate(ci))),
                          shape=(len(rows), n))
    else:
        A = sp.csr_matrix((0, n))
    return Group(kind, A, b, order, label)


def dense_group(kind, cols, coef, const, n, label=""):
    """Group from a dense coefficient block over the given variable columns."""
    coef = np.atleast_2d(coef)
    m = coef.shape[0]
    A = sp.csr_matrix((coef.ravel(), (np.repeat(np.arange(m), len(cols)), np.tile(cols, m))),
                      shape=(m, n))
    return Group(kind, A, np.asarray(const, dtype=float).reshape(m), 0, label)


class ProgramBuilder:
    def __init__(self):
        self.n = 0
        self.blocks = {}
        self._pending = []   # (kind, rows, label, order) or Group
        self._obj = Affine()

    def real(self, name, size=None):
        k = 1 if size is None else size
        idx = np.arange(self.n, self.n + k)
        self.n += k
        self.blocks[name] = idx if size is not None else idx[0]
        return self.blocks[name]

    def herm(self, name, n, psd=True):
        hv = HermVar(self.n, n)
        self.n += hv.size
        self.blocks[name] = hv
        if psd:
            self._pending.append(("psd", hv, name))
        return hv

    def zero(self, *rows, label=""):
        self._pending.append(("zero", list(rows), label))

    def nonneg(self, *rows, label=""):
        self._pending.append(("nonneg", list(rows), label))

    def soc(self, t, xs, label=""):
        """||xs|| <= t."""
        self._pending.append(("soc", [t] + list(xs), label))

    def rsoc(self, y, z, x, label=""):
        """x^2 <= y z with y, z >= 0, as ||(2x, y - z)|| <= y + z."""
        self.soc(y + z, [2 * x, y - z], label)

    def exp(self, x, y, z, label=""):
        """y exp(x / y) <= z."""
        self._pending.append(("exp", [x, y, z], label))

    def group(self, g):
        self._pending.append(g)

    def minimize(self, aff):
        self._obj = aff

    def maximize(self, aff):
        self._obj = -aff

    def build(self, mode="optimize"):
        groups = []
        for item in self._pending:
            if isinstance(item, Group):
                if item.A.shape[1] != self.n:
                    item = Group(item.kind, sp.csr_matrix((item.A.data, item.A.indices, item.A.indptr),
                                                          shape=(item.m, self.n)), item.b, item.order, item.label)
                groups.append(item)
                continue
            kind, payload, label = item
            if kind == "psd":
                rows, cols, vals, m = _psd_map(payload.n)
                A = sp.csr_matrix((vals, (rows, cols + payload.offset)), shape=(m, self.n))
                groups.append(Group("psd", A, np.zeros(m), 2 * payload.n, label))
            else:
                groups.append(rows_to_group(kind, payload, self.n, label))
        groups = _merge(groups)
        c = np.zeros(self.n)
        np.add.at(c, self._obj.idx, self._obj.coef)
        if mode == "feasibility":
            c[:] = 0.0
        return ConeProgram(self.n, c, groups, dict(self.blocks), mode, self._obj.const)


_KIND_ORDER = {"zero": 0, "nonneg": 1, "soc": 2, "exp": 3, "psd": 4}


def _merge(groups):
    """Sort groups by cone kind and fuse all zero / nonneg rows into one group each."""
    out = []
    for kind in ("zero", "nonneg"):
        sel = [g for g in groups if g.kind == kind and g.m > 0]
        if sel:
            out.append(Group(kind, sp.vstack([g.A for g in sel], format="csr"),
                             np.concatenate([g.b for g in sel]), 0, "+".join(sorted({g.label for g in sel}))))
    rest = [g for g in groups if g.kind not in ("zero", "nonneg")]
    rest.sort(key=lambda g: _KIND_ORDER[g.kind])
    return out + rest


def _cone(g):
    if g.kind == "zero":
        return clarabel.ZeroConeT(g.m)
    if g.kind == "nonneg":
        return clarabel.NonnegativeConeT(g.m)
    if g.kind == "soc":
        return clarabel.SecondOrderConeT(g.m)
    if g.kind == "exp":
        return clarabel.ExponentialConeT()
    if g.kind == "psd":
        return clarabel.PSDTriangleConeT(g.order)
    raise ValueError(f"unknown cone {g.kind}")


def max_violation(program: ConeProgram, x):
    """Largest cone violation of ``x`` (0 when every constraint holds)."""
    worst = 0.0
    for g in program.groups:
        if g.m == 0:
            continue
        v = g.A @ x + g.b
        if g.kind == "zero":
            viol = np.max(np.abs(v))
        elif g.kind == "nonneg":
            viol = max(0.0, -np.min(v))
        elif g.kind == "soc":
            viol = max(0.0, np.linalg.norm(v[1:]) - v[0])
        elif g.kind == "exp":
            xx, yy, zz = v
            if yy > 0:
                viol = max(0.0, yy * np.exp(min(xx / yy, 700.0)) - zz) / max(1.0, abs(zz))
            else:
                viol = max(0.0, -yy, xx, -zz)
        else:
            viol = max(0.0, -np.linalg.eigvalsh(svec_to_mat(v, g.order))[0])
        worst = max(worst, float(viol))
    return worst


# Clarabel static regularization per attempt; None keeps its default. The
# stronger setting rescues high-SNR programs that stall at "AlmostSolved".
REGULARIZATION = (None, 1e-7)


def _clarabel(program, tol, max_iter, verbose, reg):
    A, b, cones = program.stacked()
    P = sp.csc_matrix((program.n, program.n))
    s = clarabel.DefaultSettings()
    s.verbose = verbose
    s.max_iter = int(max_iter)
    s.tol_feas = min(1e-9, tol)
    s.tol_gap_abs = min(1e-9, tol)
    s.tol_gap_rel = min(1e-9, tol)
    s.tol_infeas_abs = 1e-9
    s.tol_infeas_rel = 1e-9
    s.chordal_decomposition_enable = False
    if reg is not None:
        s.static_regularization_constant = reg
    try:
        return clarabel.DefaultSolver(P, program.c, A, b, cones, s).solve()
    except BaseException as exc:  # clarabel raises on malformed data
        if isinstance(exc, KeyboardInterrupt):
            raise
        return None


def _classify(program, sol, tol):
    """(SolveStatus, x or None, accepted) for one Clarabel result."""
    if sol is None:
        return SolveStatus(Status.ILL_POSED), None, False
    name = str(sol.status)
    x = np.asarray(sol.x)
    res = SolveStatus(Status.ILL_POSED, float(sol.r_prim), float(sol.r_dual),
                      float(sol.obj_val) + program.c0, int(sol.iterations))
    if "Infeasible" in name and "Dual" not in name:
        res.status = Status.INFEASIBLE
        return res, None, False
    if "DualInfeasible" in name:
        return res, None, False
    if np.all(np.isfinite(x)):
        res.max_violation = max_violation(program, x)
    ok = res.max_violation <= tol
    if ok:
        # "Solved", or almost solved / stalled at a point that checks out
        solved = name == "Solved"
        res.status = (Status.FEASIBLE if program.mode == "feasibility" or not solved else Status.OPTIMAL)
        return res, x, True
    if name in ("MaxIterations", "MaxTime"):
        res.status = Status.MAX_ITER
    else:
        res.status = Status.INFEASIBLE if name == "Solved" or "Almost" in name else Status.ILL_POSED
    return res, (x if np.all(np.isfinite(x)) else None), False


def solve(program: ConeProgram, tol=None, max_iter=MAX_ITER, verbose=False, keep_inaccurate=False):
    """Solve with Clarabel; returns (SolveStatus, x or None).

    A program whose point fails verification is retried with stronger
    regularization. With ``keep_inaccurate`` a finite iterate is returned even
    when it fails verification, for callers that validate points on their own.
    """
    if tol is None:
        tol = FEAS_TOL if program.mode == "feasibility" else OPT_TOL
    best = None
    for reg in REGULARIZATION:
        res, x, accepted = _classify(program, _clarabel(program, tol, max_iter, verbose, reg), tol)
        if accepted:
            return res, x
        if res.status == Status.INFEASIBLE and x is None:
            # a certificate of infeasibility is not retried
            return res, None
        if best is None or (x is not None and (best[1] is None or res.max_violation < best[0].max_violation)):
            best = (res, x)
    res, x = best
    if res.status == Status.MAX_ITER:
        return res, x
    return res, (x if keep_inaccurate else None)


def check_feasible(program: ConeProgram, tol=FEAS_TOL, max_iter=MAX_ITER):
    fp = program.with_groups([], c=np.zeros(program.n), mode="feasibility")
    st, x = solve(fp, tol=tol, max_iter=max_iter)
    return st.ok, x


def dump(program: ConeProgram, path):
    """Plain-text dump: header, objective, then one block per constraint group."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"CONEPROGRAM n={program.n} mode={program.mode} groups={len(program.groups)}\n")
        fh.write("OBJ " + " ".join(f"{i}:{v:.17g}" for i, v in enumerate(program.c) if v != 0) + "\n")
        for g in program.groups:
            coo = g.A.tocoo()
            fh.write(f"GROUP {g.kind} m={g.m} order={g.order} label={g.label or '-'}\n")
            for r in range(g.m):
                sel = coo.row == r
                terms = " ".join(f"{c}:{v:.17g}" for c, v in zip(coo.col[sel], coo.data[sel]))
                fh.write(f"  {g.b[r]:.17g} | {terms}\n")
