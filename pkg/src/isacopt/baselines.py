"""Fixed-activation comparison schemes."""
from __future__ import annotations

import numpy as np

from . import sca
from .model import ProblemData

SCHEMES = ("maximum", "random", "priomax", "priohalf")


def priority_scores(channels, cfg):
    """(1/o_b) * (sum_k |g_bk|^2 + sum_q |g_bq^R|^2) per BS."""
    gain = (np.sum(np.abs(channels.gc) ** 2, axis=(1, 2))
            + np.sum(np.abs(channels.gr) ** 2, axis=(1, 2)))
    return gain / cfg.op_cost


def _top(scores, n):
    # stable sort on -score keeps the lower index first among ties
    order = np.argsort(-np.asarray(scores), kind="stable")
    a = np.zeros(len(scores))
    a[order[:n]] = 1.0
    return a


def select_activation(scheme, cfg, channels, rng):
    B, n_bs = cfg.B, cfg.N_bs
    if scheme == "maximum":
        a = np.zeros(B)
        a[rng.choice(B, size=n_bs, replace=False)] = 1.0
        return a
    if scheme == "random":
        while True:
            a = (rng.random(B) < 0.5).astype(float)
            if a.sum() >= 1:
                break
        if a.sum() > n_bs:
            on = np.flatnonzero(a)
            drop = rng.choice(on, size=int(a.sum()) - n_bs, replace=False)
            a[drop] = 0.0
        return a
    if scheme == "priomax":
        return _top(priority_scores(channels, cfg), n_bs)
    if scheme == "priohalf":
        return _top(priority_scores(channels, cfg), max(1, n_bs // 2))
    raise ValueError(f"unknown scheme {scheme!r}")


def run_baseline(scheme, cfg, channels, rng, eta=15.0, conv_tol=1e-3, max_iter=30, data=None):
    a = select_activation(scheme, cfg, channels, rng)
    return sca.sca_solve(cfg, channels, eta=eta, conv_tol=conv_tol, max_iter=max_iter,
                         data=data or ProblemData(cfg, channels), fixed_a=a, algorithm=scheme)
