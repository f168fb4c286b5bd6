"""Approximate Fisher information for position/velocity and the resulting CRBs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import C_LIGHT, GeometryError


class SingularChannelError(np.linalg.LinAlgError):
    pass


def zf_receive_weights(G):
    """Unit-norm zero-forcing receive beams, one column per target. G is (N, Q)."""
    G = np.asarray(G, dtype=complex)
    gram = G.conj().T @ G
    s = np.linalg.svd(G, compute_uv=False)
    if s.size == 0 or s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise SingularChannelError("sensing channel matrix is rank deficient")
    W = G @ np.linalg.inv(gram)
    return W / np.linalg.norm(W, axis=0, keepdims=True)


def beta_coefficients(M, L, T, delta_f, sigma, xi_bar):
    """(beta_tt, beta_ff, beta_tf) for one receiver/target pair."""
    g = np.pi ** 2 * xi_bar ** 2 / sigma
    b_tt = 4 * (M - 1) * M * (2 * M - 1) * L * delta_f ** 2 * g / 3
    b_ff = 4 * (L - 1) * L * (2 * L - 1) * M * T ** 2 * g / 3
    b_tf = 2 * M * L * (M - 1) * (L - 1) * T * delta_f * g
    return b_tt, b_ff, b_tf


def delay_doppler_jacobian(d_b, d_b2, d_q, v_q, wavelength):
    """Partials of (tau, f) w.r.t. (x_q, y_q, v_x, v_y); returns two length-4 arrays."""
    d_b, d_b2, d_q, v_q = (np.asarray(v, dtype=float) for v in (d_b, d_b2, d_q, v_q))
    dtau = np.zeros(4)
    df = np.zeros(4)
    for d in (d_b, d_b2):
        e = d - d_q
        r = np.linalg.norm(e)
        if r <= 0:
            raise GeometryError("target colocated with a BS")
        u = e / r
        dtau[:2] -= u / C_LIGHT
        df[:2] -= (v_q - u * (u @ v_q)) / (r * wavelength)
        df[2:] += u / wavelength
    return dtau, df


@dataclass(frozen=True)
class FimIngredients:
    zeta_bar: np.ndarray  # (B, Q) complex, indexed by receiver
    beta: np.ndarray      # (3, B, Q): tt, ff, tf per receiver
    dtau: np.ndarray      # (B, B, Q, 4) transmitter, receiver, target
    df: np.ndarray        # (B, B, Q, 4)
    HD: np.ndarray        # (B, Q, 2, 2) per transmitter
    HV: np.ndarray        # (B, Q, 2, 2)


def fim_ingredients(cfg, channels) -> FimIngredients:
    B, Q = cfg.B, cfg.Q
    sigma = cfg.sigma
    zeta_bar = np.empty((B, Q), complex)
    beta = np.empty((3, B, Q))
    for b2 in range(B):
        W = zf_receive_weights(channels.gr[b2].T)
        for q in range(Q):
            zeta_bar[b2, q] = cfg.rcs[q] * (W[:, q].conj() @ channels.gr[b2, q])
            beta[:, b2, q] = beta_coefficients(cfg.M, cfg.L, cfg.T, cfg.delta_f, sigma,
                                               abs(zeta_bar[b2, q]))
    dtau = np.empty((B, B, Q, 4))
    df = np.empty((B, B, Q, 4))
    for b in range(B):
        for b2 in range(B):
            for q in range(Q):
                dtau[b, b2, q], df[b, b2, q] = delay_doppler_jacobian(
                    cfg.bs_positions[b], cfg.bs_positions[b2], cfg.target_positions[q],
                    cfg.target_velocities[q], cfg.wavelength)
    HD = np.zeros((B, Q, 2, 2))
    HV = np.zeros((B, Q, 2, 2))
    for b in range(B):
        for q in range(Q):
            for b2 in range(B):
                btt, bff, btf = beta[:, b2, q]
                t = dtau[b, b2, q, :2]
                f = df[b, b2, q, :2]
                HD[b, q] += (btt * np.outer(t, t) + bff * np.outer(f, f)
                             - btf * (np.outer(f, t) + np.outer(t, f)))
                fv = df[b, b2, q, 2:]
                HV[b, q] += bff * np.outer(fv, fv)
    return FimIngredients(zeta_bar, beta, dtau, df, HD, HV)


def assemble_fim(ing: FimIngredients, lam):
    """Block-diagonal 4x4 FIM per target, shape (Q, 4, 4). ``lam`` is (B, Q)."""
    lam = np.asarray(lam, dtype=float)
    Q = lam.shape[1]
    J = np.zeros((Q, 4, 4))
    J[:, :2, :2] = np.einsum("bq,bqij->qij", lam, ing.HD)
    J[:, 2:, 2:] = np.einsum("bq,bqij->qij", lam, ing.HV)
    return J


def lambda_sensing(sol, channels):
    """Transmit-side sensing gain per (b, q) from a lifted solution, shape (B, Q)."""
    B, Q, N = channels.gr.shape
    lam = np.zeros((B, Q))
    for b in range(B):
        sl = slice(b * N, (b + 1) * N)
        Vb = sol.vc[:, sl, sl].sum(axis=0) + sol.vr[b]
        for q in range(Q):
            g = channels.gr[b, q]
            lam[b, q] = np.real(g.conj() @ Vb @ g)
    return lam


def crb(J):
    """(eps_D, eps_V) for one 4x4 FIM; inf when a block is singular."""
    out = []
    for blk in (J[:2, :2], J[2:, 2:]):
        det = blk[0, 0] * blk[1, 1] - blk[0, 1] * blk[1, 0]
        scale = max(abs(blk[0, 0] * blk[1, 1]), 1e-300)
        if det <= 1e-12 * scale or blk[0, 0] <= 0 or blk[1, 1] <= 0:
            out.append(np.inf)
        else:
            out.append(max(blk[1, 1], blk[0, 0]) / det)
    return out[0], out[1]


def crb_all(J):
    res = np.array([crb(Jq) for Jq in J])
    return res[:, 0], res[:, 1]
