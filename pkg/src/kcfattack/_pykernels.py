"""Pure-numpy closed-loop step kernel.

This is the reference implementation of the fused simulator; the compiled
module ``_ckernels`` performs exactly the same operations.  One call advances a
single sample path by ``wn.shape[0]`` steps, mutating the state arrays
(``x``, ``xhat``, ``xatt``, ``ring``, ``meta`` and, in SPSA mode, ``T``, ``M``,
``d``) in place and filling the per-step output arrays.

Modes
-----
0  no attack
1  static linear attack ``z~ = T z + M theta + d + U' n``
2  KKT attack with fixed ``T``: ``b = -(G'G + lam Sinv)^{-1} G' r0 - T H A delta``
3  SPSA: perturb, estimate, update ``(T, M, d)``, then ``b = M theta + d``

``meta`` holds ``(t, ring position, ring fill count)``. The return value is 0,
or the number of completed steps when an estimate diverged.
"""
import numpy as np

MODE_NONE, MODE_STATIC, MODE_KKT, MODE_SPSA = 0, 1, 2, 3


def _node_objective(k, T, M, d, theta, hd, r0, G, Sinv, GtG, P, lam, xi):
    mu = d[k] + T[k] @ hd[k] + M[k] @ theta[k]
    m = r0[k] + G[k] @ mu
    Z = T[k] @ P[k] @ T[k].T
    return (m @ m + lam * (mu @ Sinv[k] @ mu) + np.sum((GtG[k] + lam * Sinv[k]) * Z)
            + xi * np.sum(M[k] * M[k]))


def simulate_block(mode, A, Lq, H, Lr, G, C, nbr_ptr, nbr_idx, xs, Sinv, GtG, Pbase, Ksched, Rsched,
                   attacked, T, U, M, d, WiGt, lam, xi, bound, update_T, a_sched, c_sched,
                   pert_T, pert_M, pert_d, wn, vn, bn, x, xhat, xatt, ring, meta, eta,
                   dev, It, score_sum, scores, moments, exp_theta, exp_zq,
                   record, x_out, xhat_out, z_out, ztil_out, window_out, alarm_out, diverge_at=1e9):
    steps = wn.shape[0]
    N, p, q = H.shape
    J = ring.shape[1]
    nK, nR = Ksched.shape[0], Rsched.shape[0]
    t0, pos, count = int(meta[0]), int(meta[1]), int(meta[2])
    need_r0 = mode in (MODE_KKT, MODE_SPSA) or moments
    need_P = mode == MODE_SPSA or moments
    att = attacked.astype(bool)
    active = att if mode != MODE_NONE else np.zeros(N, dtype=bool)
    HA = H @ A
    nbrs = [nbr_idx[nbr_ptr[k]:nbr_ptr[k + 1]] for k in range(N)]
    eye = np.eye(p)

    for s in range(steps):
        t = t0 + s + 1
        xbar = xhat @ A.T
        theta = xhat - xs
        cons = np.array([(xbar[nb] - xbar[k]).sum(axis=0) for k, nb in enumerate(nbrs)]).reshape(N, q)
        if need_r0:
            r0 = xbar - xs + np.einsum("kij,kj->ki", C, cons)
            hd = np.einsum("kij,kj->ki", HA, xatt - xhat)
        if need_P:
            Rprev = Rsched[min(t - 1, nR - 1)]
            P = Pbase + HA @ Rprev @ HA.transpose(0, 2, 1)

        if mode == MODE_SPSA:
            cc, aa = c_sched[s], a_sched[s]
            Tp = T + cc * pert_T[s] if update_T else T.copy()
            Tm = T - cc * pert_T[s] if update_T else T.copy()
            Mp, Mm = M + cc * pert_M[s], M - cc * pert_M[s]
            dp, dm = d + cc * pert_d[s], d - cc * pert_d[s]
            kp = km = 0.0
            for k in range(N):
                if att[k]:
                    kp += _node_objective(k, Tp, Mp, dp, theta, hd, r0, G, Sinv, GtG, P, lam, xi)
                    km += _node_objective(k, Tm, Mm, dm, theta, hd, r0, G, Sinv, GtG, P, lam, xi)
            gdiff = (kp - km) / (2.0 * cc)
            for k in range(N):
                if not att[k]:
                    continue
                if update_T:
                    T[k] = np.clip(T[k] - aa * gdiff / pert_T[s, k], -bound, bound)
                M[k] = np.clip(M[k] - aa * gdiff / pert_M[s, k], -bound, bound)
                d[k] = np.clip(d[k] - aa * gdiff / pert_d[s, k], -bound, bound)

        u = np.zeros((N, p))
        if mode == MODE_KKT:
            u[att] = (-np.einsum("kij,kj->ki", WiGt, r0) - np.einsum("kij,kj->ki", T, hd))[att]
        elif mode in (MODE_STATIC, MODE_SPSA):
            u[att] = (d + np.einsum("kij,kj->ki", M, theta))[att]

        if moments:
            Teff = np.where(active[:, None, None], T, eye)
            mu = u + np.einsum("kij,kj->ki", Teff, hd)
            Z = Teff @ P @ Teff.transpose(0, 2, 1)
            if mode == MODE_STATIC:
                Z = Z + np.where(active[:, None, None], U.transpose(0, 2, 1) @ U, 0.0)
            m = r0 + np.einsum("kij,kj->ki", G, mu)
            exp_theta[s] = np.sum(GtG * Z) + np.sum(m * m)
            exp_zq[s] = np.sum(Sinv * Z) + np.einsum("ki,kij,kj->", mu, Sinv, mu)

        x[:] = A @ x + Lq @ wn[s]
        y = H @ x + np.einsum("kij,kj->ki", Lr, vn[s])
        z = y - np.einsum("kij,kj->ki", H, xbar)
        ztil = z.copy()
        if mode != MODE_NONE:
            zt = np.einsum("kij,kj->ki", T, z) + u
            if mode == MODE_STATIC:
                zt = zt + np.einsum("kji,kj->ki", U, bn[s])
            ztil[att] = zt[att]

        xpred = A @ xatt
        innov = (y - H @ xpred).ravel()
        xatt[:] = xpred + Ksched[min(t - 1, nK - 1)] @ innov

        xhat[:] = xbar + np.einsum("kij,kj->ki", G, ztil) + np.einsum("kij,kj->ki", C, cons)
        diverged = (not np.all(np.isfinite(xhat))) or np.abs(xhat).max() > diverge_at
        dev[s] = np.sum((xhat - xs) ** 2)

        sc = np.einsum("ki,kij,kj->k", ztil, Sinv, ztil)
        scores[s] = sc
        score_sum[s] = sc.sum()
        ring[:, pos] = sc
        pos = (pos + 1) % J
        count = min(count + 1, J)
        win = ring.sum(axis=1)
        alarms = win >= eta
        It[s] = bool(alarms.any())
        if record:
            window_out[s] = win
            alarm_out[s] = alarms
            x_out[s] = x
            xhat_out[s] = xhat
            z_out[s] = z
            ztil_out[s] = ztil
        if diverged:
            meta[:] = (t, pos, count)
            return s + 1

    meta[:] = (t0 + steps, pos, count)
    return 0
