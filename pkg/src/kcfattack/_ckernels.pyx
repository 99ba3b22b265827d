# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled closed-loop step kernel.

Mirrors :func:`kcfattack._pykernels.simulate_block` operation for operation;
see that module for the meaning of every argument.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, isfinite

cnp.import_array()

cdef enum:
    MODE_NONE = 0
    MODE_STATIC = 1
    MODE_KKT = 2
    MODE_SPSA = 3


cdef inline double clamp(double v, double bound) noexcept nogil:
    if v > bound:
        return bound
    if v < -bound:
        return -bound
    return v


cdef double node_objective(Py_ssize_t k, Py_ssize_t q, Py_ssize_t p,
                           double[:, :, ::1] Tm, double[:, :, ::1] Mm, double[:, ::1] dm,
                           double[:, ::1] theta, double[:, ::1] hd, double[:, ::1] r0,
                           double[:, :, ::1] G, double[:, :, ::1] Sinv, double[:, :, ::1] GtG,
                           double[:, :, ::1] P, double lam, double xi,
                           double[::1] mu, double[::1] v, double[:, ::1] TP) noexcept nogil:
    """theta_sq + lam * z_quad + xi * ||M||_F^2 for node k with S = 0."""
    cdef Py_ssize_t i, j, l
    cdef double acc, out = 0.0, tr = 0.0, zq = 0.0
    for i in range(p):
        acc = dm[k, i]
        for j in range(p):
            acc += Tm[k, i, j] * hd[k, j]
        for j in range(q):
            acc += Mm[k, i, j] * theta[k, j]
        mu[i] = acc
    for i in range(q):
        acc = r0[k, i]
        for j in range(p):
            acc += G[k, i, j] * mu[j]
        out += acc * acc
    for i in range(p):
        acc = 0.0
        for j in range(p):
            acc += Sinv[k, i, j] * mu[j]
        zq += mu[i] * acc
    # Z = T P T'; tr((G'G + lam Sinv) Z)
    for i in range(p):
        for j in range(p):
            acc = 0.0
            for l in range(p):
                acc += Tm[k, i, l] * P[k, l, j]
            TP[i, j] = acc
    for i in range(p):
        for j in range(p):
            acc = 0.0
            for l in range(p):
                acc += TP[i, l] * Tm[k, j, l]
            tr += (GtG[k, i, j] + lam * Sinv[k, i, j]) * acc
    out += lam * zq + tr
    acc = 0.0
    for i in range(p):
        for j in range(q):
            acc += Mm[k, i, j] * Mm[k, i, j]
    return out + xi * acc


def simulate_block(int mode,
                   double[:, ::1] A, double[:, ::1] Lq,
                   double[:, :, ::1] H, double[:, :, ::1] Lr, double[:, :, ::1] G, double[:, :, ::1] C,
                   cnp.int64_t[::1] nbr_ptr, cnp.int64_t[::1] nbr_idx,
                   double[::1] xs, double[:, :, ::1] Sinv, double[:, :, ::1] GtG, double[:, :, ::1] Pbase,
                   double[:, :, ::1] Ksched, double[:, :, ::1] Rsched,
                   cnp.int8_t[::1] attacked,
                   double[:, :, ::1] T, double[:, :, ::1] U, double[:, :, ::1] M, double[:, ::1] d,
                   double[:, :, ::1] WiGt,
                   double lam, double xi, double bound, int update_T,
                   double[::1] a_sched, double[::1] c_sched,
                   double[:, :, :, ::1] pert_T, double[:, :, :, ::1] pert_M, double[:, :, ::1] pert_d,
                   double[:, ::1] wn, double[:, :, ::1] vn, double[:, :, ::1] bn,
                   double[::1] x, double[:, ::1] xhat, double[::1] xatt,
                   double[:, ::1] ring, cnp.int64_t[::1] meta, double eta,
                   double[::1] dev, cnp.int8_t[::1] It, double[::1] score_sum, double[:, ::1] scores,
                   int moments, double[::1] exp_theta, double[::1] exp_zq,
                   int record, double[:, ::1] x_out, double[:, :, ::1] xhat_out,
                   double[:, :, ::1] z_out, double[:, :, ::1] ztil_out,
                   double[:, ::1] window_out, cnp.int8_t[:, ::1] alarm_out,
                   double diverge_at=1e9):
    cdef Py_ssize_t steps = wn.shape[0]
    cdef Py_ssize_t N = H.shape[0], p = H.shape[1], q = H.shape[2]
    cdef Py_ssize_t J = ring.shape[1]
    cdef Py_ssize_t nK = Ksched.shape[0], nR = Rsched.shape[0]
    cdef Py_ssize_t s, k, i, j, l, jj, n, ti, ri
    cdef long t0 = meta[0]
    cdef long t
    cdef double acc, acc2, kp, km, gdiff, cc, aa, total_dev, total_score, win
    cdef int any_alarm, diverged = 0
    cdef long pos = meta[1], count = meta[2]
    cdef bint need_r0 = mode == MODE_KKT or mode == MODE_SPSA or moments
    cdef bint need_P = mode == MODE_SPSA or moments

    HA_np = np.empty((N, p, q))
    cdef double[:, :, ::1] HA = HA_np
    cdef double[:, ::1] theta = np.empty((N, q))
    cdef double[:, ::1] xbar = np.empty((N, q))
    cdef double[:, ::1] cons = np.empty((N, q))
    cdef double[:, ::1] r0 = np.empty((N, q))
    cdef double[:, ::1] hd = np.empty((N, p))
    cdef double[:, ::1] u = np.empty((N, p))
    cdef double[:, ::1] y = np.empty((N, p))
    cdef double[:, ::1] z = np.empty((N, p))
    cdef double[:, ::1] ztil = np.empty((N, p))
    cdef double[:, :, ::1] P = np.empty((N, p, p))
    cdef double[:, ::1] HAR = np.empty((p, q))
    cdef double[::1] xnew = np.empty(q)
    cdef double[::1] xattpred = np.empty(q)
    cdef double[::1] innov = np.empty(N * p)
    cdef double[::1] mu = np.empty(p)
    cdef double[::1] vtmp = np.empty(p)
    cdef double[:, ::1] TP = np.empty((p, p))
    cdef double[:, :, ::1] Tp, Tm, Mp, Mm
    cdef double[:, ::1] dp, dmn
    if mode == MODE_SPSA:
        Tp = np.empty((N, p, p)); Tm = np.empty((N, p, p))
        Mp = np.empty((N, p, q)); Mm = np.empty((N, p, q))
        dp = np.empty((N, p)); dmn = np.empty((N, p))

    for k in range(N):
        for i in range(p):
            for j in range(q):
                acc = 0.0
                for l in range(q):
                    acc += H[k, i, l] * A[l, j]
                HA[k, i, j] = acc

    for s in range(steps):
        t = t0 + s + 1
        # quantities at t-1
        for k in range(N):
            for i in range(q):
                acc = 0.0
                for j in range(q):
                    acc += A[i, j] * xhat[k, j]
                xbar[k, i] = acc
                theta[k, i] = xhat[k, i] - xs[i]
        for k in range(N):
            for i in range(q):
                cons[k, i] = 0.0
            for n in range(nbr_ptr[k], nbr_ptr[k + 1]):
                jj = nbr_idx[n]
                for i in range(q):
                    cons[k, i] += xbar[jj, i] - xbar[k, i]
        if need_r0:
            for k in range(N):
                for i in range(q):
                    acc = xbar[k, i] - xs[i]
                    for j in range(q):
                        acc += C[k, i, j] * cons[k, j]
                    r0[k, i] = acc
                for i in range(p):
                    acc = 0.0
                    for j in range(q):
                        acc += HA[k, i, j] * (xatt[j] - xhat[k, j])
                    hd[k, i] = acc
        if need_P:
            ri = t - 1
            if ri > nR - 1:
                ri = nR - 1
            for k in range(N):
                for i in range(p):
                    for j in range(q):
                        acc = 0.0
                        for l in range(q):
                            acc += HA[k, i, l] * Rsched[ri, l, j]
                        HAR[i, j] = acc
                for i in range(p):
                    for j in range(p):
                        acc = Pbase[k, i, j]
                        for l in range(q):
                            acc += HAR[i, l] * HA[k, j, l]
                        P[k, i, j] = acc

        # attack parameters for this step
        if mode == MODE_SPSA:
            cc = c_sched[s]
            aa = a_sched[s]
            for k in range(N):
                for i in range(p):
                    for j in range(p):
                        if update_T:
                            Tp[k, i, j] = T[k, i, j] + cc * pert_T[s, k, i, j]
                            Tm[k, i, j] = T[k, i, j] - cc * pert_T[s, k, i, j]
                        else:
                            Tp[k, i, j] = T[k, i, j]
                            Tm[k, i, j] = T[k, i, j]
                    for j in range(q):
                        Mp[k, i, j] = M[k, i, j] + cc * pert_M[s, k, i, j]
                        Mm[k, i, j] = M[k, i, j] - cc * pert_M[s, k, i, j]
                    dp[k, i] = d[k, i] + cc * pert_d[s, k, i]
                    dmn[k, i] = d[k, i] - cc * pert_d[s, k, i]
            kp = 0.0
            km = 0.0
            for k in range(N):
                if attacked[k]:
                    kp += node_objective(k, q, p, Tp, Mp, dp, theta, hd, r0, G, Sinv, GtG, P, lam, xi, mu, vtmp, TP)
                    km += node_objective(k, q, p, Tm, Mm, dmn, theta, hd, r0, G, Sinv, GtG, P, lam, xi, mu, vtmp, TP)
            gdiff = (kp - km) / (2.0 * cc)
            for k in range(N):
                if not attacked[k]:
                    continue
                for i in range(p):
                    if update_T:
                        for j in range(p):
                            T[k, i, j] = clamp(T[k, i, j] - aa * gdiff / pert_T[s, k, i, j], bound)
                    for j in range(q):
                        M[k, i, j] = clamp(M[k, i, j] - aa * gdiff / pert_M[s, k, i, j], bound)
                    d[k, i] = clamp(d[k, i] - aa * gdiff / pert_d[s, k, i], bound)

        for k in range(N):
            if mode == MODE_NONE or not attacked[k]:
                for i in range(p):
                    u[k, i] = 0.0
            elif mode == MODE_KKT:
                for i in range(p):
                    acc = 0.0
                    for j in range(q):
                        acc -= WiGt[k, i, j] * r0[k, j]
                    for j in range(p):
                        acc -= T[k, i, j] * hd[k, j]
                    u[k, i] = acc
            else:
                for i in range(p):
                    acc = d[k, i]
                    for j in range(q):
                        acc += M[k, i, j] * theta[k, j]
                    u[k, i] = acc

        if moments:
            total_dev = 0.0
            total_score = 0.0
            for k in range(N):
                for i in range(p):
                    acc = u[k, i]
                    if mode != MODE_NONE and attacked[k]:
                        for j in range(p):
                            acc += T[k, i, j] * hd[k, j]
                    else:
                        acc += hd[k, i]
                    mu[i] = acc
                # Z = T P T' + U'U
                for i in range(p):
                    for j in range(p):
                        acc = 0.0
                        if mode != MODE_NONE and attacked[k]:
                            for l in range(p):
                                acc += T[k, i, l] * P[k, l, j]
                        else:
                            acc = P[k, i, j]
                        TP[i, j] = acc
                acc2 = 0.0
                for i in range(p):
                    for j in range(p):
                        if mode != MODE_NONE and attacked[k]:
                            acc = 0.0
                            for l in range(p):
                                acc += TP[i, l] * T[k, j, l]
                            if mode == MODE_STATIC:
                                for l in range(p):
                                    acc += U[k, l, i] * U[k, l, j]
                        else:
                            acc = TP[i, j]
                        total_dev += GtG[k, i, j] * acc
                        acc2 += Sinv[k, i, j] * acc
                for i in range(q):
                    acc = r0[k, i]
                    for j in range(p):
                        acc += G[k, i, j] * mu[j]
                    total_dev += acc * acc
                for i in range(p):
                    acc = 0.0
                    for j in range(p):
                        acc += Sinv[k, i, j] * mu[j]
                    acc2 += mu[i] * acc
                total_score += acc2
            exp_theta[s] = total_dev
            exp_zq[s] = total_score

        # plant and sensors
        for i in range(q):
            acc = 0.0
            for j in range(q):
                acc += A[i, j] * x[j] + Lq[i, j] * wn[s, j]
            xnew[i] = acc
        for i in range(q):
            x[i] = xnew[i]
        for k in range(N):
            for i in range(p):
                acc = 0.0
                for j in range(q):
                    acc += H[k, i, j] * x[j]
                for j in range(p):
                    acc += Lr[k, i, j] * vn[s, k, j]
                y[k, i] = acc
                acc = y[k, i]
                for j in range(q):
                    acc -= H[k, i, j] * xbar[k, j]
                z[k, i] = acc
            if mode == MODE_NONE or not attacked[k]:
                for i in range(p):
                    ztil[k, i] = z[k, i]
            else:
                for i in range(p):
                    acc = u[k, i]
                    for j in range(p):
                        acc += T[k, i, j] * z[k, j]
                    if mode == MODE_STATIC:
                        for j in range(p):
                            acc += U[k, j, i] * bn[s, k, j]
                    ztil[k, i] = acc

        # attacker's filter on the true observations
        ti = t - 1
        if ti > nK - 1:
            ti = nK - 1
        for i in range(q):
            acc = 0.0
            for j in range(q):
                acc += A[i, j] * xatt[j]
            xattpred[i] = acc
        for k in range(N):
            for i in range(p):
                acc = y[k, i]
                for j in range(q):
                    acc -= H[k, i, j] * xattpred[j]
                innov[k * p + i] = acc
        for i in range(q):
            acc = xattpred[i]
            for j in range(N * p):
                acc += Ksched[ti, i, j] * innov[j]
            xatt[i] = acc

        # node estimates
        total_dev = 0.0
        for k in range(N):
            for i in range(q):
                acc = xbar[k, i]
                for j in range(p):
                    acc += G[k, i, j] * ztil[k, j]
                for j in range(q):
                    acc += C[k, i, j] * cons[k, j]
                xhat[k, i] = acc
                if not isfinite(acc) or fabs(acc) > diverge_at:
                    diverged = 1
                total_dev += (acc - xs[i]) * (acc - xs[i])
        dev[s] = total_dev

        # chi-square detector
        any_alarm = 0
        total_score = 0.0
        for k in range(N):
            acc2 = 0.0
            for i in range(p):
                acc = 0.0
                for j in range(p):
                    acc += Sinv[k, i, j] * ztil[k, j]
                acc2 += ztil[k, i] * acc
            scores[s, k] = acc2
            total_score += acc2
            ring[k, pos] = acc2
        pos += 1
        if pos == J:
            pos = 0
        if count < J:
            count += 1
        for k in range(N):
            win = 0.0
            for i in range(J):
                win += ring[k, i]
            if record:
                window_out[s, k] = win
                alarm_out[s, k] = win >= eta
            if win >= eta:
                any_alarm = 1
        It[s] = any_alarm
        score_sum[s] = total_score

        if record:
            for i in range(q):
                x_out[s, i] = x[i]
            for k in range(N):
                for i in range(q):
                    xhat_out[s, k, i] = xhat[k, i]
                for i in range(p):
                    z_out[s, k, i] = z[k, i]
                    ztil_out[s, k, i] = ztil[k, i]
        if diverged:
            meta[0] = t
            meta[1] = pos
            meta[2] = count
            return s + 1

    meta[0] = t0 + steps
    meta[1] = pos
    meta[2] = count
    return 0
