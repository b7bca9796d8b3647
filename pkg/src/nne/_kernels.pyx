# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: search walks, smoothed-likelihood scores, AR(1) panels.

Mirrors nne._kernels_py exactly; integer and boolean outputs are identical,
floating-point outputs agree to summation-order rounding.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, isfinite, sqrt

cnp.import_array()

cdef double NEG_INF = -np.inf


cdef inline double logistic(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def ar1_panel(cnp.ndarray betas_in, cnp.ndarray eps_in):
    """Batch AR(1) recursion; eps[:, 0] is the stationary initial draw."""
    cdef double[::1] betas = np.ascontiguousarray(betas_in, dtype=np.float64)
    cdef double[:, ::1] eps = np.ascontiguousarray(eps_in, dtype=np.float64)
    cdef Py_ssize_t L = eps.shape[0], n = eps.shape[1]
    y_arr = np.empty((L, n), dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef Py_ssize_t l, i
    cdef double b, prev
    with nogil:
        for l in range(L):
            b = betas[l]
            prev = eps[l, 0] / sqrt(1.0 - b * b)
            y[l, 0] = prev
            for i in range(1, n):
                prev = b * prev + eps[l, i]
                y[l, i] = prev
    return y_arr


def search_walk(cnp.ndarray u0_in, cnp.ndarray u_in, cnp.ndarray z_in, cnp.ndarray valid_in):
    """Sequential search-and-purchase walk; see nne._kernels_py.search_walk."""
    cdef double[::1] u0 = np.ascontiguousarray(u0_in, dtype=np.float64)
    cdef double[:, ::1] u = np.ascontiguousarray(u_in, dtype=np.float64)
    cdef double[:, ::1] z = np.ascontiguousarray(z_in, dtype=np.float64)
    cdef cnp.uint8_t[:, ::1] valid = np.ascontiguousarray(valid_in, dtype=np.uint8)
    cdef Py_ssize_t n = u.shape[0], J = u.shape[1]

    searched_arr = np.zeros((n, J), dtype=np.uint8)
    order_arr = np.zeros((n, J), dtype=np.int32)
    bought_arr = np.full(n, -1, dtype=np.int64)
    nsearch_arr = np.zeros(n, dtype=np.int64)
    idx_arr = np.empty(J, dtype=np.int64)

    cdef cnp.uint8_t[:, ::1] searched = searched_arr
    cdef cnp.int32_t[:, ::1] order = order_arr
    cdef cnp.int64_t[::1] bought = bought_arr
    cdef cnp.int64_t[::1] nsearch = nsearch_arr
    cdef cnp.int64_t[::1] idx = idx_arr

    cdef Py_ssize_t i, j, a, b, m, t, key
    cdef double zk, best
    cdef Py_ssize_t best_j
    cdef cnp.int64_t count

    with nogil:
        for i in range(n):
            m = 0
            for j in range(J):
                if valid[i, j]:
                    idx[m] = j
                    m += 1
            # stable insertion sort, descending z; ties keep rank order
            for a in range(1, m):
                key = idx[a]
                zk = z[i, key]
                b = a - 1
                while b >= 0 and z[i, idx[b]] < zk:
                    idx[b + 1] = idx[b]
                    b -= 1
                idx[b + 1] = key
            best = u0[i]
            best_j = -1
            count = 0
            for t in range(m):
                j = idx[t]
                if t > 0 and best >= z[i, j]:
                    break
                searched[i, j] = 1
                order[i, j] = <cnp.int32_t> (t + 1)
                count += 1
                if u[i, j] > best:
                    best = u[i, j]
                    best_j = j
            nsearch[i] = count
            if best_j >= 0:
                bought[i] = best_j
    return searched_arr.view(bool), order_arr, bought_arr, nsearch_arr


def smoothed_scores(double lam, double eta,
                    cnp.ndarray v_ord_in, cnp.ndarray z_ord_in,
                    cnp.ndarray ksearch_in, cnp.ndarray z_un_in,
                    cnp.ndarray bought_pos_in,
                    cnp.ndarray eps0_in, cnp.ndarray eps_s_in):
    """Mean-over-draws product of logistic inequality factors per consumer.

    ``z_un_in[i]`` lists consumer i's unsearched reservation utilities,
    padded with -inf; their maximum is compared against the last search's
    reservation utility (ordering tail), and each of them is compared
    against the chosen alternative's utility (stopping).
    """
    cdef double[:, ::1] v_ord = np.ascontiguousarray(v_ord_in, dtype=np.float64)
    cdef double[:, ::1] z_ord = np.ascontiguousarray(z_ord_in, dtype=np.float64)
    cdef cnp.int64_t[::1] ksearch = np.ascontiguousarray(ksearch_in, dtype=np.int64)
    cdef double[:, ::1] z_un = np.ascontiguousarray(z_un_in, dtype=np.float64)
    cdef cnp.int64_t[::1] bought_pos = np.ascontiguousarray(bought_pos_in, dtype=np.int64)
    cdef double[:, ::1] eps0 = np.ascontiguousarray(eps0_in, dtype=np.float64)
    cdef double[:, :, ::1] eps_s = np.ascontiguousarray(eps_s_in, dtype=np.float64)

    cdef Py_ssize_t n = eps0.shape[0], R = eps0.shape[1], U = z_un.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr

    cdef Py_ssize_t i, r, t, k, b, j
    cdef double prod_a, score, total, best, u_prev
    cdef double u_out, ub, rest, ut, mu, zun, zmax

    with nogil:
        for i in range(n):
            k = ksearch[i]
            prod_a = 1.0
            for t in range(k - 1):
                prod_a *= logistic(lam * (z_ord[i, t] - z_ord[i, t + 1]))
            zmax = NEG_INF
            for j in range(U):
                zun = z_un[i, j]
                if isfinite(zun) and zun > zmax:
                    zmax = zun
            if isfinite(zmax):
                prod_a *= logistic(lam * (z_ord[i, k - 1] - zmax))
            total = 0.0
            for r in range(R):
                u_out = eta + eps0[i, r]
                score = prod_a
                best = u_out
                for t in range(1, k):
                    u_prev = v_ord[i, t - 1] + eps_s[i, r, t - 1]
                    if u_prev > best:
                        best = u_prev
                    score *= logistic(lam * (z_ord[i, t] - best))
                b = bought_pos[i]
                if b >= 0:
                    ub = v_ord[i, b] + eps_s[i, r, b]
                    rest = u_out
                    for t in range(k):
                        if t != b:
                            ut = v_ord[i, t] + eps_s[i, r, t]
                            if ut > rest:
                                rest = ut
                    score *= logistic(lam * (ub - rest))
                else:
                    ub = u_out
                    mu = NEG_INF
                    for t in range(k):
                        ut = v_ord[i, t] + eps_s[i, r, t]
                        if ut > mu:
                            mu = ut
                    score *= logistic(lam * (u_out - mu))
                # stopping anchored at the chosen alternative's utility; the
                # purchase factor makes it the achieved max, so the joint
                # event is unchanged
                for j in range(U):
                    zun = z_un[i, j]
                    if isfinite(zun):
                        score *= logistic(lam * (ub - zun))
                total += score
            out[i] = total / R
    return out_arr
