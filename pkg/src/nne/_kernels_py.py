"""Pure-numpy kernel implementations (fallback backend).

Same call signatures as the compiled extension ``nne._kernels``. The search
walk exploits the fact that the stopping rule is absorbing once options are
sorted by reservation utility: the achieved-utility running maximum is
nondecreasing while the reservation sequence is nonincreasing, so the set of
searched options is a prefix and cumulative maxima replace the sequential
walk. Integer and boolean outputs are exactly equal across backends.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def ar1_panel(betas: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Batch AR(1) recursion; eps[:, 0] is the stationary initial draw."""
    betas = np.asarray(betas, dtype=float)
    eps = np.asarray(eps, dtype=float)
    y = np.empty_like(eps)
    y[:, 0] = eps[:, 0] / np.sqrt(1.0 - betas * betas)
    for i in range(1, eps.shape[1]):
        y[:, i] = betas * y[:, i - 1] + eps[:, i]
    return y


def search_walk(u0, u, z, valid):
    """Simulate the optimal search-and-purchase walk for one dataset.

    Parameters
    ----------
    u0 : (n,) utilities of the outside option (known without search).
    u : (n, J) realized option utilities.
    z : (n, J) reservation utilities.
    valid : (n, J) bool mask of existing options (columns in rank order).

    Returns
    -------
    searched : (n, J) bool
    order : (n, J) int32, 1-based search position, 0 if unsearched
    bought : (n,) int64 column index of the purchase, -1 for outside
    n_search : (n,) int64
    """
    u0 = np.asarray(u0, dtype=float)
    u = np.asarray(u, dtype=float)
    z = np.asarray(z, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    n, J = u.shape

    zkey = np.where(valid, z, -np.inf)
    ukey = np.where(valid, u, -np.inf)
    # stable sort on descending z; ties fall back to column (= rank) order
    ordidx = np.argsort(-zkey, axis=1, kind="stable")
    zsort = np.take_along_axis(zkey, ordidx, axis=1)
    usort = np.take_along_axis(ukey, ordidx, axis=1)

    # prev_max[:, t] = max(u0, usort[:, :t]); continuation needs prev_max < z
    prev_max = np.maximum.accumulate(
        np.concatenate([u0[:, None], usort[:, :-1]], axis=1), axis=1
    )
    cont = prev_max < zsort
    searched_sorted = np.concatenate(
        [np.ones((n, 1), dtype=bool), np.logical_and.accumulate(cont[:, 1:], axis=1)],
        axis=1,
    )
    searched_sorted &= np.take_along_axis(valid, ordidx, axis=1)

    positions = np.where(searched_sorted, np.arange(1, J + 1)[None, :], 0)
    searched = np.zeros((n, J), dtype=bool)
    order = np.zeros((n, J), dtype=np.int32)
    np.put_along_axis(searched, ordidx, searched_sorted, axis=1)
    np.put_along_axis(order, ordidx, positions.astype(np.int32), axis=1)

    u_cand = np.where(searched_sorted, usort, -np.inf)
    best_pos = np.argmax(u_cand, axis=1)  # first max wins, matching the scan
    best_u = u_cand[np.arange(n), best_pos]
    best_col = np.take_along_axis(ordidx, best_pos[:, None], axis=1)[:, 0]
    bought = np.where(best_u > u0, best_col, -1).astype(np.int64)
    n_search = searched_sorted.sum(axis=1).astype(np.int64)
    return searched, order, bought, n_search


def smoothed_scores(lam, eta, v_ord, z_ord, ksearch, z_un, bought_pos, eps0, eps_s):
    """Per-consumer mean-over-draws product of logistic inequality factors.

    Inputs are aligned to the observed search order: ``v_ord[i, t]`` and
    ``z_ord[i, t]`` describe consumer i's t-th searched option, valid for
    ``t < ksearch[i]``. ``z_un[i]`` holds the reservation utilities of the
    options consumer i left unsearched, padded with -inf; their maximum is
    compared against the last search's reservation utility (ordering tail),
    and each of them is compared against the chosen alternative's utility
    (stopping; the purchase factor makes the chosen alternative the achieved
    max, so the joint event matches the sequential-search walk exactly).
    ``bought_pos`` is
    the purchase's position in the search order (-1 for the outside
    option). ``eps0`` is (n, R), ``eps_s`` is (n, R, Kmax).
    """
    v_ord = np.asarray(v_ord, dtype=float)
    z_ord = np.asarray(z_ord, dtype=float)
    ksearch = np.asarray(ksearch)
    z_un = np.asarray(z_un, dtype=float)
    bought_pos = np.asarray(bought_pos)
    eps0 = np.asarray(eps0, dtype=float)
    eps_s = np.asarray(eps_s, dtype=float)
    n, R = eps0.shape
    out = np.empty(n, dtype=float)

    for k in np.unique(ksearch):
        rows = np.nonzero(ksearch == k)[0]
        z = z_ord[rows, :k]
        v = v_ord[rows, :k]
        u = v[:, None, :] + eps_s[rows, :, :k]  # (g, R, k)
        u_out = eta + eps0[rows]  # (g, R)
        zu = z_un[rows]  # (g, U)
        unseen = np.isfinite(zu)
        zu_safe = np.where(unseen, zu, 0.0)
        has_un = unseen.any(axis=1)
        zmax = np.where(unseen, zu_safe, -np.inf).max(axis=1, initial=-np.inf)

        # (a) ordering factors carry no draws; the tail compares the last
        # search against the best unsearched reservation utility
        prod_a = expit(lam * (z[:, :-1] - z[:, 1:])).prod(axis=1)
        tail = np.where(has_un, expit(lam * (z[:, -1] - np.where(has_un, zmax, 0.0))), 1.0)
        prod_a *= tail

        # running max of achieved utility before each paid search
        prev = np.maximum.accumulate(
            np.concatenate([u_out[:, :, None], u[:, :, :-1]], axis=2), axis=2
        )
        score = prod_a[:, None] * expit(lam * (z[:, None, 1:] - prev[:, :, 1:])).prod(axis=2)

        # purchase, and stopping anchored at the chosen alternative's utility
        # (the purchase factor makes the chosen alternative the achieved max,
        # so the joint event is unchanged)
        u_chosen = u_out.copy()
        bp = bought_pos[rows]
        buyers = np.nonzero(bp >= 0)[0]
        if buyers.size:
            u_sel = u[buyers]  # (b, R, k)
            u_b = np.take_along_axis(u_sel, bp[buyers][:, None, None], axis=2)[:, :, 0]
            u_rest = u_sel.copy()
            u_rest[np.arange(buyers.size), :, bp[buyers]] = -np.inf
            rest = np.maximum(u_out[buyers], u_rest.max(axis=2))
            score[buyers] *= expit(lam * (u_b - rest))
            u_chosen[buyers] = u_b
        outside = np.nonzero(bp < 0)[0]
        if outside.size:
            score[outside] *= expit(lam * (u_out[outside] - u[outside].max(axis=2)))

        slack_c = u_chosen[:, :, None] - zu_safe[:, None, :]
        score *= np.where(unseen[:, None, :], expit(lam * slack_c), 1.0).prod(axis=2)

        out[rows] = score.mean(axis=1)
    return out
