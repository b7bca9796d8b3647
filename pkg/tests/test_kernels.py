"""Kernel backends: numpy fallback vs compiled extension vs naive oracles.

The reference implementations in this file are deliberately naive
per-consumer loops, written independently of the vectorized fallback and the
compiled kernel, so the three routes check one another.
"""

import numpy as np
import pytest
from scipy.special import expit

from nne import _backend
from nne import _kernels_py as kpy

try:
    from nne import _kernels as kc

    HAS_COMPILED = True
except ImportError:
    kc = None
    HAS_COMPILED = False

BACKENDS = [kpy] + ([kc] if HAS_COMPILED else [])


def reference_walk(u0, u, z, valid):
    """Literal sequential Weitzman walk for one dataset, option by option."""
    n, J = u.shape
    searched = np.zeros((n, J), dtype=bool)
    order = np.zeros((n, J), dtype=np.int32)
    bought = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        opts = [j for j in range(J) if valid[i, j]]
        # descending reservation utility; ties by column (= rank) order
        opts.sort(key=lambda j: (-z[i, j], j))
        best = u0[i]
        best_j = -1  # outside
        for t, j in enumerate(opts):
            if t > 0 and best >= z[i, j]:
                break
            searched[i, j] = True
            order[i, j] = t + 1
            if u[i, j] > best:
                best = u[i, j]
                best_j = j
        if best_j >= 0 and best > u0[i]:
            bought[i] = best_j
    return searched, order, bought


def random_walk_inputs(seed, n=200, J=7, ragged=False):
    gen = np.random.default_rng(seed)
    u0 = gen.normal(size=n)
    u = gen.normal(size=(n, J))
    z = gen.normal(scale=2.0, size=(n, J))
    valid = np.ones((n, J), dtype=bool)
    if ragged:
        counts = gen.integers(2, J + 1, size=n)
        valid = np.arange(J)[None, :] < counts[:, None]
    return u0, u, z, valid


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("ragged", [False, True])
def test_search_walk_matches_reference(backend, ragged):
    for seed in range(8):
        u0, u, z, valid = random_walk_inputs(seed, ragged=ragged)
        searched, order, bought, nsearch = backend.search_walk(u0, u, z, valid)
        ref_searched, ref_order, ref_bought = reference_walk(u0, u, z, valid)
        np.testing.assert_array_equal(searched, ref_searched)
        np.testing.assert_array_equal(order, ref_order)
        np.testing.assert_array_equal(bought, ref_bought)
        np.testing.assert_array_equal(nsearch, ref_searched.sum(axis=1))


@pytest.mark.skipif(not HAS_COMPILED, reason="compiled kernels not built")
def test_search_walk_backends_identical():
    for seed in range(5):
        u0, u, z, valid = random_walk_inputs(seed, n=500, J=12, ragged=True)
        outs_py = kpy.search_walk(u0, u, z, valid)
        outs_c = kc.search_walk(u0, u, z, valid)
        for a, b in zip(outs_py, outs_c):
            np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


@pytest.mark.parametrize("backend", BACKENDS)
def test_search_walk_ties_break_by_rank(backend):
    # two options with identical reservation utility: lower column wins
    u0 = np.array([-10.0])
    u = np.array([[0.5, 2.0, -3.0]])
    z = np.array([[1.0, 1.0, -5.0]])
    valid = np.ones((1, 3), dtype=bool)
    searched, order, bought, _ = backend.search_walk(u0, u, z, valid)
    assert order[0, 0] == 1 and order[0, 1] == 2
    assert bought[0] == 1


def test_ar1_panel_matches_recursion():
    gen = np.random.default_rng(0)
    betas = gen.uniform(0.0, 0.9, size=40)
    eps = gen.normal(size=(40, 30))
    for backend in BACKENDS:
        y = np.asarray(backend.ar1_panel(betas, eps))
        for ell in range(40):
            b = betas[ell]
            yi = eps[ell, 0] / np.sqrt(1.0 - b * b)
            np.testing.assert_allclose(y[ell, 0], yi, rtol=1e-12)
            for i in range(1, 30):
                yi = b * yi + eps[ell, i]
                np.testing.assert_allclose(y[ell, i], yi, rtol=1e-12)


@pytest.mark.skipif(not HAS_COMPILED, reason="compiled kernels not built")
def test_ar1_panel_backends_identical():
    gen = np.random.default_rng(3)
    betas = gen.uniform(0.0, 0.9, size=100)
    eps = gen.normal(size=(100, 50))
    np.testing.assert_array_equal(
        np.asarray(kpy.ar1_panel(betas, eps)), np.asarray(kc.ar1_panel(betas, eps))
    )


def reference_scores(lam, eta, v_ord, z_ord, ksearch, z_un, bought_pos, eps0, eps_s):
    """Triple-loop smoothed inequality scorer: consumers x draws x terms.

    ``z_un[i]`` holds the reservation utilities of consumer i's unsearched
    options, padded with -inf; their maximum is compared against the last
    search's reservation utility (ordering tail) and against the chosen
    alternative's utility (stopping).
    """
    n, R = eps0.shape
    out = np.zeros(n)
    for i in range(n):
        k = ksearch[i]
        z = z_ord[i, :k]
        v = v_ord[i, :k]
        zu = [x for x in z_un[i] if np.isfinite(x)]
        factors_a = 1.0
        for t in range(k - 1):
            factors_a *= expit(lam * (z[t] - z[t + 1]))
        if zu:
            factors_a *= expit(lam * (z[k - 1] - max(zu)))
        total = 0.0
        for r in range(R):
            u_out = eta + eps0[i, r]
            u = v + eps_s[i, r, :k]
            score = factors_a
            best = u_out
            for t in range(1, k):
                best = max(best, u[t - 1])
                score *= expit(lam * (z[t] - best))
            b = bought_pos[i]
            if b >= 0:
                rest = u_out
                for t in range(k):
                    if t != b:
                        rest = max(rest, u[t])
                score *= expit(lam * (u[b] - rest))
                u_chosen = u[b]
            else:
                score *= expit(lam * (u_out - u.max()))
                u_chosen = u_out
            for x in zu:
                score *= expit(lam * (u_chosen - x))
            total += score
        out[i] = total / R
    return out


def random_score_inputs(seed, n=60, R=9, kmax=4, umax=5):
    gen = np.random.default_rng(seed)
    ksearch = gen.integers(1, kmax + 1, size=n).astype(np.int64)
    v_ord = gen.normal(size=(n, kmax))
    z_ord = -np.sort(-gen.normal(scale=2.0, size=(n, kmax)), axis=1)
    z_un = np.where(
        gen.uniform(size=(n, umax)) < 0.6,
        gen.normal(scale=2.0, size=(n, umax)),
        -np.inf,
    )
    bought_pos = np.where(
        gen.uniform(size=n) < 0.6, gen.integers(0, kmax, size=n) % ksearch, -1
    ).astype(np.int64)
    eps0 = gen.normal(size=(n, R))
    eps_s = gen.normal(size=(n, R, kmax))
    eta = 0.7
    return eta, v_ord, z_ord, ksearch, z_un, bought_pos, eps0, eps_s


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("lam", [0.5, 3.0, 12.0])
def test_smoothed_scores_match_reference(backend, lam):
    for seed in range(4):
        args = random_score_inputs(seed)
        got = np.asarray(backend.smoothed_scores(lam, *args))
        want = reference_scores(lam, *args)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-300)


@pytest.mark.skipif(not HAS_COMPILED, reason="compiled kernels not built")
def test_smoothed_scores_backends_close():
    args = random_score_inputs(11, n=300, R=25, kmax=6)
    a = np.asarray(kpy.smoothed_scores(7.0, *args))
    b = np.asarray(kc.smoothed_scores(7.0, *args))
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_backend_module_selection():
    kern = _backend.kernels()
    assert hasattr(kern, "search_walk")
    assert _backend.backend_name() in {"compiled", "python"}
    if HAS_COMPILED:
        assert _backend.backend_name() == "compiled"
