"""Competing estimators used as benchmarks.

Four families: two-step GMM and its simulated-moment variant for the AR(1)
process, smoothed simulated maximum likelihood for the sequential-search
model, indirect inference with an MA(1) auxiliary model, and an L1-penalized
polynomial regression that maps moments to parameters.

All simulation-based estimators hold their random draws fixed while the
structural parameter varies (common random numbers), so each estimate is a
deterministic function of (data, spec, seed).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize, signal

from ._backend import kernels
from .ar1 import AR1_MOMENT_SPECS, ar1_from_shocks, ar1_moments, ar1_population_moments
from .core import RngStream, as_generator
from .net import _as_arrays as _examples_as_arrays
from .search import (
    SEARCH_SPACE,
    ConsumerGrid,
    SearchArrays,
    SearchParams,
    _as_arrays as _search_as_arrays,
    mean_utilities,
    reservation_values,
)

BETA_CAP = 0.999

LIKELIHOOD_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# GMM / SMM for the AR(1)


@dataclass(frozen=True)
class GmmSpec:
    """Moment specification and weighting choice for gmm_ar1 / smm_ar1.

    ``R=None`` means exact population moments (the GMM case); smm_ar1 takes
    its draw count as an explicit argument instead.
    """

    spec_id: int
    weighting: str = "two_step_hac"
    R: Optional[int] = None

    def __post_init__(self):
        if self.spec_id not in AR1_MOMENT_SPECS:
            raise ValueError(f"unknown moment spec id {self.spec_id!r}")
        if self.weighting not in ("identity", "two_step_hac"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.R is not None and self.R < 1:
            raise ValueError("R must be at least 1 when given")


def beta_from_lag1_moment(m: float) -> float:
    """Invert beta/(1-beta^2) = m on [0, BETA_CAP]; negative m clips to 0."""
    m = float(m)
    if m <= 0.0:
        return 0.0
    beta = (-1.0 + math.sqrt(1.0 + 4.0 * m * m)) / (2.0 * m)
    return min(beta, BETA_CAP)


def moment_contributions(series: np.ndarray, spec_id: int) -> np.ndarray:
    """Per-observation moment products, aligned on the common valid range.

    Rows are observations i = maxlag..n-1 so every column has the same
    length; used only to build the HAC weighting matrix.
    """
    y = np.asarray(series, dtype=float)
    entries = AR1_MOMENT_SPECS[spec_id]
    maxlag = max(lag for _, lag in entries)
    n = len(y)
    if n <= maxlag:
        raise ValueError(f"series of length {n} too short for lag {maxlag}")
    cols = []
    for kind, lag in entries:
        a = y[maxlag:]
        b = y[maxlag - lag : n - lag]
        if kind == "yy":
            cols.append(a * b)
        elif kind == "y2y":
            cols.append(a * a * b)
        else:
            cols.append(a * b * b)
    return np.column_stack(cols)


def newey_west(contributions: np.ndarray, lags: int) -> np.ndarray:
    """Long-run covariance with Bartlett weights; PSD by construction."""
    h = np.asarray(contributions, dtype=float)
    h = h - h.mean(axis=0)
    t = len(h)
    s = h.T @ h / t
    for lag in range(1, min(lags, t - 1) + 1):
        gamma = h[lag:].T @ h[:-lag] / t
        s += (1.0 - lag / (lags + 1.0)) * (gamma + gamma.T)
    return s


def _weight_matrix(series: np.ndarray, spec: GmmSpec) -> np.ndarray:
    q = len(AR1_MOMENT_SPECS[spec.spec_id])
    if spec.weighting == "identity":
        return np.eye(q)
    maxlag = max(lag for _, lag in AR1_MOMENT_SPECS[spec.spec_id])
    s = newey_west(moment_contributions(series, spec.spec_id), lags=maxlag + 2)
    return np.linalg.pinv(s, hermitian=True)


def _minimize_beta(objective) -> float:
    res = optimize.minimize_scalar(
        objective, bounds=(0.0, BETA_CAP), method="bounded", options={"xatol": 1e-10}
    )
    if not res.success:
        warnings.warn("beta search did not converge; returning last iterate")
    return float(res.x)


def gmm_ar1(series: np.ndarray, spec: GmmSpec) -> float:
    """Method-of-moments estimate of the AR(1) coefficient.

    A single moment is inverted in closed form; otherwise the quadratic form
    in (population moments - sample moments) is minimized under the spec's
    weighting.
    """
    if spec.R is not None:
        raise ValueError("spec has finite R; use smm_ar1 for simulated moments")
    y = np.asarray(series, dtype=float)
    m = ar1_moments(y, spec.spec_id)
    if len(m) == 1:
        return beta_from_lag1_moment(m[0])
    w = _weight_matrix(y, spec)

    def objective(beta):
        d = ar1_population_moments(beta, spec.spec_id) - m
        return d @ w @ d

    return _minimize_beta(objective)


def _panel_spec_moments(panel: np.ndarray, spec_id: int) -> np.ndarray:
    """Mean over panel rows of each spec moment."""
    n = panel.shape[1]
    out = []
    for kind, lag in AR1_MOMENT_SPECS[spec_id]:
        a = panel[:, lag:]
        b = panel[:, : n - lag]
        if kind == "yy":
            prod = a * b
        elif kind == "y2y":
            prod = a * a * b
        else:
            prod = a * b * b
        out.append(prod.mean())
    return np.array(out)


def smm_simulated_moments(
    beta: float, spec_id: int, n: int, R: int, rng: Union[RngStream, np.random.Generator]
) -> np.ndarray:
    """R-path average of the spec moments at one beta (fresh shocks)."""
    shocks = as_generator(rng).standard_normal((R, n))
    return _panel_spec_moments(ar1_from_shocks(np.full(R, float(beta)), shocks), spec_id)


def smm_ar1(
    series: np.ndarray,
    spec: GmmSpec,
    R: int,
    rng: Union[RngStream, np.random.Generator],
) -> float:
    """Simulated-moment estimate: shocks drawn once, held fixed across beta."""
    if R < 1:
        raise ValueError("R must be at least 1")
    y = np.asarray(series, dtype=float)
    n = len(y)
    m = ar1_moments(y, spec.spec_id)
    w = _weight_matrix(y, spec) if len(m) > 1 else np.eye(1)
    shocks = as_generator(rng).standard_normal((R, n))

    def objective(beta):
        g = _panel_spec_moments(ar1_from_shocks(np.full(R, beta), shocks), spec.spec_id)
        d = g - m
        return d @ w @ d

    return _minimize_beta(objective)


# ---------------------------------------------------------------------------
# Indirect inference with an MA(1) auxiliary model


def ma1_ls_residuals(y: np.ndarray, alpha: float) -> np.ndarray:
    """Recursive MA(1) residuals eps_i = y_i - alpha * eps_{i-1}, eps_0 = 0."""
    return signal.lfilter([1.0], [1.0, float(alpha)], np.asarray(y, dtype=float), axis=-1)


def ma1_ls_sse(y: np.ndarray, alpha: float) -> float:
    eps = ma1_ls_residuals(y, alpha)
    return float((eps * eps).sum())


def ma1_ls_alpha(y: np.ndarray, xatol: float = 1e-8) -> float:
    """Least-squares MA(1) coefficient; a 2-d input is fit pooled."""
    y = np.asarray(y, dtype=float)
    res = optimize.minimize_scalar(
        lambda a: ma1_ls_sse(y, a),
        bounds=(-BETA_CAP, BETA_CAP),
        method="bounded",
        options={"xatol": xatol},
    )
    return float(res.x)


def indirect_inference_ar1(
    series: np.ndarray,
    aux: str,
    R: int,
    rng: Union[RngStream, np.random.Generator],
) -> float:
    """Match an MA(1) auxiliary statistic between real and simulated data.

    ``ma1_ac`` uses the lag-1 autocovariance statistic, which is the
    single-moment SMM objective, so that route delegates outright. ``ma1_ls``
    fits the recursive least-squares MA(1) coefficient on the data and,
    pooled, on R simulated paths of the same length.
    """
    if aux == "ma1_ac":
        return smm_ar1(series, GmmSpec(1, weighting="identity"), R, rng)
    if aux != "ma1_ls":
        raise ValueError(f"unknown auxiliary model {aux!r}")
    if R < 1:
        raise ValueError("R must be at least 1")
    y = np.asarray(series, dtype=float)
    stat_data = ma1_ls_alpha(y)
    shocks = as_generator(rng).standard_normal((R, len(y)))

    def objective(beta):
        panel = ar1_from_shocks(np.full(R, beta), shocks)
        return (ma1_ls_alpha(panel) - stat_data) ** 2

    return _minimize_beta(objective)


# ---------------------------------------------------------------------------
# Smoothed simulated likelihood for the search model


def _canonical_order(grid: ConsumerGrid, arrays) -> np.ndarray:
    """Permutation sorting consumers by their data content.

    Lexicographic over covariates, then the outcome encoding, so the order
    (and hence any per-consumer draw assignment keyed to it) does not depend
    on how the rows happen to be arranged. Consumers with identical rows are
    exchangeable, so ties cannot affect anything keyed to this order.
    """
    n = grid.n
    cols = [
        grid.stars,
        grid.review,
        grid.location,
        grid.chain,
        grid.promotion,
        grid.log_price,
        grid.rank,
        grid.valid,
        arrays.searched,
        arrays.order,
        arrays.bought[:, None],
    ]
    mat = np.column_stack(
        [np.asarray(c, dtype=float).reshape(n, -1) for c in cols]
    )
    return np.lexsort(mat.T[::-1])


def draw_likelihood_epsilons(
    grid: ConsumerGrid,
    outcomes,
    R: int,
    rng: Union[RngStream, np.random.Generator],
    kmax: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """R independent likelihood draws per consumer, keyed to data content.

    Returns ``(eps0, eps)`` of shapes (n, R) and (n, R, kmax): outside-option
    and per-search utility shocks. Draws are generated along the canonical
    data order, so reordering consumers reassigns each one the same draws —
    the likelihood stays exactly order-invariant — while distinct consumers
    still get independent draws.
    """
    arrays = _search_as_arrays(outcomes, grid)
    if kmax is None:
        kmax = int(arrays.n_search.max())
    n = grid.n
    order = _canonical_order(grid, arrays)
    gen = as_generator(rng)
    eps0 = np.empty((n, R))
    eps0[order] = gen.standard_normal((n, R))
    eps_s = np.empty((n, R, kmax))
    eps_s[order] = gen.standard_normal((n, R, kmax))
    return eps0, eps_s


def smoothed_loglik(
    theta,
    grid: ConsumerGrid,
    outcomes,
    lam: float,
    R: int,
    rng: Union[RngStream, np.random.Generator, None] = None,
    draws: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> float:
    """Smoothed log-likelihood of observed search-and-purchase outcomes.

    Each draw scores the product of logistic(lam * slack) over the
    optimality inequalities implied by the outcome; the per-consumer
    likelihood is the draw average floored at 1e-12. A consumer with k
    searches and u unsearched options contributes 2k - 1 factors when
    u = 0 (k - 1 consecutive-search ordering, k - 1 continuation,
    1 purchase) and 2k + u otherwise (adding one ordering-tail factor
    against the best unsearched reservation utility and one stopping
    factor per unsearched option). Each consumer gets R independent draws,
    assigned by a canonical sort of the data so the value is exactly
    invariant to consumer order; a fixed seed gives common random numbers
    across theta. (Sharing one draw set across consumers looks cheaper but
    leaves simulation error that never averages out across consumers, and
    a 9-parameter fit happily overfits 50 shared draws.) ``draws`` accepts
    pre-drawn ``(eps0, eps)`` of shapes (n, R) and (n, R, >= max searches)
    aligned to the rows as given — used inside an optimizer to hold draws
    fixed — or legacy shared shapes (R,) and (R, >= max searches).
    """
    params = theta if isinstance(theta, SearchParams) else SearchParams.from_vector(theta)
    lam = float(lam)
    if lam < 0.0:
        raise ValueError("lam must be nonnegative")
    if (
        not isinstance(outcomes, SearchArrays)
        and isinstance(outcomes, (list, tuple))
        and any(not o.order_observed for o in outcomes)
    ):
        raise ValueError(
            "the smoothed likelihood conditions on the realized search order; "
            "this data carries a reconstructed order"
        )
    R = int(R)
    if R < 1:
        raise ValueError("R must be at least 1")

    arrays = _search_as_arrays(outcomes, grid)
    k = arrays.n_search.astype(np.int64)
    if k.min() < 1:
        raise ValueError("every consumer must have searched at least once")
    n = grid.n
    kmax = int(k.max())

    v = mean_utilities(params, grid)
    z = reservation_values(params, grid)

    # columns rearranged into observed search order; entries past k unused
    ordkey = np.where(arrays.searched, arrays.order, np.iinfo(np.int32).max)
    idx = np.argsort(ordkey, axis=1, kind="stable")[:, :kmax]
    v_ord = np.take_along_axis(v, idx, axis=1)
    z_ord = np.take_along_axis(z, idx, axis=1)

    unsearched = grid.valid & ~arrays.searched
    z_un = np.where(unsearched, z, -np.inf)

    b = arrays.bought
    pos_of_bought = np.take_along_axis(arrays.order, np.maximum(b, 0)[:, None], axis=1)[:, 0]
    bought_pos = np.where(b >= 0, pos_of_bought.astype(np.int64) - 1, -1)

    if draws is None:
        if rng is None:
            raise ValueError("pass rng (or inject draws)")
        eps0, eps_s = draw_likelihood_epsilons(grid, arrays, R, rng, kmax=kmax)
    else:
        e0 = np.asarray(draws[0], dtype=float)
        es = np.asarray(draws[1], dtype=float)
        if e0.ndim == 1:
            if e0.shape != (R,) or es.ndim != 2 or es.shape[0] != R or es.shape[1] < kmax:
                raise ValueError("injected draws have the wrong shape")
            eps0 = np.empty((n, R))
            eps0[:] = e0
            eps_s = np.empty((n, R, kmax))
            eps_s[:] = es[:, :kmax]
        else:
            if (
                e0.shape != (n, R)
                or es.ndim != 3
                or es.shape[:2] != (n, R)
                or es.shape[2] < kmax
            ):
                raise ValueError("injected draws have the wrong shape")
            eps0 = np.ascontiguousarray(e0)
            eps_s = np.ascontiguousarray(es[:, :, :kmax])
    scores = kernels().smoothed_scores(
        lam, params.eta, v_ord, z_ord, k, z_un, bought_pos, eps0, eps_s
    )
    return math.fsum(np.log(np.maximum(scores, LIKELIHOOD_FLOOR)))


@dataclass(frozen=True)
class SmleSpec:
    """Smoothing factor, draw count, optimizer start, and evaluation budget."""

    lam: float
    R: int
    start: Optional[Tuple[float, ...]] = None
    budget: int = 500

    def __post_init__(self):
        if not self.lam > 0.0:
            raise ValueError("lam must be positive")
        if self.R < 1:
            raise ValueError("R must be at least 1")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if self.start is not None:
            start = tuple(float(x) for x in self.start)
            if len(start) != SEARCH_SPACE.dim:
                raise ValueError(
                    f"start must have {SEARCH_SPACE.dim} entries, got {len(start)}"
                )
            object.__setattr__(self, "start", start)

    def start_vector(self) -> np.ndarray:
        if self.start is None:
            return SEARCH_SPACE.center()
        return np.array(self.start, dtype=float)


@dataclass
class SmleResult:
    theta: np.ndarray
    se: np.ndarray
    loglik: float
    n_evals: int
    sim_burden: int
    converged: bool
    hessian_adjusted: bool
    lam: float
    R: int
    names: Tuple[str, ...] = SEARCH_SPACE.names

    def params(self) -> SearchParams:
        return SearchParams.from_vector(self.theta)


def _numerical_hessian(f, x: np.ndarray, rel_step: float = 1e-3) -> np.ndarray:
    p = len(x)
    h = rel_step * np.maximum(1.0, np.abs(x))
    hess = np.empty((p, p))
    f0 = f(x)
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        hess[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / (h[i] * h[i])
        for j in range(i + 1, p):
            ej = np.zeros(p)
            ej[j] = h[j]
            cross = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
            hess[i, j] = cross
            hess[j, i] = cross
    return hess


def smle_search(
    grid: ConsumerGrid,
    outcomes,
    spec: SmleSpec,
    rng: Union[RngStream, np.random.Generator],
) -> SmleResult:
    """Maximize the smoothed log-likelihood by Nelder-Mead simplex.

    Draws are taken once up front and shared across every objective
    evaluation, so the optimizer sees a deterministic surface. The search
    starts from the center of the parameter-space box and uses the classic
    simplex-method defaults (each vertex steps one coordinate by 5% of its
    starting value, or by 2.5e-4 when it starts at zero), restricted to the
    box. Deliberately local: the smoothed likelihood rewards inflating the
    systematic-utility scale at any finite smoothing, so a globally
    exploring search drifts to a degenerate high-likelihood region at the
    edge of the box, while the capped local search settles in the basin
    around the starting point. Standard errors come from the inverse
    numerical Hessian at the optimum; when that Hessian is not positive
    definite (rough optimum, budget exhausted) its eigenvalues are floored
    and the result is flagged. The burden counter includes the Hessian
    evaluations.
    """
    arrays = _search_as_arrays(outcomes, grid)
    kmax = int(arrays.n_search.max())
    e0, es = draw_likelihood_epsilons(grid, arrays, spec.R, rng, kmax=kmax)

    n_evals = 0

    def negative_loglik(vec):
        nonlocal n_evals
        n_evals += 1
        return -smoothed_loglik(vec, grid, arrays, spec.lam, spec.R, draws=(e0, es))

    start = spec.start_vector()
    step = np.where(start != 0.0, 0.05 * start, 0.00025)
    simplex = np.vstack([start, start + np.diag(step)])
    res = optimize.minimize(
        negative_loglik,
        start,
        method="Nelder-Mead",
        bounds=optimize.Bounds(SEARCH_SPACE.lower, SEARCH_SPACE.upper),
        options={
            "maxfev": spec.budget,
            "xatol": 1e-4,
            "fatol": 1e-4,
            "initial_simplex": simplex,
        },
    )
    if not res.success:
        warnings.warn("simplex hit its evaluation budget before converging")

    hess = _numerical_hessian(negative_loglik, res.x)
    hess = (hess + hess.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(hess)
    adjusted = bool(eigvals.min() <= 0.0)
    floor = 1e-8 * max(1.0, float(np.abs(eigvals).max()))
    eigvals = np.maximum(eigvals, floor)
    cov = eigvecs @ np.diag(1.0 / eigvals) @ eigvecs.T

    return SmleResult(
        theta=res.x,
        se=np.sqrt(np.diag(cov)),
        loglik=-float(res.fun),
        n_evals=n_evals,
        sim_burden=spec.R * n_evals,
        converged=bool(res.success),
        hessian_adjusted=adjusted,
        lam=spec.lam,
        R=spec.R,
    )


# ---------------------------------------------------------------------------
# Lasso polynomial learner


def polynomial_powers(n_inputs: int, degree: int) -> np.ndarray:
    """Exponent rows of all monomials with total degree 1..degree."""
    if degree not in (1, 2, 3):
        raise ValueError("degree must be 1, 2, or 3")
    rows = []
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n_inputs), d):
            e = np.zeros(n_inputs, dtype=np.int64)
            for j in combo:
                e[j] += 1
            rows.append(e)
    return np.array(rows)


def polynomial_features(m: np.ndarray, powers: np.ndarray) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    out = np.empty((len(m), len(powers)))
    for f, e in enumerate(powers):
        out[:, f] = np.prod(m**e, axis=1)
    return out


def _soft_threshold(rho: float, lam: float) -> float:
    if rho > lam:
        return rho - lam
    if rho < -lam:
        return rho + lam
    return 0.0


@dataclass
class LassoPolyModel:
    degree: int
    powers: np.ndarray
    coef: np.ndarray  # (p, n_features), in standardized feature units
    intercept: np.ndarray  # (p,)
    feat_mean: np.ndarray
    feat_sd: np.ndarray
    best_reg: np.ndarray  # chosen penalty per output
    val_mse: np.ndarray  # (p, len(reg_grid)), columns in the given grid order
    train_idx: np.ndarray
    val_idx: np.ndarray

    def predict(self, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        squeeze = m.ndim == 1
        feats = polynomial_features(m, self.powers)
        x = (feats - self.feat_mean) / self.feat_sd
        pred = x @ self.coef.T + self.intercept
        return pred[0] if squeeze else pred


def _coordinate_descent(x, y, lam, w, max_sweeps=2000, tol=1e-11):
    """Lasso on standardized columns; w is modified in place (warm start)."""
    n = len(y)
    r = y - x @ w
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(len(w)):
            old = w[j]
            rho = old + x[:, j] @ r / n
            new = _soft_threshold(rho, lam)
            if new != old:
                r += x[:, j] * (old - new)
                w[j] = new
                delta = max(delta, abs(new - old))
        if delta <= tol * max(1.0, float(np.abs(w).max())):
            break
    return w


def lasso_poly_train(
    examples,
    degree: int,
    reg_grid: Sequence[float],
    rng: Union[RngStream, np.random.Generator, None] = None,
) -> LassoPolyModel:
    """Fit theta on polynomial moment features by L1-penalized least squares.

    Rows are shuffled by rng, the last tenth validates, and each output picks
    the penalty with the lowest validation MSE (ties go to the stronger
    penalty). Coordinate descent runs over the penalty grid in decreasing
    order with warm starts.
    """
    thetas, moments = _examples_as_arrays(examples)
    L, p = thetas.shape
    if L < 10:
        raise ValueError("need at least 10 examples")
    reg_values = np.asarray(list(reg_grid), dtype=float)
    if reg_values.ndim != 1 or len(reg_values) == 0 or np.any(reg_values < 0.0):
        raise ValueError("reg_grid must be a nonempty sequence of penalties >= 0")

    perm = np.arange(L) if rng is None else as_generator(rng).permutation(L)
    n_val = min(max(1, round(0.1 * L)), L - 1)
    train_idx = perm[: L - n_val]
    val_idx = perm[L - n_val :]

    powers = polynomial_powers(moments.shape[1], degree)
    feats = polynomial_features(moments, powers)
    mean = feats[train_idx].mean(axis=0)
    sd = feats[train_idx].std(axis=0)
    sd = np.maximum(sd, 1e-12)
    x_tr = (feats[train_idx] - mean) / sd
    x_val = (feats[val_idx] - mean) / sd

    order = np.argsort(-reg_values, kind="stable")
    n_feat = len(powers)
    coef = np.empty((p, n_feat))
    intercept = np.empty(p)
    best_reg = np.empty(p)
    val_mse = np.empty((p, len(reg_values)))

    for out in range(p):
        ybar = thetas[train_idx, out].mean()
        y_tr = thetas[train_idx, out] - ybar
        w = np.zeros(n_feat)
        path = {}
        for pos in order:
            w = _coordinate_descent(x_tr, y_tr, reg_values[pos], w)
            resid = thetas[val_idx, out] - (x_val @ w + ybar)
            val_mse[out, pos] = (resid**2).mean()
            path[pos] = w.copy()
        best_pos = order[int(np.argmin(val_mse[out, order]))]
        coef[out] = path[best_pos]
        intercept[out] = ybar
        best_reg[out] = reg_values[best_pos]

    return LassoPolyModel(
        degree=degree,
        powers=powers,
        coef=coef,
        intercept=intercept,
        feat_mean=mean,
        feat_sd=sd,
        best_reg=best_reg,
        val_mse=val_mse,
        train_idx=train_idx,
        val_idx=val_idx,
    )
