"""Sequential consumer-search model.

Consumers see J ranked options with observed attributes, know the outside
option's utility from the start, and reveal one option's utility per search.
Search costs rise in rank through c = exp(delta0 + delta1 * log rank), the
first search is free, and consumers follow the reservation-utility policy:
search in decreasing reservation-utility order while the best utility in hand
is below the best remaining reservation utility, then buy the best searched
option if it beats the outside option.

Grids store options in rank order (column j holds rank j+1), which makes the
deterministic tie-break (higher reservation utility first, then lower rank,
then lower index) coincide with column order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

from ._backend import kernels
from .core import ParamSpace, RngStream, as_generator

SEARCH_SPACE = ParamSpace(
    names=(
        "beta_stars",
        "beta_review",
        "beta_location",
        "beta_chain",
        "beta_promotion",
        "beta_log_price",
        "eta",
        "delta0",
        "delta1",
    ),
    lower=[-0.5, -0.5, -0.5, -0.5, -0.5, -0.5, 2.0, -5.0, -0.25],
    upper=[0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 5.0, -2.0, 0.25],
)

_STAR_VALUES = np.array([2.0, 3.0, 4.0, 5.0])
_STAR_PROBS = np.array([0.05, 0.25, 0.40, 0.30])
_REVIEW_VALUES = np.array([3.0, 3.5, 4.0, 4.5, 5.0])
_REVIEW_PROBS = np.array([0.08, 0.17, 0.40, 0.30, 0.05])


@dataclass(frozen=True)
class SearchParams:
    beta: tuple
    eta: float
    delta0: float
    delta1: float

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta)
        if len(beta) != 6:
            raise ValueError(f"beta must have 6 entries, got {len(beta)}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "delta0", float(self.delta0))
        object.__setattr__(self, "delta1", float(self.delta1))
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("parameters must be finite")

    def to_vector(self) -> np.ndarray:
        return np.array([*self.beta, self.eta, self.delta0, self.delta1])

    @classmethod
    def from_vector(cls, vec) -> "SearchParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (9,):
            raise ValueError(f"parameter vector must have 9 entries, got {vec.shape}")
        return cls(beta=tuple(vec[:6]), eta=vec[6], delta0=vec[7], delta1=vec[8])


DEFAULT_TRUE_PARAMS = SearchParams(
    beta=(0.1, 0.0, 0.2, -0.2, 0.2, -0.2), eta=3.0, delta0=-4.0, delta1=0.1
)


@dataclass(frozen=True)
class ConsumerGrid:
    stars: np.ndarray
    review: np.ndarray
    location: np.ndarray
    chain: np.ndarray
    promotion: np.ndarray
    log_price: np.ndarray
    rank: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        shape = self.stars.shape
        for name in ("review", "location", "chain", "promotion", "log_price", "rank", "valid"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"grid array {name} has shape {getattr(self, name).shape}, expected {shape}")
        if len(shape) != 2 or shape[0] < 1:
            raise ValueError("grid arrays must be (n, J) with n >= 1")
        for i in range(shape[0]):
            ranks = np.sort(self.rank[i, self.valid[i]])
            if not np.array_equal(ranks, np.arange(1, ranks.size + 1)):
                raise ValueError(f"consumer {i}: ranks are not a permutation of 1..{ranks.size}")

    @property
    def n(self) -> int:
        return self.stars.shape[0]

    @property
    def j_max(self) -> int:
        return self.stars.shape[1]

    def counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def z_attrs(self) -> np.ndarray:
        """Attributes entering utility, shape (n, J, 6)."""
        return np.stack(
            [self.stars, self.review, self.location, self.chain, self.promotion, self.log_price],
            axis=-1,
        )

    def x(self) -> np.ndarray:
        """Moment covariates: the six attributes plus log rank, shape (n, J, 7)."""
        rank_safe = np.where(self.valid, self.rank, 1)
        return np.concatenate([self.z_attrs(), np.log(rank_safe)[:, :, None]], axis=-1)


@dataclass(frozen=True)
class SearchOutcome:
    searched: np.ndarray
    bought: np.ndarray
    search_order: tuple
    # False when search_order was reconstructed by an assumption (e.g. data
    # recorded only which options were opened, and order follows the ranking)
    # rather than recorded; estimators that condition on the realized order
    # must refuse such data.
    order_observed: bool = True

    def __post_init__(self):
        if self.searched.sum() < 1:
            raise ValueError("every consumer searches at least once")
        if self.bought.sum() > 1:
            raise ValueError("at most one purchase")
        if not np.all(self.searched[self.bought]):
            raise ValueError("purchase implies search")
        if len(self.search_order) != int(self.searched.sum()):
            raise ValueError("search_order must list exactly the searched options")


class SearchArrays(NamedTuple):
    """Padded per-dataset outcome arrays (the fast path used internally).

    searched: (n, J) bool; order: (n, J) int32, 1-based search position or 0;
    bought: (n,) int64 column index or -1; n_search: (n,) int64.
    """

    searched: np.ndarray
    order: np.ndarray
    bought: np.ndarray
    n_search: np.ndarray


def generate_covariates(n: int, J: int, rng) -> ConsumerGrid:
    if n < 1 or J < 2:
        raise ValueError("need n >= 1 consumers and J >= 2 options")
    gen = as_generator(rng)
    size = (n, J)
    stars = gen.choice(_STAR_VALUES, p=_STAR_PROBS, size=size)
    review = gen.choice(_REVIEW_VALUES, p=_REVIEW_PROBS, size=size)
    location = gen.normal(4.0, 0.3, size=size)
    chain = (gen.random(size=size) < 0.8).astype(float)
    promotion = (gen.random(size=size) < 0.6).astype(float)
    log_price = gen.normal(0.15, 0.6, size=size)
    rank = np.tile(np.arange(1, J + 1), (n, 1))
    return ConsumerGrid(
        stars=stars,
        review=review,
        location=location,
        chain=chain,
        promotion=promotion,
        log_price=log_price,
        rank=rank,
        valid=np.ones(size, dtype=bool),
    )


def _phi(w):
    return np.exp(-0.5 * w * w) / np.sqrt(2.0 * np.pi)


def _psi_inv(c):
    """Solve w * Phi(w) + phi(w) = c for each entry by bracketed bisection."""
    c = np.asarray(c, dtype=float)
    lo = np.full(c.shape, -40.0)
    hi = np.maximum(12.0, c + 1.0)
    for _ in range(120):
        if np.max(hi - lo) <= 1e-11:
            break
        mid = 0.5 * (lo + hi)
        below = mid * ndtr(mid) + _phi(mid) < c
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def reservation_utility(v: float, c: float) -> float:
    """The threshold z with c = E[max(u - z, 0)] for u ~ N(v, 1)."""
    if not (np.isfinite(c) and c > 0.0):
        raise ValueError(f"search cost must be positive and finite, got {c}")
    if not np.isfinite(v):
        raise ValueError(f"mean utility must be finite, got {v}")
    return float(v - _psi_inv(np.array([c]))[0])


def search_costs(params: SearchParams, grid: ConsumerGrid) -> np.ndarray:
    rank_safe = np.where(grid.valid, grid.rank, 1)
    return np.exp(params.delta0 + params.delta1 * np.log(rank_safe))


def mean_utilities(params: SearchParams, grid: ConsumerGrid) -> np.ndarray:
    return grid.z_attrs() @ np.asarray(params.beta)


def reservation_values(params: SearchParams, grid: ConsumerGrid) -> np.ndarray:
    """Per-option reservation utilities; invalid slots get -inf.

    Costs depend on the option only through its rank, so the inner solve runs
    once per distinct rank.
    """
    c_by_rank = np.exp(params.delta0 + params.delta1 * np.log(np.arange(1, grid.j_max + 1)))
    w_by_rank = _psi_inv(c_by_rank)
    rank_safe = np.where(grid.valid, grid.rank, 1)
    z = mean_utilities(params, grid) - w_by_rank[rank_safe - 1]
    return np.where(grid.valid, z, -np.inf)


def draw_epsilons(grid: ConsumerGrid, rng):
    """Utility shocks: outside-option draw plus one per option slot."""
    gen = as_generator(rng)
    eps0 = gen.normal(size=grid.n)
    eps = gen.normal(size=(grid.n, grid.j_max))
    return eps0, eps


def simulate_arrays(params: SearchParams, grid: ConsumerGrid, eps0, eps) -> SearchArrays:
    eps0 = np.asarray(eps0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps0.shape != (grid.n,) or eps.shape != (grid.n, grid.j_max):
        raise ValueError("epsilon arrays do not match the grid")
    u0 = params.eta + eps0
    u = mean_utilities(params, grid) + eps
    z = reservation_values(params, grid)
    searched, order, bought, n_search = kernels().search_walk(u0, u, z, grid.valid)
    return SearchArrays(searched, order, bought, n_search)


def _outcomes_from_arrays(arrays: SearchArrays, grid: ConsumerGrid):
    outcomes = []
    for i in range(grid.n):
        cols = np.flatnonzero(grid.valid[i])
        searched = arrays.searched[i, cols]
        bought = np.zeros(cols.size, dtype=bool)
        if arrays.bought[i] >= 0:
            bought[np.searchsorted(cols, arrays.bought[i])] = True
        idx = np.flatnonzero(searched)
        order_positions = arrays.order[i, cols[idx]]
        search_order = tuple(int(j) for j in idx[np.argsort(order_positions)])
        outcomes.append(SearchOutcome(searched=searched, bought=bought, search_order=search_order))
    return outcomes


def _arrays_from_outcomes(outcomes, grid: ConsumerGrid) -> SearchArrays:
    if len(outcomes) != grid.n:
        raise ValueError(f"{len(outcomes)} outcomes for {grid.n} consumers")
    searched = np.zeros((grid.n, grid.j_max), dtype=bool)
    order = np.zeros((grid.n, grid.j_max), dtype=np.int32)
    bought = np.full(grid.n, -1, dtype=np.int64)
    for i, o in enumerate(outcomes):
        cols = np.flatnonzero(grid.valid[i])
        if o.searched.shape != (cols.size,):
            raise ValueError(f"consumer {i}: outcome has {o.searched.shape[0]} options, grid has {cols.size}")
        searched[i, cols] = o.searched
        for t, j in enumerate(o.search_order, start=1):
            order[i, cols[j]] = t
        hit = np.flatnonzero(o.bought)
        if hit.size:
            bought[i] = cols[hit[0]]
    return SearchArrays(searched, order, bought, searched.sum(axis=1))


def _as_arrays(outcomes, grid: ConsumerGrid) -> SearchArrays:
    if isinstance(outcomes, SearchArrays):
        return outcomes
    return _arrays_from_outcomes(outcomes, grid)


def simulate_from_epsilons(params: SearchParams, grid: ConsumerGrid, eps0, eps):
    return _outcomes_from_arrays(simulate_arrays(params, grid, eps0, eps), grid)


def simulate_search(params: SearchParams, grid: ConsumerGrid, rng):
    eps0, eps = draw_epsilons(grid, rng)
    return simulate_from_epsilons(params, grid, eps0, eps)


@dataclass(frozen=True)
class ViolationReport:
    count: int
    violations: tuple

    def __bool__(self):
        return self.count == 0


def validate_optimality(params: SearchParams, grid: ConsumerGrid, epsilons, outcome) -> ViolationReport:
    """Check every outcome against the optimal-policy inequality set.

    Four families: ordering (searches run down the reservation-utility list
    and never skip an unsearched option above the last search), continuation
    (each paid search happened while the best utility in hand was below that
    option's reservation utility), stopping (the final utility in hand beats
    every unsearched reservation utility), purchase (the chosen option beats
    all searched utilities and the outside option, or the outside option beats
    everything searched).
    """
    eps0, eps = epsilons
    arrays = _as_arrays(outcome, grid)
    u0 = params.eta + np.asarray(eps0, dtype=float)
    u = mean_utilities(params, grid) + np.asarray(eps, dtype=float)
    z = reservation_values(params, grid)
    violations = []
    for i in range(grid.n):
        cols = np.flatnonzero(grid.valid[i])
        searched_cols = cols[arrays.searched[i, cols]]
        unsearched_cols = cols[~arrays.searched[i, cols]]
        seq = searched_cols[np.argsort(arrays.order[i, searched_cols])]
        zi, ui = z[i], u[i]
        for t in range(1, seq.size):
            if zi[seq[t]] > zi[seq[t - 1]]:
                violations.append((i, "ordering", f"search {t + 1} has higher reservation utility than search {t}"))
        if unsearched_cols.size:
            z_un_max = zi[unsearched_cols].max()
            if zi[seq[-1]] < z_un_max:
                violations.append((i, "ordering", "skipped an unsearched option above the last search"))
        best = u0[i]
        for t in range(1, seq.size):
            best = max(best, ui[seq[t - 1]])
            if best >= zi[seq[t]]:
                violations.append((i, "continuation", f"search {t + 1} happened after the stopping point"))
        if unsearched_cols.size:
            final_best = max(u0[i], ui[searched_cols].max())
            if final_best < zi[unsearched_cols].max():
                violations.append((i, "stopping", "stopped while an unsearched reservation utility was higher"))
        b = arrays.bought[i]
        if b >= 0:
            if ui[searched_cols].max() > ui[b]:
                violations.append((i, "purchase", "bought option is not the searched-utility maximum"))
            if u0[i] >= ui[b]:
                violations.append((i, "purchase", "bought option does not beat the outside option"))
        else:
            if ui[searched_cols].max() > u0[i]:
                violations.append((i, "purchase", "declined a searched option above the outside option"))
    return ViolationReport(count=len(violations), violations=tuple(violations))


# master moment vector layout (81 entries):
#   0..1    mean searched dummy, mean purchase dummy (per option)
#   2..15   cov(searched, x), cov(bought, x)                 7 + 7
#   16..18  mean non-free-search dummy, search count, purchase dummy (per consumer)
#   19..39  cov of those three with the consumer mean of x   3 x 7
#   40..45  their covariance matrix, upper triangle row-major
#   46..59  cov(searched, x^2), cov(bought, x^2)             7 + 7
#   60..80  consumer-level cov with the mean of x^2          3 x 7
SEARCH_MOMENT_INDICES = {
    "m16": np.arange(16),
    "m32": np.concatenate([np.arange(16), [17, 18], np.arange(26, 40)]),
    "m40": np.arange(40),
    "m46": np.arange(46),
    "m60": np.arange(60),
    "m81": np.arange(81),
}


@dataclass(frozen=True)
class SearchMomentSpec:
    spec_id: str

    def __post_init__(self):
        if self.spec_id not in SEARCH_MOMENT_INDICES:
            raise ValueError(f"unknown moment spec {self.spec_id!r}")

    @property
    def count(self) -> int:
        return len(SEARCH_MOMENT_INDICES[self.spec_id])

    def indices(self) -> np.ndarray:
        return SEARCH_MOMENT_INDICES[self.spec_id]


def _pooled_cov(y, xm, n_options):
    """Covariance of a per-option dummy with each covariate, options pooled."""
    mean_y = y.sum() / n_options
    mean_x = xm.sum(axis=(0, 1)) / n_options
    return (y[:, :, None] * xm).sum(axis=(0, 1)) / n_options - mean_y * mean_x


def _consumer_cov(a, b):
    """Population cross-covariance over consumers: a (n, p) with b (n, q)."""
    n = a.shape[0]
    return (a.T @ b) / n - np.outer(a.mean(axis=0), b.mean(axis=0))


def master_moments(grid: ConsumerGrid, outcomes) -> np.ndarray:
    """All 81 moments; the named specs are index subsets of this vector."""
    arrays = _as_arrays(outcomes, grid)
    valid = grid.valid
    n_options = valid.sum()
    xm = np.where(valid[:, :, None], grid.x(), 0.0)
    xm2 = xm * xm
    ys = arrays.searched.astype(float)
    yb = np.zeros_like(ys)
    rows = np.flatnonzero(arrays.bought >= 0)
    yb[rows, arrays.bought[rows]] = 1.0

    counts = arrays.n_search.astype(float)
    ytil = np.column_stack([(counts >= 2).astype(float), counts, (arrays.bought >= 0).astype(float)])
    j_counts = grid.counts()[:, None]
    xbar = xm.sum(axis=1) / j_counts
    x2bar = xm2.sum(axis=1) / j_counts

    cov_ytil = _consumer_cov(ytil, ytil)
    iu = np.triu_indices(3)
    return np.concatenate([
        [ys.sum() / n_options, yb.sum() / n_options],
        _pooled_cov(ys, xm, n_options),
        _pooled_cov(yb, xm, n_options),
        ytil.mean(axis=0),
        _consumer_cov(ytil, xbar).ravel(),
        cov_ytil[iu],
        _pooled_cov(ys, xm2, n_options),
        _pooled_cov(yb, xm2, n_options),
        _consumer_cov(ytil, x2bar).ravel(),
    ])


def search_moments(grid: ConsumerGrid, outcomes, spec) -> np.ndarray:
    if isinstance(spec, SearchMomentSpec):
        spec_id = spec.spec_id
    elif isinstance(spec, int):
        spec_id = f"m{spec}"
    else:
        spec_id = str(spec)
    if spec_id not in SEARCH_MOMENT_INDICES:
        raise ValueError(f"unknown moment spec {spec_id!r}")
    return master_moments(grid, outcomes)[SEARCH_MOMENT_INDICES[spec_id]]


def key_stats(outcomes, grid: ConsumerGrid = None) -> dict:
    """Buy rate, mean searches per consumer, mean rank of searched options."""
    if isinstance(outcomes, SearchArrays):
        if grid is None:
            raise ValueError("array outcomes need the grid for option ranks")
        searched = outcomes.searched
        buy_rate = float(np.mean(outcomes.bought >= 0))
        searches = float(np.mean(outcomes.n_search))
        ranking = float(grid.rank[searched].mean())
        return {"buy_rate": buy_rate, "searches": searches, "ranking": ranking}
    if len(outcomes) == 0:
        raise ValueError("no outcomes")
    counts = np.array([o.searched.sum() for o in outcomes], dtype=float)
    buy_rate = float(np.mean([o.bought.any() for o in outcomes]))
    if grid is not None:
        total = 0.0
        for i, o in enumerate(outcomes):
            cols = np.flatnonzero(grid.valid[i])
            total += grid.rank[i, cols[o.searched]].sum()
    else:
        # options stored in rank order: rank = index + 1
        total = sum(float(np.flatnonzero(o.searched).sum() + o.searched.sum()) for o in outcomes)
    return {
        "buy_rate": buy_rate,
        "searches": float(counts.mean()),
        "ranking": float(total / counts.sum()),
    }


def counterfactual_zero_cost(params: SearchParams, grid: ConsumerGrid, rng) -> float:
    """Buy-rate increase when every option can be inspected for free.

    Same utility shocks in both worlds; with zero costs the consumer sees all
    options and buys the best one exactly when it beats the outside option.
    """
    eps0, eps = draw_epsilons(grid, rng)
    arrays = simulate_arrays(params, grid, eps0, eps)
    base_rate = float(np.mean(arrays.bought >= 0))
    u = mean_utilities(params, grid) + eps
    u_best = np.where(grid.valid, u, -np.inf).max(axis=1)
    cf_rate = float(np.mean(u_best > params.eta + eps0))
    return cf_rate - base_rate
