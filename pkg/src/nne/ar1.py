"""AR(1) data-generating process and its moment specifications.

The process is ``y_i = beta * y_{i-1} + eps_i`` with standard-normal
innovations and a stationary initial draw ``y_1 ~ N(0, 1/(1-beta^2))``.

Six moment specifications are supported, identified by spec ids 1..6. Each
is an ordered tuple of (kind, lag) entries, where kind is one of

- ``yy``  : y_i * y_{i-k}   (k = 0 gives y_i^2)
- ``y2y`` : y_i^2 * y_{i-k}
- ``yy2`` : y_i * y_{i-k}^2

Lag-k sample moments average over their n-k valid terms. Spec 6 orders its
entries lag-major: (yy,1),(y2y,1),(yy2,1),(yy,2),...
"""

from __future__ import annotations

from typing import Union

import numpy as np

from ._backend import kernels
from .core import ParamSpace, RngStream, as_generator

AR1_SPACE = ParamSpace(("beta",), lower=[0.0], upper=[0.9])

DEFAULT_N = 100

AR1_MOMENT_SPECS = {
    1: (("yy", 1),),
    2: (("yy", 1), ("yy", 0)),
    3: (("yy", 1), ("yy", 2), ("yy", 3)),
    4: tuple(("yy", k) for k in range(1, 11)),
    5: (("yy", 1), ("y2y", 1), ("yy2", 1)),
    6: tuple((kind, k) for k in (1, 2, 3) for kind in ("yy", "y2y", "yy2")),
}


def _check_beta(beta: float) -> float:
    beta = float(beta)
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    return beta


def simulate_ar1(beta: float, n: int = DEFAULT_N, rng: Union[RngStream, np.random.Generator] = None) -> np.ndarray:
    """Simulate one series of length n from the stationary AR(1)."""
    if n < 2:
        raise ValueError("need n >= 2")
    return simulate_ar1_panel(np.array([_check_beta(beta)]), n, rng)[0]


def simulate_ar1_panel(betas: np.ndarray, n: int, rng: Union[RngStream, np.random.Generator]) -> np.ndarray:
    """Simulate len(betas) series at once; row ell uses betas[ell]."""
    betas = np.asarray(betas, dtype=float)
    if betas.ndim != 1:
        raise ValueError("betas must be 1-d")
    if np.any((betas < 0.0) | (betas >= 1.0)):
        raise ValueError("every beta must lie in [0, 1)")
    gen = as_generator(rng)
    eps = gen.standard_normal((len(betas), n))
    return ar1_from_shocks(betas, eps)


def ar1_from_shocks(betas: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Deterministic transform of standard-normal shocks into AR(1) series.

    ``eps[:, 0]`` supplies the stationary initial draw (it gets scaled by
    1/sqrt(1-beta^2)), the remaining columns are the innovations. Used
    directly by simulated-moment estimators that hold shocks fixed while
    beta varies (common random numbers).
    """
    betas = np.asarray(betas, dtype=float)
    eps = np.asarray(eps, dtype=float)
    return np.asarray(kernels().ar1_panel(betas, eps))


def _lag_average(y: np.ndarray, kind: str, lag: int) -> float:
    n = len(y)
    if lag >= n:
        raise ValueError(f"series of length {n} too short for lag {lag}")
    a = y[lag:]  # y_i
    b = y[: n - lag]  # y_{i-k}
    if kind == "yy":
        prod = a * b
    elif kind == "y2y":
        prod = a * a * b
    elif kind == "yy2":
        prod = a * b * b
    else:
        raise ValueError(f"unknown moment kind {kind!r}")
    return float(prod.mean())


def ar1_moments(series: np.ndarray, spec_id: int) -> np.ndarray:
    """Sample moment vector of a series under one of the six specs."""
    y = np.asarray(series, dtype=float)
    entries = AR1_MOMENT_SPECS[spec_id]
    return np.array([_lag_average(y, kind, lag) for kind, lag in entries])


def ar1_population_moment(beta: float, lag: int) -> float:
    """E(y_i y_{i-k}) = beta^k / (1 - beta^2); lag 0 gives the variance."""
    beta = _check_beta(beta)
    return beta**lag / (1.0 - beta * beta)


def ar1_population_moments(beta: float, spec_id: int) -> np.ndarray:
    """Population counterpart of ar1_moments.

    The odd-power products y_i^2 y_{i-k} and y_i y_{i-k}^2 have expectation
    zero for every beta (Gaussian odd moments), which is what makes them
    redundant as identifying information.
    """
    values = []
    for kind, lag in AR1_MOMENT_SPECS[spec_id]:
        values.append(ar1_population_moment(beta, lag) if kind == "yy" else 0.0)
    return np.array(values)
