"""Estimation pipeline: draw parameters, simulate datasets on the observed
covariates, train the net on (parameter, moment) pairs, and read the estimate
plus its accuracy off the net at the observed moments."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ar1 as ar1_model
from .core import ParamSpace, RngStream, TrainingSet, as_generator
from .net import TrainSpec, forward, net_config_for, select_hidden_nodes, train
from .search import (
    SEARCH_MOMENT_INDICES,
    SEARCH_SPACE,
    SearchParams,
    draw_epsilons,
    master_moments,
    simulate_arrays,
)

TOY_SPACE = ParamSpace(("theta",), [-5.0], [5.0])

_MODELS = ("ar1", "search", "conjugate_toy")


class ConfigurationError(RuntimeError):
    """Raised when a binding cannot produce usable training data."""


@dataclass(frozen=True)
class EconModelBinding:
    """A concrete econometric model wired up for estimation: the parameter
    space to sample, the moment spec to compute, and the fixed covariates that
    every simulated dataset shares with the observed one."""

    model_id: str
    space: ParamSpace
    moment_spec: object = None
    grid: object = None
    n: int = None

    def __post_init__(self):
        if self.model_id not in _MODELS:
            raise ValueError(f"unknown model {self.model_id!r}")
        if self.model_id == "ar1":
            if self.moment_spec not in ar1_model.AR1_MOMENT_SPECS:
                raise ValueError(f"unknown autoregression moment spec {self.moment_spec!r}")
            if self.space.dim != 1:
                raise ValueError("autoregression has a single parameter")
            if not self.n or self.n < 10:
                raise ValueError("need a series length of at least 10")
        elif self.model_id == "search":
            if self.grid is None:
                raise ValueError("search binding needs the covariate grid")
            if self.moment_spec not in SEARCH_MOMENT_INDICES:
                raise ValueError(f"unknown search moment spec {self.moment_spec!r}")
            if self.space.dim != 9:
                raise ValueError("search model has 9 parameters")
        else:
            if self.space.dim != 1:
                raise ValueError("toy model has a single parameter")
            if not self.n or self.n < 2:
                raise ValueError("need a toy sample size of at least 2")

    @property
    def input_dim(self) -> int:
        if self.model_id == "ar1":
            return len(ar1_model.AR1_MOMENT_SPECS[self.moment_spec])
        if self.model_id == "search":
            return len(SEARCH_MOMENT_INDICES[self.moment_spec])
        return 1


def ar1_binding(spec_id: int = 1, n: int = 100, space: ParamSpace = None) -> EconModelBinding:
    return EconModelBinding(
        model_id="ar1", space=space or ar1_model.AR1_SPACE, moment_spec=spec_id, n=n
    )


def search_binding(grid, spec_id: str = "m46", space: ParamSpace = None) -> EconModelBinding:
    return EconModelBinding(
        model_id="search", space=space or SEARCH_SPACE, moment_spec=spec_id, grid=grid
    )


def conjugate_toy_binding(n: int = 100, space: ParamSpace = None) -> EconModelBinding:
    return EconModelBinding(model_id="conjugate_toy", space=space or TOY_SPACE, n=n)


def _as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise TypeError("training-set generation needs a seeded stream for substream control")


_FILTERS = ("no_purchases", "all_purchases", "no_paid_searches", "all_options_searched")


def _search_filter(arrays, counts) -> str:
    bought = arrays.bought >= 0
    if not bought.any():
        return "no_purchases"
    if bought.all():
        return "all_purchases"
    if (arrays.n_search == 1).all():
        return "no_paid_searches"
    if (arrays.n_search == counts).all():
        return "all_options_searched"
    return ""


def generate_training_set(binding: EconModelBinding, L_star: int, rng) -> TrainingSet:
    """Exactly L_star retained (theta, moments) pairs.

    Search datasets failing any degeneracy filter are discarded and redrawn
    from attempt-indexed substreams; the attempt budget is 10 * L_star.
    """
    if L_star < 10:
        raise ValueError("need L_star >= 10")
    rng = _as_stream(rng)

    if binding.model_id in ("ar1", "conjugate_toy"):
        # no trimming for these models: draw everything in two batches
        gen_theta = rng.substream("theta").generator()
        thetas = gen_theta.uniform(binding.space.lower, binding.space.upper, size=(L_star, 1))
        gen_data = rng.substream("data").generator()
        if binding.model_id == "ar1":
            eps = gen_data.normal(size=(L_star, binding.n))
            panel = ar1_model.ar1_from_shocks(thetas[:, 0], eps)
            moments = np.array(
                [ar1_model.ar1_moments(panel[l], binding.moment_spec) for l in range(L_star)]
            )
        else:
            y = thetas + gen_data.normal(size=(L_star, binding.n))
            moments = y.mean(axis=1, keepdims=True)
        return TrainingSet(thetas, moments, attempts=L_star)

    grid = binding.grid
    counts = grid.counts()
    indices = SEARCH_MOMENT_INDICES[binding.moment_spec]
    budget = 10 * L_star
    thetas, moments = [], []
    rejections = {name: 0 for name in _FILTERS}
    attempts = 0
    for attempt in range(budget):
        attempts = attempt + 1
        gen = rng.substream(attempt).generator()
        theta = gen.uniform(binding.space.lower, binding.space.upper)
        params = SearchParams.from_vector(theta)
        eps0, eps = draw_epsilons(grid, gen)
        arrays = simulate_arrays(params, grid, eps0, eps)
        reason = _search_filter(arrays, counts)
        if reason:
            rejections[reason] += 1
            continue
        thetas.append(theta)
        moments.append(master_moments(grid, arrays)[indices])
        if len(thetas) == L_star:
            break
    if len(thetas) < L_star:
        detail = ", ".join(f"{k}={v}" for k, v in rejections.items() if v)
        raise ConfigurationError(
            f"kept {len(thetas)}/{L_star} training datasets after {budget} attempts; "
            f"rejections by filter: {detail}"
        )
    return TrainingSet(np.array(thetas), np.array(moments), attempts=attempts)


def simulate_observed_moments(binding: EconModelBinding, theta, rng) -> np.ndarray:
    """One dataset at the given parameters, reduced to the binding's moments."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    gen = as_generator(rng)
    if binding.model_id == "ar1":
        y = ar1_model.simulate_ar1(theta[0], binding.n, gen)
        return ar1_model.ar1_moments(y, binding.moment_spec)
    if binding.model_id == "conjugate_toy":
        return np.array([gen.normal(theta[0], 1.0, size=binding.n).mean()])
    params = SearchParams.from_vector(theta)
    eps0, eps = draw_epsilons(binding.grid, gen)
    arrays = simulate_arrays(params, binding.grid, eps0, eps)
    return master_moments(binding.grid, arrays)[SEARCH_MOMENT_INDICES[binding.moment_spec]]


def auto_hidden_units(L_star: int) -> int:
    """Hidden-layer width scaling with sqrt of the training-set size."""
    return int(2 ** round(np.log2(0.64 * np.sqrt(L_star))))


@dataclass
class EstimateReport:
    names: tuple
    theta_hat: np.ndarray
    accuracy: np.ndarray
    accuracy_kind: str
    inside_theta: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    validation_loss: float
    L_star: int
    seed_path: str
    runtime_s: float
    sim_burden: int
    model_id: str
    moment_spec: object
    hidden_units: int
    net: object = field(default=None, repr=False, compare=False)

    def sd(self) -> np.ndarray:
        """Per-parameter SDs regardless of accuracy head."""
        if self.accuracy_kind == "sd":
            return self.accuracy
        if self.accuracy_kind == "cov":
            return np.sqrt(np.diag(self.accuracy))
        raise ValueError("point head carries no accuracy")


def nne_estimate(
    binding: EconModelBinding,
    observed_moments,
    L_star: int = 10_000,
    rng=None,
    *,
    loss: str = "c2_diag",
    hidden_units=None,
    activation: str = "relu",
    train_spec: TrainSpec = None,
    training_set: TrainingSet = None,
) -> EstimateReport:
    t0 = time.perf_counter()
    rng = _as_stream(rng)
    m_obs = np.asarray(observed_moments, dtype=float)
    if m_obs.shape != (binding.input_dim,):
        raise ValueError(f"observed moments have shape {m_obs.shape}, binding expects ({binding.input_dim},)")
    spec = train_spec if train_spec is not None else TrainSpec(loss=loss)
    if training_set is not None:
        # reuse pre-simulated examples (e.g. one batch shared by several
        # moment subsets); columns must already match the binding
        if training_set.moments.shape[1] != binding.input_dim:
            raise ValueError(
                f"training set has {training_set.moments.shape[1]} moment columns, "
                f"binding expects {binding.input_dim}"
            )
        training = training_set
    else:
        training = generate_training_set(binding, L_star, rng.substream("examples"))

    if hidden_units is None:
        h = auto_hidden_units(L_star)
    elif isinstance(hidden_units, (list, tuple)):
        template = net_config_for(spec.loss, binding.input_dim, binding.space.dim, int(hidden_units[0]), activation)
        h = select_hidden_nodes(training, hidden_units, template, spec, rng.substream("select"))
    else:
        h = int(hidden_units)
    config = net_config_for(spec.loss, binding.input_dim, binding.space.dim, h, activation)
    net = train(training, config, spec, rng.substream("net"))

    mu, V = forward(net, m_obs)
    if V is None:
        accuracy, kind = None, "none"
    elif config.head == "point+diag_var":
        accuracy, kind = np.sqrt(np.diag(V)), "sd"
    else:
        accuracy, kind = V, "cov"
    lower = np.asarray(binding.space.lower, dtype=float)
    upper = np.asarray(binding.space.upper, dtype=float)
    return EstimateReport(
        names=tuple(binding.space.names),
        theta_hat=mu,
        accuracy=accuracy,
        accuracy_kind=kind,
        inside_theta=(lower < mu) & (mu < upper),
        lower=lower,
        upper=upper,
        validation_loss=float(net.meta["val_loss"]),
        L_star=L_star,
        seed_path=rng.seed_path(),
        runtime_s=time.perf_counter() - t0,
        sim_burden=training.attempts,
        model_id=binding.model_id,
        moment_spec=binding.moment_spec,
        hidden_units=h,
        net=net,
    )


@dataclass(frozen=True)
class RangeAdvisory:
    flagged: tuple
    message: str


def check_theta_range(report: EstimateReport) -> RangeAdvisory:
    """Flag estimate coordinates on or outside the sampled parameter box."""
    flagged = []
    for k, name in enumerate(report.names):
        value = float(report.theta_hat[k])
        if value < report.lower[k] or value > report.upper[k]:
            flagged.append((name, value, "outside"))
        elif value == report.lower[k] or value == report.upper[k]:
            flagged.append((name, value, "boundary"))
    if not flagged:
        return RangeAdvisory(flagged=(), message="estimate inside the parameter space")
    names = ", ".join(f[0] for f in flagged)
    return RangeAdvisory(
        flagged=tuple(flagged),
        message=(
            f"estimate on or outside the parameter space for: {names}; "
            "the space likely does not contain the truth and needs to be adjusted"
        ),
    )
