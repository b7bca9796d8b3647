"""Benchmark-experiment runner.

Each scenario simulates data from one of the packaged econometric models,
runs one or more estimators over many replications, and returns a result
table (optionally persisted as CSV files plus a JSON sidecar recording the
resolved configuration and master seed).  Scenarios come with two built-in
scales: ``desk`` keeps replication counts small enough for a workstation,
``paper`` runs the full study sizes.  Any knob can be overridden
individually, which the unit tests use to shrink runs to seconds.

Determinism contract: every replication derives its randomness from a
substream of the master seed keyed by replication index (and grid point),
so results are byte-identical across reruns and thread counts; the only
column that reflects wall-clock conditions is ``runtime_s``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

try:  # standard library from Python 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml

from .ar1 import AR1_MOMENT_SPECS, AR1_SPACE, ar1_moments, ar1_population_moments, simulate_ar1
from .baselines import GmmSpec, SmleSpec, gmm_ar1, lasso_poly_train, smle_search, smm_ar1
from .core import ParamSpace, RngStream, TrainingSet
from .dataio import (
    EstimateRow,
    _fmt,
    ingest_search_csv,
    read_estimates_csv,
    write_estimates_csv,
    write_sidecar,
)
from .estimator import (
    ConfigurationError,
    auto_hidden_units,
    generate_training_set,
    nne_estimate,
    search_binding,
    ar1_binding,
)
from .net import forward
from .search import (
    DEFAULT_TRUE_PARAMS,
    SEARCH_MOMENT_INDICES,
    SEARCH_SPACE,
    ConsumerGrid,
    SearchParams,
    counterfactual_zero_cost,
    generate_covariates,
    search_moments,
    simulate_search,
)

__all__ = [
    "AR1_TRUE_BETA",
    "DELTA0_RANGES",
    "KEY_FIT_STATS",
    "SCENARIOS",
    "ConfigurationError",
    "ExperimentConfig",
    "ResultTable",
    "SummaryRow",
    "run_experiment",
    "summarize",
    "write_summary_csv",
]

SCENARIOS = (
    "ar1_table2",
    "ar1_fig3_curves",
    "search_mc",
    "search_rmse_vs_cost",
    "search_moment_sweep",
    "search_data_size",
    "smoothing_grid",
    "theta_misspec",
    "accuracy_calibration",
    "counterfactual",
    "real_data",
)

AR1_TRUE_BETA = 0.6
AR1_HIDDEN_UNITS = 32
LASSO_DEGREE = 3
LASSO_REG_GRID = tuple(10.0 ** k for k in range(-6, 1))
SMM_DEFAULT_R = 10

SEARCH_PARAM_NAMES = tuple(SEARCH_SPACE.names)
SEARCH_TRUTH = dict(zip(SEARCH_PARAM_NAMES, DEFAULT_TRUE_PARAMS.to_vector()))

# Sensitivity variants for the sampled range of the base search-cost
# parameter: two ranges excluding its true value (-4), one with the truth
# on the boundary, and the baseline range containing it in the interior.
DELTA0_RANGES = ((-3.0, -1.0), (-3.5, -1.5), (-4.0, -2.0), (-5.0, -2.0))

# Dataset-level statistics used to compare observed data against data
# re-simulated under an estimate.
KEY_FIT_STATS = ("buy_rate", "searches_per_consumer", "mean_searched_rank")

_POSITIVE_INT_FIELDS = ("threads", "replications", "n", "J", "L_star", "R", "budget", "n_eval")
_POSITIVE_TUPLE_FIELDS = ("lambdas", "L_grid", "R_grid", "n_grid")
_KNOB_KEYS = (
    "replications", "n", "J", "L_star", "R", "lam", "lambdas", "spec_id",
    "specs", "methods", "budget", "data_path", "source", "n_eval",
    "L_grid", "R_grid", "n_grid",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """One scenario run: identity knobs plus execution details.

    Every knob defaults to ``None`` meaning "use the scenario's default at
    the chosen scale".  ``out_dir`` and ``threads`` affect where and how the
    run executes, never what it computes, and are excluded from the
    persisted configuration.
    """

    scenario: str
    seed: int = 0
    scale: str = "desk"
    out_dir: Optional[str] = None
    threads: int = 1
    replications: Optional[int] = None
    n: Optional[int] = None
    J: Optional[int] = None
    L_star: Optional[int] = None
    R: Optional[int] = None
    lam: Optional[float] = None
    lambdas: Optional[Tuple[float, ...]] = None
    spec_id: Optional[str] = None
    specs: Optional[tuple] = None
    methods: Optional[Tuple[str, ...]] = None
    budget: Optional[int] = None
    data_path: Optional[str] = None
    source: Optional[Tuple[str, ...]] = None
    n_eval: Optional[int] = None
    L_grid: Optional[Tuple[int, ...]] = None
    R_grid: Optional[Tuple[int, ...]] = None
    n_grid: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(
                f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}"
            )
        if self.scale not in ("desk", "paper"):
            raise ConfigurationError(f"scale must be 'desk' or 'paper', got {self.scale!r}")
        for field in _POSITIVE_INT_FIELDS:
            value = getattr(self, field)
            if value is None:
                continue
            if int(value) != value or value <= 0:
                raise ConfigurationError(f"{field} must be a positive integer, got {value!r}")
            object.__setattr__(self, field, int(value))
        if self.lam is not None:
            if self.lam <= 0:
                raise ConfigurationError(f"lam must be positive, got {self.lam!r}")
            object.__setattr__(self, "lam", float(self.lam))
        for field in _POSITIVE_TUPLE_FIELDS:
            value = getattr(self, field)
            if value is None:
                continue
            items = tuple(float(x) if field == "lambdas" else int(x) for x in value)
            if any(x <= 0 for x in items):
                raise ConfigurationError(f"{field} entries must be positive, got {value!r}")
            object.__setattr__(self, field, items)
        for field in ("specs", "methods", "source"):
            value = getattr(self, field)
            if value is not None:
                object.__setattr__(self, field, tuple(value))
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        """Load a TOML document: top-level run identity plus a [knobs] table."""
        with open(path, "rb") as fh:
            doc = _toml.load(fh)
        allowed_top = {"scenario", "seed", "scale", "out", "threads", "knobs"}
        unknown = sorted(set(doc) - allowed_top)
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
        knobs = doc.get("knobs", {})
        if not isinstance(knobs, dict):
            raise ConfigurationError("[knobs] must be a table")
        allowed_knobs = set(_KNOB_KEYS) | {"lambda"}
        unknown = sorted(set(knobs) - allowed_knobs)
        if unknown:
            raise ConfigurationError(f"unknown knob(s): {', '.join(unknown)}")
        kwargs = {}
        if "scenario" in doc:
            kwargs["scenario"] = doc["scenario"]
        for key, field in (("seed", "seed"), ("scale", "scale"), ("out", "out_dir"), ("threads", "threads")):
            if key in doc:
                kwargs[field] = doc[key]
        for key, value in knobs.items():
            kwargs["lam" if key == "lambda" else key] = value
        kwargs.update(overrides)
        if "scenario" not in kwargs:
            raise ConfigurationError("config file does not name a scenario")
        return cls(**kwargs)


@dataclass(frozen=True)
class ResultTable:
    scenario: str
    rows: Tuple[EstimateRow, ...]
    truth: Optional[Mapping[str, float]]

    def summary(self):
        return summarize(self.rows, self.truth)


@dataclass(frozen=True)
class SummaryRow:
    method: str
    spec: str
    parameter: str
    n_reps: int
    bias: Optional[float]
    bias_se: Optional[float]
    rmse: Optional[float]
    rmse_se: Optional[float]
    mean: Optional[float]
    sd: Optional[float]


def summarize(rows, truth) -> list:
    """Per (method, spec, parameter): bias and RMSE against ``truth`` with
    Monte Carlo standard errors, or mean/SD when no truth is known.

    With a truth mapping, each (method, spec) group also gets an ``all``
    row whose RMSE is the root mean squared Euclidean distance between the
    full estimate vector and the truth vector.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("empty result table")
    groups = {}
    for row in rows:
        params = groups.setdefault((row.method, row.spec), {})
        params.setdefault(row.parameter, []).append((row.replication, row.estimate))
    out = []
    for (method, spec), params in groups.items():
        sq_by_rep = {}
        m_group = set()
        for parameter, pairs in params.items():
            ests = np.array([est for _, est in pairs], dtype=float)
            m = len(ests)
            mean = float(ests.mean())
            sd = float(ests.std(ddof=1)) if m > 1 else 0.0
            if truth is None:
                out.append(SummaryRow(method, spec, parameter, m, None, None, None, None, mean, sd))
                continue
            if parameter not in truth:
                raise ValueError(f"no true value for parameter {parameter!r}")
            err = ests - float(truth[parameter])
            bias = float(err.mean())
            bias_se = sd / math.sqrt(m) if m > 0 else 0.0
            sq = err ** 2
            rmse = float(math.sqrt(sq.mean()))
            if m > 1 and rmse > 0:
                rmse_se = float(sq.std(ddof=1) / (2.0 * rmse * math.sqrt(m)))
            else:
                rmse_se = 0.0
            out.append(SummaryRow(method, spec, parameter, m, bias, bias_se, rmse, rmse_se, mean, sd))
            for rep, est in pairs:
                sq_by_rep[rep] = sq_by_rep.get(rep, 0.0) + (est - float(truth[parameter])) ** 2
                m_group.add(rep)
        if truth is not None and sq_by_rep:
            sq = np.array([sq_by_rep[rep] for rep in sorted(sq_by_rep)], dtype=float)
            m = len(sq)
            rmse = float(math.sqrt(sq.mean()))
            if m > 1 and rmse > 0:
                rmse_se = float(sq.std(ddof=1) / (2.0 * rmse * math.sqrt(m)))
            else:
                rmse_se = 0.0
            out.append(SummaryRow(method, spec, "all", m, None, None, rmse, rmse_se, None, None))
    return out


SUMMARY_CSV_COLUMNS = (
    "method", "spec", "parameter", "n_reps",
    "bias", "bias_se", "rmse", "rmse_se", "mean", "sd",
)


def _cell(value) -> str:
    return "" if value is None else _fmt(value)


def write_summary_csv(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [r.method, r.spec, r.parameter, str(r.n_reps),
                 _cell(r.bias), _cell(r.bias_se), _cell(r.rmse), _cell(r.rmse_se),
                 _cell(r.mean), _cell(r.sd)]
            )


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Execution helpers
# ---------------------------------------------------------------------------


def _pick(value, desk, paper=None, scale="desk"):
    if value is not None:
        return value
    if paper is None:
        return desk
    return desk if scale == "desk" else paper


def _map_replications(m, threads, job):
    """Run job(0..m-1); results keep index order however many workers run."""
    if threads <= 1:
        return [job(r) for r in range(m)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, range(m)))


def _check_methods(methods, allowed, scenario):
    for method in methods:
        if method not in allowed:
            raise ConfigurationError(
                f"unknown method {method!r} for {scenario}; expected a subset of {allowed}"
            )


def _key_stats(grid: ConsumerGrid, outcomes) -> dict:
    """The three dataset-level statistics used for fit comparisons."""
    bought = np.array([bool(o.bought.any()) for o in outcomes], dtype=float)
    n_search = np.array([len(o.search_order) for o in outcomes], dtype=float)
    ranks = np.concatenate([grid.rank[i][o.searched] for i, o in enumerate(outcomes)])
    return {
        "buy_rate": float(bought.mean()),
        "searches_per_consumer": float(n_search.mean()),
        "mean_searched_rank": float(ranks.mean()),
    }


def _space_with_delta0(lo: float, hi: float) -> ParamSpace:
    lower = np.array(SEARCH_SPACE.lower, dtype=float)
    upper = np.array(SEARCH_SPACE.upper, dtype=float)
    k = SEARCH_PARAM_NAMES.index("delta0")
    lower[k], upper[k] = lo, hi
    return ParamSpace(SEARCH_SPACE.names, lower=lower, upper=upper)


def _grid_subset(grid: ConsumerGrid, idx) -> ConsumerGrid:
    return ConsumerGrid(
        stars=grid.stars[idx],
        review=grid.review[idx],
        location=grid.location[idx],
        chain=grid.chain[idx],
        promotion=grid.promotion[idx],
        log_price=grid.log_price[idx],
        rank=grid.rank[idx],
        valid=grid.valid[idx],
    )


def _nne_rows(scenario, spec, replication, report, seed_path) -> list:
    rows = []
    for k, name in enumerate(report.names):
        rows.append(
            EstimateRow(
                scenario=scenario,
                method="nne",
                spec=spec,
                replication=replication,
                parameter=name,
                estimate=float(report.theta_hat[k]),
                accuracy=float(report.accuracy[k]) if report.accuracy is not None else None,
                runtime_s=float(report.runtime_s),
                sim_burden=int(report.sim_burden),
                seed_path=seed_path,
            )
        )
    return rows


def _smle_rows(scenario, spec, replication, result, runtime_s, seed_path) -> list:
    rows = []
    for k, name in enumerate(SEARCH_PARAM_NAMES):
        rows.append(
            EstimateRow(
                scenario=scenario,
                method="smle",
                spec=spec,
                replication=replication,
                parameter=name,
                estimate=float(result.theta[k]),
                accuracy=float(result.se[k]),
                runtime_s=runtime_s,
                sim_burden=int(result.sim_burden),
                seed_path=seed_path,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# AR(1) scenarios
# ---------------------------------------------------------------------------


def _run_ar1_table2(config: ExperimentConfig, root: RngStream):
    m = _pick(config.replications, 1000)
    n = _pick(config.n, 100)
    L = _pick(config.L_star, 1000)
    smm_R = _pick(config.R, SMM_DEFAULT_R)
    specs = tuple(config.specs) if config.specs is not None else tuple(sorted(AR1_MOMENT_SPECS))
    methods = _pick(config.methods, ("gmm", "smm", "nne", "lasso"))
    _check_methods(methods, ("gmm", "smm", "nne", "lasso"), "ar1_table2")
    for spec_id in specs:
        if spec_id not in AR1_MOMENT_SPECS:
            raise ConfigurationError(f"unknown moment spec {spec_id!r} for ar1_table2")

    def job(r):
        stream = root.substream("rep", r)
        series = simulate_ar1(AR1_TRUE_BETA, n, stream.substream("data"))
        rows = []
        for spec_id in specs:
            m_obs = ar1_moments(series, spec_id)
            for method in methods:
                t0 = time.perf_counter()
                accuracy = None
                burden = 0
                if method == "gmm":
                    estimate = gmm_ar1(series, GmmSpec(spec_id))
                elif method == "smm":
                    estimate = smm_ar1(series, GmmSpec(spec_id), smm_R, stream.substream("smm", spec_id))
                    burden = smm_R
                elif method == "nne":
                    report = nne_estimate(
                        ar1_binding(spec_id, n), m_obs, L_star=L,
                        rng=stream.substream("nne", spec_id), hidden_units=AR1_HIDDEN_UNITS,
                    )
                    estimate = float(report.theta_hat[0])
                    accuracy = float(report.accuracy[0])
                    burden = int(report.sim_burden)
                else:  # lasso
                    training = generate_training_set(
                        ar1_binding(spec_id, n), L, stream.substream("lasso", spec_id, "examples")
                    )
                    model = lasso_poly_train(
                        training, degree=LASSO_DEGREE, reg_grid=LASSO_REG_GRID,
                        rng=stream.substream("lasso", spec_id, "fit"),
                    )
                    estimate = float(model.predict(m_obs)[0])
                    burden = int(training.attempts)
                rows.append(
                    EstimateRow(
                        scenario="ar1_table2", method=method, spec=str(spec_id),
                        replication=r, parameter="beta", estimate=float(estimate),
                        accuracy=accuracy, runtime_s=time.perf_counter() - t0,
                        sim_burden=burden, seed_path=stream.seed_path(),
                    )
                )
        return rows

    results = _map_replications(m, config.threads, job)
    rows = tuple(row for sub in results for row in sub)
    resolved = {
        "scenario": "ar1_table2", "scale": config.scale, "replications": m,
        "n": n, "L_star": L, "specs": list(specs), "methods": list(methods),
        "smm_R": smm_R, "hidden_units": AR1_HIDDEN_UNITS, "lasso_degree": LASSO_DEGREE,
        "true_beta": AR1_TRUE_BETA,
    }
    return ResultTable("ar1_table2", rows, {"beta": AR1_TRUE_BETA}), resolved, []


def _run_ar1_fig3_curves(config: ExperimentConfig, root: RngStream):
    n = _pick(config.n, 100)
    L = _pick(config.L_star, 1000)
    binding = ar1_binding(1, n)
    beta_grid = np.linspace(AR1_SPACE.lower[0], AR1_SPACE.upper[0], 181)

    curve_rows = []
    for beta in beta_grid:
        curve_rows.append(("g", _fmt(beta), _fmt(float(ar1_population_moments(beta, 1)[0]))))
    for R in (1, 5):
        for i, beta in enumerate(beta_grid):
            stream = root.substream("ghat", R, i)
            values = [
                float(ar1_moments(simulate_ar1(float(beta), n, stream.substream(rep)), 1)[0])
                for rep in range(R)
            ]
            curve_rows.append((f"ghat_R{R}", _fmt(beta), _fmt(float(np.mean(values)))))

    training = generate_training_set(binding, L, root.substream("train"))
    for theta, moment in zip(training.thetas[:, 0], training.moments[:, 0]):
        curve_rows.append(("train", _fmt(float(theta)), _fmt(float(moment))))

    m_true = float(ar1_population_moments(AR1_TRUE_BETA, 1)[0])
    report = nne_estimate(
        binding, np.array([m_true]), L_star=L, rng=root.substream("net_fit"),
        hidden_units=AR1_HIDDEN_UNITS, training_set=training,
    )
    m_grid = np.linspace(float(training.moments.min()), float(training.moments.max()), 181)
    for m_val in m_grid:
        mu, _ = forward(report.net, np.array([m_val]))
        curve_rows.append(("net", _fmt(float(m_val)), _fmt(float(mu[0]))))

    rows = (
        EstimateRow(
            scenario="ar1_fig3_curves", method="nne", spec="1", replication=0,
            parameter="beta", estimate=float(report.theta_hat[0]),
            accuracy=float(report.accuracy[0]), runtime_s=float(report.runtime_s),
            sim_burden=int(report.sim_burden), seed_path=root.substream("net_fit").seed_path(),
        ),
    )
    resolved = {
        "scenario": "ar1_fig3_curves", "scale": config.scale, "n": n, "L_star": L,
        "curve_points": len(beta_grid), "simulation_draws": [1, 5],
        "hidden_units": AR1_HIDDEN_UNITS, "true_beta": AR1_TRUE_BETA,
    }
    extras = [("curves.csv", _csv_text(("series", "x", "y"), curve_rows))]
    return ResultTable("ar1_fig3_curves", rows, {"beta": AR1_TRUE_BETA}), resolved, extras


# ---------------------------------------------------------------------------
# Search-model scenarios
# ---------------------------------------------------------------------------


def _run_search_mc(config: ExperimentConfig, root: RngStream):
    m = _pick(config.replications, 20, 100, config.scale)
    n = _pick(config.n, 1000)
    J = _pick(config.J, 30)
    L = _pick(config.L_star, 10_000)
    spec_id = _pick(config.spec_id, "m46")

    def job(r):
        stream = root.substream("rep", r)
        grid = generate_covariates(n, J, stream.substream("grid"))
        outcomes = simulate_search(DEFAULT_TRUE_PARAMS, grid, stream.substream("data"))
        report = nne_estimate(
            search_binding(grid, spec_id), search_moments(grid, outcomes, spec_id),
            L_star=L, rng=stream.substream("nne"),
        )
        rows = _nne_rows("search_mc", spec_id, r, report, stream.seed_path())
        refit = simulate_search(
            SearchParams.from_vector(report.theta_hat), grid, stream.substream("fit")
        )
        stats = []
        observed = _key_stats(grid, outcomes)
        predicted = _key_stats(grid, refit)
        for stat in KEY_FIT_STATS:
            stats.append((str(r), stat, "data", _fmt(observed[stat])))
        for stat in KEY_FIT_STATS:
            stats.append((str(r), stat, "model", _fmt(predicted[stat])))
        return rows, stats

    results = _map_replications(m, config.threads, job)
    rows = tuple(row for sub, _ in results for row in sub)
    fit_rows = [line for _, stats in results for line in stats]
    resolved = {
        "scenario": "search_mc", "scale": config.scale, "replications": m,
        "n": n, "J": J, "L_star": L, "spec_id": spec_id,
        "hidden_units": auto_hidden_units(L),
    }
    extras = [("fit_stats.csv", _csv_text(("replication", "stat", "source", "value"), fit_rows))]
    return ResultTable("search_mc", rows, SEARCH_TRUTH), resolved, extras


def _run_search_moment_sweep(config: ExperimentConfig, root: RngStream):
    m = _pick(config.replications, 20, 100, config.scale)
    n = _pick(config.n, 1000)
    J = _pick(config.J, 30)
    L = _pick(config.L_star, 10_000)
    specs = _pick(config.specs, ("m16", "m46", "m60", "m81"))
    for spec_id in specs:
        if spec_id not in SEARCH_MOMENT_INDICES:
            raise ConfigurationError(f"unknown moment spec {spec_id!r} for search_moment_sweep")

    def job(r):
        stream = root.substream("rep", r)
        grid = generate_covariates(n, J, stream.substream("grid"))
        outcomes = simulate_search(DEFAULT_TRUE_PARAMS, grid, stream.substream("data"))
        # one batch of simulations serves every moment subset
        master = generate_training_set(search_binding(grid, "m81"), L, stream.substream("train"))
        m_master = search_moments(grid, outcomes, "m81")
        rows = []
        for spec_id in specs:
            idx = SEARCH_MOMENT_INDICES[spec_id]
            subset = TrainingSet(master.thetas, master.moments[:, idx], attempts=master.attempts)
            report = nne_estimate(
                search_binding(grid, spec_id), m_master[idx], L_star=L,
                rng=stream.substream("nne", spec_id), training_set=subset,
            )
            rows.extend(_nne_rows("search_moment_sweep", spec_id, r, report, stream.seed_path()))
        return rows

    results = _map_replications(m, config.threads, job)
    rows = tuple(row for sub in results for row in sub)
    resolved = {
        "scenario": "search_moment_sweep", "scale": config.scale, "replications": m,
        "n": n, "J": J, "L_star": L, "specs": list(specs),
        "hidden_units": auto_hidden_units(L),
    }
    return ResultTable("search_moment_sweep", rows, SEARCH_TRUTH), resolved, []


def _run_smoothing_grid(config: ExperimentConfig, root: RngStream):
    m = _pick(config.replications, 20, 100, config.scale)
    n = _pick(config.n, 1000)
    J = _pick(config.J, 30)
    R = _pick(config.R, 50)
    budget = _pick(config.budget, 1700)
    lambdas = _pick(config.lambdas, (1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 15.0),
                    tuple(float(k) for k in range(1, 16)), config.scale)

    def job(r):
        stream = root.substream("rep", r)
        grid = generate_covariates(n, J, stream.substream("grid"))
        outcomes = simulate_search(DEFAULT_TRUE_PARAMS, grid, stream.substream("data"))
        rows = []
        for lam in lambdas:
            sub = stream.substream("lam", f"{lam:g}")
            t0 = time.perf_counter()
            result = smle_search(grid, outcomes, SmleSpec(lam=lam, R=R, budget=budget), sub)
            rows.extend(
                _smle_rows("smoothing_grid", f"lam={lam:g}", r, result,
                           time.perf_counter() - t0, sub.seed_path())
            )
        return rows

    results = _map_replications(m, config.threads, job)
    rows = tuple(row for sub in results for row in sub)
    resolved = {
        "scenario": "smoothing_grid", "scale": config.scale, "replications": m,
        "n": n, "J": J, "R": R, "budget": budget, "lambdas": list(lambdas),
    }
    return ResultTable("smoothing_grid", rows, SEARCH_TRUTH), resolved, []


def _run_search_rmse_vs_cost(config: ExperimentConfig, root: RngStream):
    m = _pick(config.replications, 3, 100, config.scale)
    n = _pick(config.n, 1000)
    J = _pick(config.J, 30)
    spec_id = _pick(config.spec_id, "m46")
    L_grid = _pick(config.L_grid, (2500, 10_000, 50_000, 200_000))
    R_grid = _pick(config.R_grid, (5, 25, 100, 400))
    lam = _pick(config.lam, 7.0)
    budget = _pick(config.budget, 1700)
    methods = _pick(config.methods, ("nne", "smle"))
    _check_methods(methods, ("nne", "smle"), "search_rmse_vs_cost")

    def job(r):
        stream = root.substream("rep", r)
        grid = generate_covariates(n, J, stream.substream("grid"))
        outcomes = simulate_search(DEFAULT_TRUE_PARAMS, grid, stream.substream("data"))
        m_obs = search_moments(grid, outcomes, spec_id)
        binding = search_binding(grid, spec_id)
        rows = []
        if "nne" in methods:
            for L in L_grid:
                sub = stream.substream("nne", "L", int(L))
                report = nne_estimate(binding, m_obs, L_star=int(L), rng=sub)
                rows.extend(_nne_rows("search_rmse_vs_cost", f"L={int(L)}", r, report, sub.seed_path()))
        if "smle" in methods:
            for R in R_grid:
                sub = stream.substream("smle", "R", int(R))
                t0 = time.perf_counter()
                result = smle_search(
                    grid, outcomes, SmleSpec(lam=lam, R=int(R), budget=budget), sub
                )
                rows.extend(
                    _smle_rows("search_rmse_vs_cost", f"R={int(R)}", r, result,
                               time.perf_counter() - t0, sub.seed_path())
                )
        return rows

    results = _map_replications(m, config.threads, job)
    rows = tuple(row for sub in results for row in sub)
    resolved = {
        "scenario": "search_rmse_vs_cost", "scale": config.scale, "replications": m,
        "n": n, "J": J, "spec_id": spec_id, "L_grid": list(L_grid),
        "R_grid": list(R_grid), "lam": lam, "budget": budget, "methods": list(methods),
    }
    return ResultTable("search_rmse_vs_cost", rows, SEARCH_TRUTH), resolved, []


def _run_search_data_size(config: ExperimentConfig, root: RngStream):
    m = _pick(config.replications, 3, 100, config.scale)
    J = _pick(config.J, 30)
    spec_id = _pick(config.spec_id, "m46")
    n_grid = _pick(config.n_grid, (500, 1000, 2500, 5000))
    lambdas = _pick(config.lambdas, (3.0, 7.0, 10.0))
    methods = _pick(config.methods, ("nne", "smle"))
    _check_methods(methods, ("nne", "smle"), "search_data_size")
    # pairs of (training budget, likelihood draws) with matched simulation
    # burdens: the simplex gets about L_star / R objective evaluations
    if config.L_star is not None or config.R is not None:
        pairs = ((_pick(config.L_star, 10_000), _pick(config.R, 15)),)
    elif config.scale == "desk":
        pairs = ((10_000, 15),)
    else:
        pairs = ((10_000, 15), (40_000, 50))
    budgets = tuple(
        _pick(config.budget, int(round(L / R))) for L, R in pairs
    )

    def job(r):
        stream = root.substream("rep", r)
        rows = []
        for n in n_grid:
            sub_n = stream.substream("n", int(n))
            grid = generate_covariates(int(n), J, sub_n.substream("grid"))
            outcomes = simulate_search(DEFAULT_TRUE_PARAMS, grid, sub_n.substream("data"))
            m_obs = search_moments(grid, outcomes, spec_id)
            binding = search_binding(grid, spec_id)
            for (L, R), budget in zip(pairs, budgets):
                if "nne" in methods:
                    sub = sub_n.substream("nne", "L", int(L))
                    report = nne_estimate(binding, m_obs, L_star=int(L), rng=sub)
                    rows.extend(
                        _nne_rows("search_data_size", f"n={int(n)}|L={int(L)}", r, report, sub.seed_path())
                    )
                if "smle" in methods:
                    for lam in lambdas:
                        sub = sub_n.substream("smle", "R", int(R), "lam", f"{lam:g}")
                        t0 = time.perf_counter()
                        result = smle_search(
                            grid, outcomes, SmleSpec(lam=lam, R=int(R), budget=budget), sub
                        )
                        rows.extend(
                            _smle_rows(
                                "search_data_size", f"n={int(n)}|R={int(R)}|lam={lam:g}",
                                r, result, time.perf_counter() - t0, sub.seed_path(),
                            )
                        )
        return rows

    results = _map_replications(m, config.threads, job)
    rows = tuple(row for sub in results for row in sub)
    resolved = {
        "scenario": "search_data_size", "scale": config.scale, "replications": m,
        "J": J, "spec_id": spec_id, "n_grid": list(n_grid),
        "burden_pairs": [list(p) for p in pairs],
        "budget": budgets[0] if len(budgets) == 1 else list(budgets),
        "lambdas": list(lambdas), "methods": list(methods),
    }
    return ResultTable("search_data_size", rows, SEARCH_TRUTH), resolved, []


def _run_theta_misspec(config: ExperimentConfig, root: RngStream):
    m = _pick(config.replications, 20, 100, config.scale)
    n = _pick(config.n, 1000)
    J = _pick(config.J, 30)
    L = _pick(config.L_star, 10_000)
    spec_id = _pick(config.spec_id, "m46")

    def job(r):
        stream = root.substream("rep", r)
        grid = generate_covariates(n, J, stream.substream("grid"))
        outcomes = simulate_search(DEFAULT_TRUE_PARAMS, grid, stream.substream("data"))
        m_obs = search_moments(grid, outcomes, spec_id)
        rows = []
        for lo, hi in DELTA0_RANGES:
            sub = stream.substream("range", f"{lo:g}_{hi:g}")
            report = nne_estimate(
                search_binding(grid, spec_id, space=_space_with_delta0(lo, hi)),
                m_obs, L_star=L, rng=sub,
            )
            rows.extend(
                _nne_rows("theta_misspec", f"d0[{lo:g},{hi:g}]", r, report, sub.seed_path())
            )
        return rows

    results = _map_replications(m, config.threads, job)
    rows = tuple(row for sub in results for row in sub)
    resolved = {
        "scenario": "theta_misspec", "scale": config.scale, "replications": m,
        "n": n, "J": J, "L_star": L, "spec_id": spec_id,
        "delta0_ranges": [list(p) for p in DELTA0_RANGES],
    }
    return ResultTable("theta_misspec", rows, SEARCH_TRUTH), resolved, []


# ---------------------------------------------------------------------------
# Scenarios that consume stored estimates
# ---------------------------------------------------------------------------


def _load_source_rows(paths) -> list:
    rows = []
    for path in paths:
        rows.extend(read_estimates_csv(path))
    return rows


def _vectors_by_replication(rows, method, spec=None) -> list:
    """Ordered list of full parameter vectors for one method (and spec)."""
    groups = {}
    order = []
    for row in rows:
        if row.method != method:
            continue
        if spec is not None and row.spec != spec:
            continue
        key = (row.seed_path.split(":")[0], row.spec, row.replication)
        if key not in groups:
            groups[key] = {}
            order.append(key)
        groups[key][row.parameter] = row.estimate
    vectors = []
    for key in order:
        params = groups[key]
        if set(params) != set(SEARCH_PARAM_NAMES):
            raise ConfigurationError(
                f"stored estimates for method {method!r} (replication {key[2]}) must carry "
                f"one row per search parameter; got {sorted(params)}"
            )
        vectors.append(np.array([params[name] for name in SEARCH_PARAM_NAMES], dtype=float))
    return vectors


def _run_counterfactual(config: ExperimentConfig, root: RngStream):
    m = _pick(config.replications, 20, 100, config.scale)
    n = _pick(config.n, 1000)
    J = _pick(config.J, 30)
    L = _pick(config.L_star, 10_000)
    R = _pick(config.R, 50)
    budget = _pick(config.budget, 1700)
    n_eval = _pick(config.n_eval, 100_000)
    spec_id = _pick(config.spec_id, "m46")
    lambdas = config.lambdas if config.lambdas is not None else (3.0, 7.0, 10.0)
    methods = _pick(config.methods, ("truth", "nne", "smle"))
    _check_methods(methods, ("truth", "nne", "smle"), "counterfactual")
    if not lambdas and "smle" in methods:
        methods = tuple(meth for meth in methods if meth != "smle")

    nne_vecs = []
    smle_vecs = {lam: [] for lam in lambdas}
    if config.source is not None:
        stored = _load_source_rows(config.source)
        if "nne" in methods:
            nne_vecs = _vectors_by_replication(stored, "nne")
            if not nne_vecs:
                raise ConfigurationError("no stored nne estimates found in source files")
        if "smle" in methods:
            for lam in lambdas:
                smle_vecs[lam] = _vectors_by_replication(stored, "smle", spec=f"lam={lam:g}")
                if not smle_vecs[lam]:
                    raise ConfigurationError(
                        f"no stored smle estimates with spec 'lam={lam:g}' found in source files"
                    )
    else:
        # no stored estimates: fit both estimators on fresh simulated data,
        # sharing one dataset per replication across methods
        def fit_job(r):
            stream = root.substream("fit", "rep", r)
            grid = generate_covariates(n, J, stream.substream("grid"))
            outcomes = simulate_search(DEFAULT_TRUE_PARAMS, grid, stream.substream("data"))
            out = {}
            if "nne" in methods:
                report = nne_estimate(
                    search_binding(grid, spec_id), search_moments(grid, outcomes, spec_id),
                    L_star=L, rng=stream.substream("nne"),
                )
                out["nne"] = np.asarray(report.theta_hat, dtype=float)
            if "smle" in methods:
                for lam in lambdas:
                    result = smle_search(
                        grid, outcomes, SmleSpec(lam=lam, R=R, budget=budget),
                        stream.substream("smle", f"{lam:g}"),
                    )
                    out[("smle", lam)] = np.asarray(result.theta, dtype=float)
            return out

        fits = _map_replications(m, config.threads, fit_job)
        for fit in fits:
            if "nne" in fit:
                nne_vecs.append(fit["nne"])
            for lam in lambdas:
                if ("smle", lam) in fit:
                    smle_vecs[lam].append(fit[("smle", lam)])

    m_use = m
    if "nne" in methods:
        m_use = min(m_use, len(nne_vecs))
    if "smle" in methods:
        for lam in lambdas:
            m_use = min(m_use, len(smle_vecs[lam]))
    if m_use == 0:
        raise ConfigurationError("no replications available for the counterfactual")

    def cf_job(r):
        stream = root.substream("rep", r)
        eval_grid = generate_covariates(n_eval, J, stream.substream("eval_grid"))
        # one shared draw stream: methods differ only through the parameter
        draws = stream.substream("cf_draws")
        rows = []

        def add(method, spec, params):
            t0 = time.perf_counter()
            increase = counterfactual_zero_cost(params, eval_grid, draws)
            rows.append(
                EstimateRow(
                    scenario="counterfactual", method=method, spec=spec, replication=r,
                    parameter="buy_rate_increase", estimate=float(increase),
                    accuracy=None, runtime_s=time.perf_counter() - t0,
                    sim_burden=2, seed_path=stream.seed_path(),
                )
            )

        if "truth" in methods:
            add("truth", "", DEFAULT_TRUE_PARAMS)
        if "nne" in methods:
            add("nne", spec_id, SearchParams.from_vector(nne_vecs[r]))
        if "smle" in methods:
            for lam in lambdas:
                add("smle", f"lam={lam:g}", SearchParams.from_vector(smle_vecs[lam][r]))
        return rows

    results = _map_replications(m_use, config.threads, cf_job)
    rows = tuple(row for sub in results for row in sub)
    resolved = {
        "scenario": "counterfactual", "scale": config.scale, "replications": m_use,
        "n_eval": n_eval, "J": J, "lambdas": list(lambdas), "methods": list(methods),
        "spec_id": spec_id,
        "source": list(config.source) if config.source is not None else None,
    }
    return ResultTable("counterfactual", rows, None), resolved, []


def _run_accuracy_calibration(config: ExperimentConfig, root: RngStream):
    if config.source is not None:
        rows = [row for row in _load_source_rows(config.source) if row.method == "nne"]
        if not rows:
            raise ConfigurationError("no stored nne estimates found in source files")
        resolved_source = list(config.source)
    else:
        table, _, _ = _run_search_mc(config, root)
        rows = list(table.rows)
        resolved_source = None

    by_param = {name: {"est": [], "sd": []} for name in SEARCH_PARAM_NAMES}
    for row in rows:
        if row.parameter not in by_param:
            raise ConfigurationError(
                f"unexpected parameter {row.parameter!r}; calibration expects search estimates"
            )
        by_param[row.parameter]["est"].append(row.estimate)
        if row.accuracy is None:
            raise ConfigurationError("stored estimates must carry reported accuracy values")
        by_param[row.parameter]["sd"].append(row.accuracy)

    cal_rows = []
    for name in SEARCH_PARAM_NAMES:
        ests = np.array(by_param[name]["est"], dtype=float)
        sds = np.array(by_param[name]["sd"], dtype=float)
        if ests.size < 2:
            raise ConfigurationError("calibration needs at least two replications per parameter")
        mc_sd = float(ests.std(ddof=1))
        reported = float(sds.mean())
        cal_rows.append(
            (name, str(ests.size), _fmt(mc_sd), _fmt(reported),
             _fmt(reported / mc_sd if mc_sd > 0 else float("inf")))
        )

    resolved = {
        "scenario": "accuracy_calibration", "scale": config.scale,
        "source": resolved_source,
    }
    extras = [(
        "calibration.csv",
        _csv_text(("parameter", "n_reps", "mc_sd", "reported_sd_mean", "ratio"), cal_rows),
    )]
    return ResultTable("accuracy_calibration", tuple(rows), SEARCH_TRUTH), resolved, extras


def _run_real_data(config: ExperimentConfig, root: RngStream):
    if config.data_path is None:
        raise ConfigurationError("real_data requires data_path pointing at a session CSV")
    B = _pick(config.replications, 20, 100, config.scale)
    L = _pick(config.L_star, 10_000)
    spec_id = _pick(config.spec_id, "m46")

    grid, outcomes = ingest_search_csv(config.data_path)
    n = grid.n

    full_stream = root.substream("full")
    report = nne_estimate(
        search_binding(grid, spec_id), search_moments(grid, outcomes, spec_id),
        L_star=L, rng=full_stream,
    )
    rows = _nne_rows("real_data", spec_id, 0, report, full_stream.seed_path())
    fit_rows = []
    observed = _key_stats(grid, outcomes)
    for stat in KEY_FIT_STATS:
        fit_rows.append(("0", stat, "data", _fmt(observed[stat])))

    def job(b):
        stream = root.substream("boot", b + 1)
        idx = stream.substream("resample").generator().integers(0, n, size=n)
        bgrid = _grid_subset(grid, idx)
        bout = [outcomes[i] for i in idx]
        boot_report = nne_estimate(
            search_binding(bgrid, spec_id), search_moments(bgrid, bout, spec_id),
            L_star=L, rng=stream.substream("nne"),
        )
        refit = simulate_search(
            SearchParams.from_vector(boot_report.theta_hat), bgrid, stream.substream("fit")
        )
        stats = _key_stats(bgrid, refit)
        boot_rows = _nne_rows("real_data", spec_id, b + 1, boot_report, stream.seed_path())
        stat_rows = [(str(b + 1), stat, "model", _fmt(stats[stat])) for stat in KEY_FIT_STATS]
        return boot_rows, stat_rows

    results = _map_replications(B, config.threads, job)
    for boot_rows, stat_rows in results:
        rows.extend(boot_rows)
        fit_rows.extend(stat_rows)
    resolved = {
        "scenario": "real_data", "scale": config.scale, "bootstraps": B,
        "L_star": L, "spec_id": spec_id, "data_path": config.data_path,
        "sessions": n,
    }
    extras = [("fit_stats.csv", _csv_text(("replication", "stat", "source", "value"), fit_rows))]
    return ResultTable("real_data", tuple(rows), None), resolved, extras


_RUNNERS = {
    "ar1_table2": _run_ar1_table2,
    "ar1_fig3_curves": _run_ar1_fig3_curves,
    "search_mc": _run_search_mc,
    "search_rmse_vs_cost": _run_search_rmse_vs_cost,
    "search_moment_sweep": _run_search_moment_sweep,
    "search_data_size": _run_search_data_size,
    "smoothing_grid": _run_smoothing_grid,
    "theta_misspec": _run_theta_misspec,
    "accuracy_calibration": _run_accuracy_calibration,
    "counterfactual": _run_counterfactual,
    "real_data": _run_real_data,
}


def run_experiment(config: ExperimentConfig) -> ResultTable:
    """Execute one scenario; write estimates, summary, sidecar, and any
    scenario-specific exports under ``config.out_dir`` when it is set."""
    runner = _RUNNERS[config.scenario]
    out_dir = config.out_dir
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    table, resolved, extras = runner(config, RngStream(config.seed))
    if out_dir is not None:
        write_estimates_csv(os.path.join(out_dir, "estimates.csv"), table.rows)
        write_summary_csv(os.path.join(out_dir, "summary.csv"), summarize(table.rows, table.truth))
        write_sidecar(os.path.join(out_dir, "run.json"), resolved, config.seed)
        for name, text in extras:
            with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
    return table
