"""Search-data CSV ingestion/writing, estimates CSV, and JSON sidecars."""

import json

import numpy as np
import pytest

from nne.core import RngStream
from nne.dataio import (
    EstimateRow,
    ingest_search_csv,
    read_estimates_csv,
    write_estimates_csv,
    write_search_csv,
    write_sidecar,
)
from nne.search import DEFAULT_TRUE_PARAMS, generate_covariates, simulate_search

HEADER = (
    "session_id,option_rank,stars,review,location,chain,promotion,"
    "log_price,searched,bought"
)


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _two_session_text():
    return "\n".join(
        [
            HEADER,
            "a,1,4.0,4.5,3.9,1,0,0.2,1,0",
            "a,2,3.0,4.0,4.1,0,1,0.1,1,1",
            "a,3,5.0,3.5,4.0,1,1,-0.3,0,0",
            "b,1,2.0,5.0,4.2,1,0,0.5,1,0",
            "b,2,3.0,3.0,3.8,0,0,0.0,0,0",
            "",
        ]
    )


def test_ingest_two_sessions(tmp_path):
    grid, outcomes = ingest_search_csv(_write(tmp_path, _two_session_text()))
    assert grid.n == 2
    assert grid.j_max == 3
    assert grid.counts().tolist() == [3, 2]
    assert grid.valid[1].tolist() == [True, True, False]
    # columns are rank-ordered
    assert grid.rank[0].tolist() == [1, 2, 3]
    assert grid.stars[0].tolist() == [4.0, 3.0, 5.0]
    assert grid.log_price[1, 0] == 0.5
    out_a, out_b = outcomes
    assert out_a.searched.tolist() == [True, True, False]
    assert out_a.bought.tolist() == [False, True, False]
    assert out_a.search_order == (0, 1)
    assert not out_a.order_observed
    assert out_b.searched.tolist() == [True, False, False]
    assert not out_b.bought.any()


def test_ingest_requires_exact_header(tmp_path):
    path = _write(tmp_path, "session,rank\na,1\n")
    with pytest.raises(ValueError, match="header"):
        ingest_search_csv(path)


def test_ingest_rejects_wrong_field_count(tmp_path):
    text = HEADER + "\na,1,4.0,4.5,3.9,1,0,0.2,1\n"
    with pytest.raises(ValueError, match="row 2.*10 fields"):
        ingest_search_csv(_write(tmp_path, text))


def test_ingest_rejects_non_numeric(tmp_path):
    text = HEADER + "\na,1,4.0,bad,3.9,1,0,0.2,1,0\n"
    with pytest.raises(ValueError, match="row 2.*review"):
        ingest_search_csv(_write(tmp_path, text))


def test_ingest_rejects_searched_outside_binary(tmp_path):
    text = HEADER + "\na,1,4.0,4.5,3.9,1,0,0.2,2,0\n"
    with pytest.raises(ValueError, match="row 2.*searched"):
        ingest_search_csv(_write(tmp_path, text))


def test_ingest_rejects_bought_without_search(tmp_path):
    text = "\n".join(
        [
            HEADER,
            "a,1,4.0,4.5,3.9,1,0,0.2,1,0",
            "a,2,3.0,4.0,4.1,0,1,0.1,0,1",
            "",
        ]
    )
    with pytest.raises(ValueError, match="row 3.*session 'a'.*not searched"):
        ingest_search_csv(_write(tmp_path, text))


def test_ingest_rejects_duplicate_rank(tmp_path):
    text = "\n".join(
        [
            HEADER,
            "a,1,4.0,4.5,3.9,1,0,0.2,1,0",
            "a,1,3.0,4.0,4.1,0,1,0.1,0,0",
            "",
        ]
    )
    with pytest.raises(ValueError, match="row 3.*session 'a'.*rank"):
        ingest_search_csv(_write(tmp_path, text))


def test_ingest_rejects_rank_gap(tmp_path):
    text = "\n".join(
        [
            HEADER,
            "a,1,4.0,4.5,3.9,1,0,0.2,1,0",
            "a,3,3.0,4.0,4.1,0,1,0.1,0,0",
            "",
        ]
    )
    with pytest.raises(ValueError, match="session 'a'.*permutation"):
        ingest_search_csv(_write(tmp_path, text))


def test_ingest_rejects_no_search(tmp_path):
    text = "\n".join(
        [
            HEADER,
            "a,1,4.0,4.5,3.9,1,0,0.2,1,0",
            "b,1,3.0,4.0,4.1,0,1,0.1,0,0",
            "",
        ]
    )
    with pytest.raises(ValueError, match="session 'b'.*at least one search"):
        ingest_search_csv(_write(tmp_path, text))


def test_ingest_rejects_two_purchases(tmp_path):
    text = "\n".join(
        [
            HEADER,
            "a,1,4.0,4.5,3.9,1,0,0.2,1,1",
            "a,2,3.0,4.0,4.1,0,1,0.1,1,1",
            "",
        ]
    )
    with pytest.raises(ValueError, match="session 'a'.*one purchase"):
        ingest_search_csv(_write(tmp_path, text))


def test_variable_option_counts_pad_with_valid_mask(tmp_path):
    rng = RngStream(11, ("dataio",))
    grid33 = generate_covariates(3, 33, rng.substream("g33"))
    grid34 = generate_covariates(2, 34, rng.substream("g34"))
    out33 = simulate_search(DEFAULT_TRUE_PARAMS, grid33, rng.substream("o33"))
    out34 = simulate_search(DEFAULT_TRUE_PARAMS, grid34, rng.substream("o34"))

    path = tmp_path / "mixed.csv"
    write_search_csv(path, grid33, out33, session_ids=["a1", "a2", "a3"])
    write_search_csv(path, grid34, out34, session_ids=["b1", "b2"], append=True)

    grid, outcomes = ingest_search_csv(path)
    assert grid.n == 5
    assert grid.j_max == 34
    assert grid.counts().tolist() == [33, 33, 33, 34, 34]
    assert not grid.valid[0, 33]
    assert len(outcomes) == 5
    np.testing.assert_array_equal(outcomes[3].searched, out34[0].searched)


def test_search_csv_round_trip_exact(tmp_path):
    rng = RngStream(7, ("dataio", "rt"))
    grid = generate_covariates(6, 5, rng.substream("grid"))
    outcomes = simulate_search(DEFAULT_TRUE_PARAMS, grid, rng.substream("eps"))
    path = tmp_path / "rt.csv"
    write_search_csv(path, grid, outcomes)
    grid2, outcomes2 = ingest_search_csv(path)

    for name in ("stars", "review", "location", "chain", "promotion", "log_price"):
        np.testing.assert_array_equal(getattr(grid2, name), getattr(grid, name))
    np.testing.assert_array_equal(grid2.rank, grid.rank)
    np.testing.assert_array_equal(grid2.valid, grid.valid)
    for o, o2 in zip(outcomes, outcomes2):
        np.testing.assert_array_equal(o2.searched, o.searched)
        np.testing.assert_array_equal(o2.bought, o.bought)
        assert set(o2.search_order) == set(o.search_order)
        assert o.order_observed and not o2.order_observed


def test_search_csv_write_is_deterministic(tmp_path):
    rng = RngStream(7, ("dataio", "det"))
    grid = generate_covariates(4, 6, rng.substream("grid"))
    outcomes = simulate_search(DEFAULT_TRUE_PARAMS, grid, rng.substream("eps"))
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_search_csv(p1, grid, outcomes)
    write_search_csv(p2, grid, outcomes)
    assert p1.read_bytes() == p2.read_bytes()


def test_estimates_csv_round_trip(tmp_path):
    rows = [
        EstimateRow(
            scenario="search_mc",
            method="nne",
            spec="m46",
            replication=0,
            parameter="beta_stars",
            estimate=0.1234567890123,
            accuracy=0.01,
            runtime_s=1.5,
            sim_burden=10_000,
            seed_path="7:search_mc/0",
        ),
        EstimateRow(
            scenario="search_mc",
            method="smle",
            spec="lam7",
            replication=1,
            parameter="delta0",
            estimate=-3.75,
            accuracy=None,
            runtime_s=20.25,
            sim_burden=25_000,
            seed_path="7:search_mc/1",
        ),
    ]
    path = tmp_path / "estimates.csv"
    write_estimates_csv(path, rows)

    text = path.read_text(encoding="utf-8")
    assert text.splitlines()[0] == (
        "scenario,method,spec,replication,parameter,estimate,accuracy,"
        "runtime_s,sim_burden,seed_path"
    )
    assert read_estimates_csv(path) == rows


def test_estimates_csv_blank_accuracy_means_none(tmp_path):
    path = tmp_path / "estimates.csv"
    write_estimates_csv(
        path,
        [
            EstimateRow(
                "s", "gmm", "d", 0, "beta", 0.5, None, 0.0, 100, "1:s/0"
            )
        ],
    )
    assert ",0.5,," in path.read_text(encoding="utf-8")
    assert read_estimates_csv(path)[0].accuracy is None


def test_sidecar_holds_config_and_seed(tmp_path):
    path = tmp_path / "run.json"
    write_sidecar(path, {"scenario": "search_mc", "n": 1000, "zeta": [1, 2]}, seed=99)
    payload = json.loads(path.read_text(encoding="utf-8"))
    assert payload == {
        "config": {"scenario": "search_mc", "n": 1000, "zeta": [1, 2]},
        "seed": 99,
    }
    # keys are sorted so reruns are byte-identical
    text = path.read_text(encoding="utf-8")
    assert text.index('"config"') < text.index('"seed"')
    assert text.index('"n"') < text.index('"scenario"') < text.index('"zeta"')
