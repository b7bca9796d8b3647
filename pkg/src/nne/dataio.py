"""CSV and JSON persistence for search data and estimation results.

Search-session data travels as a flat CSV (one row per option shown), with
sessions of different lengths padded into the rectangular
:class:`~nne.search.ConsumerGrid` on ingestion. Estimation results travel as
a flat CSV with one row per (replication, parameter) plus a JSON sidecar
recording the configuration and master seed. All writers are deterministic:
the same inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Union

import numpy as np

from .search import ConsumerGrid, SearchOutcome

SEARCH_CSV_COLUMNS = (
    "session_id",
    "option_rank",
    "stars",
    "review",
    "location",
    "chain",
    "promotion",
    "log_price",
    "searched",
    "bought",
)

ESTIMATES_CSV_COLUMNS = (
    "scenario",
    "method",
    "spec",
    "replication",
    "parameter",
    "estimate",
    "accuracy",
    "runtime_s",
    "sim_burden",
    "seed_path",
)

_FLOAT_FIELDS = ("stars", "review", "location", "chain", "promotion", "log_price")


def _fmt(x: float) -> str:
    """Shortest decimal string that round-trips the float exactly."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# Search-session CSV


@dataclass
class _Session:
    sid: str
    first_row: int
    rows: List[dict]


def _parse_binary(value: str, column: str, row_no: int) -> bool:
    if value == "0":
        return False
    if value == "1":
        return True
    raise ValueError(f"row {row_no}: {column} must be 0 or 1, got {value!r}")


def ingest_search_csv(path) -> tuple:
    """Read search sessions from ``path`` into a grid and outcomes.

    Sessions appear in the output in order of first appearance; options are
    arranged by rank. Sessions may show different numbers of options; shorter
    ones are padded and masked via ``grid.valid``. Search order is not
    recorded in this format, so each outcome's ``search_order`` is
    reconstructed as "searched options in rank order" and flagged
    ``order_observed=False``.

    Raises ``ValueError`` with the offending row number for malformed rows,
    and with the session id for violated session-level invariants
    (ranks form a permutation of 1..J, at least one search, at most one
    purchase, purchase implies search).
    """
    path = Path(path)
    sessions: dict = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty file: expected a header row") from None
        if tuple(h.strip() for h in header) != SEARCH_CSV_COLUMNS:
            raise ValueError(
                "header must be exactly: " + ",".join(SEARCH_CSV_COLUMNS)
            )
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SEARCH_CSV_COLUMNS):
                raise ValueError(
                    f"row {row_no}: expected {len(SEARCH_CSV_COLUMNS)} fields, "
                    f"got {len(row)}"
                )
            rec = dict(zip(SEARCH_CSV_COLUMNS, (f.strip() for f in row)))
            sid = rec["session_id"]
            if not sid:
                raise ValueError(f"row {row_no}: session_id must be non-empty")
            try:
                rank = int(rec["option_rank"])
            except ValueError:
                raise ValueError(
                    f"row {row_no}: option_rank must be an integer, "
                    f"got {rec['option_rank']!r}"
                ) from None
            parsed = {"rank": rank, "row_no": row_no}
            for field in _FLOAT_FIELDS:
                try:
                    parsed[field] = float(rec[field])
                except ValueError:
                    raise ValueError(
                        f"row {row_no}: {field} must be a number, got {rec[field]!r}"
                    ) from None
            parsed["searched"] = _parse_binary(rec["searched"], "searched", row_no)
            parsed["bought"] = _parse_binary(rec["bought"], "bought", row_no)
            session = sessions.get(sid)
            if session is None:
                sessions[sid] = session = _Session(sid, row_no, [])
            session.rows.append(parsed)

    if not sessions:
        raise ValueError("file contains a header but no data rows")

    for s in sessions.values():
        _validate_session(s)

    j_max = max(len(s.rows) for s in sessions.values())
    n = len(sessions)
    arrays = {f: np.zeros((n, j_max)) for f in _FLOAT_FIELDS}
    rank = np.ones((n, j_max), dtype=np.int64)
    valid = np.zeros((n, j_max), dtype=bool)
    outcomes = []
    for i, s in enumerate(sessions.values()):
        rows = sorted(s.rows, key=lambda r: r["rank"])
        j = len(rows)
        for field in _FLOAT_FIELDS:
            arrays[field][i, :j] = [r[field] for r in rows]
        rank[i, :j] = [r["rank"] for r in rows]
        valid[i, :j] = True
        searched = np.zeros(j_max, dtype=bool)
        bought = np.zeros(j_max, dtype=bool)
        searched[:j] = [r["searched"] for r in rows]
        bought[:j] = [r["bought"] for r in rows]
        outcomes.append(
            SearchOutcome(
                searched=searched,
                bought=bought,
                search_order=tuple(int(t) for t in np.nonzero(searched)[0]),
                order_observed=False,
            )
        )

    grid = ConsumerGrid(rank=rank, valid=valid, **arrays)
    return grid, outcomes


def _validate_session(s: _Session) -> None:
    seen = {}
    for r in s.rows:
        if r["rank"] in seen:
            raise ValueError(
                f"row {r['row_no']}: session {s.sid!r}: duplicate option rank "
                f"{r['rank']} (first at row {seen[r['rank']]})"
            )
        seen[r["rank"]] = r["row_no"]
    j = len(s.rows)
    if sorted(seen) != list(range(1, j + 1)):
        raise ValueError(
            f"session {s.sid!r} (rows {s.first_row}..{s.first_row + j - 1}): "
            f"option ranks must be a permutation of 1..{j}"
        )
    if not any(r["searched"] for r in s.rows):
        raise ValueError(
            f"session {s.sid!r} (first row {s.first_row}): "
            "needs at least one search"
        )
    n_bought = sum(r["bought"] for r in s.rows)
    if n_bought > 1:
        raise ValueError(
            f"session {s.sid!r} (first row {s.first_row}): "
            "at most one purchase is allowed"
        )
    for r in s.rows:
        if r["bought"] and not r["searched"]:
            raise ValueError(
                f"row {r['row_no']}: session {s.sid!r}: "
                "the bought option was not searched"
            )


def write_search_csv(
    path,
    grid: ConsumerGrid,
    outcomes: Sequence[SearchOutcome],
    session_ids: Optional[Sequence[str]] = None,
    append: bool = False,
) -> None:
    """Write sessions as the flat one-row-per-option CSV.

    Options are written in rank order; invalid (padding) cells are skipped.
    ``session_ids`` defaults to the 1-based session index as a string.
    ``append=True`` adds rows to an existing file without a second header.
    """
    path = Path(path)
    if session_ids is None:
        session_ids = [str(i + 1) for i in range(grid.n)]
    if len(session_ids) != grid.n or len(outcomes) != grid.n:
        raise ValueError("session_ids and outcomes must have one entry per consumer")
    mode = "a" if append else "w"
    with path.open(mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(SEARCH_CSV_COLUMNS)
        for i in range(grid.n):
            cols = [j for j in range(grid.j_max) if grid.valid[i, j]]
            cols.sort(key=lambda j: grid.rank[i, j])
            for j in cols:
                writer.writerow(
                    [
                        session_ids[i],
                        int(grid.rank[i, j]),
                        _fmt(grid.stars[i, j]),
                        _fmt(grid.review[i, j]),
                        _fmt(grid.location[i, j]),
                        _fmt(grid.chain[i, j]),
                        _fmt(grid.promotion[i, j]),
                        _fmt(grid.log_price[i, j]),
                        int(outcomes[i].searched[j]),
                        int(outcomes[i].bought[j]),
                    ]
                )


# ---------------------------------------------------------------------------
# Estimates CSV and config sidecar


@dataclass(frozen=True)
class EstimateRow:
    """One estimated parameter from one replication of one method."""

    scenario: str
    method: str
    spec: str
    replication: int
    parameter: str
    estimate: float
    accuracy: Optional[float]
    runtime_s: float
    sim_burden: int
    seed_path: str


def write_estimates_csv(path, rows: Sequence[EstimateRow]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ESTIMATES_CSV_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.scenario,
                    r.method,
                    r.spec,
                    r.replication,
                    r.parameter,
                    _fmt(r.estimate),
                    "" if r.accuracy is None else _fmt(r.accuracy),
                    _fmt(r.runtime_s),
                    r.sim_burden,
                    r.seed_path,
                ]
            )


def read_estimates_csv(path) -> List[EstimateRow]:
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ESTIMATES_CSV_COLUMNS:
            raise ValueError(
                "header must be exactly: " + ",".join(ESTIMATES_CSV_COLUMNS)
            )
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(ESTIMATES_CSV_COLUMNS):
                raise ValueError(
                    f"row {row_no}: expected {len(ESTIMATES_CSV_COLUMNS)} fields, "
                    f"got {len(row)}"
                )
            out.append(
                EstimateRow(
                    scenario=row[0],
                    method=row[1],
                    spec=row[2],
                    replication=int(row[3]),
                    parameter=row[4],
                    estimate=float(row[5]),
                    accuracy=None if row[6] == "" else float(row[6]),
                    runtime_s=float(row[7]),
                    sim_burden=int(row[8]),
                    seed_path=row[9],
                )
            )
    return out


def write_sidecar(path, config: Mapping, seed: Union[int, str]) -> None:
    """JSON sidecar recording what produced a result file."""
    path = Path(path)
    payload = {"config": dict(config), "seed": seed}
    path.write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
