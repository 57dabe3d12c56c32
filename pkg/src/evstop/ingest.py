"""Parsing and organization of per-sample validation log-likelihood records.

The canonical record is one model evaluation on the validation set: the
chain it belongs to, whether it is the optimized warmstart or a posterior
sample, its index within the chain, and the per-point log-likelihoods.
Per-point values (rather than pre-summed totals) are the canonical input
because the stopping rule needs only row sums while ensemble predictive
density needs the points, so one format serves both.

Two wire formats with identical semantics, auto-detected by the first
non-blank character of the stream:

* JSON lines: ``{"chain": "c0", "kind": "sample", "index": 3,
  "loglik": [-1.25, -0.5]}``
* compact CSV: ``c0,sample,3,-1.25,-0.5`` (an optional header line
  ``chain,kind,index,...`` is skipped; chain ids must not contain commas)

Floats are serialized with shortest round-trip precision, so a table
written and re-parsed is bit-identical.

Sample index 0 is reserved for the warmstart; posterior samples are
numbered from 1.  Whichever reference mode is selected, the reference
plays the role of sample 1 in the test's own numbering and tested
samples are numbered from 2 (see :mod:`evstop.eprocess`).
"""

from __future__ import annotations

import enum
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .eprocess import FIRST_TESTED_INDEX, LogRatioStep, step_log_evalue
from .errors import ConfigError, DataError

KIND_WARMSTART = "warmstart"
KIND_SAMPLE = "sample"

_CSV_HEADER_PREFIX = ("chain,kind,index", "chain, kind, index")


class ReferenceMode(enum.Enum):
    """Which model plays the reference in the likelihood-ratio test."""

    #: The optimized warmstart solution (tests whether sampling beats it).
    DE_WARMSTART = "de_warmstart"
    #: The chain's first posterior draw (tests whether the chain improves
    #: on its own post-warmup state).
    FIRST_SAMPLE = "first_sample"


@dataclass(frozen=True)
class LogLikRecord:
    """One parsed record: a model's per-point validation log-likelihoods."""

    chain_id: str
    kind: str
    sample_index: int
    loglik: tuple[float, ...]


@dataclass(eq=False)
class LogLikTable:
    """Per-chain matrix of log-likelihood rows, one row per sample.

    ``sample_rows[p - 1]`` is the row at chain position ``p`` (1-based);
    ``source_indices[p - 1]`` is the original sample index that row came
    from, which differs from ``p`` only after thinning.
    """

    chain_id: str
    warmstart_row: Optional[np.ndarray]
    sample_rows: np.ndarray  # shape (n_samples, m)
    m: int
    source_indices: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.source_indices:
            self.source_indices = tuple(range(1, self.n_samples + 1))
        if len(self.source_indices) != self.n_samples:
            raise DataError(
                f"chain {self.chain_id!r}: source index map has "
                f"{len(self.source_indices)} entries for {self.n_samples} rows"
            )

    @property
    def n_samples(self) -> int:
        return int(self.sample_rows.shape[0])

    def row_at_position(self, position: int) -> np.ndarray:
        """Row at 1-based chain position ``position``."""
        if not 1 <= position <= self.n_samples:
            raise DataError(
                f"chain {self.chain_id!r} has no sample at position {position}"
            )
        return self.sample_rows[position - 1]

    def row_for_source_index(self, source_index: int) -> np.ndarray:
        """Row whose original sample index is ``source_index``."""
        try:
            pos = self.source_indices.index(source_index)
        except ValueError:
            raise DataError(
                f"chain {self.chain_id!r} has no sample with original "
                f"index {source_index}"
            ) from None
        return self.sample_rows[pos]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LogLikTable):
            return NotImplemented
        if self.chain_id != other.chain_id or self.m != other.m:
            return False
        if (self.warmstart_row is None) != (other.warmstart_row is None):
            return False
        if self.warmstart_row is not None and not np.array_equal(
            self.warmstart_row, other.warmstart_row
        ):
            return False
        return (
            np.array_equal(self.sample_rows, other.sample_rows)
            and self.source_indices == other.source_indices
        )


def _iter_lines(source: Union[str, bytes, IO, Iterable[str]]) -> Iterator[str]:
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        yield from io.StringIO(source)
    else:
        for line in source:
            yield line.decode("utf-8") if isinstance(line, bytes) else line


def _parse_float_list(
    raw: Sequence, line_no: int, clamp_floor: Optional[float]
) -> tuple[tuple[float, ...], int]:
    values = []
    clamped = 0
    for i, item in enumerate(raw):
        try:
            x = float(item)
        except (TypeError, ValueError):
            raise DataError(
                f"line {line_no}: log-likelihood entry {i} is not a number: {item!r}"
            ) from None
        if math.isnan(x) or x == math.inf:
            raise DataError(
                f"line {line_no}: non-finite log-likelihood at point {i}: {x}"
            )
        if x == -math.inf or (clamp_floor is not None and x < clamp_floor):
            if clamp_floor is None:
                raise DataError(
                    f"line {line_no}: log-likelihood is -inf at point {i} "
                    "(zero predictive density); pass a clamp floor to accept"
                )
            x = clamp_floor
            clamped += 1
        values.append(x)
    if not values:
        raise DataError(f"line {line_no}: empty log-likelihood row")
    return tuple(values), clamped


def _parse_json_line(line: str, line_no: int) -> tuple[str, str, int, list]:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"line {line_no}: invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise DataError(f"line {line_no}: expected a JSON object")
    missing = {"chain", "kind", "index", "loglik"} - obj.keys()
    if missing:
        raise DataError(f"line {line_no}: missing fields {sorted(missing)}")
    if not isinstance(obj["loglik"], list):
        raise DataError(f"line {line_no}: 'loglik' must be an array")
    return obj["chain"], obj["kind"], obj["index"], obj["loglik"]


def _parse_csv_line(line: str, line_no: int) -> tuple[str, str, int, list]:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) < 4:
        raise DataError(
            f"line {line_no}: expected chain,kind,index,ll_1,... "
            f"got {len(parts)} fields"
        )
    return parts[0], parts[1], parts[2], parts[3:]


def parse_records(
    source: Union[str, bytes, IO, Iterable[str]],
    clamp_floor: Optional[float] = None,
) -> list[LogLikRecord]:
    """Parse line-delimited records from text, bytes, or a line iterable.

    The format (JSON lines vs CSV) is detected from the first non-blank
    character.  Every non-empty line must parse or a :class:`DataError`
    carrying the line number is raised.  ``clamp_floor`` opts in to
    replacing ``-inf`` (and anything below the floor) with the floor,
    with a warning; without it a ``-inf`` entry is a hard error, since a
    single zero density silently dominates the likelihood-ratio test.

    Also enforced while streaming: valid kinds, warmstart index 0 /
    sample index >= 1, per-chain row-length consistency, and uniqueness
    of (chain, index) with both offending line numbers reported.
    """
    records: list[LogLikRecord] = []
    seen: dict[tuple[str, int], int] = {}
    chain_m: dict[str, tuple[int, int]] = {}  # chain -> (m, first line)
    total_clamped = 0
    parse_line = None

    for line_no, raw_line in enumerate(_iter_lines(source), start=1):
        line = raw_line.strip()
        if not line:
            continue
        if parse_line is None:
            parse_line = _parse_json_line if line[0] == "{" else _parse_csv_line
        if parse_line is _parse_csv_line and line.lower().startswith(
            _CSV_HEADER_PREFIX
        ):
            continue

        chain, kind, index_raw, loglik_raw = parse_line(line, line_no)
        if not isinstance(chain, str) or not chain:
            raise DataError(f"line {line_no}: chain id must be a non-empty string")
        if kind not in (KIND_WARMSTART, KIND_SAMPLE):
            raise DataError(
                f"line {line_no}: unknown kind {kind!r} "
                f"(expected '{KIND_WARMSTART}' or '{KIND_SAMPLE}')"
            )
        try:
            index = int(index_raw)
        except (TypeError, ValueError):
            raise DataError(
                f"line {line_no}: index must be an integer, got {index_raw!r}"
            ) from None
        if kind == KIND_WARMSTART and index != 0:
            raise DataError(f"line {line_no}: warmstart records must have index 0")
        if kind == KIND_SAMPLE and index < 1:
            raise DataError(
                f"line {line_no}: sample records are numbered from 1, got {index}"
            )

        key = (chain, index)
        if key in seen:
            raise DataError(
                f"line {line_no}: duplicate record for chain {chain!r} "
                f"index {index} (first seen on line {seen[key]})"
            )
        seen[key] = line_no

        loglik, clamped = _parse_float_list(loglik_raw, line_no, clamp_floor)
        total_clamped += clamped
        if chain in chain_m:
            m, first_line = chain_m[chain]
            if len(loglik) != m:
                raise DataError(
                    f"line {line_no}: chain {chain!r} has {len(loglik)} "
                    f"log-likelihood points but line {first_line} had {m}"
                )
        else:
            chain_m[chain] = (len(loglik), line_no)

        records.append(LogLikRecord(chain, kind, index, loglik))

    if total_clamped:
        warnings.warn(
            f"clamped {total_clamped} log-likelihood entries below "
            f"{clamp_floor} to the floor",
            stacklevel=2,
        )
    return records


def read_records(
    path: Union[str, Path], clamp_floor: Optional[float] = None
) -> list[LogLikRecord]:
    """Parse a record file from disk."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_records(fh, clamp_floor=clamp_floor)


def build_tables(records: Iterable[LogLikRecord]) -> list[LogLikTable]:
    """Group validated records into one table per chain, sorted by chain id.

    Sample indices within a chain must be contiguous from 1; a gap breaks
    the sequential-prefix semantics of the stopping rule and is an error.
    All rows of the run must share the same number of validation points.
    """
    by_chain: dict[str, list[LogLikRecord]] = {}
    for rec in records:
        by_chain.setdefault(rec.chain_id, []).append(rec)
    if not by_chain:
        return []

    run_m: Optional[int] = None
    tables = []
    for chain_id in sorted(by_chain):
        recs = sorted(by_chain[chain_id], key=lambda r: r.sample_index)
        warmstart = None
        rows = []
        expected = 1
        for rec in recs:
            if run_m is None:
                run_m = len(rec.loglik)
            elif len(rec.loglik) != run_m:
                raise DataError(
                    f"chain {chain_id!r}: mixed row lengths across the run "
                    f"({len(rec.loglik)} vs {run_m})"
                )
            if rec.kind == KIND_WARMSTART:
                if warmstart is not None:
                    raise DataError(f"chain {chain_id!r}: duplicate warmstart row")
                warmstart = np.asarray(rec.loglik, dtype=np.float64)
                continue
            if rec.sample_index < expected:
                raise DataError(
                    f"chain {chain_id!r}: duplicate sample index {rec.sample_index}"
                )
            if rec.sample_index != expected:
                raise DataError(
                    f"chain {chain_id!r}: gap in sample indices at {expected} "
                    f"(next record has index {rec.sample_index})"
                )
            rows.append(rec.loglik)
            expected += 1
        sample_rows = (
            np.asarray(rows, dtype=np.float64)
            if rows
            else np.empty((0, run_m or 0), dtype=np.float64)
        )
        tables.append(
            LogLikTable(
                chain_id=chain_id,
                warmstart_row=warmstart,
                sample_rows=sample_rows,
                m=int(run_m or 0),
            )
        )
    return tables


def select_reference(
    table: LogLikTable, mode: ReferenceMode
) -> tuple[np.ndarray, int]:
    """Pick the reference row for a chain and the first tested position.

    Returns ``(baseline_row, first_tested_position)`` where the position
    is 1-based within the chain's sample rows: with the warmstart as
    reference every posterior sample is tested (position 1 onward); with
    the first-sample reference testing starts at position 2.
    """
    if mode is ReferenceMode.DE_WARMSTART:
        if table.warmstart_row is None:
            raise ConfigError(
                f"chain {table.chain_id!r} has no warmstart record; "
                "the warmstart reference mode requires one"
            )
        return table.warmstart_row, 1
    if mode is ReferenceMode.FIRST_SAMPLE:
        if table.n_samples < 1:
            raise ConfigError(
                f"chain {table.chain_id!r} has no posterior samples; "
                "the first-sample reference mode requires at least one"
            )
        return table.sample_rows[0], 2
    raise ConfigError(f"unknown reference mode: {mode!r}")


def candidate_positions(table: LogLikTable, mode: ReferenceMode) -> range:
    """1-based chain positions of the candidate (tested) samples, in order.

    Position ``candidate_positions(...)[k - 2]`` corresponds to tested
    sample index ``k`` in the E-process numbering.
    """
    _, first = select_reference(table, mode)
    return range(first, table.n_samples + 1)


def log_ratio_steps(
    table: LogLikTable, mode: ReferenceMode
) -> list[LogRatioStep]:
    """Per-sample log e-values for a chain under the given reference mode."""
    baseline, first = select_reference(table, mode)
    steps = []
    for offset, position in enumerate(range(first, table.n_samples + 1)):
        steps.append(
            LogRatioStep(
                sample_index=FIRST_TESTED_INDEX + offset,
                log_s=step_log_evalue(table.row_at_position(position), baseline),
            )
        )
    return steps


# -- serialization ----------------------------------------------------------


def record_to_json_line(record: LogLikRecord) -> str:
    return json.dumps(
        {
            "chain": record.chain_id,
            "kind": record.kind,
            "index": record.sample_index,
            "loglik": [float(x) for x in record.loglik],
        }
    )


def record_to_csv_line(record: LogLikRecord) -> str:
    values = ",".join(repr(float(x)) for x in record.loglik)
    return f"{record.chain_id},{record.kind},{record.sample_index},{values}"


def table_to_records(table: LogLikTable) -> list[LogLikRecord]:
    """Flatten a table back into records, numbering samples by position.

    Source-index maps from thinning are reporting metadata and are not
    part of the record format; a thinned table serializes contiguously.
    """
    records = []
    if table.warmstart_row is not None:
        records.append(
            LogLikRecord(
                table.chain_id, KIND_WARMSTART, 0, tuple(table.warmstart_row)
            )
        )
    for p in range(1, table.n_samples + 1):
        records.append(
            LogLikRecord(
                table.chain_id, KIND_SAMPLE, p, tuple(table.row_at_position(p))
            )
        )
    return records


def records_to_text(records: Iterable[LogLikRecord], fmt: str = "jsonl") -> str:
    if fmt == "jsonl":
        lines = [record_to_json_line(r) for r in records]
    elif fmt == "csv":
        lines = [record_to_csv_line(r) for r in records]
    else:
        raise ConfigError(f"unknown record format {fmt!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_records(
    records: Iterable[LogLikRecord], path: Union[str, Path], fmt: str = "jsonl"
) -> None:
    Path(path).write_text(records_to_text(records, fmt), encoding="utf-8")
