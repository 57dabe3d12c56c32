"""Tests for record parsing, table construction, and reference selection."""

import json
import math

import numpy as np
import pytest

from evstop import (
    ConfigError,
    DataError,
    LogLikRecord,
    LogLikTable,
    ReferenceMode,
    build_tables,
    log_ratio_steps,
    parse_records,
    records_to_text,
    select_reference,
    table_to_records,
    candidate_positions,
)


def jsonl_line(chain, kind, index, loglik):
    return json.dumps({"chain": chain, "kind": kind, "index": index, "loglik": loglik})


def small_stream():
    return "\n".join(
        [
            jsonl_line("c0", "warmstart", 0, [-1.0, -2.0, -0.5]),
            jsonl_line("c0", "sample", 1, [-0.9, -1.8, -0.6]),
            jsonl_line("c0", "sample", 2, [-1.1, -2.1, -0.4]),
        ]
    )


class TestParseRecords:
    def test_empty_stream(self):
        assert parse_records("") == []
        assert parse_records("\n\n  \n") == []

    def test_basic_structure(self):
        records = parse_records(small_stream())
        assert len(records) == 3
        tables = build_tables(records)
        assert len(tables) == 1
        table = tables[0]
        assert table.n_samples == 2
        assert table.m == 3
        assert table.warmstart_row is not None

    def test_record_count_matches_nonempty_lines(self):
        text = small_stream() + "\n\n" + jsonl_line("c1", "sample", 1, [0.0, 0.0, 0.0])
        records = parse_records(text)
        nonempty = [ln for ln in text.splitlines() if ln.strip()]
        assert len(records) == len(nonempty)

    def test_duplicate_names_both_lines(self):
        text = "\n".join(
            [
                jsonl_line("c0", "sample", 1, [0.0]),
                jsonl_line("c0", "sample", 1, [0.1]),
            ]
        )
        with pytest.raises(DataError) as exc:
            parse_records(text)
        assert "line 2" in str(exc.value)
        assert "line 1" in str(exc.value)

    def test_malformed_line_carries_number(self):
        text = jsonl_line("c0", "sample", 1, [0.0]) + "\n{not json}"
        with pytest.raises(DataError, match="line 2"):
            parse_records(text)

    def test_unknown_kind(self):
        with pytest.raises(DataError, match="kind"):
            parse_records(jsonl_line("c0", "prior", 1, [0.0]))

    def test_warmstart_must_be_index_zero(self):
        with pytest.raises(DataError, match="index 0"):
            parse_records(jsonl_line("c0", "warmstart", 3, [0.0]))

    def test_samples_numbered_from_one(self):
        with pytest.raises(DataError, match="numbered from 1"):
            parse_records(jsonl_line("c0", "sample", 0, [0.0]))

    def test_inconsistent_length_within_chain(self):
        text = "\n".join(
            [
                jsonl_line("c0", "sample", 1, [0.0, 0.0]),
                jsonl_line("c0", "sample", 2, [0.0]),
            ]
        )
        with pytest.raises(DataError, match="line 2"):
            parse_records(text)

    def test_nan_and_positive_inf_rejected(self):
        with pytest.raises(DataError, match="non-finite"):
            parse_records(jsonl_line("c0", "sample", 1, [float("nan")]))
        with pytest.raises(DataError, match="non-finite"):
            parse_records(jsonl_line("c0", "sample", 1, [float("inf")]))

    def test_negative_inf_is_hard_error_by_default(self):
        with pytest.raises(DataError, match="-inf"):
            parse_records(jsonl_line("c0", "sample", 1, [-float("inf"), -1.0]))

    def test_clamp_floor_opt_in(self):
        text = jsonl_line("c0", "sample", 1, [-float("inf"), -50.0, -1.0])
        with pytest.warns(UserWarning, match="clamped 2"):
            records = parse_records(text, clamp_floor=-30.0)
        assert records[0].loglik == (-30.0, -30.0, -1.0)

    def test_bytes_input(self):
        records = parse_records(small_stream().encode("utf-8"))
        assert len(records) == 3


class TestCsvFormat:
    def test_csv_matches_jsonl_semantics(self):
        jsonl = small_stream()
        csv = "\n".join(
            [
                "c0,warmstart,0,-1.0,-2.0,-0.5",
                "c0,sample,1,-0.9,-1.8,-0.6",
                "c0,sample,2,-1.1,-2.1,-0.4",
            ]
        )
        assert parse_records(csv) == parse_records(jsonl)

    def test_header_line_skipped(self):
        csv = "chain,kind,index,ll_1\nc0,sample,1,-0.25"
        records = parse_records(csv)
        assert len(records) == 1
        assert records[0].loglik == (-0.25,)

    def test_autodetect_by_first_character(self):
        assert parse_records("c0,sample,1,-1.5")[0].chain_id == "c0"
        assert parse_records(jsonl_line("c0", "sample", 1, [-1.5]))[0].loglik == (
            -1.5,
        )

    def test_short_csv_line(self):
        with pytest.raises(DataError, match="line 1"):
            parse_records("c0,sample,1")


class TestBuildTables:
    def test_contiguous_indices(self):
        records = [
            LogLikRecord("c0", "sample", i, (-1.0,)) for i in (1, 2, 3)
        ]
        table = build_tables(records)[0]
        assert table.n_samples == 3
        assert table.source_indices == (1, 2, 3)

    def test_gap_detected(self):
        records = [LogLikRecord("c0", "sample", i, (-1.0,)) for i in (1, 3)]
        with pytest.raises(DataError, match="gap in sample indices at 2"):
            build_tables(records)

    def test_mixed_m_across_chains(self):
        records = [
            LogLikRecord("a", "sample", 1, (-1.0, -1.0)),
            LogLikRecord("b", "sample", 1, (-1.0,)),
        ]
        with pytest.raises(DataError, match="mixed row lengths"):
            build_tables(records)

    def test_sixteen_chains_of_one_hundred(self):
        rng = np.random.default_rng(0)
        records = []
        for c in range(16):
            for i in range(1, 101):
                records.append(
                    LogLikRecord(
                        f"c{c:02d}", "sample", i, tuple(rng.uniform(-3, 0, 4))
                    )
                )
        tables = build_tables(records)
        assert len(tables) == 16
        assert all(t.n_samples == 100 for t in tables)
        assert sum(t.n_samples for t in tables) == 1600

    def test_tables_sorted_by_chain_id(self):
        records = [
            LogLikRecord("b", "sample", 1, (-1.0,)),
            LogLikRecord("a", "sample", 1, (-1.0,)),
        ]
        assert [t.chain_id for t in build_tables(records)] == ["a", "b"]


class TestRoundTrip:
    @pytest.mark.parametrize("fmt", ["jsonl", "csv"])
    def test_serialize_reparse_is_bit_exact(self, fmt):
        rng = np.random.default_rng(99)
        records = [LogLikRecord("c0", "warmstart", 0, tuple(rng.normal(size=5)))]
        for i in range(1, 8):
            records.append(
                LogLikRecord("c0", "sample", i, tuple(rng.normal(size=5)))
            )
        table = build_tables(records)[0]
        text = records_to_text(table_to_records(table), fmt)
        rebuilt = build_tables(parse_records(text))[0]
        assert rebuilt == table
        # and the text itself is stable under a second pass
        assert records_to_text(table_to_records(rebuilt), fmt) == text


class TestReferenceSelection:
    def make_table(self, n_samples, with_warmstart=True):
        rng = np.random.default_rng(1)
        return LogLikTable(
            chain_id="c0",
            warmstart_row=rng.normal(size=3) if with_warmstart else None,
            sample_rows=rng.normal(size=(n_samples, 3)),
            m=3,
        )

    def test_first_sample_tests_all_but_the_first(self):
        table = self.make_table(100)
        baseline, first = select_reference(table, ReferenceMode.FIRST_SAMPLE)
        assert first == 2
        assert np.array_equal(baseline, table.sample_rows[0])
        assert len(candidate_positions(table, ReferenceMode.FIRST_SAMPLE)) == 99

    def test_warmstart_tests_every_sample(self):
        table = self.make_table(100)
        baseline, first = select_reference(table, ReferenceMode.DE_WARMSTART)
        assert first == 1
        assert np.array_equal(baseline, table.warmstart_row)
        assert len(candidate_positions(table, ReferenceMode.DE_WARMSTART)) == 100

    def test_missing_warmstart_is_config_error(self):
        table = self.make_table(5, with_warmstart=False)
        with pytest.raises(ConfigError, match="warmstart"):
            select_reference(table, ReferenceMode.DE_WARMSTART)

    def test_first_sample_needs_a_sample(self):
        table = self.make_table(0)
        with pytest.raises(ConfigError, match="posterior samples"):
            select_reference(table, ReferenceMode.FIRST_SAMPLE)

    def test_baseline_never_among_tested_rows(self):
        table = self.make_table(10)
        for mode in ReferenceMode:
            baseline, _ = select_reference(table, mode)
            positions = candidate_positions(table, mode)
            if mode is ReferenceMode.FIRST_SAMPLE:
                assert 1 not in positions
            tested_rows = [table.row_at_position(p) for p in positions]
            if mode is ReferenceMode.DE_WARMSTART:
                assert not any(np.array_equal(baseline, r) for r in tested_rows)


class TestLogRatioSteps:
    def test_indices_start_at_two_in_both_modes(self):
        rng = np.random.default_rng(2)
        table = LogLikTable(
            chain_id="c0",
            warmstart_row=rng.normal(size=2),
            sample_rows=rng.normal(size=(5, 2)),
            m=2,
        )
        for mode, expected_count in (
            (ReferenceMode.DE_WARMSTART, 5),
            (ReferenceMode.FIRST_SAMPLE, 4),
        ):
            steps = log_ratio_steps(table, mode)
            assert len(steps) == expected_count
            assert [s.sample_index for s in steps] == list(
                range(2, 2 + expected_count)
            )

    def test_values_are_row_difference_sums(self):
        table = LogLikTable(
            chain_id="c0",
            warmstart_row=np.array([-1.0, -1.0]),
            sample_rows=np.array([[-0.5, -0.75]]),
            m=2,
        )
        (step,) = log_ratio_steps(table, ReferenceMode.DE_WARMSTART)
        assert step.log_s == pytest.approx(0.75)
