"""Command-line surface: run the stopping rule on record files, rebuild
reports, run Monte Carlo certification, and print thinning diagnostics.

Exit codes: 0 success, 2 data error, 3 configuration error, 4 internal
invariant violation.  The output directory of ``run`` can be overridden
with the ``EVSTOP_OUTPUT_DIR`` environment variable, which takes
precedence over ``--out``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .diagnostics import (
    PILOT_PREFIX,
    apply_thinning,
    integrated_autocorrelation_time,
    loglik_sum_series,
)
from .ensemble import (
    ChainMembership,
    assemble_minimal_bde,
    build_report,
    format_report,
)
from .eprocess import (
    BUDGET_EXHAUSTED,
    REJECTED_H0,
    ChainDecision,
    StoppingConfig,
    run_chain,
)
from .errors import ConfigError, DataError, EvstopError
from .ingest import (
    LogLikTable,
    ReferenceMode,
    build_tables,
    log_ratio_steps,
    read_records,
    table_to_records,
    write_records,
)
from .simlab import (
    KIND_EXACT_NULL,
    KIND_GAUSSIAN_MODEL,
    KIND_LOGNORMAL_ALT,
    ScenarioSpec,
    ValidityResult,
    certify_validity,
    gaussian_tables,
    power_run,
    run_gaussian_model,
    stream_tables,
)

EXIT_OK = 0
EXIT_DATA_ERROR = 2
EXIT_CONFIG_ERROR = 3
EXIT_INTERNAL_ERROR = 4

OUTPUT_DIR_ENV = "EVSTOP_OUTPUT_DIR"

DECISIONS_FILE = "decisions.jsonl"
TRAJECTORIES_FILE = "trajectories.csv"
REPORT_FILE = "report.txt"


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags, which collides with the
    # data-error code; flag problems are configuration errors here.
    def error(self, message):
        raise ConfigError(message)


def _write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_tables(paths: Sequence[str], clamp_floor: Optional[float]) -> list[LogLikTable]:
    records = []
    for path in paths:
        records.extend(read_records(path, clamp_floor=clamp_floor))
    tables = build_tables(records)
    if not tables:
        raise DataError(f"no records found in {', '.join(paths)}")
    return tables


def _resolve_out_dir(flag_value: str) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or flag_value)


# -- run -----------------------------------------------------------------------


def _parse_thin(value: str) -> tuple[str, int]:
    if value in ("auto", "off"):
        return value, 1
    try:
        interval = int(value)
    except ValueError:
        raise ConfigError(
            f"--thin expects 'auto', 'off', or a positive integer, got {value!r}"
        ) from None
    if interval < 1:
        raise ConfigError(f"--thin interval must be >= 1, got {interval}")
    return "fixed", interval


def _truncate(table: LogLikTable, budget: int) -> LogLikTable:
    if table.n_samples <= budget:
        return table
    from dataclasses import replace

    return replace(
        table,
        sample_rows=table.sample_rows[:budget],
        source_indices=table.source_indices[:budget],
    )


def _chain_interval(
    table: LogLikTable, thin_mode: str, fixed_interval: int, budget: int
) -> tuple[int, str]:
    if thin_mode == "off":
        return 1, "off"
    if thin_mode == "fixed":
        return fixed_interval, f"fixed {fixed_interval}"
    series = loglik_sum_series(table)[: min(budget, PILOT_PREFIX)]
    try:
        diag = integrated_autocorrelation_time(series)
    except DataError:
        return 1, "auto (degenerate series, interval 1)"
    return diag.recommended_interval, f"auto (iac {diag.iac_time:.2f})"


def cmd_run(args: argparse.Namespace) -> int:
    mode = ReferenceMode(args.mode)
    thin_mode, fixed_interval = _parse_thin(args.thin)
    tables = _load_tables(args.inputs, args.clamp_floor)
    budget = args.budget if args.budget is not None else max(
        t.n_samples for t in tables
    )
    base_config = StoppingConfig(alpha=args.alpha, budget=budget)
    out_dir = _resolve_out_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    first_tested_position = 1 if mode is ReferenceMode.DE_WARMSTART else 2

    def process(table: LogLikTable) -> tuple[LogLikTable, ChainDecision, int, str]:
        capped = _truncate(table, budget)
        interval, note = _chain_interval(capped, thin_mode, fixed_interval, budget)
        thinned = apply_thinning(capped, interval, first_tested_position)
        config = StoppingConfig(
            alpha=args.alpha, budget=budget, thinning_interval=interval
        )
        decision = run_chain(
            log_ratio_steps(thinned, mode), config, chain_id=table.chain_id
        )
        return thinned, decision, interval, note

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            processed = list(pool.map(process, tables))
    else:
        processed = [process(t) for t in tables]

    thinned_tables = [p[0] for p in processed]
    decisions = [p[1] for p in processed]
    intervals = {p[1].chain_id: p[2] for p in processed}

    memberships = assemble_minimal_bde(decisions, thinned_tables, mode)
    report_tables = None
    if args.report_records:
        report_tables = _load_tables([args.report_records], args.clamp_floor)
    report = build_report(
        decisions,
        memberships,
        report_tables if report_tables is not None else tables,
        alpha=args.alpha,
        mode=mode,
        budget_per_chain=budget,
        in_sample=report_tables is None,
    )

    _write_atomic(
        out_dir / DECISIONS_FILE,
        _decisions_document(decisions, memberships, intervals, args.alpha, mode, budget),
    )
    _write_atomic(
        out_dir / TRAJECTORIES_FILE,
        _trajectories_document(decisions, base_config.log_threshold),
    )
    _write_atomic(out_dir / REPORT_FILE, format_report(report))

    print("evstop run")
    print(
        f"alpha: {args.alpha} (threshold log_e >= {base_config.log_threshold:.6f})"
    )
    print(f"reference mode: {mode.value}")
    print(f"chains: {len(tables)}, budget per chain: {budget}")
    if thin_mode == "off":
        print(
            "thinning: off (with autocorrelated samples the stopping "
            "guarantee is approximate)"
        )
    else:
        print(f"thinning: {thin_mode}")
    for _, decision, interval, note in processed:
        if decision.verdict == REJECTED_H0:
            outcome = f"rejected_h0 at tested sample {decision.stop_index}"
        else:
            outcome = f"budget_exhausted after {decision.steps_consumed} tested samples"
        print(f"chain {decision.chain_id}: {outcome} [thinning {note}]")
    print(
        f"wrote {DECISIONS_FILE}, {TRAJECTORIES_FILE}, {REPORT_FILE} to {out_dir}"
    )
    return EXIT_OK


def _decisions_document(
    decisions: Sequence[ChainDecision],
    memberships: Sequence[ChainMembership],
    intervals: dict[str, int],
    alpha: float,
    mode: ReferenceMode,
    budget: int,
) -> str:
    members_by_id = {m.chain_id: m for m in memberships}
    lines = [
        json.dumps(
            {
                "record": "run_meta",
                "alpha": alpha,
                "mode": mode.value,
                "budget": budget,
                "chains": len(decisions),
            }
        )
    ]
    for decision in decisions:
        member = members_by_id[decision.chain_id]
        lines.append(
            json.dumps(
                {
                    "record": "decision",
                    "chain": decision.chain_id,
                    "verdict": decision.verdict,
                    "stop_index": decision.stop_index,
                    "steps_consumed": decision.steps_consumed,
                    "final_log_e": decision.final_log_e,
                    "thinning_interval": intervals[decision.chain_id],
                    "retained_tested_indices": list(
                        decision.retained_sample_indices
                    ),
                    "member_warmstart": member.include_warmstart,
                    "member_sample_indices": list(member.sample_indices),
                }
            )
        )
    return "\n".join(lines) + "\n"


def _trajectories_document(
    decisions: Sequence[ChainDecision], log_threshold: float
) -> str:
    lines = ["chain_id,tested_index,log_e,threshold_log"]
    for decision in decisions:
        for tested_index, log_e in decision.trajectory:
            lines.append(
                f"{decision.chain_id},{tested_index},{log_e!r},{log_threshold!r}"
            )
    return "\n".join(lines) + "\n"


# -- report --------------------------------------------------------------------


def _load_decisions_file(path: str) -> tuple[dict, list[dict]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read decisions file: {exc}") from None
    meta = None
    entries = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{line_no}: invalid JSON: {exc}") from None
        if obj.get("record") == "run_meta":
            meta = obj
        elif obj.get("record") == "decision":
            entries.append(obj)
        else:
            raise DataError(f"{path}:{line_no}: unknown record type")
    if meta is None:
        raise DataError(f"{path}: missing run_meta record")
    if not entries:
        raise DataError(f"{path}: no decision records")
    return meta, entries


def cmd_report(args: argparse.Namespace) -> int:
    meta, entries = _load_decisions_file(args.decisions)
    tables = _load_tables([args.records], None)

    decisions = []
    memberships = []
    for entry in entries:
        verdict = entry["verdict"]
        retained = (
            tuple(entry["retained_tested_indices"])
            if verdict == REJECTED_H0
            else ()
        )
        decisions.append(
            ChainDecision(
                chain_id=entry["chain"],
                verdict=verdict,
                stop_index=entry["stop_index"],
                retained_sample_indices=retained,
                trajectory=(),
            )
        )
        memberships.append(
            ChainMembership(
                chain_id=entry["chain"],
                include_warmstart=bool(entry["member_warmstart"]),
                sample_indices=tuple(entry["member_sample_indices"]),
            )
        )

    report_tables = None
    if args.report_records:
        report_tables = _load_tables([args.report_records], None)
    report = build_report(
        decisions,
        memberships,
        report_tables if report_tables is not None else tables,
        alpha=meta["alpha"],
        mode=ReferenceMode(meta["mode"]),
        budget_per_chain=meta["budget"],
        in_sample=report_tables is None,
    )
    print(format_report(report), end="")
    return EXIT_OK


# -- simulate ------------------------------------------------------------------


def _validity_document(result: ValidityResult, spec: ScenarioSpec, title: str) -> str:
    lines = [
        title,
        "=" * len(title),
        f"kind: {spec.kind}",
        f"mu: {spec.mu}",
        f"sigma: {spec.sigma}",
        f"budget: {spec.budget}",
        f"seed: {spec.seed}",
        f"alpha: {result.alpha}",
        f"replications: {result.replications}",
        f"rejections: {result.rejections}",
        f"rejection_rate: {result.rejection_rate:.6f}",
        f"alpha_bound: {result.alpha}",
        "mean_e_at_checkpoints:",
    ]
    for k, (mean, se) in sorted(result.mean_e_at_checkpoints.items()):
        lines.append(f"  k={k}: mean {mean:.6f} se {se:.6f}")
    if result.stopping_time_quantiles is None:
        lines.append("stopping_time_quartiles: none")
    else:
        q25, q50, q75 = result.stopping_time_quantiles
        lines.append(
            f"stopping_time_quartiles: q25 {q25:.1f} median {q50:.1f} q75 {q75:.1f}"
        )
    lines.append(
        "note: this synthetic boundary-null experiment is generated by "
        "evstop's simulation lab"
    )
    return "\n".join(lines) + "\n"


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = ScenarioSpec(
        kind=args.kind,
        mu=args.mu,
        sigma=args.sigma,
        m=args.m,
        chains=args.chains,
        budget=args.budget,
        seed=args.seed,
        init_offset=args.init_offset,
    )

    if args.dump:
        out_dir = Path(args.dump)
        out_dir.mkdir(parents=True, exist_ok=True)
        if spec.kind == KIND_GAUSSIAN_MODEL:
            run = run_gaussian_model(spec)
            val_records = []
            report_records = []
            for table in gaussian_tables(run, "validation"):
                val_records.extend(table_to_records(table))
            for table in gaussian_tables(run, "report"):
                report_records.extend(table_to_records(table))
            write_records(val_records, out_dir / "records.jsonl")
            write_records(report_records, out_dir / "report_records.jsonl")
            rates = ", ".join(f"{r:.3f}" for r in run.acceptance_rates)
            print(f"gaussian model: {spec.chains} chains x {spec.budget} samples")
            print(
                f"posterior mean {run.task.posterior_mean:.6f}, "
                f"var {run.task.posterior_var:.6f}"
            )
            print(f"acceptance rates: {rates}")
            print(f"wrote records.jsonl, report_records.jsonl to {out_dir}")
        else:
            records = []
            for table in stream_tables(spec):
                records.extend(table_to_records(table))
            write_records(records, out_dir / "records.jsonl")
            print(
                f"{spec.kind} streams: {spec.chains} chains x {spec.budget} samples"
            )
            print(f"wrote records.jsonl to {out_dir}")
        return EXIT_OK

    if spec.kind == KIND_GAUSSIAN_MODEL:
        raise ConfigError(
            "gaussian_model simulation produces tables; pass --dump DIR and "
            "feed the records to 'evstop run'"
        )
    if spec.kind == KIND_EXACT_NULL:
        result = certify_validity(spec, args.alpha, args.reps)
        title = "validity certification"
    else:
        result = power_run(spec, args.alpha, args.reps)
        title = "power simulation"
    print(_validity_document(result, spec, title), end="")
    return EXIT_OK


# -- thin ----------------------------------------------------------------------


def cmd_thin(args: argparse.Namespace) -> int:
    tables = _load_tables([args.records], None)
    print("thinning diagnostics")
    for table in tables:
        diag = integrated_autocorrelation_time(loglik_sum_series(table))
        print(
            f"chain {table.chain_id}: iac_time {diag.iac_time:.3f}  "
            f"recommended_interval {diag.recommended_interval}  "
            f"window {diag.window_used}"
        )
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="evstop",
        description=(
            "Anytime-valid stopping for sequentially sampled model "
            "ensembles, driven by accumulated likelihood-ratio evidence."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser(
        "run", help="run the stopping rule on validation record files"
    )
    p_run.add_argument("inputs", nargs="+", help="record files (JSONL or CSV)")
    p_run.add_argument(
        "--report-records",
        help="held-out records for predictive-quality reporting",
    )
    p_run.add_argument("--alpha", type=float, default=0.01)
    p_run.add_argument(
        "--mode",
        choices=[m.value for m in ReferenceMode],
        default=ReferenceMode.FIRST_SAMPLE.value,
        help="reference baseline for the test",
    )
    p_run.add_argument(
        "--budget", type=int, default=None, help="max samples per chain"
    )
    p_run.add_argument(
        "--thin",
        default="auto",
        help="'auto' (estimate interval), 'off', or a fixed integer interval",
    )
    p_run.add_argument("--out", default="evstop-out", help="output directory")
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument(
        "--clamp-floor",
        type=float,
        default=None,
        help="opt-in floor for -inf log-likelihoods (e.g. -30)",
    )
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser(
        "report", help="rebuild the ensemble report from run artifacts"
    )
    p_report.add_argument("--decisions", required=True)
    p_report.add_argument("--records", required=True)
    p_report.add_argument("--report-records")
    p_report.set_defaults(func=cmd_report)

    p_sim = sub.add_parser(
        "simulate", help="Monte Carlo certification and synthetic data dumps"
    )
    p_sim.add_argument(
        "--kind",
        required=True,
        choices=[KIND_EXACT_NULL, KIND_LOGNORMAL_ALT, KIND_GAUSSIAN_MODEL],
    )
    p_sim.add_argument("--mu", type=float, default=0.0)
    p_sim.add_argument("--sigma", type=float, default=1.0)
    p_sim.add_argument("--m", type=int, default=32)
    p_sim.add_argument("--chains", type=int, default=4)
    p_sim.add_argument("--budget", type=int, default=200)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--init-offset", type=float, default=0.0)
    p_sim.add_argument("--alpha", type=float, default=0.01)
    p_sim.add_argument("--reps", type=int, default=2000)
    p_sim.add_argument("--dump", help="write generated tables as record files")
    p_sim.set_defaults(func=cmd_simulate)

    p_thin = sub.add_parser(
        "thin", help="print per-chain autocorrelation and thinning intervals"
    )
    p_thin.add_argument("records")
    p_thin.set_defaults(func=cmd_thin)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except EvstopError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL_ERROR


def entrypoint() -> None:
    sys.exit(main())
