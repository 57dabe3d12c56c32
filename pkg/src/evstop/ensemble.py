"""Minimal-ensemble assembly, predictive density, and compression reporting.

A chain that rejects the null contributes its reference member plus the
tested prefix up to the stopping sample; a chain that exhausts its budget
contributes the reference member only, so abstention costs nothing extra
at inference.  Reported sample counts follow the convention of counting
posterior-sample members: warmstart baselines are the pre-sampling
ensemble and are listed separately.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import diagnostics
from .eprocess import (
    FIRST_TESTED_INDEX,
    REJECTED_H0,
    ChainDecision,
    StoppingConfig,
    run_chain,
)
from .errors import DataError, InvariantError
from .ingest import LogLikTable, ReferenceMode, log_ratio_steps, select_reference

#: Numerical slack allowed on the ensemble-vs-mean-member bound.
JENSEN_SLACK = 1e-9


@dataclass(frozen=True)
class ChainMembership:
    """Which members of one chain enter the minimal ensemble.

    ``sample_indices`` are original sample indices (as recorded, before
    any thinning renumbering).  With the warmstart reference the first
    posterior sample is a tested member like any other; with the
    first-sample reference, sample 1 is the baseline and always present.
    """

    chain_id: str
    include_warmstart: bool
    sample_indices: tuple[int, ...]

    @property
    def posterior_count(self) -> int:
        """Posterior-sample members; the 'samples' figure in reports."""
        return len(self.sample_indices)

    @property
    def member_count(self) -> int:
        return len(self.sample_indices) + int(self.include_warmstart)


@dataclass(frozen=True)
class ChainSummary:
    chain_id: str
    verdict: str
    stop_index: Optional[int]
    samples_used: int
    members: int
    lppd: float


@dataclass(frozen=True)
class EnsembleReport:
    """Everything the two-block report document needs, plus totals."""

    mode: str
    alpha: float
    chains: int
    budget_per_chain: int
    full_budget: int
    ensemble_lppd: float
    ensemble_lppd_total: float
    mean_chain_lppd: float
    mean_chain_lppd_std: float
    mean_member_loglik: float
    jensen_gap: float
    total_samples_used: int
    average_samples_per_chain: float
    total_members: int
    compression_factor: float
    in_sample: bool
    per_chain: tuple[ChainSummary, ...]


def decide_chain(
    table: LogLikTable, mode: ReferenceMode, config: StoppingConfig
) -> ChainDecision:
    """Run the stopping rule on one chain's table."""
    return run_chain(log_ratio_steps(table, mode), config, chain_id=table.chain_id)


def decide_chains(
    tables: Sequence[LogLikTable],
    mode: ReferenceMode,
    config: StoppingConfig,
    jobs: int = 1,
) -> list[ChainDecision]:
    """Run the stopping rule on every chain; chains are independent."""
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda t: decide_chain(t, mode, config), tables))
    return [decide_chain(t, mode, config) for t in tables]


def assemble_minimal_bde(
    decisions: Sequence[ChainDecision],
    tables: Sequence[LogLikTable],
    mode: ReferenceMode,
) -> list[ChainMembership]:
    """Turn per-chain stopping decisions into ensemble membership.

    Rejection keeps the baseline plus every tested sample through the
    stopping index; budget exhaustion falls back to the baseline alone.
    Tested indices are translated back to original sample indices via the
    table's source map, so membership survives thinning.
    """
    by_id = {t.chain_id: t for t in tables}
    if len(by_id) != len(tables):
        raise DataError("duplicate chain ids among tables")
    if sorted(by_id) != sorted(d.chain_id for d in decisions):
        raise DataError(
            "decisions and tables cover different chains: "
            f"{sorted(d.chain_id for d in decisions)} vs {sorted(by_id)}"
        )

    memberships = []
    for decision in decisions:
        table = by_id[decision.chain_id]
        _, first_position = select_reference(table, mode)
        retained_positions = [
            first_position + (k - FIRST_TESTED_INDEX)
            for k in decision.retained_sample_indices
        ]
        if retained_positions and retained_positions[-1] > table.n_samples:
            raise DataError(
                f"decision for chain {decision.chain_id!r} retains samples "
                "beyond the table"
            )
        retained_sources = [table.source_indices[p - 1] for p in retained_positions]
        if mode is ReferenceMode.DE_WARMSTART:
            membership = ChainMembership(
                chain_id=decision.chain_id,
                include_warmstart=True,
                sample_indices=tuple(retained_sources),
            )
        else:
            baseline_source = table.source_indices[0]
            membership = ChainMembership(
                chain_id=decision.chain_id,
                include_warmstart=False,
                sample_indices=(baseline_source, *retained_sources),
            )
        memberships.append(membership)
    return memberships


def membership_rows(
    membership: ChainMembership, table: LogLikTable
) -> list[np.ndarray]:
    """Log-likelihood rows of a chain's members, baseline first."""
    rows = []
    if membership.include_warmstart:
        if table.warmstart_row is None:
            raise DataError(
                f"chain {membership.chain_id!r}: membership includes the "
                "warmstart but the table has no warmstart row"
            )
        rows.append(table.warmstart_row)
    for index in membership.sample_indices:
        rows.append(table.row_for_source_index(index))
    return rows


def lppd(member_loglik_rows: Sequence[Sequence[float]]) -> float:
    """Per-point log pointwise predictive density of an equal-weight ensemble.

    For each validation point, the log of the member-averaged predictive
    density is computed as a max-shifted log-mean-exp so no intermediate
    exponential can overflow; the result is averaged over points.
    """
    try:
        rows = np.asarray(member_loglik_rows, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"inconsistent member row lengths: {exc}") from None
    if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
        raise DataError("lppd needs at least one member row")
    per_point = logsumexp(rows, axis=0) - np.log(rows.shape[0])
    return float(np.mean(per_point))


def build_report(
    decisions: Sequence[ChainDecision],
    memberships: Sequence[ChainMembership],
    eval_tables: Sequence[LogLikTable],
    alpha: float,
    mode: ReferenceMode,
    budget_per_chain: int,
    in_sample: bool,
) -> EnsembleReport:
    """Aggregate memberships into the final report.

    ``eval_tables`` supply the rows predictive quality is computed on:
    held-out report records when available, otherwise the test records
    themselves (flagged via ``in_sample``).  Stopping is not recomputed.
    """
    tables_by_id = {t.chain_id: t for t in eval_tables}
    decisions_by_id = {d.chain_id: d for d in decisions}
    if sorted(decisions_by_id) != sorted(m.chain_id for m in memberships):
        raise DataError("decisions and memberships cover different chains")
    missing = [m.chain_id for m in memberships if m.chain_id not in tables_by_id]
    if missing:
        raise DataError(f"evaluation records missing for chains: {missing}")

    pooled_rows: list[np.ndarray] = []
    summaries = []
    chain_lppds = []
    for membership in memberships:
        decision = decisions_by_id[membership.chain_id]
        rows = membership_rows(membership, tables_by_id[membership.chain_id])
        chain_lppd = lppd(rows)
        chain_lppds.append(chain_lppd)
        pooled_rows.extend(rows)
        summaries.append(
            ChainSummary(
                chain_id=membership.chain_id,
                verdict=decision.verdict,
                stop_index=decision.stop_index,
                samples_used=membership.posterior_count,
                members=membership.member_count,
                lppd=chain_lppd,
            )
        )

    ensemble_lppd = lppd(pooled_rows)
    gap_report = diagnostics.jensen_gap(pooled_rows)
    if gap_report.gap < -JENSEN_SLACK:
        raise InvariantError(
            f"ensemble lppd fell below the mean member log-likelihood "
            f"(gap {gap_report.gap}); this should be impossible"
        )

    n_chains = len(memberships)
    total_samples = sum(m.posterior_count for m in memberships)
    total_members = sum(m.member_count for m in memberships)
    full_budget = budget_per_chain * n_chains
    m_points = eval_tables[0].m if eval_tables else 0
    chain_std = float(np.std(chain_lppds, ddof=1)) if n_chains > 1 else 0.0

    return EnsembleReport(
        mode=mode.value,
        alpha=alpha,
        chains=n_chains,
        budget_per_chain=budget_per_chain,
        full_budget=full_budget,
        ensemble_lppd=ensemble_lppd,
        ensemble_lppd_total=ensemble_lppd * m_points,
        mean_chain_lppd=float(np.mean(chain_lppds)),
        mean_chain_lppd_std=chain_std,
        mean_member_loglik=gap_report.mean_member_loglik,
        jensen_gap=gap_report.gap,
        total_samples_used=total_samples,
        average_samples_per_chain=total_samples / n_chains,
        total_members=total_members,
        compression_factor=full_budget / max(total_samples, 1),
        in_sample=in_sample,
        per_chain=tuple(summaries),
    )


def compression_report(
    decisions: Sequence[ChainDecision],
    tables: Sequence[LogLikTable],
    config: StoppingConfig,
    mode: ReferenceMode,
    report_tables: Optional[Sequence[LogLikTable]] = None,
) -> EnsembleReport:
    """Assemble the minimal ensemble and aggregate it into a report."""
    memberships = assemble_minimal_bde(decisions, tables, mode)
    eval_tables = report_tables if report_tables is not None else tables
    return build_report(
        decisions,
        memberships,
        eval_tables,
        alpha=config.alpha,
        mode=mode,
        budget_per_chain=config.budget,
        in_sample=report_tables is None,
    )


# -- document formatting ------------------------------------------------------

# Fixed formats keep report documents byte-identical across runs: four
# decimals for predictive density, one for compression factors.


def format_compression(full_budget: int, samples_used: int) -> str:
    factor = full_budget / max(samples_used, 1)
    text = f"{factor:.1f}"
    if text.endswith(".0"):
        text = text[:-2]
    return f"x{text}"


def _trim(value: float) -> str:
    text = f"{value:.1f}"
    return text[:-2] if text.endswith(".0") else text


def format_report(report: EnsembleReport) -> str:
    """Render the two-block report document (ensemble / single chain)."""
    evaluated_on = (
        "test records (in-sample for the test)"
        if report.in_sample
        else "held-out report records"
    )
    lines = [
        "minimal ensemble report",
        "=======================",
        f"reference mode     {report.mode}",
        f"alpha              {report.alpha}",
        f"chains             {report.chains}",
        f"budget per chain   {report.budget_per_chain}",
        f"full budget        {report.full_budget}",
        f"lppd evaluated on  {evaluated_on}",
        "",
        "Ensemble",
        f"  lppd         {report.ensemble_lppd:.4f}",
        f"  samples      {report.total_samples_used}",
        f"  members      {report.total_members}",
        f"  compression  {format_compression(report.full_budget, report.total_samples_used)}",
        "",
        "Single chain (mean over chains)",
        f"  lppd         {report.mean_chain_lppd:.4f} +/- {report.mean_chain_lppd_std:.4f}",
        f"  samples      {_trim(report.average_samples_per_chain)}",
        f"  compression  {format_compression(report.full_budget, report.total_samples_used)}",
        "",
        "Per chain",
        "  chain  verdict           stop  samples  lppd",
    ]
    for s in report.per_chain:
        stop = "-" if s.stop_index is None else str(s.stop_index)
        lines.append(
            f"  {s.chain_id:<6} {s.verdict:<17} {stop:<5} {s.samples_used:<8} "
            f"{s.lppd:.4f}"
        )
    return "\n".join(lines) + "\n"
