"""Core E-process mathematics: per-sample likelihood-ratio evidence,
log-space accumulation, and the anytime-valid stopping decision.

A candidate sample's e-value against a fixed reference is the likelihood
ratio of the two models on a fixed validation set.  Evidence multiplies
across samples, so everything here lives in natural-log space: the product
of hundreds of per-point density ratios overflows or underflows a float
long before it carries any information, while its log is a plain sum.

The running evidence starts at 1 (``log_e == 0``) and the chain stops the
moment the accumulated evidence reaches ``1/alpha``, which by Ville's
inequality bounds the probability of ever stopping under the null by
``alpha`` at any data-dependent stopping time.  Comparison is ``>=``:
touching the threshold stops.

Indexing convention: the reference model is sample 1 and is never tested
against itself, so tested samples are numbered 2, 3, ... regardless of
whether the reference is an optimized warmstart or the chain's own first
draw (see :mod:`evstop.ingest` for the mapping from stored records).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, UsageError

#: Tested samples are numbered from 2; the reference itself is sample 1.
FIRST_TESTED_INDEX = 2

RUNNING = "running"
REJECTED_H0 = "rejected_h0"
BUDGET_EXHAUSTED = "budget_exhausted"

Status = Literal["running", "rejected_h0", "budget_exhausted"]
Verdict = Literal["rejected_h0", "budget_exhausted"]


@dataclass(frozen=True, slots=True)
class LogRatioStep:
    """One tested sample's log e-value against the reference.

    ``log_s`` is the natural log of the validation likelihood ratio,
    i.e. the sum over validation points of the per-point log-likelihood
    differences (candidate minus reference).
    """

    sample_index: int
    log_s: float

    def __post_init__(self) -> None:
        if self.sample_index < FIRST_TESTED_INDEX:
            raise DataError(
                f"tested sample index must be >= {FIRST_TESTED_INDEX}, "
                f"got {self.sample_index}"
            )
        if not math.isfinite(self.log_s):
            raise DataError(
                f"log_s must be finite, got {self.log_s} at sample "
                f"{self.sample_index}"
            )


@dataclass(frozen=True, slots=True)
class StoppingConfig:
    """Significance level, per-chain sample budget, and thinning interval.

    ``budget`` caps the number of tested samples a chain may consume.
    ``thinning_interval`` is the keep-every-t subsampling applied to the
    chain before testing; it does not change the stopping arithmetic.
    """

    alpha: float
    budget: int
    thinning_interval: int = 1

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if self.thinning_interval < 1:
            raise ConfigError(
                f"thinning_interval must be >= 1, got {self.thinning_interval}"
            )

    @property
    def log_threshold(self) -> float:
        """Stopping threshold for the log evidence: ``-ln(alpha) > 0``."""
        return -math.log(self.alpha)


@dataclass(frozen=True, slots=True)
class EProcessState:
    """Immutable snapshot of a running E-process.

    ``log_e`` starts at 0 (evidence 1).  ``accumulate`` returns a new
    state rather than mutating, so states are safe to share across
    threads and to keep around for trajectories.
    """

    log_e: float = 0.0
    steps_consumed: int = 0
    status: Status = RUNNING
    stop_index: Optional[int] = None

    @property
    def next_index(self) -> int:
        """Sample index the next accumulated step must carry."""
        return FIRST_TESTED_INDEX + self.steps_consumed


@dataclass(frozen=True, slots=True)
class ChainDecision:
    """Outcome of running the E-process over one chain.

    ``retained_sample_indices`` lists the tested indices kept when the
    null is rejected (the full tested prefix up to ``stop_index``); a
    discarded chain retains nothing and the ensemble falls back to its
    reference member.  ``trajectory`` holds ``(tested_index, log_e)``
    for every consumed step, for export and plotting.
    """

    chain_id: str
    verdict: Verdict
    stop_index: Optional[int]
    retained_sample_indices: tuple[int, ...]
    trajectory: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        rejected = self.verdict == REJECTED_H0
        if rejected != (self.stop_index is not None):
            raise UsageError("stop_index must be present iff verdict is rejected_h0")
        if not rejected and self.retained_sample_indices:
            raise UsageError("a discarded chain retains no samples")

    @property
    def steps_consumed(self) -> int:
        return len(self.trajectory)

    @property
    def final_log_e(self) -> float:
        return self.trajectory[-1][1] if self.trajectory else 0.0


def step_log_evalue(
    candidate_loglik_row: Sequence[float],
    baseline_loglik_row: Sequence[float],
) -> float:
    """Log e-value of one candidate sample against the reference.

    Computes ``sum_i (candidate_i - baseline_i)`` over the validation
    points with exact (compensated) summation, never forming the product
    of density ratios.

    Raises:
        DataError: on length mismatch or any non-finite entry; the error
            message names the offending row and index.
    """
    cand = np.asarray(candidate_loglik_row, dtype=np.float64)
    base = np.asarray(baseline_loglik_row, dtype=np.float64)
    if cand.ndim != 1 or base.ndim != 1 or cand.shape != base.shape:
        raise DataError(
            f"row length mismatch: candidate has shape {cand.shape}, "
            f"baseline has shape {base.shape}"
        )
    if cand.size == 0:
        raise DataError("rows must contain at least one validation point")
    for name, row in (("candidate", cand), ("baseline", base)):
        bad = np.flatnonzero(~np.isfinite(row))
        if bad.size:
            i = int(bad[0])
            raise DataError(
                f"non-finite log-likelihood in {name} row at point {i}: {row[i]}"
            )
    return math.fsum((cand - base).tolist())


def accumulate(
    state: EProcessState, step: LogRatioStep, config: StoppingConfig
) -> EProcessState:
    """Fold one tested step into the running evidence.

    Returns the successor state.  Rejection takes precedence over budget
    exhaustion when the final budgeted step crosses the threshold.

    Raises:
        UsageError: if the state is not running or the step is out of order.
    """
    if state.status != RUNNING:
        raise UsageError(f"cannot accumulate into a {state.status} state")
    if step.sample_index != state.next_index:
        raise UsageError(
            f"out-of-order step: expected sample {state.next_index}, "
            f"got {step.sample_index}"
        )
    log_e = state.log_e + step.log_s
    consumed = state.steps_consumed + 1
    if log_e >= config.log_threshold:
        return EProcessState(log_e, consumed, REJECTED_H0, step.sample_index)
    if consumed >= config.budget:
        return EProcessState(log_e, consumed, BUDGET_EXHAUSTED, None)
    return EProcessState(log_e, consumed, RUNNING, None)


def run_chain(
    log_ratio_steps: Iterable[LogRatioStep],
    config: StoppingConfig,
    chain_id: str = "",
) -> ChainDecision:
    """Run the stopping rule over an ordered stream of tested steps.

    Consumes steps in order until the evidence first reaches the
    threshold (verdict ``rejected_h0``, stopping at that sample), the
    budget is spent, or the stream ends; the latter two yield verdict
    ``budget_exhausted`` and the chain is discarded.  An empty stream is
    a degenerate chain: discarded with zero steps consumed.
    """
    threshold = config.log_threshold
    log_e = 0.0
    trajectory: list[tuple[int, float]] = []
    expected = FIRST_TESTED_INDEX
    stop_index: Optional[int] = None

    for step in log_ratio_steps:
        if step.sample_index != expected:
            raise UsageError(
                f"out-of-order step in chain {chain_id!r}: expected sample "
                f"{expected}, got {step.sample_index}"
            )
        log_e += step.log_s
        trajectory.append((step.sample_index, log_e))
        if log_e >= threshold:
            stop_index = step.sample_index
            break
        expected += 1
        if len(trajectory) >= config.budget:
            break

    if stop_index is not None:
        retained = tuple(index for index, _ in trajectory)
        return ChainDecision(
            chain_id=chain_id,
            verdict=REJECTED_H0,
            stop_index=stop_index,
            retained_sample_indices=retained,
            trajectory=tuple(trajectory),
        )
    return ChainDecision(
        chain_id=chain_id,
        verdict=BUDGET_EXHAUSTED,
        stop_index=None,
        retained_sample_indices=(),
        trajectory=tuple(trajectory),
    )
