"""Effective-independence tooling and the ensemble-vs-member bound check.

The stopping rule multiplies per-sample e-values as if they were
independent; positively correlated draws inflate the evidence faster than
warranted.  The defense is to thin the chain at an interval larger than
the integrated autocorrelation time of the quantity actually entering the
test: the per-sample row-sum validation log-likelihood.

The Jensen check verifies the relationship the whole construction leans
on: the log pointwise predictive density of an equally weighted ensemble
is never below the average per-member log-likelihood, with equality only
for a single member or zero diversity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DataError
from .ingest import LogLikTable

#: Pilot-prefix length for retrospective autocorrelation estimates.
PILOT_PREFIX = 200


@dataclass(frozen=True)
class ThinningDiagnostics:
    """Integrated autocorrelation time and the thinning it recommends."""

    iac_time: float
    recommended_interval: int
    window_used: int


@dataclass(frozen=True)
class JensenGapReport:
    """Both sides of the ensemble-vs-mean-member inequality, per point."""

    ensemble_lppd: float
    mean_member_loglik: float
    gap: float


def loglik_sum_series(table: LogLikTable) -> np.ndarray:
    """Per-sample total validation log-likelihood, in chain order.

    This is the scalar summary whose autocorrelation threatens the
    validity of the multiplied evidence, hence the series to thin by.
    """
    return table.sample_rows.sum(axis=1)


def autocorrelation(series: Sequence[float]) -> np.ndarray:
    """Biased (length-normalized) sample autocorrelation at all lags."""
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    if acov[0] <= 0.0:
        raise DataError("series variance must be positive")
    return acov / acov[0]


def integrated_autocorrelation_time(series: Sequence[float]) -> ThinningDiagnostics:
    """Estimate the integrated autocorrelation time of a scalar series.

    Uses ``1 + 2 * sum(rho(t))`` with the sum truncated by Geyer's
    initial-positive-sequence rule: consecutive lag pairs
    ``rho(2j) + rho(2j+1)`` are added while positive and the sum stops
    before the first non-positive pair.  The estimate is clamped below
    at 1, and the recommended thinning interval is its ceiling.

    Raises:
        DataError: for series shorter than 8 points or with zero variance.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size < 8:
        raise DataError(
            f"need at least 8 points to estimate autocorrelation, got {x.size}"
        )
    if np.ptp(x) == 0.0:
        raise DataError("degenerate input: series is constant")
    rho = autocorrelation(x)

    pair_sum = 0.0
    window = 1
    j = 0
    while 2 * j + 1 < rho.size:
        gamma = rho[2 * j] + rho[2 * j + 1]
        if gamma <= 0.0:
            break
        pair_sum += gamma
        window = 2 * j + 1
        j += 1

    iac = max(1.0, 2.0 * pair_sum - 1.0)
    return ThinningDiagnostics(
        iac_time=float(iac),
        recommended_interval=int(np.ceil(iac)),
        window_used=window,
    )


def apply_thinning(
    table: LogLikTable, interval: int, first_tested_position: int = 1
) -> LogLikTable:
    """Keep every ``interval``-th sample row starting at the first tested one.

    Rows before ``first_tested_position`` (the reference material when the
    chain's own first draw is the baseline) are kept untouched.  The
    returned table is renumbered contiguously and carries the map back to
    original indices in ``source_indices``.  An interval larger than the
    chain collapses it to a single tested row; that is not an error.
    """
    if interval < 1:
        raise ConfigError(f"thinning interval must be >= 1, got {interval}")
    n = table.n_samples
    if first_tested_position < 1 or (n > 0 and first_tested_position > n):
        raise ConfigError(
            f"first tested position {first_tested_position} out of range "
            f"for a chain of {n} samples"
        )
    keep = list(range(1, first_tested_position)) + list(
        range(first_tested_position, n + 1, interval)
    )
    rows = (
        table.sample_rows[[p - 1 for p in keep]]
        if keep
        else np.empty((0, table.m), dtype=np.float64)
    )
    return replace(
        table,
        sample_rows=rows,
        source_indices=tuple(table.source_indices[p - 1] for p in keep),
    )


def jensen_gap(member_loglik_rows: Sequence[Sequence[float]]) -> JensenGapReport:
    """Both sides of the ensemble predictive-density lower bound.

    ``ensemble_lppd`` is the per-point log of the member-averaged
    predictive density (log-mean-exp per validation point, max-shifted so
    nothing overflows), averaged over points.  ``mean_member_loglik`` is
    the members' average log-likelihood, also per point.  Their gap is
    the diversity bonus and is non-negative up to rounding.

    Raises:
        DataError: for an empty member set or inconsistent row lengths.
    """
    try:
        rows = np.asarray(member_loglik_rows, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"inconsistent member row lengths: {exc}") from None
    if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
        raise DataError("need at least one member row with consistent length")
    k = rows.shape[0]
    per_point = logsumexp(rows, axis=0) - np.log(k)
    ensemble_lppd = float(np.mean(per_point))
    mean_member = float(np.mean(rows))
    return JensenGapReport(
        ensemble_lppd=ensemble_lppd,
        mean_member_loglik=mean_member,
        gap=ensemble_lppd - mean_member,
    )
