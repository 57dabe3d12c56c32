"""Synthetic scenarios and Monte Carlo certification of the stopping rule.

Three generators:

* ``exact_null``: i.i.d. log e-values drawn ``Normal(-sigma^2/2, sigma^2)``
  so each e-value has mean exactly 1.  This sits on the boundary of the
  null, the hardest case for the Type-I guarantee, which makes the
  certification maximally informative.
* ``lognormal_alt``: the same with mean lift ``mu``, so each e-value has
  mean ``exp(mu) > 1`` and evidence drifts upward.
* ``gaussian_model``: an end-to-end 1-D unknown-mean Gaussian task with a
  conjugate posterior, sampled by random-walk Metropolis.  Every
  downstream quantity has a closed form, so failures localize.

Randomness comes from the counter-based Philox bit generator keyed
through ``numpy.random.SeedSequence`` with per-purpose spawn keys, so
streams are fully determined by ``(seed, chain)``, independent across
chains, and insensitive to evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .eprocess import (
    FIRST_TESTED_INDEX,
    REJECTED_H0,
    ChainDecision,
    LogRatioStep,
    StoppingConfig,
    run_chain,
)
from .errors import ConfigError
from .ingest import LogLikTable

KIND_EXACT_NULL = "exact_null"
KIND_LOGNORMAL_ALT = "lognormal_alt"
KIND_GAUSSIAN_MODEL = "gaussian_model"
_KINDS = (KIND_EXACT_NULL, KIND_LOGNORMAL_ALT, KIND_GAUSSIAN_MODEL)

# Fixed parameters of the conjugate Gaussian task.
TRUE_MEAN = 0.0
NOISE_VAR = 1.0
N_TRAIN = 50
PRIOR_VAR = 100.0
PROPOSAL_STD = 0.5

# Spawn-key namespaces keeping the task dataset and the chains decoupled.
_NS_STREAM = 0
_NS_TASK = 1
_NS_CHAIN = 2


@dataclass(frozen=True)
class ScenarioSpec:
    """Parameters of one synthetic scenario.

    ``mu`` is the mean lift per tested sample (alternative only; the
    exact null forces it to zero).  ``sigma`` is the log-ratio
    volatility; zero is allowed and makes the stream deterministic.
    ``init_offset`` displaces the Metropolis chains' start away from the
    optimum, emulating a truncated burn-in with a deliberately poor
    first sample.
    """

    kind: str
    mu: float = 0.0
    sigma: float = 1.0
    m: int = 32
    chains: int = 4
    budget: int = 100
    seed: int = 0
    init_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.kind == KIND_EXACT_NULL and self.mu != 0.0:
            raise ConfigError("the exact null forces mu = 0")
        if not math.isfinite(self.sigma) or self.sigma < 0.0:
            raise ConfigError(f"sigma must be finite and >= 0, got {self.sigma}")
        if not math.isfinite(self.mu):
            raise ConfigError("mu must be finite")
        if self.m < 1 or self.chains < 1 or self.budget < 1:
            raise ConfigError("m, chains, and budget must all be >= 1")


@dataclass
class ValidityResult:
    """Monte Carlo summary of the stopping rule under a scenario."""

    alpha: float
    replications: int
    rejections: int
    rejection_rate: float
    mean_e_at_checkpoints: dict[int, tuple[float, float]]  # k -> (mean, se)
    stopping_time_quantiles: Optional[tuple[float, float, float]]


def _rng(seed: int, *spawn_key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(seed % 2**64, spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(seq))


def _chain_label(index: int, chains: int) -> str:
    width = len(str(max(chains - 1, 0)))
    return f"c{index:0{width}d}"


def generate_log_ratio_stream(spec: ScenarioSpec, chain: int) -> list[LogRatioStep]:
    """The chain's i.i.d. log e-value stream, one step per tested sample.

    Under ``exact_null`` each step is ``Normal(-sigma^2/2, sigma^2)`` so
    the e-value has mean exactly 1; under ``lognormal_alt`` the location
    shifts by ``mu``.  Fully determined by ``(spec.seed, chain)``.
    """
    if spec.kind == KIND_GAUSSIAN_MODEL:
        raise ConfigError(
            "gaussian_model produces log-likelihood tables, not raw streams; "
            "use run_gaussian_model"
        )
    loc = spec.mu - spec.sigma**2 / 2.0
    if spec.sigma == 0.0:
        draws = np.full(spec.budget, loc)
    else:
        rng = _rng(spec.seed, _NS_STREAM, chain)
        draws = rng.normal(loc, spec.sigma, size=spec.budget)
    return [
        LogRatioStep(sample_index=FIRST_TESTED_INDEX + i, log_s=float(x))
        for i, x in enumerate(draws)
    ]


# -- conjugate Gaussian task ---------------------------------------------------


@dataclass(frozen=True)
class GaussianTask:
    """Data and closed-form posterior of the 1-D unknown-mean task."""

    train_y: np.ndarray
    validation_y: np.ndarray
    report_y: np.ndarray
    posterior_mean: float
    posterior_var: float

    def log_posterior(self, theta: float) -> float:
        """Unnormalized log posterior density of the mean parameter."""
        return -((theta - self.posterior_mean) ** 2) / (2.0 * self.posterior_var)


def make_gaussian_task(spec: ScenarioSpec) -> GaussianTask:
    """Draw the datasets and compute the exact conjugate posterior.

    Observations are ``Normal(0, 1)``; the prior on the mean is
    ``Normal(0, 10^2)``.  The posterior is Gaussian with precision
    ``1/prior_var + n/noise_var``, and its mean doubles as the MAP, which
    is the warmstart.
    """
    rng = _rng(spec.seed, _NS_TASK)
    train = rng.normal(TRUE_MEAN, math.sqrt(NOISE_VAR), size=N_TRAIN)
    validation = rng.normal(TRUE_MEAN, math.sqrt(NOISE_VAR), size=spec.m)
    report = rng.normal(TRUE_MEAN, math.sqrt(NOISE_VAR), size=spec.m)
    posterior_var = 1.0 / (1.0 / PRIOR_VAR + N_TRAIN / NOISE_VAR)
    posterior_mean = posterior_var * train.sum() / NOISE_VAR
    return GaussianTask(
        train_y=train,
        validation_y=validation,
        report_y=report,
        posterior_mean=float(posterior_mean),
        posterior_var=float(posterior_var),
    )


def gaussian_loglik_row(theta: float, ys: np.ndarray) -> np.ndarray:
    """Per-point Gaussian log density of observations under mean ``theta``."""
    return -0.5 * math.log(2.0 * math.pi * NOISE_VAR) - (ys - theta) ** 2 / (
        2.0 * NOISE_VAR
    )


def random_walk_metropolis(
    log_density: Callable[[float], float],
    init: float,
    steps: int,
    proposal_std: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Plain random-walk Metropolis on a scalar parameter.

    Returns the sampled states (one per step, the current state is
    recorded whether or not the proposal was accepted) and the
    acceptance rate.
    """
    states = np.empty(steps)
    x = float(init)
    lp = log_density(x)
    accepted = 0
    for i in range(steps):
        proposal = x + proposal_std * rng.standard_normal()
        lp_proposal = log_density(proposal)
        if math.log(rng.random()) < lp_proposal - lp:
            x, lp = proposal, lp_proposal
            accepted += 1
        states[i] = x
    return states, accepted / steps


@dataclass(frozen=True)
class GaussianRun:
    """All chains' parameter draws for one gaussian_model scenario."""

    spec: ScenarioSpec
    task: GaussianTask
    warmstart_theta: float
    chain_thetas: np.ndarray  # shape (chains, budget)
    acceptance_rates: tuple[float, ...]


def run_gaussian_model(spec: ScenarioSpec) -> GaussianRun:
    """Sample every chain of the conjugate Gaussian scenario.

    Chains start at the MAP plus ``spec.init_offset`` and target the
    exact posterior, so with zero offset they behave like warm-started
    production chains and with a large offset the first draws are
    deliberately poor.
    """
    if spec.kind != KIND_GAUSSIAN_MODEL:
        raise ConfigError(f"expected a gaussian_model spec, got {spec.kind!r}")
    task = make_gaussian_task(spec)
    init = task.posterior_mean + spec.init_offset
    thetas = np.empty((spec.chains, spec.budget))
    rates = []
    for c in range(spec.chains):
        rng = _rng(spec.seed, _NS_CHAIN, c)
        states, rate = random_walk_metropolis(
            task.log_posterior, init, spec.budget, PROPOSAL_STD, rng
        )
        thetas[c] = states
        rates.append(rate)
    return GaussianRun(
        spec=spec,
        task=task,
        warmstart_theta=task.posterior_mean,
        chain_thetas=thetas,
        acceptance_rates=tuple(rates),
    )


def gaussian_tables(run: GaussianRun, dataset: str = "validation") -> list[LogLikTable]:
    """Per-chain log-likelihood tables of a Gaussian run.

    ``dataset`` selects the points rows are evaluated on: the test
    validation set that drives stopping, or the held-out report set.
    """
    if dataset == "validation":
        ys = run.task.validation_y
    elif dataset == "report":
        ys = run.task.report_y
    else:
        raise ConfigError(f"unknown dataset {dataset!r}")
    warmstart = gaussian_loglik_row(run.warmstart_theta, ys)
    tables = []
    for c in range(run.spec.chains):
        rows = np.stack(
            [gaussian_loglik_row(t, ys) for t in run.chain_thetas[c]]
        )
        tables.append(
            LogLikTable(
                chain_id=_chain_label(c, run.spec.chains),
                warmstart_row=warmstart.copy(),
                sample_rows=rows,
                m=run.spec.m,
            )
        )
    return tables


def gaussian_model_run(spec: ScenarioSpec) -> list[LogLikTable]:
    """Convenience wrapper: sample the chains and return validation tables."""
    return gaussian_tables(run_gaussian_model(spec), "validation")


def stream_tables(spec: ScenarioSpec) -> list[LogLikTable]:
    """Materialize stream scenarios as log-likelihood tables.

    The warmstart row is all zeros and sample ``j`` carries its step's
    log e-value in the first point, so running the warmstart-reference
    test on the dumped table reproduces the stream exactly.
    """
    tables = []
    for c in range(spec.chains):
        steps = generate_log_ratio_stream(spec, c)
        rows = np.zeros((spec.budget, spec.m))
        rows[:, 0] = [s.log_s for s in steps]
        tables.append(
            LogLikTable(
                chain_id=_chain_label(c, spec.chains),
                warmstart_row=np.zeros(spec.m),
                sample_rows=rows,
                m=spec.m,
            )
        )
    return tables


# -- Monte Carlo certification -------------------------------------------------


def _log_e_at(decision: ChainDecision, k: int) -> float:
    """Log evidence at sample index ``k``, frozen at the stopping time."""
    trajectory = decision.trajectory
    if not trajectory:
        return 0.0
    position = k - FIRST_TESTED_INDEX
    if position < 0:
        return 0.0
    if position >= len(trajectory):
        return trajectory[-1][1]
    return trajectory[position][1]


def _monte_carlo(spec: ScenarioSpec, alpha: float, replications: int) -> ValidityResult:
    config = StoppingConfig(alpha=alpha, budget=spec.budget)
    checkpoints = sorted(
        {k for k in (5, 20, min(100, spec.budget)) if k - 1 <= spec.budget}
    )
    log_e_samples: dict[int, list[float]] = {k: [] for k in checkpoints}
    stop_indices = []
    rejections = 0

    for rep in range(replications):
        steps = generate_log_ratio_stream(spec, rep)
        decision = run_chain(steps, config, chain_id=str(rep))
        if decision.verdict == REJECTED_H0:
            rejections += 1
            stop_indices.append(decision.stop_index)
        for k in checkpoints:
            log_e_samples[k].append(_log_e_at(decision, k))

    mean_e = {}
    for k in checkpoints:
        e_values = np.exp(np.asarray(log_e_samples[k]))
        mean = float(np.mean(e_values))
        se = float(np.std(e_values, ddof=1) / math.sqrt(replications))
        mean_e[k] = (mean, se)

    quantiles = None
    if stop_indices:
        q25, q50, q75 = np.percentile(stop_indices, [25.0, 50.0, 75.0])
        quantiles = (float(q25), float(q50), float(q75))

    return ValidityResult(
        alpha=alpha,
        replications=replications,
        rejections=rejections,
        rejection_rate=rejections / replications,
        mean_e_at_checkpoints=mean_e,
        stopping_time_quantiles=quantiles,
    )


def certify_validity(
    spec: ScenarioSpec, alpha: float, replications: int
) -> ValidityResult:
    """Empirically certify the Type-I guarantee on the boundary null.

    Runs the full per-chain stopping rule on ``replications``
    independent exact-null streams and reports the rejection rate, which
    the anytime-valid guarantee bounds by ``alpha``, together with the
    mean e-value at fixed checkpoints (a supermartingale stays at or
    below 1 in expectation).
    """
    if spec.kind != KIND_EXACT_NULL:
        raise ConfigError("validity certification requires the exact_null kind")
    if replications < 500:
        raise ConfigError(
            f"need at least 500 replications for certification, got {replications}"
        )
    return _monte_carlo(spec, alpha, replications)


def power_run(
    spec: ScenarioSpec, alpha: float, replications: int
) -> ValidityResult:
    """Monte Carlo rejection rate and stopping times under an alternative."""
    if spec.kind == KIND_GAUSSIAN_MODEL:
        raise ConfigError("power runs operate on stream scenarios")
    if replications < 1:
        raise ConfigError("need at least one replication")
    return _monte_carlo(spec, alpha, replications)
