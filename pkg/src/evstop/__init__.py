"""Anytime-valid stopping for sequentially sampled model ensembles.

Per-sample validation likelihood ratios against a fixed reference are
accumulated as a test supermartingale; a chain stops the moment the
evidence reaches ``1/alpha``, which bounds the false-stop probability by
``alpha`` at any data-dependent stopping time.  Chains that never reach
the threshold are discarded and the ensemble falls back to its baseline,
so abstention is free.
"""

from .diagnostics import (
    JensenGapReport,
    ThinningDiagnostics,
    apply_thinning,
    integrated_autocorrelation_time,
    jensen_gap,
    loglik_sum_series,
)
from .ensemble import (
    ChainMembership,
    ChainSummary,
    EnsembleReport,
    assemble_minimal_bde,
    build_report,
    compression_report,
    decide_chain,
    decide_chains,
    format_compression,
    format_report,
    lppd,
    membership_rows,
)
from .eprocess import (
    BUDGET_EXHAUSTED,
    FIRST_TESTED_INDEX,
    REJECTED_H0,
    RUNNING,
    ChainDecision,
    EProcessState,
    LogRatioStep,
    StoppingConfig,
    accumulate,
    run_chain,
    step_log_evalue,
)
from .errors import (
    ConfigError,
    DataError,
    EvstopError,
    InvariantError,
    UsageError,
)
from .ingest import (
    LogLikRecord,
    LogLikTable,
    ReferenceMode,
    build_tables,
    log_ratio_steps,
    parse_records,
    read_records,
    records_to_text,
    select_reference,
    table_to_records,
    candidate_positions,
    write_records,
)
from .simlab import (
    GaussianRun,
    GaussianTask,
    ScenarioSpec,
    ValidityResult,
    certify_validity,
    gaussian_model_run,
    gaussian_tables,
    generate_log_ratio_stream,
    make_gaussian_task,
    power_run,
    random_walk_metropolis,
    run_gaussian_model,
    stream_tables,
)

__version__ = "0.1.0"
