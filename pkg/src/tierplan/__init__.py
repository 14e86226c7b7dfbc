"""SLO-aware query planning and trace-driven simulation for multi-tier ML
pipelines: guided-sampling profiling, cost-aware multi-objective Bayesian
search, Pareto resource pruning, and greedy multi-query scheduling with
exhaustive oracles."""

from .landscape import (
    ArrivalTrace,
    GroundTruthLandscape,
    generate_landscape,
    generate_trace,
    sample_case,
    true_pareto_set,
)
from .latency import (
    LatencyBreakdown,
    OperatorTimings,
    compute_time,
    pipeline_latency,
    plan_hourly_cost,
    profiling_cost,
    transfer_time,
)
from .model import (
    RESOURCE_FRACTIONS,
    OperatorSpec,
    PipelineSpec,
    PlanPoint,
    ProfileOutcome,
    Query,
    SchemaError,
    SpaceTooLargeError,
    Tier,
    TierTopology,
    Verdict,
    enumerate_plan_space,
    plan_space_size,
)
from .profiler import (
    PrefixCache,
    ProfilingSession,
    Stratification,
    next_case,
    profile_plan,
    stratify,
    variance_random,
    variance_stratified,
)
from .scheduler import (
    DeploymentState,
    OracleInstance,
    ScoredPlan,
    age_weights,
    greedy_cost,
    greedy_goodput,
    ilp_oracle_limited,
    ilp_oracle_unlimited,
    replan,
)
from .search import (
    CandidatePlan,
    CandidateSet,
    HistoryStore,
    SearchConfig,
    SurrogatePair,
    history_propose,
    pareto_optimize,
    propose,
    single_query_search,
    update,
    utility,
)
from .sim import MetricsReport, SimConfig, compare, run

__version__ = "0.1.0"
