"""Single-query planning: cost-aware multi-objective Bayesian search.

Configurations and placements are searched with resources over-provisioned
(all fractions 1.0); any plan feasible at some allocation is feasible at
full allocation, so the search-phase pool is a superset that contains the
optimum and fine-grained resource allocation is deferred to Pareto pruning
and the multi-query scheduler.

Two independent Gaussian-process surrogates drive the acquisition: one maps
configuration one-hots to accuracy, the other maps configuration+placement
one-hots to latency. The acquisition multiplies the probability of meeting
each SLO and divides by the predicted profiling cost, so expensive plans
must earn their evaluation. Completed sessions park their surrogates in a
history store; new sessions let the most similar histories (smallest
prediction gap against fresh observations) vote on proposals until the
session's own model outpredicts them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import latency as latmod
from .landscape import GroundTruthLandscape
from .model import (
    RESOURCE_FRACTIONS,
    PipelineSpec,
    PlanPoint,
    ProfileOutcome,
    Query,
    TierTopology,
    Verdict,
    enumerate_search_pool,
    pareto_filter,
)
from .profiler import (
    DEFAULT_PLANNER_STRATA,
    NullCache,
    PrefixCache,
    profile_plan,
    profile_plan_fixed_n,
    stratify,
)

GP_NOISE = 1e-4
COST_FLOOR_DOLLARS = 1e-6
GAP_EPS = 1e-6


class GaussianProcess:
    """Exact GP regression with a fixed RBF kernel (length scale 1, unit
    signal variance, observation noise 1e-4). Targets are standardized
    internally; no hyperparameter optimization, so refits are deterministic
    and cheap at planning scale."""

    def __init__(self, noise: float = GP_NOISE):
        self.noise = noise
        self._x: np.ndarray | None = None
        self._alpha: np.ndarray | None = None
        self._chol: np.ndarray | None = None
        self._y_mean = 0.0
        self._y_std = 1.0
        self.n_obs = 0

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
        return np.exp(-0.5 * np.maximum(sq, 0.0))

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GaussianProcess":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        self.n_obs = len(y)
        self._y_mean = float(y.mean())
        std = float(y.std())
        self._y_std = std if std > 1e-12 else 1.0
        z = (y - self._y_mean) / self._y_std
        k = self._kernel(x, x) + self.noise * np.eye(len(y))
        self._chol = np.linalg.cholesky(k)
        self._alpha = np.linalg.solve(self._chol.T, np.linalg.solve(self._chol, z))
        self._x = x
        return self

    def predict(self, xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and std at query points (always positive std)."""
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        if self._x is None:
            return np.zeros(len(xq)), np.full(len(xq), self._y_std)
        kq = self._kernel(xq, self._x)
        mu = self._y_mean + self._y_std * (kq @ self._alpha)
        v = np.linalg.solve(self._chol, kq.T)
        var = np.maximum(1.0 - np.sum(v * v, axis=0), self.noise)
        return mu, self._y_std * np.sqrt(var)

def encode_configuration(plan: PlanPoint, pipeline: PipelineSpec) -> np.ndarray:
    dims = [len(op.knob_domain) for op in pipeline.operators]
    vec = np.zeros(sum(dims))
    off = 0
    for c, d in zip(plan.configuration, dims):
        vec[off + c] = 1.0
        off += d
    return vec


def encode_config_placement(plan: PlanPoint, pipeline: PipelineSpec, num_tiers: int) -> np.ndarray:
    head = encode_configuration(plan, pipeline)
    tail = np.zeros(len(pipeline) * num_tiers)
    for i, t in enumerate(plan.placement):
        tail[i * num_tiers + t] = 1.0
    return np.concatenate([head, tail])


@dataclass
class SurrogatePair:
    """Accuracy and latency regressors plus this session's prediction-gap
    window. The accuracy model never sees placement or resources; the
    latency model never sees resources (search is over-provisioned)."""

    pipeline: PipelineSpec
    num_tiers: int
    f_a: GaussianProcess = field(default_factory=GaussianProcess)
    f_l: GaussianProcess = field(default_factory=GaussianProcess)
    obs_x_a: list = field(default_factory=list)
    obs_y_a: list = field(default_factory=list)
    obs_x_l: list = field(default_factory=list)
    obs_y_l: list = field(default_factory=list)
    gap_window: list = field(default_factory=list)
    gap_window_len: int = 5

    @property
    def n_obs(self) -> int:
        return len(self.obs_y_a)

    def predict(self, plans: list[PlanPoint]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        xa = np.stack([encode_configuration(p, self.pipeline) for p in plans])
        xl = np.stack([encode_config_placement(p, self.pipeline, self.num_tiers) for p in plans])
        mu_a, sd_a = self.f_a.predict(xa)
        mu_l, sd_l = self.f_l.predict(xl)
        return mu_a, sd_a, mu_l, sd_l

    def own_gap(self) -> float:
        """Trailing-window mean prediction gap; infinite before any data."""
        if not self.gap_window:
            return math.inf
        return float(np.mean(self.gap_window))

    def record_gap(self, gap: float) -> None:
        self.gap_window.append(gap)
        if len(self.gap_window) > self.gap_window_len:
            self.gap_window.pop(0)

    def fit_new_point(self, plan: PlanPoint, accuracy: float, latency_s: float) -> None:
        xa = encode_configuration(plan, self.pipeline)
        xl = encode_config_placement(plan, self.pipeline, self.num_tiers)
        # an exact repeat of a known observation leaves the fit unchanged
        for i in range(len(self.obs_y_a)):
            if (
                self.obs_y_a[i] == accuracy
                and self.obs_y_l[i] == latency_s
                and np.array_equal(self.obs_x_a[i], xa)
                and np.array_equal(self.obs_x_l[i], xl)
            ):
                return
        self.obs_x_a.append(xa)
        self.obs_y_a.append(accuracy)
        self.obs_x_l.append(xl)
        self.obs_y_l.append(latency_s)
        self.f_a.fit(np.stack(self.obs_x_a), np.array(self.obs_y_a))
        self.f_l.fit(np.stack(self.obs_x_l), np.array(self.obs_y_l))

    def inflated_copy(self, factor: float) -> "SurrogatePair":
        """Warm-start copy for replanning: observations retained, predictive
        trust reduced by inflating observation noise."""
        pair = SurrogatePair(pipeline=self.pipeline, num_tiers=self.num_tiers)
        pair.obs_x_a = list(self.obs_x_a)
        pair.obs_y_a = list(self.obs_y_a)
        pair.obs_x_l = list(self.obs_x_l)
        pair.obs_y_l = list(self.obs_y_l)
        pair.f_a = GaussianProcess(noise=GP_NOISE * factor)
        pair.f_l = GaussianProcess(noise=GP_NOISE * factor)
        if pair.obs_y_a:
            pair.f_a.fit(np.stack(pair.obs_x_a), np.array(pair.obs_y_a))
            pair.f_l.fit(np.stack(pair.obs_x_l), np.array(pair.obs_y_l))
        return pair


@dataclass
class HistoryEntry:
    pair: SurrogatePair
    gap_sum: float = 0.0
    gap_n: int = 0
    pool_scores: np.ndarray | None = None
    pool_costs: np.ndarray | None = None

    @property
    def gap(self) -> float:
        return self.gap_sum / self.gap_n if self.gap_n else math.inf


class HistoryStore:
    """Ring of completed sessions' surrogate pairs.

    The store itself only grows at session completion (under exclusive
    access); per-query gap accounting lives in a :class:`HistorySession`
    snapshot so concurrent sessions never share mutable state.
    """

    def __init__(self, capacity: int = 32):
        self.capacity = capacity
        self.pairs: list[SurrogatePair] = []

    def push(self, pair: SurrogatePair) -> None:
        self.pairs.append(pair)
        if len(self.pairs) > self.capacity:
            self.pairs.pop(0)

    def session(
        self, top_k: int = 10, pipeline: PipelineSpec | None = None, num_tiers: int | None = None
    ) -> "HistorySession":
        """Snapshot compatible entries: a history model can only score plans
        that share its encoding (same knob sizes and tier count)."""
        pairs = self.pairs
        if pipeline is not None:
            sig = tuple(len(op.knob_domain) for op in pipeline.operators)
            pairs = [
                p
                for p in pairs
                if tuple(len(op.knob_domain) for op in p.pipeline.operators) == sig
                and (num_tiers is None or p.num_tiers == num_tiers)
            ]
        return HistorySession([HistoryEntry(pair=p) for p in pairs], top_k)

    def __len__(self) -> int:
        return len(self.pairs)


class HistorySession:
    """One query's view of the history: cumulative prediction gap of every
    stored model against this query's profiled observations.

    History models are frozen for the session, so their scores over a fixed
    candidate pool are computed once and reused across voting steps; only
    the gap weights move.
    """

    def __init__(self, entries: list[HistoryEntry], top_k: int = 10):
        self.entries = entries
        self.top_k_count = top_k
        self._primed: tuple | None = None

    def top_k(self) -> list[HistoryEntry]:
        order = sorted(range(len(self.entries)), key=lambda i: (self.entries[i].gap, i))
        return [self.entries[i] for i in order[: self.top_k_count]]

    def best_gap(self) -> float:
        return min((e.gap for e in self.entries), default=math.inf)

    def update_gaps(self, plan: PlanPoint, accuracy: float, latency_s: float, l_slo: float) -> None:
        for e in self.entries:
            mu_a, _, mu_l, _ = e.pair.predict([plan])
            e.gap_sum += prediction_gap(float(mu_a[0]), float(mu_l[0]), accuracy, latency_s, l_slo)
            e.gap_n += 1

    def prime(
        self,
        pool_xa: np.ndarray,
        pool_xl: np.ndarray,
        a_slo: float,
        l_slo: float,
        min_samples: int,
        price_per_hour: float,
    ) -> None:
        self._primed = (pool_xa, pool_xl, a_slo, l_slo, min_samples, price_per_hour)
        for e in self.entries:
            e.pool_scores = None
            e.pool_costs = None

    def _entry_pool_scores(self, e: HistoryEntry) -> tuple[np.ndarray, np.ndarray]:
        if e.pool_scores is None:
            xa, xl, a_slo, l_slo, ms, price = self._primed
            e.pool_scores, e.pool_costs = _score_encoded(e.pair, xa, xl, a_slo, l_slo, ms, price)
        return e.pool_scores, e.pool_costs

    def vote_indices(self, idx: list[int]) -> tuple[np.ndarray, np.ndarray]:
        """Weighted-sum vote of the current top-K over pool indices ``idx``."""
        entries = self.top_k()
        weights = _gap_weights(entries)
        combined = np.zeros(len(idx))
        cost_acc = np.zeros(len(idx))
        for w, e in zip(weights, entries):
            scores, costs = self._entry_pool_scores(e)
            combined += w * scores[idx]
            cost_acc += w * costs[idx]
        return combined, cost_acc

    def __len__(self) -> int:
        return len(self.entries)


def _gap_weights(entries: list[HistoryEntry]) -> np.ndarray:
    raw = np.array([1.0 / (e.gap + GAP_EPS) if math.isfinite(e.gap) else 0.0 for e in entries])
    if raw.sum() <= 0:
        raw = np.ones(len(entries))
    return raw / raw.sum()


def prediction_gap(mu_a: float, mu_l: float, accuracy: float, latency_s: float, l_slo: float) -> float:
    """Dimensionless gap between a model's predictions and one observation:
    accuracy error plus latency error normalized by the latency SLO."""
    return abs(mu_a - accuracy) + abs(mu_l - latency_s) / max(l_slo, 1e-9)


def profiling_cost_of_latency(
    mu_l: float,
    min_samples: int = 50,
    price_per_hour: float = latmod.DEFAULT_GPU_PRICE_PER_HOUR,
) -> float:
    """Dollars to profile a minimum batch of cases at the predicted per-plan
    latency, floored to keep the acquisition's cost division bounded."""
    dollars = max(mu_l, 0.0) * min_samples / 3600.0 * price_per_hour
    return max(dollars, COST_FLOOR_DOLLARS)


def acquisition_score(
    mu_a: float,
    sd_a: float,
    mu_l: float,
    sd_l: float,
    a_slo: float,
    l_slo: float,
    min_samples: int = 50,
    price_per_hour: float = latmod.DEFAULT_GPU_PRICE_PER_HOUR,
) -> float:
    """Pr[accuracy >= A_slo] * Pr[latency <= L_slo] / C(predicted latency)."""
    if sd_a <= 0:
        p_acc = 1.0 if mu_a >= a_slo else 0.0
    else:
        p_acc = float(ndtr((mu_a - a_slo) / sd_a))
    if sd_l <= 0:
        p_lat = 1.0 if mu_l <= l_slo else 0.0
    else:
        p_lat = float(ndtr((l_slo - mu_l) / sd_l))
    return p_acc * p_lat / profiling_cost_of_latency(mu_l, min_samples, price_per_hour)


def utility(
    plan: PlanPoint,
    a_slo: float,
    l_slo: float,
    surrogates: SurrogatePair,
    min_samples: int = 50,
    price_per_hour: float = latmod.DEFAULT_GPU_PRICE_PER_HOUR,
) -> float:
    mu_a, sd_a, mu_l, sd_l = surrogates.predict([plan])
    return acquisition_score(
        float(mu_a[0]), float(sd_a[0]), float(mu_l[0]), float(sd_l[0]), a_slo, l_slo, min_samples, price_per_hour
    )


def _argmax_with_ties(scores: np.ndarray, costs: np.ndarray) -> int:
    """Index of the best score; ties go to lowest predicted cost, then index."""
    best = float(np.max(scores))
    tied = [i for i in range(len(scores)) if scores[i] == best]
    return min(tied, key=lambda i: (costs[i], i))


def _score_encoded(
    pair: SurrogatePair,
    xa: np.ndarray,
    xl: np.ndarray,
    a_slo: float,
    l_slo: float,
    min_samples: int,
    price_per_hour: float,
) -> tuple[np.ndarray, np.ndarray]:
    mu_a, sd_a = pair.f_a.predict(xa)
    mu_l, sd_l = pair.f_l.predict(xl)
    p_acc = ndtr((mu_a - a_slo) / np.maximum(sd_a, 1e-12))
    p_lat = ndtr((l_slo - mu_l) / np.maximum(sd_l, 1e-12))
    costs = np.maximum(np.maximum(mu_l, 0.0) * min_samples / 3600.0 * price_per_hour, COST_FLOOR_DOLLARS)
    return p_acc * p_lat / costs, costs


def _encode_pool(pool: list[PlanPoint], pipeline: PipelineSpec, num_tiers: int) -> tuple[np.ndarray, np.ndarray]:
    xa = np.stack([encode_configuration(p, pipeline) for p in pool])
    xl = np.stack([encode_config_placement(p, pipeline, num_tiers) for p in pool])
    return xa, xl


def _score_pool(
    pool: list[PlanPoint],
    a_slo: float,
    l_slo: float,
    pair: SurrogatePair,
    min_samples: int,
    price_per_hour: float,
    encoded: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    xa, xl = encoded if encoded is not None else _encode_pool(pool, pair.pipeline, pair.num_tiers)
    return _score_encoded(pair, xa, xl, a_slo, l_slo, min_samples, price_per_hour)


def history_propose(
    pool: list[PlanPoint],
    a_slo: float,
    l_slo: float,
    entries: list[HistoryEntry],
    min_samples: int = 50,
    price_per_hour: float = latmod.DEFAULT_GPU_PRICE_PER_HOUR,
    encoded: tuple[np.ndarray, np.ndarray] | None = None,
) -> PlanPoint:
    """Similar past queries vote: weighted sum of per-history utilities with
    weights proportional to 1/(gap + eps)."""
    if not entries:
        raise ValueError("history_propose requires at least one history entry")
    weights = _gap_weights(entries)
    combined = np.zeros(len(pool))
    cost_acc = np.zeros(len(pool))
    for w, e in zip(weights, entries):
        scores, costs = _score_pool(pool, a_slo, l_slo, e.pair, min_samples, price_per_hour, encoded)
        combined += w * scores
        cost_acc += w * costs
    return pool[_argmax_with_ties(combined, cost_acc)]


def propose(
    pool: list[PlanPoint],
    a_slo: float,
    l_slo: float,
    surrogates: SurrogatePair,
    history: HistorySession | None,
    rng: np.random.Generator,
    min_samples: int = 50,
    price_per_hour: float = latmod.DEFAULT_GPU_PRICE_PER_HOUR,
    encoded: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[PlanPoint, str]:
    """Next plan to profile plus which branch chose it ('cmbo', 'history' or
    'cold'). The history vote is used until the session's own prediction gap
    beats the best history gap."""
    if not pool:
        raise ValueError("propose called with an empty pool")
    use_history = history is not None and len(history) > 0 and not (surrogates.own_gap() < history.best_gap())
    if use_history:
        plan = history_propose(pool, a_slo, l_slo, history.top_k(), min_samples, price_per_hour, encoded)
        return plan, "history"
    if surrogates.n_obs == 0:
        return pool[int(rng.integers(len(pool)))], "cold"
    scores, costs = _score_pool(pool, a_slo, l_slo, surrogates, min_samples, price_per_hour, encoded)
    return pool[_argmax_with_ties(scores, costs)], "cmbo"


def update(
    surrogates: SurrogatePair,
    history: HistorySession | None,
    plan: PlanPoint,
    outcome: ProfileOutcome,
    measured_latency_s: float,
    l_slo: float,
) -> None:
    """Fold one profiled observation into the session model and all gaps.

    Gaps compare predictions made before this observation was seen.
    """
    accuracy = outcome.accuracy_estimate
    if surrogates.n_obs > 0:
        mu_a, _, mu_l, _ = surrogates.predict([plan])
        surrogates.record_gap(
            prediction_gap(float(mu_a[0]), float(mu_l[0]), accuracy, measured_latency_s, l_slo)
        )
    if history is not None:
        history.update_gaps(plan, accuracy, measured_latency_s, l_slo)
    surrogates.fit_new_point(plan, accuracy, measured_latency_s)


# ---------------------------------------------------------------------------
# Pareto resource pruning


def pareto_optimize(
    plan: PlanPoint,
    pipeline: PipelineSpec,
    topology: TierTopology,
    timings: latmod.OperatorTimings,
    l_slo: float,
) -> list[PlanPoint]:
    """Tighten per-operator resource fractions until the latency SLO binds.

    Walks the fraction grid downward from the over-provisioned corner
    (latency is monotone in every fraction, so every feasible allocation is
    reachable through feasible single-step reductions), keeps the terminal
    allocations where no single reduction stays within the SLO, and returns
    their (cost, latency) non-dominated subset. Batching operators never
    affect latency, so they always end at the cheapest fraction.
    """
    m = len(pipeline)
    levels = RESOURCE_FRACTIONS
    bottom = len(levels) - 1

    def lat_of(state: tuple[int, ...]) -> float:
        p = plan.with_resources(tuple(levels[i] for i in state))
        return latmod.pipeline_latency(p, pipeline, topology, timings).total_s

    start = (0,) * m
    start_lat = lat_of(start)
    if start_lat > l_slo:
        raise ValueError(
            f"plan violates the latency SLO even over-provisioned ({start_lat:.4f}s > {l_slo:.4f}s)"
        )
    feasible: dict[tuple[int, ...], float] = {start: start_lat}
    infeasible: set[tuple[int, ...]] = set()
    minimal: list[tuple[int, ...]] = []
    stack = [start]
    while stack:
        state = stack.pop()
        any_child = False
        for i in range(m):
            if state[i] == bottom:
                continue
            child = state[:i] + (state[i] + 1,) + state[i + 1 :]
            if child in infeasible:
                continue
            lat = feasible.get(child)
            if lat is None:
                lat = lat_of(child)
                if lat > l_slo:
                    infeasible.add(child)
                    continue
                feasible[child] = lat
                stack.append(child)
            any_child = True
        if not any_child:
            minimal.append(state)

    rows = []
    for state in minimal:
        p = plan.with_resources(tuple(levels[i] for i in state))
        rows.append((p, (latmod.plan_hourly_cost(p, topology), feasible[state])))
    kept = pareto_filter(rows, key=lambda r: r[1])
    return [p for p, _ in kept]


# ---------------------------------------------------------------------------
# Full single-query session


@dataclass(frozen=True)
class CandidatePlan:
    plan: PlanPoint
    accuracy_estimate: float
    latency_s: float
    hourly_cost: float

    def to_dict(self) -> dict:
        return {
            "configuration": list(self.plan.configuration),
            "placement": list(self.plan.placement),
            "resources": list(self.plan.resources),
            "accuracy_estimate": self.accuracy_estimate,
            "latency_s": self.latency_s,
            "hourly_cost": self.hourly_cost,
        }


@dataclass(frozen=True)
class CandidateSet:
    """SLO-compliant plans, none dominating another in (cost, latency)."""

    plans: tuple[CandidatePlan, ...]

    @staticmethod
    def build(raw: list[CandidatePlan]) -> "CandidateSet":
        kept = pareto_filter(raw, key=lambda c: (c.hourly_cost, c.latency_s))
        return CandidateSet(plans=tuple(kept))

    def __len__(self) -> int:
        return len(self.plans)

    def cheapest(self) -> CandidatePlan | None:
        return min(self.plans, key=lambda c: (c.hourly_cost, c.latency_s), default=None)


@dataclass
class SearchConfig:
    overhead_s: float = 0.04
    confidence: float = 0.99
    min_samples: int = 50
    n_max: int = 1000
    planner_strata: int = DEFAULT_PLANNER_STRATA
    pool_enumeration_cap: int = 20_000
    pool_sample_size: int = 2_000
    price_per_hour: float = latmod.DEFAULT_GPU_PRICE_PER_HOUR
    use_history: bool = True
    use_cache: bool = True
    profiler_mode: str = "guided"  # or "fixed"
    fixed_n: int = 356
    history_top_k: int = 10


@dataclass
class SearchResult:
    candidates: CandidateSet
    steps: int
    charged_time_s: float
    gpu_seconds: float
    dollars: float
    time_to_first_feasible_s: float | None
    steps_to_first_feasible: int | None
    surrogates: SurrogatePair
    telemetry: list[dict]
    pool_exhausted: bool


def single_query_search(
    query: Query,
    land: GroundTruthLandscape,
    topology: TierTopology,
    history: HistoryStore | None = None,
    seed: int = 0,
    config: SearchConfig | None = None,
    warm_pair: SurrogatePair | None = None,
    variance_inflation: float = 25.0,
    profile_log=None,
) -> SearchResult:
    """Propose -> profile -> Pareto-prune loop under the query's budget.

    Charges simulated time for profiling (reference-tier compute of the
    sampled cases) plus a fixed per-step optimizer overhead. Returns the
    accumulated candidate set, possibly empty. Passing ``warm_pair`` seeds
    the session with a prior model whose trust is reduced by
    ``variance_inflation`` (used for drift replanning).
    """
    cfg = config or SearchConfig()
    rng = np.random.default_rng(seed)
    pipeline = query.pipeline
    pool = enumerate_search_pool(pipeline, topology)
    pool_index = {plan: i for i, plan in enumerate(pool)}
    pool_xa, pool_xl = _encode_pool(pool, pipeline, topology.num_tiers)
    strat = stratify(land.case_features, min(cfg.planner_strata, land.n_cases), seed=seed)
    cache: PrefixCache | NullCache = PrefixCache() if cfg.use_cache else NullCache()
    if warm_pair is not None:
        surrogates = warm_pair.inflated_copy(variance_inflation)
    else:
        surrogates = SurrogatePair(pipeline=pipeline, num_tiers=topology.num_tiers)
    hist = (
        history.session(cfg.history_top_k, pipeline, topology.num_tiers)
        if (cfg.use_history and history is not None)
        else None
    )
    if hist is not None:
        hist.prime(pool_xa, pool_xl, query.a_slo, query.l_slo, cfg.min_samples, cfg.price_per_hour)

    time_s = 0.0
    gpu_s = 0.0
    steps = 0
    first_feasible_time: float | None = None
    first_feasible_step: int | None = None
    raw_candidates: list[CandidatePlan] = []
    telemetry: list[dict] = []
    profiled: set[int] = set()
    pool_exhausted = False

    def within_budget() -> bool:
        if query.response_budget_s is not None:
            return time_s < query.response_budget_s
        return gpu_s / 3600.0 < query.profiling_budget_gpuh

    while within_budget():
        unprofiled = [i for i in range(len(pool)) if i not in profiled]
        if not unprofiled:
            pool_exhausted = True
            break
        if len(pool) > cfg.pool_enumeration_cap and len(unprofiled) > cfg.pool_sample_size:
            pick = rng.choice(len(unprofiled), size=cfg.pool_sample_size, replace=False)
            step_idx = [unprofiled[int(j)] for j in sorted(pick)]
        else:
            step_idx = unprofiled
        step_pool = [pool[i] for i in step_idx]

        # Same branching as propose(), with the history vote served from the
        # session's cached per-entry pool scores.
        use_history = hist is not None and len(hist) > 0 and not (surrogates.own_gap() < hist.best_gap())
        if use_history:
            combined, cost_acc = hist.vote_indices(step_idx)
            plan = step_pool[_argmax_with_ties(combined, cost_acc)]
            branch = "history"
        elif surrogates.n_obs == 0:
            plan = step_pool[int(rng.integers(len(step_pool)))]
            branch = "cold"
        else:
            scores, costs = _score_encoded(
                surrogates,
                pool_xa[step_idx],
                pool_xl[step_idx],
                query.a_slo,
                query.l_slo,
                cfg.min_samples,
                cfg.price_per_hour,
            )
            plan = step_pool[_argmax_with_ties(scores, costs)]
            branch = "cmbo"
        steps += 1
        time_s += cfg.overhead_s
        profiled.add(pool_index[plan])

        if cfg.profiler_mode == "fixed":
            outcome = profile_plan_fixed_n(
                plan, land, cfg.fixed_n, cache, query.a_slo, rng, log=profile_log
            )
        else:
            outcome = profile_plan(
                plan,
                land,
                strat,
                cache,
                query.a_slo,
                rng,
                confidence=cfg.confidence,
                min_samples=cfg.min_samples,
                n_max=cfg.n_max,
                log=profile_log,
            )
        time_s += outcome.profiling_cost
        gpu_s += outcome.profiling_cost

        model_latency = latmod.pipeline_latency(
            plan, pipeline, topology, land.timings_for(plan.configuration)
        ).total_s
        update(surrogates, hist, plan, outcome, model_latency, query.l_slo)

        feasible = outcome.verdict == Verdict.PASS_ACCURACY and model_latency <= query.l_slo
        if feasible:
            if first_feasible_time is None:
                first_feasible_time = time_s
                first_feasible_step = steps
            variants = pareto_optimize(
                plan, pipeline, topology, land.timings_for(plan.configuration), query.l_slo
            )
            for v in variants:
                lat = latmod.pipeline_latency(
                    v, pipeline, topology, land.timings_for(v.configuration)
                ).total_s
                raw_candidates.append(
                    CandidatePlan(
                        plan=v,
                        accuracy_estimate=outcome.accuracy_estimate,
                        latency_s=lat,
                        hourly_cost=latmod.plan_hourly_cost(v, topology),
                    )
                )
        telemetry.append(
            {
                "step": steps,
                "branch": branch,
                "configuration": list(plan.configuration),
                "placement": list(plan.placement),
                "verdict": outcome.verdict.value,
                "accuracy_estimate": outcome.accuracy_estimate,
                "samples": outcome.samples_used,
                "model_latency_s": model_latency,
                "charged_time_s": time_s,
                "gpu_seconds": gpu_s,
                "feasible": feasible,
            }
        )

    candidates = CandidateSet.build(raw_candidates)
    dollars = gpu_s / 3600.0 * cfg.price_per_hour
    if history is not None and surrogates.n_obs > 0:
        history.push(surrogates)
    return SearchResult(
        candidates=candidates,
        steps=steps,
        charged_time_s=time_s,
        gpu_seconds=gpu_s,
        dollars=dollars,
        time_to_first_feasible_s=first_feasible_time,
        steps_to_first_feasible=first_feasible_step,
        surrogates=surrogates,
        telemetry=telemetry,
        pool_exhausted=pool_exhausted,
    )
