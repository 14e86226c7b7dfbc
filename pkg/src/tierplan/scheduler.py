"""Stage-two global planning across concurrent queries.

Under fixed capacity the greedy admits plans by benefit-to-resource ratio
(w/cr) with first-fit-decreasing machine packing; under elastic capacity it
serves everyone with the best benefit-to-dollar plan and bin-packs machines
per tier. Both are validated against exhaustive integer-program oracles on
small instances (the oracles are test/CLI equipment, never the fast path).

The scheduler is invoked serially by the simulation loop and owns its
DeploymentState exclusively; admitted queries run to completion (no
evictions on admission), though replanning may voluntarily release
resources.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    RESOURCE_FRACTIONS,
    OperatorSpec,
    PipelineSpec,
    PlanPoint,
    Query,
    SpaceTooLargeError,
    TierTopology,
)
from .search import (
    CandidatePlan,
    CandidateSet,
    HistoryStore,
    SearchConfig,
    SearchResult,
    SurrogatePair,
    single_query_search,
)

_EPS = 1e-9

DEFAULT_AGING_BETA = 0.01  # per second of pending time


@dataclass(frozen=True)
class ScoredPlan:
    """One (query, plan) option with its packing footprint.

    ``op_demands``: per-operator (tier, resource units); the operator is the
    packing unit, so each demand fits on a single machine by construction.
    ``cr``: capacity-normalized aggregate demand across tiers.
    """

    query_id: str
    plan: CandidatePlan
    op_demands: tuple[tuple[int, float], ...]
    cr: float
    hourly_cost: float
    weight: float

    @staticmethod
    def build(query_id: str, cand: CandidatePlan, topology: TierTopology, weight: float) -> "ScoredPlan":
        demands = []
        cr = 0.0
        for frac, tier_idx in zip(cand.plan.resources, cand.plan.placement):
            tier = topology.tiers[tier_idx]
            demands.append((tier_idx, frac * tier.capacity))
            cr += frac
        if cr <= 0:
            raise ValueError("aggregate demand must be positive")
        return ScoredPlan(
            query_id=query_id,
            plan=cand,
            op_demands=tuple(demands),
            cr=cr,
            hourly_cost=cand.hourly_cost,
            weight=weight,
        )

    def tier_demand(self, num_tiers: int) -> list[float]:
        out = [0.0] * num_tiers
        for t, d in self.op_demands:
            out[t] += d
        return out


@dataclass
class Assignment:
    scored: ScoredPlan
    op_machines: tuple[tuple[int, int], ...]  # (tier, machine index) per operator


@dataclass
class DeploymentState:
    """Per-machine residual capacity plus the admitted query->plan map."""

    residual: list[list[float]]
    assignments: dict[str, Assignment] = field(default_factory=dict)

    @staticmethod
    def fresh(topology: TierTopology) -> "DeploymentState":
        return DeploymentState(
            residual=[[t.capacity] * t.machine_count for t in topology.tiers]
        )

    def copy(self) -> "DeploymentState":
        return DeploymentState(
            residual=[list(r) for r in self.residual], assignments=dict(self.assignments)
        )

    def try_place(self, scored: ScoredPlan) -> Assignment | None:
        """First-fit-decreasing placement of every operator; all-or-nothing."""
        order = sorted(range(len(scored.op_demands)), key=lambda i: (-scored.op_demands[i][1], i))
        placed: list[tuple[int, int] | None] = [None] * len(scored.op_demands)
        applied: list[tuple[int, int, float]] = []
        ok = True
        for i in order:
            tier, demand = scored.op_demands[i]
            slot = None
            for m, res in enumerate(self.residual[tier]):
                if res >= demand - _EPS:
                    slot = m
                    break
            if slot is None:
                ok = False
                break
            self.residual[tier][slot] -= demand
            applied.append((tier, slot, demand))
            placed[i] = (tier, slot)
        if not ok:
            for tier, slot, demand in applied:
                self.residual[tier][slot] += demand
            return None
        return Assignment(scored=scored, op_machines=tuple(p for p in placed))  # type: ignore[misc]

    def admit(self, assignment: Assignment) -> None:
        if assignment.scored.query_id in self.assignments:
            raise ValueError(f"query {assignment.scored.query_id} already admitted")
        self.assignments[assignment.scored.query_id] = assignment

    def release(self, query_id: str) -> None:
        assignment = self.assignments.pop(query_id, None)
        if assignment is None:
            return
        for (tier, machine), (_, demand) in zip(assignment.op_machines, assignment.scored.op_demands):
            self.residual[tier][machine] += demand

    def admitted_weight(self) -> float:
        return sum(a.scored.weight for a in self.assignments.values())

    def hourly_cost(self) -> float:
        return sum(a.scored.hourly_cost for a in self.assignments.values())


def _admission_pass(
    scored: list[tuple], st: DeploymentState
) -> list[Assignment]:
    admitted = []
    for *_, sp in scored:
        if sp.query_id in st.assignments:
            continue
        assignment = st.try_place(sp)
        if assignment is not None:
            st.admit(assignment)
            admitted.append(assignment)
    return admitted


def greedy_goodput(
    candidates: list[tuple[Query, CandidateSet]],
    topology: TierTopology,
    state: DeploymentState | None = None,
    weights: dict[str, float] | None = None,
) -> DeploymentState:
    """Admit plans greedily until nothing more fits, one plan per query.

    The primary pass ranks all plans across queries by descending w/cr
    (ties toward lower monetary cost, then earlier arrival). A fallback
    pass ranked by raw weight runs on the same starting state, and the
    heavier resulting allocation wins: ratio order alone can strand a
    heavyweight query at small instance sizes. Pass an existing ``state``
    to admit incrementally against current residual capacities;
    unplaceable plans are skipped.
    """
    st = state if state is not None else DeploymentState.fresh(topology)
    ratio_order: list[tuple] = []
    weight_order: list[tuple] = []
    for order, (query, cset) in enumerate(candidates):
        w = weights.get(query.id, query.weight) if weights else query.weight
        for j, cand in enumerate(cset.plans):
            sp = ScoredPlan.build(query.id, cand, topology, w)
            ratio_order.append((-(sp.weight / sp.cr), sp.hourly_cost, order, j, sp))
            weight_order.append((-sp.weight, sp.cr, sp.hourly_cost, order, j, sp))
    ratio_order.sort(key=lambda t: t[:4])
    weight_order.sort(key=lambda t: t[:5])

    trial_ratio = st.copy()
    gain_ratio = sum(a.scored.weight for a in _admission_pass(ratio_order, trial_ratio))
    trial_weight = st.copy()
    gain_weight = sum(a.scored.weight for a in _admission_pass(weight_order, trial_weight))
    winner = ratio_order if gain_ratio >= gain_weight else weight_order
    _admission_pass(winner, st)
    return st


@dataclass
class CostDeployment:
    chosen: dict[str, ScoredPlan]
    unserved: tuple[str, ...]
    machines_per_tier: tuple[int, ...]
    hourly_dollars: float


def ffd_bin_count(items: list[float], capacity: float) -> int:
    """First-fit-decreasing bin count; items must each fit one bin."""
    bins: list[float] = []
    for item in sorted(items, reverse=True):
        if item > capacity + _EPS:
            raise ValueError(f"item {item} exceeds bin capacity {capacity}")
        for i, used in enumerate(bins):
            if used + item <= capacity + _EPS:
                bins[i] = used + item
                break
        else:
            bins.append(item)
    return len(bins)


def greedy_cost(
    candidates: list[tuple[Query, CandidateSet]],
    topology: TierTopology,
) -> CostDeployment:
    """Serve every query with its best benefit-to-dollar plan, then provision
    machines per tier by first-fit-decreasing packing.

    Queries with an empty candidate set are reported unserved and never
    block the others.
    """
    chosen: dict[str, ScoredPlan] = {}
    unserved: list[str] = []
    for query, cset in candidates:
        if len(cset) == 0:
            unserved.append(query.id)
            continue
        best = None
        for cand in cset.plans:
            sp = ScoredPlan.build(query.id, cand, topology, query.weight)
            key = (-(sp.weight / max(sp.hourly_cost, 1e-12)), sp.hourly_cost, sp.plan.latency_s)
            if best is None or key < best[0]:
                best = (key, sp)
        chosen[query.id] = best[1]
    per_tier_items: list[list[float]] = [[] for _ in topology.tiers]
    for sp in chosen.values():
        for tier, demand in sp.op_demands:
            per_tier_items[tier].append(demand)
    machines = []
    dollars = 0.0
    for tier_idx, items in enumerate(per_tier_items):
        tier = topology.tiers[tier_idx]
        k = ffd_bin_count(items, tier.capacity) if items else 0
        machines.append(k)
        dollars += k * tier.machine_hourly_cost
    return CostDeployment(
        chosen=chosen,
        unserved=tuple(unserved),
        machines_per_tier=tuple(machines),
        hourly_dollars=dollars,
    )


# ---------------------------------------------------------------------------
# Exhaustive oracles for the two integer programs (tests and --oracle mode)


@dataclass(frozen=True)
class OracleInstance:
    """Small scheduling instance in oracle form.

    ``queries``: per query, (weight, plan options), each plan a tuple of
    per-operator (tier, resource units). ``machine_caps``: per tier, the
    capacity of each machine. ``tier_prices``: per tier, dollars per
    machine-hour (used by the cost oracle).
    """

    queries: tuple[tuple[float, tuple[tuple[tuple[int, float], ...], ...]], ...]
    machine_caps: tuple[tuple[float, ...], ...]
    tier_prices: tuple[float, ...] = ()

    MAX_QUERIES = 8
    MAX_PLANS = 6
    MAX_MACHINES = 12


def _check_oracle_size(inst: OracleInstance) -> None:
    n = len(inst.queries)
    if n > OracleInstance.MAX_QUERIES:
        raise SpaceTooLargeError(f"oracle limited to {OracleInstance.MAX_QUERIES} queries, got {n}")
    if any(len(plans) > OracleInstance.MAX_PLANS for _, plans in inst.queries):
        raise SpaceTooLargeError(f"oracle limited to {OracleInstance.MAX_PLANS} plans per query")
    total_machines = sum(len(c) for c in inst.machine_caps)
    if total_machines > OracleInstance.MAX_MACHINES:
        raise SpaceTooLargeError(f"oracle limited to {OracleInstance.MAX_MACHINES} machines")


def _canonical(residual: tuple[tuple[float, ...], ...]) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(sorted(round(r, 9) for r in tier)) for tier in residual)


def _tier_blobs(plan: tuple[tuple[int, float], ...], num_tiers: int) -> list[tuple[int, float]]:
    """Aggregate a plan's operator demands per tier: the integer program's
    y variables place one blob per (plan, tier) on a single machine."""
    agg = [0.0] * num_tiers
    for t, d in plan:
        agg[t] += d
    return [(t, d) for t, d in enumerate(agg) if d > _EPS]


def _placements(
    items: list[tuple[int, float]],
    residual: tuple[tuple[float, ...], ...],
) -> list[tuple[tuple[float, ...], ...]]:
    """All distinct residual states after placing every item, with
    identical-machine symmetry pruning."""
    order = sorted(items, key=lambda td: -td[1])
    out: dict = {}

    def go(i: int, res: tuple[tuple[float, ...], ...]) -> None:
        if i == len(order):
            out[_canonical(res)] = res
            return
        tier, demand = order[i]
        tried = set()
        for m, avail in enumerate(res[tier]):
            key = round(avail, 9)
            if key in tried or avail < demand - _EPS:
                continue
            tried.add(key)
            tier_row = list(res[tier])
            tier_row[m] = avail - demand
            go(i + 1, res[:tier] + (tuple(tier_row),) + res[tier + 1 :])

    go(0, residual)
    return list(out.values())


def ilp_oracle_limited(inst: OracleInstance, operator_level: bool = False) -> float:
    """Exact maximum SLO-weighted goodput under fixed per-machine capacity.

    By default follows the integer program to the letter: a chosen plan
    places its aggregate per-tier demand on one machine per tier. With
    ``operator_level`` each operator may land on its own machine (the
    granularity the running greedy packs at), which yields an optimum at
    least as large, so it is the harder yardstick. Enumerates admit/skip
    and plan/machine choices depth-first with weight-bound pruning and
    memoization on (query index, canonical residual state). Refuses
    oversized instances.
    """
    _check_oracle_size(inst)
    n = len(inst.queries)
    num_tiers = len(inst.machine_caps)
    suffix = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1] + inst.queries[i][0]
    memo: dict = {}

    def items_of(plan):
        return list(plan) if operator_level else _tier_blobs(plan, num_tiers)

    def solve(i: int, residual: tuple[tuple[float, ...], ...]) -> float:
        if i == n:
            return 0.0
        key = (i, _canonical(residual))
        hit = memo.get(key)
        if hit is not None:
            return hit
        weight, plans = inst.queries[i]
        best = 0.0
        for plan in plans:
            for new_res in _placements(items_of(plan), residual):
                best = max(best, weight + solve(i + 1, new_res))
            if best >= weight + suffix[i + 1]:
                break
        best = max(best, solve(i + 1, residual))
        memo[key] = best
        return best

    return solve(0, tuple(tuple(c) for c in inst.machine_caps))


def _min_bins(items: list[float], capacity: float) -> int:
    """Exact minimum bin count by branch and bound (FFD upper bound,
    volume lower bound)."""
    items = sorted((x for x in items if x > _EPS), reverse=True)
    if not items:
        return 0
    best = ffd_bin_count(items, capacity)
    lower = math.ceil(sum(items) / capacity - 1e-12)
    if best == lower:
        return best

    def go(i: int, bins: list[float], used: int) -> None:
        nonlocal best
        if used >= best:
            return
        if i == len(items):
            best = used
            return
        remaining_lb = used + max(0, math.ceil((sum(items[i:]) - sum(capacity - b for b in bins)) / capacity - 1e-12))
        if remaining_lb >= best:
            return
        item = items[i]
        seen = set()
        for b in range(len(bins)):
            key = round(bins[b], 9)
            if key in seen or bins[b] + item > capacity + _EPS:
                continue
            seen.add(key)
            bins[b] += item
            go(i + 1, bins, used)
            bins[b] -= item
        bins.append(item)
        go(i + 1, bins, used + 1)
        bins.pop()

    go(0, [], 0)
    return best


def ilp_oracle_unlimited(inst: OracleInstance, operator_level: bool = False) -> float:
    """Exact minimum machine dollars to serve every query (elastic tiers).

    Enumerates plan choices per query with a per-tier volume lower bound,
    then packs each tier's demand with exact bin packing. By default each
    plan contributes one blob per tier (the integer program's granularity);
    ``operator_level`` packs per operator instead, matching the greedy and
    admitting plans whose aggregate tier demand exceeds one machine.
    """
    _check_oracle_size(inst)
    if not inst.tier_prices:
        raise ValueError("cost oracle needs tier_prices")
    n = len(inst.queries)
    if n == 0:
        return 0.0
    num_tiers = len(inst.tier_prices)
    caps = [inst.machine_caps[t][0] if inst.machine_caps[t] else 1.0 for t in range(num_tiers)]

    def items_of(plan):
        return list(plan) if operator_level else _tier_blobs(plan, num_tiers)

    usable: list[tuple[float, tuple]] = []
    for w, plans in inst.queries:
        ok = tuple(
            plan for plan in plans if all(d <= caps[t] + _EPS for t, d in items_of(plan))
        )
        if not ok:
            raise ValueError("cost oracle requires every query to have a machine-feasible plan")
        usable.append((w, ok))
    queries = tuple(usable)

    min_tier_demand = []
    for _, plans in queries:
        per_tier = [min(sum(d for t2, d in plan if t2 == t) for plan in plans) for t in range(num_tiers)]
        min_tier_demand.append(per_tier)
    suffix_min = [[0.0] * num_tiers for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for t in range(num_tiers):
            suffix_min[i][t] = suffix_min[i + 1][t] + min_tier_demand[i][t]

    best = math.inf

    def lower_bound(placed: list[list[float]], i: int) -> float:
        lb = 0.0
        for t in range(num_tiers):
            vol = sum(placed[t]) + suffix_min[i][t]
            lb += math.ceil(vol / caps[t] - 1e-12) * inst.tier_prices[t]
        return lb

    def go(i: int, placed: list[list[float]]) -> None:
        nonlocal best
        if lower_bound(placed, i) >= best - 1e-12:
            return
        if i == n:
            total = 0.0
            for t in range(num_tiers):
                total += _min_bins(placed[t], caps[t]) * inst.tier_prices[t]
            best = min(best, total)
            return
        for plan in queries[i][1]:
            items = items_of(plan)
            for t2, d in items:
                placed[t2].append(d)
            go(i + 1, placed)
            for t2, _ in items:
                placed[t2].pop()

    go(0, [[] for _ in range(num_tiers)])
    return best


def oracle_instance_from_candidates(
    candidates: list[tuple[Query, CandidateSet]],
    topology: TierTopology,
) -> OracleInstance:
    queries = []
    for query, cset in candidates:
        plans = tuple(
            ScoredPlan.build(query.id, cand, topology, query.weight).op_demands for cand in cset.plans
        )
        queries.append((query.weight, plans))
    return OracleInstance(
        queries=tuple(queries),
        machine_caps=tuple(tuple([t.capacity] * t.machine_count) for t in topology.tiers),
        tier_prices=tuple(t.machine_hourly_cost for t in topology.tiers),
    )


def random_scheduling_instance(
    seed: int,
    topology: TierTopology,
    n_queries: int = 8,
    max_plans: int = 4,
    max_ops: int = 3,
    weight_range: tuple[float, float] = (1.0, 1.0),
    equal_cr: bool = False,
) -> list[tuple[Query, CandidateSet]]:
    """Random per-query candidate sets shaped like stage-one planner output.

    Each query gets a small Pareto-style trade-off: a cheap allocation on
    the low tiers plus progressively faster variants that move operators up
    the tier ladder and hold more resources (fractions drawn from the grid,
    skewed toward the pruned low end). With ``equal_cr`` every plan is a
    single half-machine operator, making all aggregate demands equal.
    """
    rng = np.random.default_rng(seed)
    frac_probs = (0.1, 0.15, 0.3, 0.45)  # 1, 1/2, 1/4, 1/8
    out: list[tuple[Query, CandidateSet]] = []
    for qi in range(n_queries):
        n_ops = 1 if equal_cr else int(rng.integers(1, max_ops + 1))
        ops = tuple(OperatorSpec(i, (f"o{i}",)) for i in range(n_ops))
        pipe = PipelineSpec(
            name=f"rand-{seed}-{qi}",
            operators=ops,
            edges=tuple((i, i + 1) for i in range(n_ops - 1)),
        )
        weight = float(rng.uniform(*weight_range))
        n_plans = 1 if equal_cr else int(rng.integers(1, max_plans + 1))
        cands = []
        for j in range(n_plans):
            if equal_cr:
                placement = (int(rng.integers(topology.num_tiers)),)
                resources = (0.5,)
            else:
                # later variants sit higher in the tier ladder and run hotter
                ceiling = min(topology.num_tiers - 1, j)
                placement = tuple(sorted(int(rng.integers(ceiling + 1)) for _ in range(n_ops)))
                resources = tuple(
                    RESOURCE_FRACTIONS[int(rng.choice(len(RESOURCE_FRACTIONS), p=frac_probs))]
                    for _ in range(n_ops)
                )
            point = PlanPoint(configuration=(0,) * n_ops, placement=placement, resources=resources)
            cost = sum(
                f * topology.tiers[t].capacity * topology.tiers[t].unit_cost
                for f, t in zip(point.resources, point.placement)
            )
            cands.append(
                CandidatePlan(
                    plan=point,
                    accuracy_estimate=float(rng.uniform(0.7, 0.99)),
                    latency_s=float(rng.uniform(0.05, 2.0)) / (1.0 + cost),
                    hourly_cost=cost,
                )
            )
        query = Query(
            id=f"q{qi}",
            pipeline=pipe,
            a_slo=0.5,
            l_slo=10.0,
            response_budget_s=5.0,
            weight=weight,
            arrival_time=float(qi),
        )
        out.append((query, CandidateSet(plans=tuple(cands))))
    return out


# ---------------------------------------------------------------------------
# Starvation aging and drift replanning


def age_weights(
    pending: list[tuple[str, float, float]],
    now: float,
    beta: float = DEFAULT_AGING_BETA,
) -> dict[str, float]:
    """Aged weight per pending query: w0 * (1 + beta * pending seconds).

    ``pending`` entries are (query id, base weight, enqueue time).
    """
    out = {}
    for qid, w0, since in pending:
        waited = max(0.0, now - since)
        out[qid] = w0 * (1.0 + beta * waited)
    return out


def replan(
    query: Query,
    land,
    topology: TierTopology,
    prior_pair: SurrogatePair | None,
    history: HistoryStore | None = None,
    seed: int = 0,
    config: SearchConfig | None = None,
    budget_s: float = 5.0,
    variance_inflation: float = 25.0,
) -> SearchResult:
    """Drift response: re-run the single-query search warm-started from the
    query's own prior surrogate (stale observations retained, trust
    inflated away), under a short replanning budget."""
    fresh = dataclasses.replace(query, response_budget_s=budget_s, profiling_budget_gpuh=None)
    return single_query_search(
        fresh,
        land,
        topology,
        history=history,
        seed=seed,
        config=config,
        warm_pair=prior_pair,
        variance_inflation=variance_inflation,
    )
