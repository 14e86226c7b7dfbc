"""Seeded synthetic oracle standing in for real pipelines and datasets.

A landscape defines, for every plan, the true per-stratum accuracy
distribution, per-operator reference compute times, and inter-operator
output sizes. Accuracy depends only on the configuration vector, never on
placement or resources; output sizes depend only on upstream configuration.
Everything is deterministic for a fixed seed, so every planner decision can
be checked against exhaustive sweeps.

Stratum accuracy means blend a monotone component (better options help)
with a rugged component (random per-option and pairwise effects) through a
tanh squash; the monotone_tendency knob controls how often costlier
configurations are actually more accurate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import latency as latmod
from .model import (
    SCHEMA_VERSION,
    PipelineSpec,
    PlanPoint,
    Query,
    SchemaError,
    SpaceTooLargeError,
    TierTopology,
    enumerate_plan_space,
    enumerate_search_pool,
    pareto_filter,
    plan_space_size,
)

ACC_CENTER = 0.5
ACC_SPAN = 0.42
_CLIP_LO, _CLIP_HI = 0.005, 0.995


@dataclass(frozen=True)
class GroundTruthLandscape:
    seed: int
    pipeline: PipelineSpec
    stratum_weights: tuple[float, ...]
    stratum_base: tuple[float, ...]
    stratum_sigma: tuple[float, ...]
    monotone_tendency: float
    monotone_weights: tuple[float, ...]
    option_effects: tuple[tuple[tuple[float, ...], ...], ...]  # [stratum][op][option]
    pair_effects: tuple[tuple[tuple[tuple[float, ...], ...], ...], ...]  # [stratum][op][opt_i][opt_i+1]
    op_base_time_s: tuple[tuple[float, ...], ...]  # [op][option]
    op_output_bytes: tuple[tuple[float, ...], ...]  # [op][option]
    tier_speed_factors: tuple[float, ...]
    case_stratum: tuple[int, ...]
    case_features: tuple[tuple[float, float], ...]
    accuracy_offset: float = 0.0
    _mu_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if abs(sum(self.stratum_weights) - 1.0) > 1e-9:
            raise ValueError("stratum weights must sum to 1")
        if any(s < 0 for s in self.stratum_sigma):
            raise ValueError("stratum sigmas must be >= 0")

    @property
    def k_true(self) -> int:
        return len(self.stratum_weights)

    @property
    def n_cases(self) -> int:
        return len(self.case_stratum)

    def stratum_mean(self, stratum: int, configuration: Sequence[int]) -> float:
        """True accuracy mean of one stratum at a configuration."""
        key = (stratum, tuple(configuration))
        hit = self._mu_cache.get(key)
        if hit is not None:
            return hit
        ops = self.pipeline.operators
        mono = 0.0
        rug = 0.0
        for i, c in enumerate(configuration):
            mono += self.monotone_weights[i] * (c + 1) / len(ops[i].knob_domain)
            rug += self.option_effects[stratum][i][c]
        for i in range(len(ops) - 1):
            rug += self.pair_effects[stratum][i][configuration[i]][configuration[i + 1]]
        raw = self.stratum_base[stratum] + self.monotone_tendency * mono + (1.0 - self.monotone_tendency) * rug
        mu = ACC_CENTER + ACC_SPAN * math.tanh(raw) + self.accuracy_offset
        mu = min(max(mu, _CLIP_LO), _CLIP_HI)
        self._mu_cache[key] = mu
        return mu

    def stratum_std(self, stratum: int) -> float:
        return self.stratum_sigma[stratum]

    def accuracy_mean(self, configuration: Sequence[int]) -> float:
        """Population accuracy mean: the weighted mixture over strata."""
        return float(
            sum(p * self.stratum_mean(k, configuration) for k, p in enumerate(self.stratum_weights))
        )

    def timings_for(self, configuration: Sequence[int]) -> latmod.OperatorTimings:
        return latmod.OperatorTimings(
            base_compute_s=tuple(self.op_base_time_s[i][c] for i, c in enumerate(configuration)),
            output_bytes=tuple(self.op_output_bytes[i][c] for i, c in enumerate(configuration)),
            tier_speed_factors=self.tier_speed_factors,
        )

    def with_accuracy_shift(self, delta: float) -> "GroundTruthLandscape":
        """Drifted copy: every stratum mean moves by ``delta`` (then clipped)."""
        return GroundTruthLandscape(
            seed=self.seed,
            pipeline=self.pipeline,
            stratum_weights=self.stratum_weights,
            stratum_base=self.stratum_base,
            stratum_sigma=self.stratum_sigma,
            monotone_tendency=self.monotone_tendency,
            monotone_weights=self.monotone_weights,
            option_effects=self.option_effects,
            pair_effects=self.pair_effects,
            op_base_time_s=self.op_base_time_s,
            op_output_bytes=self.op_output_bytes,
            tier_speed_factors=self.tier_speed_factors,
            case_stratum=self.case_stratum,
            case_features=self.case_features,
            accuracy_offset=self.accuracy_offset + delta,
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "pipeline": self.pipeline.name,
            "stratum_weights": list(self.stratum_weights),
            "stratum_base": list(self.stratum_base),
            "stratum_sigma": list(self.stratum_sigma),
            "monotone_tendency": self.monotone_tendency,
            "monotone_weights": list(self.monotone_weights),
            "option_effects": _nested_list(self.option_effects),
            "pair_effects": _nested_list(self.pair_effects),
            "op_base_time_s": _nested_list(self.op_base_time_s),
            "op_output_bytes": _nested_list(self.op_output_bytes),
            "tier_speed_factors": list(self.tier_speed_factors),
            "case_stratum": list(self.case_stratum),
            "case_features": [list(f) for f in self.case_features],
            "accuracy_offset": self.accuracy_offset,
        }

    @staticmethod
    def from_dict(obj: dict, pipeline: PipelineSpec, where: str = "<landscape>") -> "GroundTruthLandscape":
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"{where}: missing or unsupported schema_version")
        if obj.get("pipeline") != pipeline.name:
            raise SchemaError(f"{where}: landscape was generated for pipeline {obj.get('pipeline')!r}")
        return GroundTruthLandscape(
            seed=int(obj["seed"]),
            pipeline=pipeline,
            stratum_weights=tuple(obj["stratum_weights"]),
            stratum_base=tuple(obj["stratum_base"]),
            stratum_sigma=tuple(obj["stratum_sigma"]),
            monotone_tendency=float(obj["monotone_tendency"]),
            monotone_weights=tuple(obj["monotone_weights"]),
            option_effects=_nested_tuple(obj["option_effects"], 3),
            pair_effects=_nested_tuple(obj["pair_effects"], 4),
            op_base_time_s=_nested_tuple(obj["op_base_time_s"], 2),
            op_output_bytes=_nested_tuple(obj["op_output_bytes"], 2),
            tier_speed_factors=tuple(obj["tier_speed_factors"]),
            case_stratum=tuple(int(x) for x in obj["case_stratum"]),
            case_features=tuple((float(a), float(b)) for a, b in obj["case_features"]),
            accuracy_offset=float(obj.get("accuracy_offset", 0.0)),
        )


def _nested_list(t):
    if isinstance(t, tuple):
        return [_nested_list(x) for x in t]
    return t


def _nested_tuple(lst, depth: int):
    if depth == 1:
        return tuple(float(x) for x in lst)
    return tuple(_nested_tuple(x, depth - 1) for x in lst)


_DIFFICULTY_TENDENCY = {"monotone": 1.0, "rugged": 0.15, "mixed": 0.5}


def default_speed_factors(num_tiers: int) -> tuple[float, ...]:
    """Reference (last) tier at 1.0, each tier toward the device 3x slower."""
    return tuple(3.0 ** (num_tiers - 1 - m) for m in range(num_tiers))


def generate_landscape(
    seed: int,
    pipeline: PipelineSpec,
    difficulty: str | float = "rugged",
    k_true: int = 4,
    noise_scale: float = 0.05,
    feature_noise: float = 0.25,
    n_cases: int = 240,
    equal_weights: bool = True,
    tier_speed_factors: Sequence[float] | None = None,
    num_tiers: int = 3,
    parent: GroundTruthLandscape | None = None,
    perturbation: float = 0.0,
) -> GroundTruthLandscape:
    """Build a deterministic synthetic landscape for one pipeline.

    ``difficulty`` is a preset name or a monotone-tendency float in [0, 1]:
    1.0 forces the most expensive configuration to be the most accurate,
    low values make accuracy rugged in the configuration vector.

    Passing ``parent`` with a small ``perturbation`` produces a sibling
    landscape from the same family: shared accuracy structure plus seeded
    noise, which is what history warm starts exploit.
    """
    if isinstance(difficulty, str):
        if difficulty not in _DIFFICULTY_TENDENCY:
            raise ValueError(f"unknown difficulty {difficulty!r}")
        tendency = _DIFFICULTY_TENDENCY[difficulty]
    else:
        tendency = float(difficulty)
        if not (0.0 <= tendency <= 1.0):
            raise ValueError("monotone tendency must be in [0, 1]")

    rng = np.random.default_rng(seed)
    m = len(pipeline)
    domains = [len(op.knob_domain) for op in pipeline.operators]

    if parent is not None:
        k_true = parent.k_true
        base = np.array(parent.stratum_base)
        mono_w = np.array(parent.monotone_weights)
        tendency = parent.monotone_tendency
        weights = np.array(parent.stratum_weights)
        sigmas = np.array(parent.stratum_sigma)
    else:
        if equal_weights:
            weights = np.full(k_true, 1.0 / k_true)
        else:
            weights = rng.dirichlet(np.full(k_true, 4.0))
        base = rng.uniform(-0.3, 0.3, size=k_true)
        mono_w = rng.uniform(0.9, 1.8, size=m) / m
        sigmas = noise_scale * rng.uniform(0.6, 1.4, size=k_true)

    # Option effects share a component across strata (the config signal the
    # planner optimizes) plus a smaller per-stratum deviation; fully
    # independent strata would flatten the mixture mean toward 0.5.
    option_effects = []
    pair_effects = []
    if parent is None:
        shared_opt = [rng.uniform(-1.7, 1.7, size=domains[i]) / m for i in range(m)]
        shared_pair = [rng.uniform(-0.6, 0.6, size=(domains[i], domains[i + 1])) / m for i in range(m - 1)]
    for k in range(k_true):
        per_op = []
        for i in range(m):
            if parent is not None:
                vals = np.array(parent.option_effects[k][i])
                vals = vals + perturbation * rng.normal(0.0, 1.0 / m, size=domains[i])
            else:
                vals = shared_opt[i] + rng.uniform(-0.5, 0.5, size=domains[i]) / m
            per_op.append(tuple(float(v) for v in vals))
        option_effects.append(tuple(per_op))
        per_pair = []
        for i in range(m - 1):
            if parent is not None:
                mat = np.array(parent.pair_effects[k][i])
                mat = mat + perturbation * rng.normal(0.0, 0.5 / m, size=mat.shape)
            else:
                mat = shared_pair[i] + rng.uniform(-0.25, 0.25, size=(domains[i], domains[i + 1])) / m
            per_pair.append(tuple(tuple(float(v) for v in row) for row in mat))
        pair_effects.append(tuple(per_pair))
    if parent is not None and perturbation > 0:
        base = base + perturbation * rng.normal(0.0, 0.1, size=k_true)

    if parent is not None:
        op_times = _nested_tuple(_nested_list(parent.op_base_time_s), 2)
        op_bytes = _nested_tuple(_nested_list(parent.op_output_bytes), 2)
        speed = parent.tier_speed_factors
    else:
        op_times = []
        op_bytes = []
        for i, op in enumerate(pipeline.operators):
            t0 = rng.uniform(0.0003, 0.002)
            slope = rng.uniform(1.0, 2.5)
            d = domains[i]
            op_times.append(tuple(t0 * (1.0 + slope * j / max(d - 1, 1)) for j in range(d)))
            s_slope = rng.uniform(0.5, 1.5)
            op_bytes.append(tuple(op.base_output_size * (0.5 + s_slope * (j + 1) / d) for j in range(d)))
        op_times = tuple(op_times)
        op_bytes = tuple(op_bytes)
        if tier_speed_factors is not None:
            speed = tuple(float(s) for s in tier_speed_factors)
        else:
            speed = default_speed_factors(num_tiers)

    counts = np.floor(weights * n_cases).astype(int)
    while counts.sum() < n_cases:
        counts[int(np.argmax(weights * n_cases - counts))] += 1
    case_stratum = []
    for k, c in enumerate(counts):
        case_stratum.extend([k] * int(c))
    case_stratum = tuple(case_stratum[i] for i in rng.permutation(n_cases))
    empirical = np.bincount(case_stratum, minlength=k_true) / n_cases

    angle = 2 * math.pi * np.arange(k_true) / k_true
    centers = np.stack([3.0 * np.cos(angle), 3.0 * np.sin(angle)], axis=1)
    feats = centers[list(case_stratum)] + rng.normal(0.0, feature_noise, size=(n_cases, 2))
    case_features = tuple((float(a), float(b)) for a, b in feats)

    return GroundTruthLandscape(
        seed=seed,
        pipeline=pipeline,
        stratum_weights=tuple(float(w) for w in empirical),
        stratum_base=tuple(float(b) for b in base),
        stratum_sigma=tuple(float(s) for s in sigmas),
        monotone_tendency=tendency,
        monotone_weights=tuple(float(w) for w in mono_w),
        option_effects=tuple(option_effects),
        pair_effects=tuple(pair_effects),
        op_base_time_s=op_times,
        op_output_bytes=op_bytes,
        tier_speed_factors=speed,
        case_stratum=case_stratum,
        case_features=case_features,
    )


def sample_case(
    landscape: GroundTruthLandscape,
    plan: PlanPoint,
    stratum_id: int,
    rng: np.random.Generator,
) -> float:
    """One accuracy observation from a stratum, clipped to [0, 1].

    Depends only on the plan's configuration, so placement and resource
    changes never alter the draw stream.
    """
    if not (0 <= stratum_id < landscape.k_true):
        raise ValueError(f"unknown stratum {stratum_id} (have {landscape.k_true})")
    mu = landscape.stratum_mean(stratum_id, plan.configuration)
    sigma = landscape.stratum_sigma[stratum_id]
    val = rng.normal(mu, sigma) if sigma > 0 else mu
    return float(min(max(val, 0.0), 1.0))


def true_pareto_set(
    landscape: GroundTruthLandscape,
    topology: TierTopology,
    query: Query,
    max_plans: int = 100_000,
) -> list[PlanPoint]:
    """Exhaustive oracle: all SLO-compliant plans not dominated in
    (monetary cost, latency). Refuses oversized spaces outright."""
    size = plan_space_size(landscape.pipeline, topology)
    if size > max_plans:
        raise SpaceTooLargeError(f"plan space has {size} plans, exhaustive cap is {max_plans}")
    feasible: list[tuple[PlanPoint, tuple[float, float]]] = []
    acc_cache: dict[tuple[int, ...], float] = {}
    for plan in enumerate_plan_space(landscape.pipeline, topology):
        acc = acc_cache.get(plan.configuration)
        if acc is None:
            acc = landscape.accuracy_mean(plan.configuration)
            acc_cache[plan.configuration] = acc
        if acc < query.a_slo:
            continue
        lat = latmod.pipeline_latency(
            plan, landscape.pipeline, topology, landscape.timings_for(plan.configuration)
        ).total_s
        if lat > query.l_slo:
            continue
        feasible.append((plan, (latmod.plan_hourly_cost(plan, topology), lat)))
    kept = pareto_filter(feasible, key=lambda t: t[1])
    return [plan for plan, _ in kept]


def quality_latency_frontier(
    landscape: GroundTruthLandscape, topology: TierTopology, max_plans: int = 100_000
) -> list[tuple[PlanPoint, float, float]]:
    """SLO-free Pareto trade-off between accuracy (max) and latency (min)
    over the over-provisioned (configuration, placement) pool, used to draw
    per-query SLO requirements."""
    pool = enumerate_search_pool(landscape.pipeline, topology)
    if len(pool) > max_plans:
        raise SpaceTooLargeError(f"search pool has {len(pool)} plans, exhaustive cap is {max_plans}")
    rows: list[tuple[PlanPoint, float, float]] = []
    acc_cache: dict[tuple[int, ...], float] = {}
    for plan in pool:
        acc = acc_cache.get(plan.configuration)
        if acc is None:
            acc = landscape.accuracy_mean(plan.configuration)
            acc_cache[plan.configuration] = acc
        lat = latmod.pipeline_latency(
            plan, landscape.pipeline, topology, landscape.timings_for(plan.configuration)
        ).total_s
        rows.append((plan, acc, lat))
    return pareto_filter(rows, key=lambda r: (1.0 - r[1], r[2]))


# ---------------------------------------------------------------------------
# Arrival traces

SLO_HARDNESS = {
    "easy": (2.0, 0.7),
    "medium": (1.5, 0.8),
    "hard": (1.1, 0.9),
}


@dataclass(frozen=True)
class TraceEntry:
    arrival_time: float
    template: str
    a_slo: float
    l_slo: float
    lifespan: float
    weight: float = 1.0


@dataclass(frozen=True)
class ArrivalTrace:
    entries: tuple[TraceEntry, ...]
    generator_params: dict

    def __post_init__(self) -> None:
        times = [e.arrival_time for e in self.entries]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("arrival times must be non-decreasing")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "generator": self.generator_params,
            "entries": [
                {
                    "arrival_time": e.arrival_time,
                    "template": e.template,
                    "a_slo": e.a_slo,
                    "l_slo": e.l_slo,
                    "lifespan": e.lifespan,
                    "weight": e.weight,
                }
                for e in self.entries
            ],
        }

    @staticmethod
    def from_dict(obj: dict, where: str = "<trace>") -> "ArrivalTrace":
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"{where}: missing or unsupported schema_version")
        try:
            entries = tuple(
                TraceEntry(
                    arrival_time=float(e["arrival_time"]),
                    template=str(e["template"]),
                    a_slo=float(e["a_slo"]),
                    l_slo=float(e["l_slo"]),
                    lifespan=float(e["lifespan"]),
                    weight=float(e.get("weight", 1.0)),
                )
                for e in obj["entries"]
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{where}: invalid trace entry: {e}") from e
        return ArrivalTrace(entries=entries, generator_params=dict(obj.get("generator", {})))


def generate_trace(
    templates: dict[str, tuple[PipelineSpec, GroundTruthLandscape]],
    topology: TierTopology,
    duration_s: float,
    load: float = 1.0,
    burst_factor: float = 1.0,
    hardness: str = "medium",
    mean_lifespan_s: float = 60.0,
    seed: int = 0,
) -> ArrivalTrace:
    """Poisson-thinned diurnal arrivals, normalized so load 1.0 saturates
    the cluster (a new query arrives as the previous one finishes)."""
    if hardness not in SLO_HARDNESS:
        raise ValueError(f"unknown hardness {hardness!r}")
    lat_mult, acc_mult = SLO_HARDNESS[hardness]
    rng = np.random.default_rng(seed)

    frontiers = {}
    demands = []
    for name, (_pipe, land) in sorted(templates.items()):
        frontier = quality_latency_frontier(land, topology)
        frontiers[name] = frontier
        demands.extend(sum(plan.resources) for plan, _, _ in frontier)
    mean_demand = max(float(np.mean(demands)), 1e-9)
    total_machines = sum(t.machine_count for t in topology.tiers)
    base_rate = total_machines / (mean_demand * mean_lifespan_s)
    amp = 0.3
    burst_lo, burst_hi = 0.4 * duration_s, 0.5 * duration_s

    def rate_at(t: float) -> float:
        r = load * base_rate * (1.0 + amp * math.sin(2 * math.pi * t / max(duration_s, 1e-9)))
        if burst_lo <= t < burst_hi:
            r *= burst_factor
        return r

    lam_max = load * base_rate * (1.0 + amp) * max(burst_factor, 1.0)
    names = sorted(templates)
    entries = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / lam_max)
        if t >= duration_s:
            break
        if rng.uniform() > rate_at(t) / lam_max:
            continue
        name = names[int(rng.integers(len(names)))]
        frontier = frontiers[name]
        _plan, acc, lat = frontier[int(rng.integers(len(frontier)))]
        lifespan = float(max(10.0, rng.exponential(mean_lifespan_s)))
        entries.append(
            TraceEntry(
                arrival_time=float(t),
                template=name,
                a_slo=float(min(1.0, acc_mult * acc)),
                l_slo=float(lat_mult * lat),
                lifespan=lifespan,
            )
        )
    params = {
        "load": load,
        "burst_factor": burst_factor,
        "hardness": hardness,
        "mean_lifespan_s": mean_lifespan_s,
        "seed": seed,
        "duration_s": duration_s,
        "base_rate_per_s": base_rate,
    }
    return ArrivalTrace(entries=tuple(entries), generator_params=params)
