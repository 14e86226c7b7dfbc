"""Domain vocabulary shared by every subsystem.

Pipelines are small DAGs of operators (a linear chain plus optional fan-in
edges), deployed across an ordered list of infrastructure tiers. A concrete
deployment choice is a :class:`PlanPoint`: one configuration option per
operator, one tier per operator, and one resource fraction per operator.

All values here are immutable after construction and safe to share across
concurrent planning sessions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from itertools import combinations_with_replacement, product
from math import comb
from typing import Iterator, Sequence

SCHEMA_VERSION = 1

#: Discrete per-operator resource fractions (of one machine's capacity).
RESOURCE_FRACTIONS = (1.0, 0.5, 0.25, 0.125)


class SchemaError(ValueError):
    """A file or dict violates the documented JSON schema."""


class SpaceTooLargeError(RuntimeError):
    """An exhaustive operation refused to run on an oversized instance."""


class Verdict(Enum):
    PASS_ACCURACY = "pass_accuracy"
    FAIL_ACCURACY = "fail_accuracy"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class OperatorSpec:
    """One pipeline stage and its discrete configuration options.

    ``base_output_size`` is the bytes emitted per input item at the
    reference configuration; batching operators (LLM-style) share compute
    with co-batched requests instead of slicing FLOPS.
    """

    id: int
    knob_domain: tuple[str, ...]
    is_batching: bool = False
    base_output_size: float = 1_000_000.0

    def __post_init__(self) -> None:
        if not self.knob_domain:
            raise ValueError(f"operator {self.id}: knob_domain must be non-empty")
        if len(set(self.knob_domain)) != len(self.knob_domain):
            raise ValueError(f"operator {self.id}: duplicate knob option names")
        if self.base_output_size <= 0:
            raise ValueError(f"operator {self.id}: base_output_size must be > 0")


@dataclass(frozen=True)
class PipelineSpec:
    """Ordered operators plus directed (producer, consumer) edges.

    Operator ids are ordinal in pipeline order, so every edge must point
    forward; acyclicity follows. Exactly one sink is allowed and every
    operator must be reachable from a source.

    ``input_bytes``: size of the raw input item, which originates on the
    device tier; source operators placed off-device pay an ingress
    transfer. Zero means the input is negligible (or already wherever the
    source operator runs).
    """

    name: str
    operators: tuple[OperatorSpec, ...]
    edges: tuple[tuple[int, int], ...]
    input_bytes: float = 0.0

    def __post_init__(self) -> None:
        if not self.operators:
            raise ValueError("pipeline must contain at least one operator")
        if self.input_bytes < 0:
            raise ValueError("input_bytes must be >= 0")
        for i, op in enumerate(self.operators):
            if op.id != i:
                raise ValueError(f"operator ids must be 0..{len(self.operators) - 1} in order")
        n = len(self.operators)
        seen = set()
        for u, v in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u},{v}) references unknown operator")
            if u >= v:
                raise ValueError(f"edge ({u},{v}) must point forward in pipeline order")
            if (u, v) in seen:
                raise ValueError(f"duplicate edge ({u},{v})")
            seen.add((u, v))
        sinks = [i for i in range(n) if not any(u == i for u, _ in self.edges)]
        if len(sinks) != 1:
            raise ValueError(f"pipeline must have exactly one sink, found {sinks}")
        if n > 1:
            reachable = set(self.sources())
            for u, v in sorted(self.edges):
                if u in reachable:
                    reachable.add(v)
            if reachable != set(range(n)):
                raise ValueError("every operator must be reachable from a source")

    def sources(self) -> list[int]:
        has_in = {v for _, v in self.edges}
        return [i for i in range(len(self.operators)) if i not in has_in]

    @property
    def sink(self) -> int:
        has_out = {u for u, _ in self.edges}
        return next(i for i in range(len(self.operators)) if i not in has_out)

    def predecessors(self, i: int) -> list[int]:
        return [u for u, v in self.edges if v == i]

    def __len__(self) -> int:
        return len(self.operators)


@dataclass(frozen=True)
class Tier:
    name: str
    machine_count: int
    capacity: float
    unit_cost: float

    def __post_init__(self) -> None:
        if self.machine_count < 1:
            raise ValueError(f"tier {self.name}: machine_count must be >= 1")
        if self.capacity <= 0 or self.unit_cost <= 0:
            raise ValueError(f"tier {self.name}: capacity and unit_cost must be > 0")

    @property
    def machine_hourly_cost(self) -> float:
        """Dollars per machine-hour (unit_cost is per resource-unit-hour)."""
        return self.capacity * self.unit_cost


@dataclass(frozen=True)
class TierTopology:
    """Ordered tiers (device -> cloud) with pairwise bandwidth and fixed
    per-transfer link latency. The bandwidth diagonal is the within-tier
    fabric; cross entries apply between tiers."""

    tiers: tuple[Tier, ...]
    bandwidth_mbps: tuple[tuple[float, ...], ...]
    link_latency_s: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        t = len(self.tiers)
        if t == 0:
            raise ValueError("topology needs at least one tier")
        for mat, name in ((self.bandwidth_mbps, "bandwidth"), (self.link_latency_s, "link latency")):
            if len(mat) != t or any(len(row) != t for row in mat):
                raise ValueError(f"{name} matrix must be {t}x{t}")
        for i in range(t):
            for j in range(t):
                if self.bandwidth_mbps[i][j] <= 0:
                    raise ValueError(f"bandwidth[{i}][{j}] must be > 0")
                if abs(self.bandwidth_mbps[i][j] - self.bandwidth_mbps[j][i]) > 1e-9:
                    raise ValueError("bandwidth matrix must be symmetric across a link")
                if self.link_latency_s[i][j] < 0:
                    raise ValueError("link latency must be >= 0")

    @property
    def num_tiers(self) -> int:
        return len(self.tiers)

    @property
    def reference_tier(self) -> int:
        """Cloud reference tier used for profiling: the last (fastest) tier."""
        return len(self.tiers) - 1

    def with_bandwidth_scaled(self, link: tuple[int, int], factor: float) -> "TierTopology":
        """New topology with one link's bandwidth multiplied by ``factor``."""
        if factor <= 0:
            raise ValueError("bandwidth factor must be > 0")
        i, j = link
        rows = [list(r) for r in self.bandwidth_mbps]
        rows[i][j] *= factor
        if i != j:
            rows[j][i] *= factor
        return TierTopology(self.tiers, tuple(tuple(r) for r in rows), self.link_latency_s)


@dataclass(frozen=True)
class PlanPoint:
    """(configuration, placement, resources) for one pipeline.

    Placement is monotone non-decreasing along operator order: an operator
    never moves back toward the device once the pipeline moved cloudward.
    """

    configuration: tuple[int, ...]
    placement: tuple[int, ...]
    resources: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (len(self.configuration) == len(self.placement) == len(self.resources)):
            raise ValueError("configuration, placement and resources must align")
        if any(b < a for a, b in zip(self.placement, self.placement[1:])):
            raise ValueError(f"placement {self.placement} is not monotone device->cloud")
        for f in self.resources:
            if f not in RESOURCE_FRACTIONS:
                raise ValueError(f"resource fraction {f} not in grid {RESOURCE_FRACTIONS}")

    def with_resources(self, resources: Sequence[float]) -> "PlanPoint":
        return PlanPoint(self.configuration, self.placement, tuple(resources))


@dataclass(frozen=True)
class Query:
    """One serving request: a pipeline, its SLOs and its planning budget.

    Exactly one of ``response_budget_s`` (latency-critical, simulated
    seconds) or ``profiling_budget_gpuh`` (throughput-critical, GPU-hours)
    must be set.
    """

    id: str
    pipeline: PipelineSpec
    a_slo: float
    l_slo: float
    response_budget_s: float | None = None
    profiling_budget_gpuh: float | None = None
    weight: float = 1.0
    arrival_time: float = 0.0
    lifespan: float = 60.0

    def __post_init__(self) -> None:
        if not (0 < self.a_slo <= 1):
            raise ValueError(f"query {self.id}: a_slo must be in (0, 1]")
        if self.l_slo <= 0:
            raise ValueError(f"query {self.id}: l_slo must be > 0")
        if (self.response_budget_s is None) == (self.profiling_budget_gpuh is None):
            raise ValueError(f"query {self.id}: exactly one budget form must be set")
        if self.weight <= 0:
            raise ValueError(f"query {self.id}: weight must be > 0")


@dataclass(frozen=True)
class ProfileOutcome:
    accuracy_estimate: float
    samples_used: int
    verdict: Verdict
    latency_estimate: float
    profiling_cost: float  # GPU-seconds charged for this plan


# ---------------------------------------------------------------------------
# Plan-space enumeration


def monotone_placements(num_operators: int, num_tiers: int) -> Iterator[tuple[int, ...]]:
    """Yield all non-decreasing tier assignments of the given length."""
    return combinations_with_replacement(range(num_tiers), num_operators)


def count_monotone_placements(num_operators: int, num_tiers: int) -> int:
    return comb(num_operators + num_tiers - 1, num_tiers - 1)


def enumerate_plan_space(
    pipeline: PipelineSpec,
    topology: TierTopology,
    fractions: tuple[float, ...] = RESOURCE_FRACTIONS,
) -> Iterator[PlanPoint]:
    """Lazily yield every valid PlanPoint exactly once.

    Total count is (product of knob domain sizes) x (monotone placements)
    x (fraction grid per operator). ``fractions`` may restrict the grid to
    a subset of the canonical one.
    """
    m = len(pipeline)
    config_axes = [range(len(op.knob_domain)) for op in pipeline.operators]
    for placement in monotone_placements(m, topology.num_tiers):
        for config in product(*config_axes):
            for resources in product(fractions, repeat=m):
                yield PlanPoint(config, placement, resources)


def plan_space_size(
    pipeline: PipelineSpec,
    topology: TierTopology,
    fractions: tuple[float, ...] = RESOURCE_FRACTIONS,
) -> int:
    m = len(pipeline)
    n_configs = 1
    for op in pipeline.operators:
        n_configs *= len(op.knob_domain)
    return n_configs * count_monotone_placements(m, topology.num_tiers) * len(fractions) ** m


def enumerate_search_pool(pipeline: PipelineSpec, topology: TierTopology) -> list[PlanPoint]:
    """All (configuration, placement) points at over-provisioned resources.

    Resource fractions are deferred to Pareto pruning, so the search pool
    fixes r = all-ones.
    """
    m = len(pipeline)
    ones = (1.0,) * m
    config_axes = [range(len(op.knob_domain)) for op in pipeline.operators]
    pool = []
    for placement in monotone_placements(m, topology.num_tiers):
        for config in product(*config_axes):
            pool.append(PlanPoint(config, placement, ones))
    return pool


# ---------------------------------------------------------------------------
# Pareto helpers


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """Weak Pareto dominance on (cost, latency): a is no worse in both and
    strictly better in at least one."""
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def pareto_filter(items: Sequence, key) -> list:
    """Non-dominated subset under (cost, latency) minimization, stable order."""
    keys = [key(it) for it in items]
    out = []
    for i, it in enumerate(items):
        if any(dominates(keys[j], keys[i]) for j in range(len(items)) if j != i):
            continue
        if any(keys[j] == keys[i] for j in range(i)):
            continue  # drop exact duplicates, keep first
        out.append(it)
    return out


# ---------------------------------------------------------------------------
# JSON serialization (schema_version is mandatory in every file)


def _require(cond: bool, msg: str, where: str) -> None:
    if not cond:
        raise SchemaError(f"{where}: {msg}")


def _check_version(obj: dict, where: str) -> None:
    _require(isinstance(obj, dict), "expected a JSON object", where)
    _require("schema_version" in obj, "missing mandatory schema_version", where)
    _require(
        obj["schema_version"] == SCHEMA_VERSION,
        f"unsupported schema_version {obj['schema_version']!r} (want {SCHEMA_VERSION})",
        where,
    )


def pipeline_to_dict(p: PipelineSpec) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": p.name,
        "operators": [
            {
                "id": op.id,
                "knob_domain": list(op.knob_domain),
                "is_batching": op.is_batching,
                "base_output_size": op.base_output_size,
            }
            for op in p.operators
        ],
        "edges": [list(e) for e in p.edges],
        "input_bytes": p.input_bytes,
    }


def pipeline_from_dict(obj: dict, where: str = "<pipeline>") -> PipelineSpec:
    _check_version(obj, where)
    try:
        ops = tuple(
            OperatorSpec(
                id=o["id"],
                knob_domain=tuple(o["knob_domain"]),
                is_batching=bool(o.get("is_batching", False)),
                base_output_size=float(o.get("base_output_size", 1_000_000.0)),
            )
            for o in obj["operators"]
        )
        edges = tuple((int(u), int(v)) for u, v in obj.get("edges", []))
        return PipelineSpec(
            name=obj["name"], operators=ops, edges=edges, input_bytes=float(obj.get("input_bytes", 0.0))
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{where}: invalid pipeline: {e}") from e


def topology_to_dict(t: TierTopology) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tiers": [
            {
                "name": tier.name,
                "machine_count": tier.machine_count,
                "capacity": tier.capacity,
                "unit_cost": tier.unit_cost,
            }
            for tier in t.tiers
        ],
        "bandwidth_mbps": [list(r) for r in t.bandwidth_mbps],
        "link_latency_s": [list(r) for r in t.link_latency_s],
    }


def topology_from_dict(obj: dict, where: str = "<topology>") -> TierTopology:
    _check_version(obj, where)
    try:
        tiers = tuple(
            Tier(
                name=t["name"],
                machine_count=int(t["machine_count"]),
                capacity=float(t["capacity"]),
                unit_cost=float(t["unit_cost"]),
            )
            for t in obj["tiers"]
        )
        bw = tuple(tuple(float(x) for x in row) for row in obj["bandwidth_mbps"])
        lat = tuple(tuple(float(x) for x in row) for row in obj["link_latency_s"])
        return TierTopology(tiers=tiers, bandwidth_mbps=bw, link_latency_s=lat)
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{where}: invalid topology: {e}") from e


def plan_to_dict(p: PlanPoint) -> dict:
    return {
        "configuration": list(p.configuration),
        "placement": list(p.placement),
        "resources": list(p.resources),
    }


def plan_from_dict(obj: dict) -> PlanPoint:
    return PlanPoint(
        configuration=tuple(int(x) for x in obj["configuration"]),
        placement=tuple(int(x) for x in obj["placement"]),
        resources=tuple(float(x) for x in obj["resources"]),
    )


def query_to_dict(q: Query) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "id": q.id,
        "pipeline": q.pipeline.name,
        "a_slo": q.a_slo,
        "l_slo": q.l_slo,
        "response_budget_s": q.response_budget_s,
        "profiling_budget_gpuh": q.profiling_budget_gpuh,
        "weight": q.weight,
        "arrival_time": q.arrival_time,
        "lifespan": q.lifespan,
    }


def query_from_dict(obj: dict, pipelines: dict[str, PipelineSpec], where: str = "<query>") -> Query:
    _check_version(obj, where)
    try:
        name = obj["pipeline"]
        _require(name in pipelines, f"unknown pipeline {name!r}", where)
        return Query(
            id=str(obj["id"]),
            pipeline=pipelines[name],
            a_slo=float(obj["a_slo"]),
            l_slo=float(obj["l_slo"]),
            response_budget_s=None if obj.get("response_budget_s") is None else float(obj["response_budget_s"]),
            profiling_budget_gpuh=None
            if obj.get("profiling_budget_gpuh") is None
            else float(obj["profiling_budget_gpuh"]),
            weight=float(obj.get("weight", 1.0)),
            arrival_time=float(obj.get("arrival_time", 0.0)),
            lifespan=float(obj.get("lifespan", 60.0)),
        )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{where}: invalid query: {e}") from e


def load_json_file(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}:{e.lineno}: not valid JSON: {e.msg}") from e
    except OSError as e:
        raise SchemaError(f"{path}: cannot read: {e}") from e


def load_pipeline(path: str) -> PipelineSpec:
    return pipeline_from_dict(load_json_file(path), where=path)


def load_topology(path: str) -> TierTopology:
    return topology_from_dict(load_json_file(path), where=path)


def dump_json(obj: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
