"""Discrete-event simulation driver.

Arrivals from a trace flow through single-query planning (charged in
simulated seconds), join the pending queue, and get admitted by scheduler
epochs that re-run the greedy over all pending queries with starvation
aging. Completions release machines; drift events mutate the topology or a
landscape, violated running queries release their resources and replan
warm-started from their own surrogate.

The event loop is single-threaded and fully deterministic for a fixed
config: per-query seeds derive from (sim seed, arrival index), so replays
are byte-identical. Drift monitoring is event-granular: running queries are
re-checked at every drift event and pending candidate latencies are
re-validated at every epoch; accuracy staleness of not-yet-admitted
candidates surfaces only once the query is running.
"""

from __future__ import annotations

import csv
import heapq
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import latency as latmod
from .landscape import (
    ArrivalTrace,
    GroundTruthLandscape,
    generate_landscape,
    generate_trace,
)
from .model import (
    SCHEMA_VERSION,
    PipelineSpec,
    Query,
    SchemaError,
    TierTopology,
    load_json_file,
    topology_from_dict,
)
from .presets import DEFAULT_SPEED_FACTORS, get_pipeline, default_topology
from .scheduler import (
    DEFAULT_AGING_BETA,
    DeploymentState,
    ScoredPlan,
    age_weights,
    greedy_goodput,
    replan,
)
from .search import CandidateSet, HistoryStore, SearchConfig, single_query_search


@dataclass(frozen=True)
class DriftEvent:
    time: float
    kind: str  # "bandwidth" or "accuracy"
    link: tuple[int, int] | None = None
    factor: float | None = None
    template: str | None = None
    delta: float | None = None

    def __post_init__(self) -> None:
        if self.kind == "bandwidth":
            if self.link is None or self.factor is None:
                raise ValueError("bandwidth drift needs link and factor")
        elif self.kind == "accuracy":
            if self.template is None or self.delta is None:
                raise ValueError("accuracy drift needs template and delta")
        else:
            raise ValueError(f"unknown drift kind {self.kind!r}")


@dataclass
class SimConfig:
    topology: TierTopology
    pipelines: dict[str, PipelineSpec]
    landscapes: dict[str, GroundTruthLandscape]
    trace: ArrivalTrace
    seed: int = 0
    planning_budget_s: float | None = 5.0
    planning_budget_gpuh: float | None = None
    replan_budget_s: float = 5.0
    aging_beta: float = DEFAULT_AGING_BETA
    scheduler_mode: str = "greedy"  # or "fcfs"
    search: SearchConfig = field(default_factory=SearchConfig)
    drift: tuple[DriftEvent, ...] = ()
    output_dir: str | None = None

    def __post_init__(self) -> None:
        if (self.planning_budget_s is None) == (self.planning_budget_gpuh is None):
            raise ValueError("exactly one planning budget form must be set")
        if self.scheduler_mode not in ("greedy", "fcfs"):
            raise ValueError(f"unknown scheduler mode {self.scheduler_mode!r}")
        for entry in self.trace.entries:
            if entry.template not in self.pipelines:
                raise SchemaError(f"trace references unknown pipeline {entry.template!r}")
            if entry.template not in self.landscapes:
                raise SchemaError(f"no landscape for pipeline {entry.template!r}")


def sim_config_from_file(path: str) -> SimConfig:
    """Build a SimConfig from a JSON file; all validation happens here,
    before any simulation starts."""
    obj = load_json_file(path)
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: missing or unsupported schema_version")
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    if "topology" in obj and isinstance(obj["topology"], str):
        topology = topology_from_dict(load_json_file(resolve(obj["topology"])), where=obj["topology"])
    elif "topology" in obj:
        topology = topology_from_dict(obj["topology"], where=f"{path}#topology")
    else:
        topology = default_topology()

    names = obj.get("pipelines", ["visual-tracking"])
    pipelines = {name: get_pipeline(name) for name in names}

    land_cfg = obj.get("landscape", {})
    difficulty = land_cfg.get("difficulty", "rugged")
    k_true = int(land_cfg.get("k_true", 4))
    noise = float(land_cfg.get("noise_scale", 0.05))
    seed = int(obj.get("seed", 0))
    landscapes = {
        name: generate_landscape(
            seed=seed + 1000 + i,
            pipeline=pipe,
            difficulty=difficulty,
            k_true=k_true,
            noise_scale=noise,
            tier_speed_factors=DEFAULT_SPEED_FACTORS[-topology.num_tiers :]
            if topology.num_tiers <= len(DEFAULT_SPEED_FACTORS)
            else None,
            num_tiers=topology.num_tiers,
        )
        for i, (name, pipe) in enumerate(sorted(pipelines.items()))
    }

    if isinstance(obj.get("trace"), str):
        trace = ArrivalTrace.from_dict(load_json_file(resolve(obj["trace"])), where=obj["trace"])
    elif isinstance(obj.get("trace"), dict) and "entries" in obj["trace"]:
        trace = ArrivalTrace.from_dict(obj["trace"], where=f"{path}#trace")
    else:
        gen = obj.get("trace", {}).get("generator", {}) if isinstance(obj.get("trace"), dict) else {}
        trace = generate_trace(
            templates={n: (pipelines[n], landscapes[n]) for n in pipelines},
            topology=topology,
            duration_s=float(gen.get("duration_s", 120.0)),
            load=float(gen.get("load", 1.0)),
            burst_factor=float(gen.get("burst_factor", 1.0)),
            hardness=gen.get("hardness", "medium"),
            mean_lifespan_s=float(gen.get("mean_lifespan_s", 60.0)),
            seed=seed,
        )

    drift = []
    for d in obj.get("drift", []):
        drift.append(
            DriftEvent(
                time=float(d["time"]),
                kind=d["kind"],
                link=tuple(d["link"]) if "link" in d else None,
                factor=float(d["factor"]) if "factor" in d else None,
                template=d.get("template"),
                delta=float(d["delta"]) if "delta" in d else None,
            )
        )

    abl = obj.get("ablations", {})
    search = SearchConfig(
        use_history=bool(abl.get("warm_start", True)),
        use_cache=bool(abl.get("prefix_cache", True)),
        profiler_mode=abl.get("profiler", "guided"),
        fixed_n=int(abl.get("fixed_n", 356)),
    )

    return SimConfig(
        topology=topology,
        pipelines=pipelines,
        landscapes=landscapes,
        trace=trace,
        seed=seed,
        planning_budget_s=obj.get("planning_budget_s", 5.0 if "planning_budget_gpuh" not in obj else None),
        planning_budget_gpuh=obj.get("planning_budget_gpuh"),
        replan_budget_s=float(obj.get("replan_budget_s", 5.0)),
        aging_beta=float(obj.get("aging_beta", DEFAULT_AGING_BETA)),
        scheduler_mode=obj.get("scheduler", "greedy"),
        search=search,
        drift=tuple(drift),
        output_dir=obj.get("output_dir"),
    )


@dataclass
class QueryRecord:
    id: str
    template: str
    arrival_time: float
    a_slo: float
    l_slo: float
    lifespan: float
    status: str = "planning"
    time_to_first_feasible_s: float | None = None
    planning_time_s: float = 0.0
    gpu_seconds: float = 0.0
    profiling_dollars: float = 0.0
    search_steps: int = 0
    candidate_count: int = 0
    admitted_at: float | None = None
    released_at: float | None = None
    hourly_cost: float | None = None
    replans: int = 0

    def to_row(self) -> dict:
        return {
            "id": self.id,
            "template": self.template,
            "arrival_time": self.arrival_time,
            "a_slo": self.a_slo,
            "l_slo": self.l_slo,
            "lifespan": self.lifespan,
            "status": self.status,
            "time_to_first_feasible_s": self.time_to_first_feasible_s,
            "planning_time_s": self.planning_time_s,
            "gpu_seconds": self.gpu_seconds,
            "profiling_dollars": self.profiling_dollars,
            "search_steps": self.search_steps,
            "candidate_count": self.candidate_count,
            "admitted_at": self.admitted_at,
            "released_at": self.released_at,
            "hourly_cost": self.hourly_cost,
            "replans": self.replans,
        }


@dataclass
class MetricsReport:
    goodput_series: tuple[tuple[float, int], ...]
    cost_series: tuple[tuple[float, float], ...]
    queries: tuple[QueryRecord, ...]
    totals: dict
    deployment_snapshots: tuple[dict, ...] = ()

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "goodput_series": [[t, g] for t, g in self.goodput_series],
            "cost_series": [[t, c] for t, c in self.cost_series],
            "queries": [q.to_row() for q in self.queries],
            "totals": self.totals,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _series_average(series, horizon: float) -> float:
    """Time-weighted mean of a right-continuous step series over [0, horizon]."""
    if horizon <= 0:
        return 0.0
    total = 0.0
    for (t0, v), (t1, _) in zip(series, series[1:]):
        total += v * (min(t1, horizon) - min(t0, horizon))
    if series:
        t_last, v_last = series[-1]
        total += v_last * max(0.0, horizon - t_last)
    return total / horizon


class _Sim:
    def __init__(self, config: SimConfig):
        self.cfg = config
        self.topology = config.topology
        self.landscapes = dict(config.landscapes)
        self.state = DeploymentState.fresh(config.topology)
        self.records: dict[str, QueryRecord] = {}
        self.queries: dict[str, Query] = {}
        self.candidates: dict[str, CandidateSet] = {}
        self.surrogates: dict[str, object] = {}
        self.pending: list[str] = []
        self.pending_since: dict[str, float] = {}
        self.goodput_series: list[tuple[float, int]] = [(0.0, 0)]
        self.cost_series: list[tuple[float, float]] = [(0.0, 0.0)]
        self.deployment_dollars = 0.0
        self._last_cost_t = 0.0
        self._last_cost_rate = 0.0
        self.history = HistoryStore()
        self.deployment_snapshots: list[dict] = []
        self._seq = 0
        self.heap: list = []

    def _snapshot(self, t: float) -> None:
        for qid in sorted(self.state.assignments):
            a = self.state.assignments[qid]
            self.deployment_snapshots.append(
                {
                    "time_s": t,
                    "query": qid,
                    "placement": "|".join(f"{tier}:{m}" for tier, m in a.op_machines),
                    "resources": "|".join(str(f) for f in a.scored.plan.plan.resources),
                    "hourly_cost": a.scored.hourly_cost,
                }
            )

    def push(self, time: float, kind: str, payload) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (time, self._seq, kind, payload))

    def query_seed(self, idx: int, salt: int = 0) -> int:
        return int(np.random.SeedSequence((self.cfg.seed, idx, salt)).generate_state(1)[0])

    def _true_goodput(self) -> int:
        """Admitted queries whose SLOs actually hold under the current
        landscape and topology; an admitted plan whose true accuracy misses
        the SLO is served but does not count."""
        count = 0
        for qid, assignment in self.state.assignments.items():
            if not self._violates(qid, assignment.scored):
                count += 1
        return count

    def _mark(self, t: float) -> None:
        self.deployment_dollars += self._last_cost_rate * max(0.0, t - self._last_cost_t) / 3600.0
        self._last_cost_t = t
        rate = self.state.hourly_cost()
        self._last_cost_rate = rate
        self.goodput_series.append((t, self._true_goodput()))
        self.cost_series.append((t, rate))

    # -- event handlers ----------------------------------------------------

    def on_arrival(self, t: float, idx: int) -> None:
        entry = self.cfg.trace.entries[idx]
        qid = f"q{idx:04d}"
        query = Query(
            id=qid,
            pipeline=self.cfg.pipelines[entry.template],
            a_slo=entry.a_slo,
            l_slo=entry.l_slo,
            response_budget_s=self.cfg.planning_budget_s,
            profiling_budget_gpuh=self.cfg.planning_budget_gpuh,
            weight=entry.weight,
            arrival_time=entry.arrival_time,
            lifespan=entry.lifespan,
        )
        self.queries[qid] = query
        rec = QueryRecord(
            id=qid,
            template=entry.template,
            arrival_time=t,
            a_slo=entry.a_slo,
            l_slo=entry.l_slo,
            lifespan=entry.lifespan,
        )
        self.records[qid] = rec
        result = single_query_search(
            query,
            self.landscapes[entry.template],
            self.topology,
            history=self.history if self.cfg.search.use_history else None,
            seed=self.query_seed(idx),
            config=self.cfg.search,
        )
        rec.planning_time_s = result.charged_time_s
        rec.gpu_seconds = result.gpu_seconds
        rec.profiling_dollars = result.dollars
        rec.search_steps = result.steps
        rec.time_to_first_feasible_s = result.time_to_first_feasible_s
        rec.candidate_count = len(result.candidates)
        self.candidates[qid] = result.candidates
        self.surrogates[qid] = result.surrogates
        self.push(t + result.charged_time_s, "ready", qid)

    def on_ready(self, t: float, qid: str) -> None:
        rec = self.records[qid]
        if len(self.candidates[qid]) == 0:
            rec.status = "rejected" if rec.replans == 0 else "degraded"
            self._mark(t)
            return
        rec.status = "pending"
        self.pending.append(qid)
        self.pending_since[qid] = t
        self.epoch(t)

    def on_release(self, t: float, payload) -> None:
        qid, admitted_at = payload
        rec = self.records[qid]
        if rec.status != "running" or rec.admitted_at != admitted_at:
            return  # stale release (query was drift-released and replanned)
        self.state.release(qid)
        rec.status = "completed"
        rec.released_at = t
        self._mark(t)
        self.epoch(t)

    def on_drift(self, t: float, event: DriftEvent) -> None:
        if event.kind == "bandwidth":
            self.topology = self.topology.with_bandwidth_scaled(event.link, event.factor)
        else:
            self.landscapes[event.template] = self.landscapes[event.template].with_accuracy_shift(event.delta)
        violated = []
        for qid, assignment in list(self.state.assignments.items()):
            if self._violates(qid, assignment.scored):
                violated.append(qid)
        for qid in violated:
            self.state.release(qid)
            self.records[qid].status = "replanning"
            self._mark(t)
            self._start_replan(t, qid)
        self.epoch(t)

    def _violates(self, qid: str, scored: ScoredPlan) -> bool:
        rec = self.records[qid]
        template = rec.template
        land = self.landscapes[template]
        plan = scored.plan.plan
        lat = latmod.pipeline_latency(
            plan, self.cfg.pipelines[template], self.topology, land.timings_for(plan.configuration)
        ).total_s
        if lat > rec.l_slo:
            return True
        return land.accuracy_mean(plan.configuration) < rec.a_slo

    def _start_replan(self, t: float, qid: str) -> None:
        rec = self.records[qid]
        rec.replans += 1
        query = self.queries[qid]
        idx = int(qid[1:])
        result = replan(
            query,
            self.landscapes[rec.template],
            self.topology,
            prior_pair=self.surrogates.get(qid),
            history=self.history if self.cfg.search.use_history else None,
            seed=self.query_seed(idx, salt=rec.replans),
            config=self.cfg.search,
            budget_s=self.cfg.replan_budget_s,
        )
        rec.planning_time_s += result.charged_time_s
        rec.gpu_seconds += result.gpu_seconds
        rec.profiling_dollars += result.dollars
        rec.search_steps += result.steps
        self.candidates[qid] = result.candidates
        self.surrogates[qid] = result.surrogates
        self.push(t + result.charged_time_s, "ready", qid)

    # -- scheduling --------------------------------------------------------

    def _current_candidates(self, qid: str) -> CandidateSet:
        """Re-validate candidate latencies against the current topology."""
        rec = self.records[qid]
        land = self.landscapes[rec.template]
        pipe = self.cfg.pipelines[rec.template]
        kept = []
        for cand in self.candidates[qid].plans:
            lat = latmod.pipeline_latency(
                cand.plan, pipe, self.topology, land.timings_for(cand.plan.configuration)
            ).total_s
            if lat <= rec.l_slo:
                kept.append(replace(cand, latency_s=lat))
        return CandidateSet.build(kept)

    def epoch(self, t: float) -> None:
        if not self.pending:
            self._mark(t)
            return
        ordered = sorted(self.pending, key=lambda q: self.records[q].arrival_time)
        live: list[tuple[Query, CandidateSet]] = []
        stale: list[str] = []
        for qid in ordered:
            cset = self._current_candidates(qid)
            if len(cset) == 0:
                stale.append(qid)
            else:
                live.append((self.queries[qid], cset))
        for qid in stale:
            self.pending.remove(qid)
            self.pending_since.pop(qid, None)
            self.records[qid].status = "replanning"
            self._start_replan(t, qid)

        before = set(self.state.assignments)
        if self.cfg.scheduler_mode == "fcfs":
            for query, cset in live:
                cheapest = cset.cheapest()
                sp = ScoredPlan.build(query.id, cheapest, self.topology, query.weight)
                assignment = self.state.try_place(sp)
                if assignment is None:
                    break  # strict head-of-line blocking
                self.state.admit(assignment)
        else:
            aged = age_weights(
                [(q.id, q.weight, self.pending_since[q.id]) for q, _ in live], t, self.cfg.aging_beta
            )
            greedy_goodput(live, self.topology, state=self.state, weights=aged)

        for qid in set(self.state.assignments) - before:
            rec = self.records[qid]
            rec.status = "running"
            rec.admitted_at = t
            rec.hourly_cost = self.state.assignments[qid].scored.hourly_cost
            self.pending.remove(qid)
            self.pending_since.pop(qid, None)
            self.push(t + rec.lifespan, "release", (qid, t))
        self._mark(t)

    # -- main loop ----------------------------------------------------------

    def run(self) -> MetricsReport:
        for idx, entry in enumerate(self.cfg.trace.entries):
            self.push(entry.arrival_time, "arrival", idx)
        for event in self.cfg.drift:
            self.push(event.time, "drift", event)
        t = 0.0
        while self.heap:
            t, _, kind, payload = heapq.heappop(self.heap)
            if kind == "arrival":
                self.on_arrival(t, payload)
            elif kind == "ready":
                self.on_ready(t, payload)
            elif kind == "release":
                self.on_release(t, payload)
            elif kind == "drift":
                self.on_drift(t, payload)
            if kind in ("ready", "release", "drift"):
                self._snapshot(t)
        for qid in self.pending:
            self.records[qid].status = "pending-at-end"
        self._mark(t)

        horizon = t
        records = tuple(self.records[q] for q in sorted(self.records))
        statuses = [r.status for r in records]
        totals = {
            "arrived": len(records),
            "completed": statuses.count("completed"),
            "degraded": statuses.count("degraded"),
            "rejected": statuses.count("rejected"),
            "pending_at_end": statuses.count("pending-at-end"),
            "avg_goodput": _series_average(self.goodput_series, horizon),
            "deployment_dollars": self.deployment_dollars,
            "profiling_dollars": float(sum(r.profiling_dollars for r in records)),
            "profiling_gpu_seconds": float(sum(r.gpu_seconds for r in records)),
            "horizon_s": horizon,
        }
        ttff = [r.time_to_first_feasible_s for r in records if r.time_to_first_feasible_s is not None]
        totals["mean_response_time_s"] = float(np.mean(ttff)) if ttff else None
        return MetricsReport(
            goodput_series=tuple(self.goodput_series),
            cost_series=tuple(self.cost_series),
            queries=records,
            totals=totals,
            deployment_snapshots=tuple(self.deployment_snapshots),
        )


def run(config: SimConfig) -> MetricsReport:
    """Run the full simulation; deterministic for a fixed config."""
    report = _Sim(config).run()
    if config.output_dir:
        write_report(report, config.output_dir)
    return report


def write_report(report: MetricsReport, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "metrics.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(outdir, "goodput.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "goodput"])
        w.writerows(report.goodput_series)
    with open(os.path.join(outdir, "cost.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "dollars_per_hour"])
        w.writerows(report.cost_series)
    rows = [q.to_row() for q in report.queries]
    with open(os.path.join(outdir, "queries.csv"), "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    with open(os.path.join(outdir, "deployment.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["time_s", "query", "placement", "resources", "hourly_cost"])
        w.writeheader()
        w.writerows(report.deployment_snapshots)


def compare(config: SimConfig, variants: dict[str, dict]) -> dict:
    """Run planner variants on identical seeds and trace; emit side-by-side
    metrics and improvement factors relative to the first variant."""
    results = {}
    for name, overrides in variants.items():
        search = replace(
            config.search,
            use_history=overrides.get("warm_start", config.search.use_history),
            use_cache=overrides.get("prefix_cache", config.search.use_cache),
            profiler_mode=overrides.get("profiler", config.search.profiler_mode),
            fixed_n=overrides.get("fixed_n", config.search.fixed_n),
        )
        cfg = replace(
            config,
            search=search,
            scheduler_mode=overrides.get("scheduler", config.scheduler_mode),
            output_dir=None,
        )
        results[name] = run(cfg)
    names = list(variants)
    base = results[names[0]]
    base_goodput = base.totals["avg_goodput"]
    rows = []
    for name in names:
        r = results[name]
        g = r.totals["avg_goodput"]
        rows.append(
            {
                "variant": name,
                "avg_goodput": g,
                "goodput_factor": (g / base_goodput) if base_goodput > 0 else (1.0 if g == base_goodput else None),
                "deployment_dollars": r.totals["deployment_dollars"],
                "profiling_dollars": r.totals["profiling_dollars"],
                "profiling_gpu_seconds": r.totals["profiling_gpu_seconds"],
                "mean_response_time_s": r.totals["mean_response_time_s"],
                "completed": r.totals["completed"],
            }
        )
    return {"rows": rows, "reports": results}


def write_compare_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
