"""Command-line interface.

Subcommands: ``plan`` (single-query search, prints the candidate set),
``simulate`` (full trace-driven run), ``compare`` (ablation variants on
identical seeds), ``oracle`` (exhaustive scheduling verification; gated
behind this explicit subcommand because of its exponential cost).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import sim as simmod
from .landscape import generate_landscape
from .model import SchemaError, SpaceTooLargeError, load_topology
from .presets import DEFAULT_SPEED_FACTORS, PIPELINE_TEMPLATES, default_topology, get_pipeline
from .model import Query, load_pipeline
from .scheduler import (
    greedy_cost,
    greedy_goodput,
    ilp_oracle_limited,
    ilp_oracle_unlimited,
    oracle_instance_from_candidates,
    random_scheduling_instance,
)
from .search import SearchConfig, single_query_search

ABLATION_PRESETS = {
    "full": {},
    "fixed-n": {"profiler": "fixed"},
    "no-warm-start": {"warm_start": False},
    "no-cache": {"prefix_cache": False},
    "fcfs": {"scheduler": "fcfs"},
}


def _add_plan_parser(sub) -> None:
    p = sub.add_parser("plan", help="search one query and print its candidate set")
    p.add_argument("--pipeline", default="visual-tracking", help="template name or pipeline JSON path")
    p.add_argument("--topology", default=None, help="topology JSON path (default: built-in 3-tier)")
    p.add_argument("--a-slo", type=float, required=True)
    p.add_argument("--l-slo", type=float, required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--budget-s", type=float, default=5.0, help="response budget, simulated seconds")
    group.add_argument("--budget-gpuh", type=float, default=None, help="profiling budget, GPU-hours")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", default="rugged")
    p.add_argument("--noise-scale", type=float, default=0.05)
    p.add_argument("--no-warm-start", action="store_true")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--profiler", choices=["guided", "fixed"], default="guided")
    p.add_argument("--fixed-n", type=int, default=356)
    p.add_argument("--telemetry", default=None, help="write per-step telemetry JSON lines here")
    p.add_argument("--profiling-log", default=None, help="write per-plan profiling audit JSON lines here")


def _cmd_plan(args) -> int:
    if args.pipeline in PIPELINE_TEMPLATES:
        pipeline = get_pipeline(args.pipeline)
    else:
        pipeline = load_pipeline(args.pipeline)
    topology = load_topology(args.topology) if args.topology else default_topology()
    land = generate_landscape(
        seed=args.seed + 1000,
        pipeline=pipeline,
        difficulty=args.difficulty,
        noise_scale=args.noise_scale,
        tier_speed_factors=DEFAULT_SPEED_FACTORS[-topology.num_tiers :]
        if topology.num_tiers <= len(DEFAULT_SPEED_FACTORS)
        else None,
        num_tiers=topology.num_tiers,
    )
    query = Query(
        id="cli",
        pipeline=pipeline,
        a_slo=args.a_slo,
        l_slo=args.l_slo,
        response_budget_s=args.budget_s if args.budget_gpuh is None else None,
        profiling_budget_gpuh=args.budget_gpuh,
    )
    config = SearchConfig(
        use_history=not args.no_warm_start,
        use_cache=not args.no_cache,
        profiler_mode=args.profiler,
        fixed_n=args.fixed_n,
    )
    audit_rows: list[dict] = []
    result = single_query_search(
        query,
        land,
        topology,
        seed=args.seed,
        config=config,
        profile_log=audit_rows.append if args.profiling_log else None,
    )
    if args.telemetry:
        with open(args.telemetry, "w") as fh:
            for row in result.telemetry:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    if args.profiling_log:
        with open(args.profiling_log, "w") as fh:
            for row in audit_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    out = {
        "steps": result.steps,
        "charged_time_s": result.charged_time_s,
        "gpu_seconds": result.gpu_seconds,
        "profiling_dollars": result.dollars,
        "time_to_first_feasible_s": result.time_to_first_feasible_s,
        "candidates": [c.to_dict() for c in result.candidates.plans],
    }
    print(json.dumps(out, sort_keys=True, indent=2))
    return 0


def _cmd_simulate(args) -> int:
    config = simmod.sim_config_from_file(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    report = simmod.run(config)
    print(json.dumps(report.totals, sort_keys=True, indent=2))
    return 0


def _cmd_compare(args) -> int:
    config = simmod.sim_config_from_file(args.config)
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [n for n in names if n not in ABLATION_PRESETS]
    if unknown:
        raise SchemaError(f"unknown variants {unknown}; have {sorted(ABLATION_PRESETS)}")
    result = simmod.compare(config, {n: ABLATION_PRESETS[n] for n in names})
    if args.output:
        simmod.write_compare_csv(result["rows"], args.output)
    print(json.dumps(result["rows"], sort_keys=True, indent=2))
    return 0


def _cmd_oracle(args) -> int:
    if args.topology:
        topology = load_topology(args.topology)
    else:
        # oracle-scale default: 2 tiers x 2 machines
        from .model import Tier, TierTopology

        topology = TierTopology(
            tiers=(
                Tier(name="device", machine_count=2, capacity=1.0, unit_cost=0.05),
                Tier(name="cloud", machine_count=2, capacity=1.0, unit_cost=3.67),
            ),
            bandwidth_mbps=((25_000.0, 400.0), (400.0, 3_000.0)),
            link_latency_s=((0.001, 0.005), (0.005, 0.001)),
        )
    rows = []
    for i in range(args.random):
        candidates = random_scheduling_instance(
            seed=args.seed + i,
            topology=topology,
            n_queries=args.queries,
            max_plans=args.plans,
        )
        inst = oracle_instance_from_candidates(candidates, topology)
        if args.mode == "goodput":
            greedy_val = greedy_goodput(candidates, topology).admitted_weight()
            opt = ilp_oracle_limited(inst)
            rows.append({"instance": i, "greedy": greedy_val, "optimal": opt, "ratio": greedy_val / opt if opt else 1.0})
        else:
            dep = greedy_cost(candidates, topology)
            opt = ilp_oracle_unlimited(inst)
            rows.append(
                {
                    "instance": i,
                    "greedy_dollars": dep.hourly_dollars,
                    "optimal_dollars": opt,
                    "ratio": dep.hourly_dollars / opt if opt else 1.0,
                }
            )
    print(json.dumps(rows, sort_keys=True, indent=2))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tierplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    _add_plan_parser(sub)

    p = sub.add_parser("simulate", help="run a full trace-driven simulation")
    p.add_argument("--config", required=True, help="SimConfig JSON path")
    p.add_argument("--output-dir", default=None)

    p = sub.add_parser("compare", help="run planner ablation variants on identical seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", default="full,fixed-n,no-warm-start,fcfs")
    p.add_argument("--output", default=None, help="side-by-side CSV path")

    p = sub.add_parser("oracle", help="exhaustive scheduling oracles (exponential; small instances only)")
    p.add_argument("--mode", choices=["goodput", "cost"], default="goodput")
    p.add_argument("--random", type=int, default=10, help="number of random instances")
    p.add_argument("--queries", type=int, default=6)
    p.add_argument("--plans", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--topology", default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "plan":
            return _cmd_plan(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "oracle":
            return _cmd_oracle(args)
    except SpaceTooLargeError as e:
        print(f"refused: {e}", file=sys.stderr)
        return 2
    except (SchemaError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
