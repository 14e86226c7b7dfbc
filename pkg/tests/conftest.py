import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tierplan.landscape import generate_landscape, quality_latency_frontier
from tierplan.model import OperatorSpec, PipelineSpec, Query, Tier, TierTopology
from tierplan.presets import DEFAULT_SPEED_FACTORS, default_topology, visual_tracking_pipeline


@pytest.fixture(scope="session")
def topology():
    return default_topology()


@pytest.fixture(scope="session")
def vt_pipeline():
    return visual_tracking_pipeline()


@pytest.fixture(scope="session")
def vt_landscape(vt_pipeline):
    return generate_landscape(
        seed=11, pipeline=vt_pipeline, difficulty="rugged", tier_speed_factors=DEFAULT_SPEED_FACTORS
    )


@pytest.fixture(scope="session")
def vt_query(vt_pipeline, vt_landscape, topology):
    frontier = quality_latency_frontier(vt_landscape, topology)
    acc = float(np.mean([a for _, a, _ in frontier]))
    lat = float(np.mean([l for _, _, l in frontier]))
    return Query(
        id="vt-medium",
        pipeline=vt_pipeline,
        a_slo=0.8 * acc,
        l_slo=1.5 * lat,
        response_budget_s=5.0,
    )


@pytest.fixture
def tiny_pipeline():
    ops = (
        OperatorSpec(0, ("lo", "hi"), base_output_size=1e6),
        OperatorSpec(1, ("a", "b"), base_output_size=1e5),
    )
    return PipelineSpec(name="tiny", operators=ops, edges=((0, 1),))


@pytest.fixture
def two_tier_topology():
    tiers = (
        Tier(name="edge", machine_count=2, capacity=1.0, unit_cost=1.0),
        Tier(name="cloud", machine_count=2, capacity=1.0, unit_cost=3.0),
    )
    bw = ((1000.0, 100.0), (100.0, 1000.0))
    t0 = ((0.0, 0.0), (0.0, 0.0))
    return TierTopology(tiers=tiers, bandwidth_mbps=bw, link_latency_s=t0)
