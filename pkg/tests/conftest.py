import math
import sys

import numpy as np
import pytest
from hypothesis import settings

from dtccl.scenario import (CRUISE, OFF, AgentState, DisengagementSegment, EgoState, Frame,
                            FrameLog, MapContext)

settings.register_profile("ci", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("ci")


def straight_map(length=300.0, half_width=4.0, speed_limit=12.0, signal=None):
    route = [(x, 0.0) for x in np.arange(0.0, length + 1e-9, 10.0)]
    area = [(-20.0, -half_width), (length + 20.0, -half_width),
            (length + 20.0, half_width), (-20.0, half_width)]
    return MapContext(tuple(route), tuple(area), speed_limit, signal)


def cruise_frames(n=50, speed=8.0, x0=20.0, dt=0.1, takeover=30, agents_fn=None, t0=0):
    frames = []
    for k in range(n):
        ego = EgoState(x0 + speed * dt * k, 0.0, 0.0, speed)
        agents = tuple(agents_fn(k)) if agents_fn else ()
        frames.append(Frame(t0 + k, ego, agents, CRUISE if k < takeover else OFF))
    return tuple(frames)


def agent(aid, x, y=0.0, speed=0.0, heading=0.0, hl=2.25, hw=0.95):
    return AgentState(aid, x, y, heading, speed, hl, hw)


def straight_segment(speed=8.0, agents_fn=None, source_id="seg@0", m=None):
    m = m or straight_map()
    return DisengagementSegment(cruise_frames(speed=speed, agents_fn=agents_fn), 30, m, source_id)


def open_road_segment(source_id="open@0"):
    """Lead car, a crossing pedestrian and two background cars, all safely clear of the ego."""
    def agents(k):
        return [agent("lead", 48.0 + 6.0 * 0.1 * k, speed=6.0),
                agent("bg1", 150.0 - 5.0 * 0.1 * k, y=2.0, speed=5.0, heading=math.pi),
                agent("bg2", 5.0, y=-2.5),
                AgentState("ped", 90.0, -4.0 + 2.0 * 0.1 * k, math.pi / 2, 2.0, 0.3, 0.3, "pedestrian")]
    return straight_segment(8.0, agents, source_id, straight_map(half_width=5.0))


@pytest.fixture
def road():
    return straight_map()


@pytest.fixture
def segment():
    return open_road_segment()


def frame_log(statuses, m=None, log_id="log"):
    m = m or straight_map()
    frames = [Frame(k, EgoState(20.0 + 0.5 * k, 0.0, 0.0, 5.0), (), s) for k, s in enumerate(statuses)]
    return FrameLog(tuple(frames), m, 0.1, log_id)


def random_features(rng, n):
    """Batched random scene features with a few agents masked out per row."""
    from dtccl.features import AGENT_DIM, EGO_DIM, MAX_AGENTS, ROUTE_DIM, ROUTE_SAMPLES
    mask = (rng.random((n, MAX_AGENTS)) < 0.6).astype(float)
    return {"ego": rng.normal(0, 1, (n, EGO_DIM)) * [50, 1, 0.2, 5, 1, 30],
            "agents": rng.normal(0, 1, (n, MAX_AGENTS, AGENT_DIM)) * [20, 5, 1, 5, 1, 0.5, 0.5] * mask[..., None],
            "mask": mask,
            "route": rng.normal(0, 1, (n, ROUTE_SAMPLES, ROUTE_DIM)) * [0.02, 2.0]}


def random_batch(rng, n=3):
    from dtccl.policy import HORIZON, Batch
    return Batch(bc_feats=random_features(rng, n), bc_targets=rng.normal(0, 1, (n, HORIZON, 2)),
                 cl_anchor=random_features(rng, n), cl_pos=random_features(rng, n),
                 cl_neg=random_features(rng, n), nom_feats=random_features(rng, n),
                 nom_targets=rng.normal(0, 1, (n, HORIZON, 2)), probe=random_features(rng, n),
                 rehearsal=float(rng.uniform(0.2, 0.8)))


def pytest_terminal_summary(terminalreporter):
    results = sys.modules.get("test_acceptance")
    lines = getattr(results, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
