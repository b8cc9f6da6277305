import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtccl.controllers import ExpertDriver
from dtccl.metrics import (ComfortBounds, MetricsConfig, MetricsReport, ScoreWeights, comfort_flags,
                           composite_score, emit_report, evaluate, metric_comfort,
                           metric_direction, metric_drivable, metric_progress, metric_speed,
                           metric_ttc, reports_to_csv, scenario_metrics, time_to_collision)
from dtccl.safety import DynamicLimits
from dtccl.scenario import EGO_HALF_LENGTH, Frame, FrameLog
from dtccl.sim import COLLISION, DRIVABLE, Event, RolloutResult
from dtccl.templates import sample_scenarios

from conftest import agent, cruise_frames, straight_map

ONES = dict(collisions_ok=1.0, drivable=1.0, direction=1.0, ttc_score=1.0, comfort=1.0,
            speed_compliance=1.0, progress=1.0)
unit = st.floats(0.0, 1.0)


def result(frames, events=(), m=None):
    return RolloutResult(FrameLog(frames, m or straight_map()), tuple(events))


def test_composite_fixed_points():
    assert composite_score(ONES) == 100.0
    assert composite_score(dict(ONES, ttc_score=0.8, progress=0.5)) == 82.5
    assert composite_score(dict(ONES, drivable=0.99)) == 0.0


@given(unit, unit, unit, unit, unit)
def test_collision_gate_zeroes_score(a, b, c, d, drv):
    rep = dict(ONES, collisions_ok=0.0, ttc_score=a, comfort=b, speed_compliance=c, progress=d,
               drivable=drv)
    assert composite_score(rep) == 0.0


@given(unit, unit, unit, unit)
def test_composite_bounded(a, b, c, d):
    s = composite_score(dict(ONES, ttc_score=a, comfort=b, speed_compliance=c, progress=d))
    assert 0.0 <= s <= 100.0 + 1e-9


def test_collision_event_zeroes_episode():
    r = result(cruise_frames(takeover=50), [Event(10, COLLISION, "car")])
    assert scenario_metrics(r, 30.0)["composite"] == 0.0


def test_drivable_fraction_counts_frames():
    r = result(cruise_frames(n=10, takeover=10), [Event(3, DRIVABLE), Event(3, DRIVABLE), Event(5, DRIVABLE)])
    assert metric_drivable(r) == pytest.approx(0.8)


def test_direction_gate():
    fwd = cruise_frames(n=10, takeover=10)
    assert metric_direction(result(fwd)) == 1.0
    back = [Frame(f.t, f.ego, f.agents, f.status) for f in reversed(fwd)]
    back = [Frame(k, f.ego) for k, f in enumerate(back)]
    assert metric_direction(result(back)) == 0.0  # 7.2 m backwards


def test_ttc():
    ego_frame = cruise_frames(n=1, speed=10.0, takeover=1)[0]
    bumpers = EGO_HALF_LENGTH + 2.25
    stopped = Frame(0, ego_frame.ego, (agent("a", ego_frame.ego.x + bumpers + 10.0),))
    # 10 m gap between bumpers at 10 m/s closes in 1.0 s
    assert time_to_collision(stopped, 0.1) == pytest.approx(1.0)
    assert time_to_collision(Frame(0, ego_frame.ego), 0.1) == math.inf
    far = Frame(0, ego_frame.ego, (agent("a", ego_frame.ego.x + 100.0),))
    assert time_to_collision(far, 0.1) == math.inf
    assert metric_ttc(result([stopped])) == 1.0
    near = Frame(0, ego_frame.ego, (agent("a", ego_frame.ego.x + bumpers + 5.0),))
    assert metric_ttc(result([near])) == 0.0


def test_comfort_flags_match_direct_count():
    rng = np.random.default_rng(0)
    v = 8.0 + np.cumsum(rng.normal(0, 0.15, 40))
    h = np.cumsum(rng.normal(0, 0.03, 40))
    b = ComfortBounds()
    flags = comfort_flags(v, h, 0.1, b)
    a = np.diff(v) / 0.1
    naive = [True]
    for k in range(1, 40):
        ok = abs(a[k - 1]) <= b.max_accel and abs(h[k] - h[k - 1]) / 0.1 <= b.max_yaw_rate
        if k >= 2:
            ok = ok and abs((a[k - 1] - a[k - 2]) / 0.1) <= b.max_jerk
        naive.append(ok)
    assert flags.tolist() == naive
    assert metric_comfort(result(cruise_frames(takeover=50))) == 1.0


def test_speed_and_progress():
    r = result(cruise_frames(n=10, speed=13.0, takeover=10))
    assert metric_speed(r) == 0.0
    assert metric_progress(r, 2 * 9 * 1.3) == pytest.approx(0.5)
    assert metric_progress(r, 0.0) == 1.0
    assert metric_progress(r, 1.0) == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        ScoreWeights(0.5, 0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        ComfortBounds(max_accel=0.0)
    with pytest.raises(ValueError):
        MetricsConfig(comfort=ComfortBounds(max_jerk=100.0)).validate_against(DynamicLimits())


def test_expert_scores_high_and_reports_emit(tmp_path):
    insts = sample_scenarios("nominal_cruise", 2, 0, "heldout")
    rep = evaluate(ExpertDriver(), insts, name="expert")
    assert rep.composite > 90.0
    assert rep.aggregate["progress"] == pytest.approx(100.0)
    paths = emit_report([rep, MetricsReport("empty", [])], str(tmp_path / "r"))
    assert [p.rsplit(".", 1)[1] for p in paths] == ["json", "csv"]
    rows = reports_to_csv([rep]).splitlines()
    assert rows[0].startswith("Policy,Score") and rows[1].startswith("expert,")
    with pytest.raises(ValueError):
        evaluate(ExpertDriver(), [])
