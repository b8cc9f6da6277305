"""Closed-loop evaluation metrics and the composite score.

Three gates (no collision, full drivable compliance, no wrong-way travel)
multiply a weighted mean of TTC, comfort, speed compliance and progress.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .controllers import ExpertDriver
from .geometry import box_corners, boxes_overlap, wrap_angles
from .safety import DynamicLimits, STANDSTILL
from .scenario import EGO_HALF_LENGTH, EGO_HALF_WIDTH
from .sim import COLLISION, DRIVABLE, RolloutResult, SimConfig, rollout

METRIC_KEYS = ("collisions_ok", "drivable", "direction", "ttc_score", "comfort",
               "speed_compliance", "progress")
TABLE_COLUMNS = ("Policy", "Score", "Collisions", "Drivable", "Direction", "TTC", "Comfort",
                 "Speed", "Progress")
_TABLE_KEYS = ("composite",) + METRIC_KEYS


@dataclass(frozen=True)
class ComfortBounds:
    max_accel: float = 2.0
    max_jerk: float = 3.0
    max_yaw_rate: float = 0.5

    def __post_init__(self):
        if min(self.max_accel, self.max_jerk, self.max_yaw_rate) <= 0:
            raise ValueError("comfort bounds must be positive")


@dataclass(frozen=True)
class ScoreWeights:
    ttc: float = 0.25
    comfort: float = 0.25
    speed: float = 0.25
    progress: float = 0.25

    def __post_init__(self):
        w = (self.ttc, self.comfort, self.speed, self.progress)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("metrics weights must be non-negative and sum to 1")


@dataclass(frozen=True)
class MetricsConfig:
    ttc_threshold: float = 0.95
    ttc_horizon: float = 3.0
    speed_tolerance: float = 0.1
    direction_tolerance: float = 1.0
    comfort: ComfortBounds = field(default_factory=ComfortBounds)
    weights: ScoreWeights = field(default_factory=ScoreWeights)

    def __post_init__(self):
        if self.ttc_threshold <= 0 or self.ttc_horizon <= 0:
            raise ValueError("metrics TTC threshold and horizon must be positive")
        if self.speed_tolerance < 0 or self.direction_tolerance < 0:
            raise ValueError("metrics tolerances must be >= 0")

    def validate_against(self, limits: DynamicLimits) -> None:
        c = self.comfort
        if (c.max_accel > limits.max_accel or c.max_jerk > limits.max_jerk
                or c.max_yaw_rate > limits.max_yaw_rate):
            raise ValueError("metrics comfort bounds must be at least as tight as safety limits")


# ---------------------------------------------------------------- per-metric


def _ego_arrays(result: RolloutResult):
    frames = result.log.frames
    x = np.array([f.ego.x for f in frames])
    y = np.array([f.ego.y for f in frames])
    h = np.array([f.ego.heading for f in frames])
    v = np.array([f.ego.speed for f in frames])
    return x, y, h, v


def metric_collisions(result: RolloutResult) -> float:
    return 0.0 if any(e.kind == COLLISION for e in result.events) else 1.0


def metric_drivable(result: RolloutResult) -> float:
    n = len(result.log.frames)
    if n == 0:
        return 1.0
    bad = {e.frame for e in result.events if e.kind == DRIVABLE}
    return 1.0 - len(bad) / n


def route_progress(result: RolloutResult) -> np.ndarray:
    x, y, _, _ = _ego_arrays(result)
    if len(x) == 0:
        return np.zeros(0)
    return result.log.map.route_line.project(np.stack([x, y], axis=1))[0]


def metric_direction(result: RolloutResult, tolerance: float = 1.0) -> float:
    s = route_progress(result)
    backward = -np.minimum(np.diff(s), 0.0).sum() if len(s) > 1 else 0.0
    return 0.0 if backward > tolerance else 1.0


def time_to_collision(frame, dt: float, horizon: float = 3.0) -> float:
    """Constant-velocity TTC swept at ``dt``; inf when no overlap within ``horizon``."""
    if not frame.agents:
        return math.inf
    e = frame.ego
    steps = np.arange(int(round(horizon / dt)) + 1) * dt
    ego = box_corners(e.x + e.speed * math.cos(e.heading) * steps,
                      e.y + e.speed * math.sin(e.heading) * steps, e.heading,
                      EGO_HALF_LENGTH, EGO_HALF_WIDTH)  # (K, 4, 2)
    arr = np.array([(a.x, a.y, a.heading, a.speed, a.half_length, a.half_width) for a in frame.agents])
    ax = arr[:, None, 0] + arr[:, None, 3] * np.cos(arr[:, None, 2]) * steps
    ay = arr[:, None, 1] + arr[:, None, 3] * np.sin(arr[:, None, 2]) * steps
    agents = box_corners(ax, ay, arr[:, None, 2], arr[:, None, 4], arr[:, None, 5])  # (A, K, 4, 2)
    hit = boxes_overlap(ego[None], agents).any(axis=0)
    k = np.flatnonzero(hit)
    return math.inf if len(k) == 0 else float(steps[k[0]])


def metric_ttc(result: RolloutResult, threshold: float = 0.95, horizon: float = 3.0) -> float:
    frames = result.log.frames
    if not frames:
        return 1.0
    ok = [time_to_collision(f, result.log.dt, horizon) > threshold for f in frames]
    return float(np.mean(ok))


def comfort_flags(speed, heading, dt: float, bounds: ComfortBounds) -> np.ndarray:
    """Per-frame compliance: frame k is judged on the differences ending at k."""
    speed = np.asarray(speed, dtype=float)
    n = len(speed)
    ok = np.ones(n, dtype=bool)
    if n < 2:
        return ok
    accel = np.diff(speed) / dt
    yaw = wrap_angles(np.diff(heading)) / dt
    ok[1:] &= (np.abs(accel) <= bounds.max_accel + 1e-9) & (np.abs(yaw) <= bounds.max_yaw_rate + 1e-9)
    if n >= 3:
        jerk = np.diff(accel) / dt
        moving = speed > STANDSTILL
        judged = moving[:-2] & moving[1:-1] & moving[2:]
        ok[2:] &= ~judged | (np.abs(jerk) <= bounds.max_jerk + 1e-9)
    return ok


def metric_comfort(result: RolloutResult, bounds: ComfortBounds = ComfortBounds()) -> float:
    _, _, h, v = _ego_arrays(result)
    if len(v) == 0:
        return 1.0
    return float(comfort_flags(v, h, result.log.dt, bounds).mean())


def metric_speed(result: RolloutResult, tolerance: float = 0.1) -> float:
    _, _, _, v = _ego_arrays(result)
    if len(v) == 0:
        return 1.0
    return float(np.mean(v <= result.log.map.speed_limit + tolerance))


def metric_progress(result: RolloutResult, reference_progress: float) -> float:
    s = route_progress(result)
    gained = float(s[-1] - s[0]) if len(s) else 0.0
    if reference_progress <= 0:
        return 1.0
    return float(min(1.0, max(0.0, gained / reference_progress)))


def composite_score(report: dict, weights: ScoreWeights = ScoreWeights()) -> float:
    """100 x gates x weighted mean; drivable gates only at exactly 1.0."""
    gates = report["collisions_ok"] * (1.0 if report["drivable"] >= 1.0 else 0.0) * report["direction"]
    weighted = (weights.ttc * report["ttc_score"] + weights.comfort * report["comfort"]
                + weights.speed * report["speed_compliance"] + weights.progress * report["progress"])
    return 100.0 * gates * weighted


def scenario_metrics(result: RolloutResult, reference_progress: float,
                     cfg: MetricsConfig = MetricsConfig()) -> dict:
    m = {
        "collisions_ok": metric_collisions(result),
        "drivable": metric_drivable(result),
        "direction": metric_direction(result, cfg.direction_tolerance),
        "ttc_score": metric_ttc(result, cfg.ttc_threshold, cfg.ttc_horizon),
        "comfort": metric_comfort(result, cfg.comfort),
        "speed_compliance": metric_speed(result, cfg.speed_tolerance),
        "progress": metric_progress(result, reference_progress),
    }
    m["composite"] = composite_score(m, cfg.weights)
    return m


# ---------------------------------------------------------------- evaluation


@dataclass
class MetricsReport:
    policy: str
    scenarios: list  # [{"scenario": name, **metrics}]

    @property
    def aggregate(self) -> dict:
        if not self.scenarios:
            return {}
        out = {k: 100.0 * float(np.mean([s[k] for s in self.scenarios])) for k in METRIC_KEYS}
        out["composite"] = float(np.mean([s["composite"] for s in self.scenarios]))
        return out

    @property
    def composite(self) -> float:
        return self.aggregate.get("composite", 0.0)

    def to_dict(self) -> dict:
        return {"policy": self.policy, "aggregate": self.aggregate, "scenarios": self.scenarios}

    def table_row(self) -> list:
        agg = self.aggregate
        return [self.policy] + [f"{agg[k]:.2f}" for k in _TABLE_KEYS]


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in reports:
        if r.scenarios:
            w.writerow(r.table_row())
    return buf.getvalue()


def emit_report(reports, path_stem: str, formats=("json", "csv")) -> list:
    """Write reports as ``<stem>.json`` and/or ``<stem>.csv``; returns the paths written."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    paths = []
    if "json" in formats:
        p = f"{path_stem}.json"
        with open(p, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=1, sort_keys=True)
        paths.append(p)
    if "csv" in formats:
        p = f"{path_stem}.csv"
        with open(p, "w") as fh:
            fh.write(reports_to_csv(reports))
        paths.append(p)
    return paths


_REFERENCE_CACHE: dict = {}


def reference_progress(instance, sim: SimConfig) -> float:
    """Route distance the expert driver covers on ``instance`` (cached)."""
    key = (instance.name, instance.seed, sim)
    if key not in _REFERENCE_CACHE:
        res = rollout(ExpertDriver(), instance, sim, monitor=False)
        s = route_progress(res)
        _REFERENCE_CACHE[key] = float(s[-1] - s[0]) if len(s) else 0.0
    return _REFERENCE_CACHE[key]


def evaluate(policy, instances: Sequence, cfg: MetricsConfig = MetricsConfig(),
             sim: SimConfig = SimConfig(), name: str = "policy") -> MetricsReport:
    """Roll ``policy`` out on every instance (no safety driver) and score it."""
    if not instances:
        raise ValueError("evaluation needs at least one scenario")
    rows = []
    for inst in sorted(instances, key=lambda i: i.name):
        res = rollout(policy, inst, sim, monitor=False, stop_on_collision=True)
        m = scenario_metrics(res, reference_progress(inst, sim), cfg)
        rows.append({"scenario": inst.name, **m})
    return MetricsReport(name, rows)
