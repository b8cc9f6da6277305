"""Driving controllers: the learned policy adapter, the expert driver, and the
stop-while-tracking fallback used by the simulated safety driver."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import featurize
from .policy import HORIZON, PolicyParams, plan
from .scenario import EGO_HALF_LENGTH, EGO_HALF_WIDTH, EgoState, Frame, MapContext

MAX_BRAKE = 2.5


def pure_pursuit_yaw_rate(ego: EgoState, map_ctx: MapContext) -> float:
    line = map_ctx.route_line
    s = float(line.project((ego.x, ego.y))[0][0])
    lookahead = max(4.0, 0.8 * ego.speed + 3.0)
    tx, ty = line.point_at(s + lookahead)
    dx, dy = tx - ego.x, ty - ego.y
    alpha = math.atan2(dy, dx) - ego.heading
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    curvature = 2.0 * math.sin(alpha) / math.hypot(dx, dy)
    return ego.speed * curvature


@dataclass(frozen=True)
class IDMParams:
    s0: float = 2.0
    T: float = 1.5
    a_max: float = 1.5
    b: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        if min(self.s0, self.T, self.a_max, self.b, self.delta) <= 0:
            raise ValueError("IDM parameters must be positive")


def idm_acceleration(v: float, v0: float, gap: float | None, dv: float, p: IDMParams) -> float:
    """Intelligent Driver Model acceleration; ``gap=None`` means free road.

    A non-positive gap returns the emergency deceleration ``-b``.
    """
    free = 1.0 - (v / v0) ** p.delta
    if gap is None:
        return p.a_max * free
    if gap <= 0:
        return -p.b
    s_star = p.s0 + v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b))
    return p.a_max * (free - (s_star / gap) ** 2)


class NetworkPolicy:
    """Adapter that turns policy parameters into a per-frame planner."""

    def __init__(self, params: PolicyParams):
        self.params = params

    def plan(self, frame: Frame, map_ctx: MapContext, world=None) -> np.ndarray:
        return plan(featurize(frame, map_ctx), self.params)


class StopController:
    """Brake to a standstill at the comfortable maximum while tracking the route."""

    def control(self, frame: Frame, map_ctx: MapContext, world=None):
        ego = frame.ego
        accel = -MAX_BRAKE if ego.speed > 0 else 0.0
        return accel, pure_pursuit_yaw_rate(ego, map_ctx)


class ExpertDriver:
    """Route-following human-driver stand-in: pure pursuit plus IDM car following.

    Obstacles are agents that occupy, or are predicted by constant-velocity
    extrapolation to occupy, the ego corridor ahead. A red signal is treated as a
    stationary obstacle at the stop line when stopping is still comfortable.
    """

    def __init__(self, idm: IDMParams | None = None, corridor_margin: float = 0.4,
                 predict_s: float = 3.0):
        self.idm = idm or IDMParams(s0=3.0, T=1.5, a_max=1.2, b=2.0)
        self.corridor_margin = corridor_margin
        self.predict_s = predict_s

    def _obstacle(self, frame: Frame, map_ctx: MapContext):
        ego = frame.ego
        line = map_ctx.route_line
        s_ego = float(line.project((ego.x, ego.y))[0][0])
        best = None  # (gap, lead speed along route)
        if frame.agents:
            steps = np.arange(0.0, self.predict_s + 1e-9, 0.5)
            for a in frame.agents:
                px = a.x + a.speed * math.cos(a.heading) * steps
                py = a.y + a.speed * math.sin(a.heading) * steps
                s_a, d_a = line.project(np.stack([px, py], axis=1))
                rel = a.heading - line.heading_at(s_a)
                ext_long = np.abs(a.half_length * np.cos(rel)) + np.abs(a.half_width * np.sin(rel))
                ext_lat = np.abs(a.half_length * np.sin(rel)) + np.abs(a.half_width * np.cos(rel))
                inside = np.abs(d_a) < EGO_HALF_WIDTH + ext_lat + self.corridor_margin
                ahead = s_a - s_ego > 0
                hits = np.flatnonzero(inside & ahead)
                if len(hits) == 0:
                    continue
                k = hits[0]
                gap = s_a[k] - s_ego - EGO_HALF_LENGTH - ext_long[k]
                if k == 0:
                    v_lead = max(0.0, a.speed * math.cos(rel[0]))
                else:
                    # reaches the corridor later: only matters if we would get there first-ish
                    if gap / max(ego.speed, 1.0) > steps[k] + 3.0:
                        continue
                    v_lead = 0.0
                if best is None or gap < best[0]:
                    best = (gap, v_lead)
        if map_ctx.signal is not None and map_ctx.signal.state_at(frame.t) == "red":
            gap = map_ctx.signal.position - s_ego - EGO_HALF_LENGTH
            if gap > -0.5 and ego.speed ** 2 / (2.0 * max(gap, 0.1)) <= 3.0:
                if best is None or gap < best[0]:
                    best = (gap, 0.0)
        return best

    def control(self, frame: Frame, map_ctx: MapContext, world=None):
        ego = frame.ego
        obstacle = self._obstacle(frame, map_ctx)
        v0 = map_ctx.speed_limit
        if obstacle is None:
            accel = idm_acceleration(ego.speed, v0, None, 0.0, self.idm)
        else:
            gap, v_lead = obstacle
            accel = idm_acceleration(ego.speed, v0, max(gap, 1e-3), ego.speed - v_lead, self.idm)
        accel = float(np.clip(accel, -MAX_BRAKE, 1.5))
        return accel, pure_pursuit_yaw_rate(ego, map_ctx)

    def plan(self, frame: Frame, map_ctx: MapContext, world=None) -> np.ndarray:
        a, w = self.control(frame, map_ctx, world)
        return np.tile([a, w], (HORIZON, 1))
