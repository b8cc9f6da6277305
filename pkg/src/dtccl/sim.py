"""Deterministic 2D closed-loop simulator.

Agents are non-reactive to the ego: their motion depends only on their
scripts (and on each other for car following), so a world is precomputed
once as a list of per-frame agent tuples. The ego is a unicycle driven
through a simple actuator model by either the policy under test or, after a
takeover, the stop-while-tracking fallback controller.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .controllers import IDMParams, NetworkPolicy, StopController, idm_acceleration
from .features import OffRouteError
from .geometry import Polyline, wrap_angle, wrap_angles
from .policy import PolicyParams
from .safety import (COLLISION, DRIVABLE, DYNAMICS, DynamicLimits, check_all, check_collision,
                     check_drivable)
from .scenario import (CRUISE, DT, OFF, AgentState, EgoState, Frame, FrameLog, MapContext,
                       Trajectory, serialize_scenario)

log = logging.getLogger(__name__)

TAKEOVER = "takeover"
GOAL = "goal_reached"
TIMEOUT = "timeout"
EVENT_KINDS = (TAKEOVER, COLLISION, DRIVABLE, DYNAMICS, GOAL, TIMEOUT)
ORACLE_CONTROLLERS = ("route_follow_stop",)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ActuatorLimits:
    """Bus actuator envelope applied to every commanded control."""

    min_accel: float = -2.5
    max_accel: float = 2.0
    max_jerk: float = 3.5
    max_yaw_rate: float = 0.5
    max_yaw_accel: float = 1.0

    def __post_init__(self):
        if not self.min_accel < 0 < self.max_accel:
            raise ValueError("actuator accel range must straddle zero")
        if min(self.max_jerk, self.max_yaw_rate, self.max_yaw_accel) <= 0:
            raise ValueError("actuator rate limits must be positive")


@dataclass(frozen=True)
class SimConfig:
    dt: float = DT
    horizon: int = 200
    takeover_lookahead: int = 15
    oracle_controller: str = "route_follow_stop"
    agent_noise: float = 0.0
    seed: int = 0
    post_takeover_frames: int = 20
    actuator: ActuatorLimits = field(default_factory=ActuatorLimits)
    limits: DynamicLimits = field(default_factory=DynamicLimits)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("sim.dt must be > 0")
        if self.horizon < 1:
            raise ValueError("sim.horizon must be >= 1")
        if not 1 <= self.takeover_lookahead <= self.horizon:
            raise ValueError("sim.takeover_lookahead must be in [1, horizon]")
        if self.oracle_controller not in ORACLE_CONTROLLERS:
            raise ValueError(f"sim.oracle_controller must be one of {ORACLE_CONTROLLERS}")
        if not 0.0 <= self.agent_noise < 1.0:
            raise ValueError("sim.agent_noise must be in [0, 1)")
        if self.post_takeover_frames < 1:
            raise ValueError("sim.post_takeover_frames must be >= 1")


@dataclass(frozen=True)
class Event:
    frame: int
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class RolloutResult:
    log: FrameLog
    events: tuple
    goal_s: float = math.inf

    def kinds(self) -> list:
        return [e.kind for e in self.events]

    def first(self, kind: str) -> Optional[Event]:
        return next((e for e in self.events if e.kind == kind), None)

    @property
    def takeover_frame(self) -> Optional[int]:
        ev = self.first(TAKEOVER)
        return None if ev is None else ev.frame

    def events_record(self) -> list:
        return [{"frame": e.frame, "kind": e.kind, "detail": e.detail} for e in self.events]

    def digest(self) -> str:
        h = hashlib.sha256(serialize_scenario(self.log))
        h.update(json.dumps(self.events_record(), sort_keys=True).encode())
        return h.hexdigest()


# ---------------------------------------------------------------- kinematics


def step_ego(state: EgoState, control, dt: float) -> EgoState:
    """Unicycle step. ``accel``/``yaw_rate`` of the result are the effective values."""
    accel, yaw_rate = float(control[0]), float(control[1])
    if not all(math.isfinite(v) for v in (accel, yaw_rate, dt)):
        raise SimulationError(f"non-finite control {control!r}")
    v = max(0.0, state.speed + accel * dt)
    x = state.x + state.speed * math.cos(state.heading) * dt
    y = state.y + state.speed * math.sin(state.heading) * dt
    heading = wrap_angle(state.heading + yaw_rate * dt)
    return EgoState(x, y, heading, v, (v - state.speed) / dt, yaw_rate)


def actuate(state: EgoState, control, act: ActuatorLimits, dt: float):
    """Clip a commanded control to the actuator envelope, rate-limited from the last effective control."""
    a = min(max(float(control[0]), act.min_accel), act.max_accel)
    da = act.max_jerk * dt
    a = min(max(a, state.accel - da), state.accel + da)
    w = min(max(float(control[1]), -act.max_yaw_rate), act.max_yaw_rate)
    dw = act.max_yaw_accel * dt
    w = min(max(w, state.yaw_rate - dw), state.yaw_rate + dw)
    return a, w


def step_agent_idm(agent: AgentState, leader: Optional[AgentState], params: IDMParams, dt: float,
                   v0: float) -> AgentState:
    """Advance an agent one step straight along its heading under IDM.

    The gap is the bumper-to-bumper distance to ``leader`` measured along the
    agent's heading; ``leader=None`` is free road.
    """
    gap = None
    dv = 0.0
    if leader is not None:
        c, s = math.cos(agent.heading), math.sin(agent.heading)
        ahead = (leader.x - agent.x) * c + (leader.y - agent.y) * s
        gap = ahead - agent.half_length - leader.half_length
        dv = agent.speed - leader.speed
    a = idm_acceleration(agent.speed, v0, gap, dv, params)
    v = max(0.0, agent.speed + a * dt)
    x = agent.x + agent.speed * math.cos(agent.heading) * dt
    y = agent.y + agent.speed * math.sin(agent.heading) * dt
    return AgentState(agent.agent_id, x, y, agent.heading, v, agent.half_length, agent.half_width,
                      agent.cls)


# ---------------------------------------------------------------- worlds


AGENT_IDM = IDMParams(s0=2.0, T=1.5, a_max=1.5, b=2.0)


def scripted_agent_frames(scripts: Sequence, n_frames: int, dt: float, noise: float = 0.0,
                          seed: int = 0) -> list:
    """Per-frame agent tuples for scripted agents; an agent is present while it is on its path."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) * dt
    tracks = {}
    for sc in scripts:
        jitter = 1.0 + rng.uniform(-noise, noise) if noise > 0 else 1.0
        v = sc.speed * jitter
        if sc.mode in ("const", "static"):
            s = sc.s0 + v * t
            speed = np.full(n_frames, v)
        elif sc.mode == "brake":
            tb = sc.brake_frame * dt
            t_stop = tb + v / sc.brake_decel
            tt = np.clip(t, tb, t_stop) - tb
            s = sc.s0 + v * np.minimum(t, tb) + v * tt - 0.5 * sc.brake_decel * tt ** 2
            speed = np.where(t < tb, v, np.maximum(0.0, v - sc.brake_decel * (t - tb)))
        elif sc.mode == "idm":
            s, speed = None, None  # filled below
        else:
            raise ValueError(f"unknown agent mode {sc.mode!r}")
        tracks[sc.agent_id] = [sc, Polyline(sc.path), s, speed, v]
    # car-following agents, integrated in script order; leaders must be listed first
    for aid, tr in tracks.items():
        sc, line, s, speed, v = tr
        if sc.mode != "idm":
            continue
        s = np.zeros(n_frames)
        speed = np.zeros(n_frames)
        s[0], speed[0] = sc.s0, v
        v0 = sc.v0 * (v / sc.speed if sc.speed > 0 else 1.0)
        lead = tracks.get(sc.leader) if sc.leader else None
        for k in range(1, n_frames):
            gap, dv = None, 0.0
            if lead is not None:
                gap = lead[2][k - 1] - s[k - 1] - sc.half_length - lead[0].half_length
                dv = speed[k - 1] - lead[3][k - 1]
            a = idm_acceleration(speed[k - 1], v0, gap, dv, AGENT_IDM)
            speed[k] = max(0.0, speed[k - 1] + a * dt)
            s[k] = s[k - 1] + speed[k - 1] * dt
        tr[2], tr[3] = s, speed
    frames = [[] for _ in range(n_frames)]
    for aid, (sc, line, s, speed, _) in tracks.items():
        xy = line.point_at(s)
        head = wrap_angles(line.heading_at(s))
        present = (s >= 0.0) & (s <= line.length)
        for k in np.flatnonzero(present):
            frames[k].append(AgentState(aid, float(xy[k, 0]), float(xy[k, 1]), float(head[k]),
                                        float(speed[k]), sc.half_length, sc.half_width, sc.cls))
    return [tuple(f) for f in frames]


def replay_agent_frames(frames: Sequence[Frame], n_frames: int, dt: float, warp: float = 1.0) -> list:
    """Replay logged agents with time scaled by ``warp``.

    Replay time ``k * warp`` is interpolated between logged frames. Past the end of
    the log agents continue at constant velocity; an agent exists at replay time
    only between its first and last logged appearance (extended past the log end).
    """
    n_log = len(frames)
    tracks = {}
    for i, f in enumerate(frames):
        for a in f.agents:
            tracks.setdefault(a.agent_id, {})[i] = a
    out = [[] for _ in range(n_frames)]
    for aid, seen in tracks.items():
        idx = sorted(seen)
        first, last = idx[0], idx[-1]
        for k in range(n_frames):
            tau = k * warp
            if tau < first - 1e-9:
                continue
            if tau > last + 1e-9 and last < n_log - 1:
                continue
            if tau >= last:
                a = seen[last]
                extra = (tau - last) * dt
                out[k].append(AgentState(aid, a.x + a.speed * math.cos(a.heading) * extra,
                                         a.y + a.speed * math.sin(a.heading) * extra, a.heading,
                                         a.speed, a.half_length, a.half_width, a.cls))
                continue
            i0 = int(math.floor(tau))
            if i0 not in seen or i0 + 1 not in seen:
                a = seen.get(i0) or seen.get(i0 + 1)
                if a is None:
                    continue
                out[k].append(a)
                continue
            a, b = seen[i0], seen[i0 + 1]
            w = tau - i0
            h = wrap_angle(a.heading + w * wrap_angle(b.heading - a.heading))
            out[k].append(AgentState(aid, a.x + w * (b.x - a.x), a.y + w * (b.y - a.y), h,
                                     a.speed + w * (b.speed - a.speed), a.half_length,
                                     a.half_width, a.cls))
    return [tuple(f) for f in out]


def predict_constant_velocity(agents: Sequence[AgentState], steps: int, dt: float) -> list:
    """Agent tuples for ``steps + 1`` frames (the current one first)."""
    out = [tuple(agents)]
    for k in range(1, steps + 1):
        tk = k * dt
        out.append(tuple(
            AgentState(a.agent_id, a.x + a.speed * math.cos(a.heading) * tk,
                       a.y + a.speed * math.sin(a.heading) * tk, a.heading, a.speed,
                       a.half_length, a.half_width, a.cls)
            for a in agents))
    return out


# ---------------------------------------------------------------- monitor and rollout


def as_planner(policy):
    if isinstance(policy, PolicyParams):
        return NetworkPolicy(policy)
    return policy


def _controls(planner, frame: Frame, map_ctx: MapContext) -> np.ndarray:
    if hasattr(planner, "plan"):
        plan = np.asarray(planner.plan(frame, map_ctx), dtype=float)
    else:
        plan = np.asarray([planner.control(frame, map_ctx)], dtype=float)
    if not np.all(np.isfinite(plan)):
        raise SimulationError(f"planner produced non-finite controls at frame {frame.t}")
    return plan


def plan_rollout(ego: EgoState, plan: np.ndarray, steps: int, cfg: SimConfig) -> Trajectory:
    """Ego states for the current frame and ``steps`` frames ahead, holding the last control."""
    states = [ego]
    for k in range(steps):
        u = plan[min(k, len(plan) - 1)]
        states.append(step_ego(states[-1], actuate(states[-1], u, cfg.actuator, cfg.dt), cfg.dt))
    return Trajectory(states)


def takeover_monitor(frame: Frame, map_ctx: MapContext, plan: np.ndarray, cfg: SimConfig) -> str:
    """``off`` iff the plan rolled forward against constant-velocity agents violates the safety checker."""
    steps = cfg.takeover_lookahead
    traj = plan_rollout(frame.ego, plan, steps, cfg)
    agents = predict_constant_velocity(frame.agents, steps, cfg.dt)
    verdict = check_all(traj, agents, map_ctx, cfg.limits, steps + 1, cfg.dt)
    return CRUISE if verdict.ok else OFF


def simulate(planner, map_ctx: MapContext, ego0: EgoState, agent_frames: Sequence, cfg: SimConfig,
             goal_s: float = math.inf, monitor: bool = True, stop_on_collision: bool = False,
             log_id: str = "rollout", t0: int = 0) -> RolloutResult:
    """Closed-loop frame loop over a precomputed world.

    Each frame: observe, plan, run the takeover monitor (when enabled), then
    integrate the ego with the policy's first control or, once off, the
    fallback controller. Terminates at the horizon, at the goal, a fixed number
    of frames after a takeover, or at the first collision when asked. Frame
    indices (and so signal phases) start at ``t0``.
    """
    planner = as_planner(planner)
    oracle = StopController()
    n_max = min(cfg.horizon, len(agent_frames))
    line = map_ctx.route_line
    frames, events = [], []
    ego = ego0
    status = CRUISE
    takeover_at = None
    prev = []  # (speed, heading) of the last two states for the dynamics check
    for k in range(n_max):
        t = t0 + k
        if not all(math.isfinite(v) for v in (ego.x, ego.y, ego.heading, ego.speed)):
            raise SimulationError(f"{log_id}: non-finite ego state at frame {t}: {ego}")
        frame = Frame(t, ego, agent_frames[k], status)
        lost = False
        if status == CRUISE:
            try:
                plan = _controls(planner, frame, map_ctx)
            except OffRouteError:
                # far outside the road; nothing sensible left to simulate
                lost = True
                plan = np.zeros((1, 2))
            if not lost and monitor and takeover_monitor(frame, map_ctx, plan, cfg) == OFF:
                status = OFF
                takeover_at = t
                frame = Frame(t, ego, agent_frames[k], OFF)
                events.append(Event(t, TAKEOVER))
        frames.append(frame)

        one = Trajectory((ego,))
        hit = check_collision(one, [frame.agents], horizon=1)
        if hit:
            events.append(Event(t, COLLISION, hit[0].detail))
        if check_drivable(one, map_ctx):
            events.append(Event(t, DRIVABLE))
        prev.append((ego.speed, ego.heading))
        if len(prev) >= 3:
            (v0, h0), (v1, h1), (v2, h2) = prev[-3:]
            lim = cfg.limits
            a0, a1 = (v1 - v0) / cfg.dt, (v2 - v1) / cfg.dt
            yaw = abs(wrap_angle(h2 - h1)) / cfg.dt
            jerk_bad = min(v0, v1, v2) > 1e-6 and abs(a1 - a0) / cfg.dt > lim.max_jerk + 1e-9
            if yaw > lim.max_yaw_rate + 1e-9 or abs(a1) > lim.max_accel + 1e-9 or jerk_bad:
                events.append(Event(t, DYNAMICS))

        if lost:
            events.append(Event(t, DRIVABLE, "ego lost the route"))
            break
        if hit and stop_on_collision:
            break
        if float(line.project((ego.x, ego.y))[0][0]) >= goal_s:
            events.append(Event(t, GOAL))
            break
        if takeover_at is not None and t - takeover_at + 1 >= cfg.post_takeover_frames:
            break
        if k == n_max - 1:
            events.append(Event(t, TIMEOUT))
            break

        if status == CRUISE:
            u = plan[0]
        else:
            u = oracle.control(frame, map_ctx)
        ego = step_ego(ego, actuate(ego, u, cfg.actuator, cfg.dt), cfg.dt)
    events.sort(key=lambda e: (e.frame, EVENT_KINDS.index(e.kind)))
    return RolloutResult(FrameLog(tuple(frames), map_ctx, cfg.dt, log_id), tuple(events), goal_s)


def rollout(policy, instance, cfg: SimConfig, monitor: bool = True,
            stop_on_collision: bool = False) -> RolloutResult:
    """Run ``policy`` on a scenario instance from ``templates``."""
    n = max(cfg.horizon, instance.horizon) + 1
    agents = scripted_agent_frames(instance.agents, n, cfg.dt, cfg.agent_noise,
                                   cfg.seed ^ instance.seed)
    run_cfg = cfg if cfg.horizon == instance.horizon else _with_horizon(cfg, instance.horizon)
    return simulate(policy, instance.map, instance.ego, agents, run_cfg, instance.goal_s,
                    monitor, stop_on_collision, instance.name)


def _with_horizon(cfg: SimConfig, horizon: int) -> SimConfig:
    from dataclasses import replace
    return replace(cfg, horizon=horizon, takeover_lookahead=min(cfg.takeover_lookahead, horizon))
