"""Synthetic scenario templates for desk-scale fleet experiments.

Each template samples a route, a drivable corridor around it and a set of
scripted agents. ``nominal_cruise`` is benign background driving; the other
templates are hotspot families where a planner that ignores agents or
signals gets into trouble.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import offset_polygon, wrap_angle
from .scenario import EgoState, MapContext, Signal

TEMPLATES = ("lead_brake", "unprotected_turn", "pedestrian_crossing", "red_light_approach",
             "guardrail_overtake", "nominal_cruise")
HOTSPOTS = ("lead_brake", "red_light_approach", "guardrail_overtake")
SPLIT_OFFSETS = {"train": 0, "gate": 1_000_000, "heldout": 2_000_000}
ROAD_EXTENSION = 15.0
ROUTE_STEP = 2.0
ROUTE_LENGTH = 180.0
CROSS_APPROACH = 30.0  # cross traffic appears this far from the ego route
EGO_START_S = 10.0

# Declared parameter ranges, checked by the tests.
PARAM_RANGES = {
    "lead_brake": {"gap": (12.0, 20.0), "brake_frame": (35, 60), "brake_decel": (1.5, 3.0),
                   "speed_limit": (9.0, 11.0)},
    "red_light_approach": {"signal_s": (90.0, 120.0), "red_frame": (25, 40),
                           "red_duration": (100, 120), "speed_limit": (9.0, 11.0)},
    "guardrail_overtake": {"gap": (24.0, 34.0), "lead_speed": (4.0, 5.5),
                           "half_width": (1.8, 2.0), "speed_limit": (8.0, 10.0)},
    "pedestrian_crossing": {"cross_s": (80.0, 120.0), "ped_speed": (1.2, 1.6),
                            "speed_limit": (8.0, 10.0)},
    "unprotected_turn": {"turn_s": (70.0, 90.0), "radius": (20.0, 26.0),
                         "speed_limit": (7.0, 9.0)},
    "nominal_cruise": {"amplitude": (0.0, 0.35), "wavelength": (120.0, 220.0),
                       "speed_limit": (8.0, 11.0)},
}


@dataclass(frozen=True)
class AgentScript:
    """Scripted agent moving along a fixed path.

    mode: ``const`` (constant speed), ``brake`` (constant speed until
    ``brake_frame``, then ``brake_decel`` to a stop), ``idm`` (car following
    toward ``v0`` behind ``leader``), or ``static``.
    """

    agent_id: str
    path: tuple
    s0: float
    speed: float
    half_length: float = 2.25
    half_width: float = 0.95
    cls: str = "vehicle"
    mode: str = "const"
    brake_frame: int = 0
    brake_decel: float = 0.0
    v0: float = 0.0
    leader: str = ""
    start_frame: int = 0


@dataclass(frozen=True)
class ScenarioInstance:
    name: str
    template: str
    seed: int
    map: MapContext
    ego: EgoState
    agents: tuple = ()
    horizon: int = 200
    goal_s: float = 0.0
    params: dict = field(default_factory=dict, compare=False, hash=False)


def instance_seed(template: str, split: str, seed: int, index: int) -> int:
    if split not in SPLIT_OFFSETS:
        raise ValueError(f"unknown split {split!r}")
    key = f"{template}:{seed}:{index}".encode()
    local = int.from_bytes(hashlib.sha256(key).digest()[:4], "little") % 1_000_000
    return SPLIT_OFFSETS[split] + local


# ---------------------------------------------------------------- geometry helpers


def _centerline(headings: np.ndarray, start=(0.0, 0.0), step: float = ROUTE_STEP) -> np.ndarray:
    pts = np.zeros((len(headings) + 1, 2))
    pts[0] = start
    pts[1:, 0] = start[0] + np.cumsum(step * np.cos(headings))
    pts[1:, 1] = start[1] + np.cumsum(step * np.sin(headings))
    return pts


def _extend(points: np.ndarray, length: float) -> np.ndarray:
    d0 = points[1] - points[0]
    d0 /= np.linalg.norm(d0)
    d1 = points[-1] - points[-2]
    d1 /= np.linalg.norm(d1)
    k = ROUTE_STEP * np.arange(int(length / ROUTE_STEP), 0, -1)[:, None]
    before = points[0] - d0 * k
    after = points[-1] + d1 * k[::-1]
    return np.concatenate([before, points, after])


def _road(route: np.ndarray, half_width, speed_limit: float, signal=None,
          left_width=None) -> MapContext:
    ext = _extend(route, ROAD_EXTENSION)
    lw = half_width if left_width is None else left_width
    poly = offset_polygon(ext, lw, half_width)
    return MapContext(tuple(map(tuple, np.round(route, 6))), tuple(map(tuple, np.round(poly, 6))),
                      float(speed_limit), signal)


def _wavy_route(rng, length: float, amplitude: float, wavelength: float) -> np.ndarray:
    s = np.arange(0.0, length, ROUTE_STEP)
    phase = rng.uniform(0, 2 * np.pi)
    headings = amplitude * np.sin(2 * np.pi * s / wavelength + phase) - amplitude * math.sin(phase)
    return _centerline(headings)


def _ego_start(map_ctx: MapContext, rng, speed: float, jitter: bool = True) -> EgoState:
    line = map_ctx.route_line
    s = EGO_START_S
    x, y = line.point_at(s)
    h = float(line.heading_at(s))
    d = rng.uniform(-0.3, 0.3) if jitter else 0.0
    dh = rng.uniform(-0.03, 0.03) if jitter else 0.0
    x, y = x - math.sin(h) * d, y + math.cos(h) * d
    return EgoState(float(x), float(y), wrap_angle(h + dh), float(speed))


def _route_path(map_ctx: MapContext, lateral: float = 0.0) -> tuple:
    """Path following the route at a fixed lateral offset, extended past its end."""
    pts = _extend(np.asarray(map_ctx.route), 80.0)
    if lateral:
        tang = np.gradient(pts, axis=0)
        tang /= np.hypot(tang[:, 0], tang[:, 1])[:, None]
        pts = pts + lateral * np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    return tuple(map(tuple, np.round(pts, 6)))


def _path_offset_s(map_ctx: MapContext) -> float:
    # _route_path prepends 80 m, so route arc length s maps to path arc length s + 80.
    return 80.0


def _background(rng, map_ctx: MapContext, prefix: str = "bg", max_count: int = 3,
                road_half_width: float = 3.0) -> list:
    """Sidewalk pedestrians and parked cars just outside the road."""
    out = []
    length = map_ctx.route_line.length
    for i in range(int(rng.integers(0, max_count + 1))):
        side = 1.0 if rng.random() < 0.5 else -1.0
        s_rel = rng.uniform(20.0, length - 20.0)
        if rng.random() < 0.6:
            lat = side * (road_half_width + rng.uniform(1.0, 2.5))
            speed = rng.uniform(0.8, 1.5)
            out.append(AgentScript(f"{prefix}{i}", _route_path(map_ctx, lat),
                                   s_rel + _path_offset_s(map_ctx), speed, 0.3, 0.3, "pedestrian"))
        else:
            lat = side * (road_half_width + rng.uniform(1.3, 2.5))
            out.append(AgentScript(f"{prefix}{i}", _route_path(map_ctx, lat),
                                   s_rel + _path_offset_s(map_ctx), 0.0, mode="static"))
    return out


# ---------------------------------------------------------------- templates


def _nominal_cruise(rng, seed):
    lo, hi = PARAM_RANGES["nominal_cruise"]["speed_limit"]
    limit = rng.uniform(lo, hi)
    amp = rng.uniform(*PARAM_RANGES["nominal_cruise"]["amplitude"])
    wl = rng.uniform(*PARAM_RANGES["nominal_cruise"]["wavelength"])
    route = _wavy_route(rng, ROUTE_LENGTH, amp, wl)
    signal = None
    if rng.random() < 0.3:
        signal = Signal(float(rng.uniform(80, 150)), ((0, "green"),))
    m = _road(route, 3.0, limit, signal)
    ego = _ego_start(m, rng, limit * rng.uniform(0.3, 1.0))
    agents = _background(rng, m, max_count=4)
    if rng.random() < 0.5:
        gap = rng.uniform(45.0, 70.0)
        agents.append(AgentScript("lead", _route_path(m), EGO_START_S + gap + _path_offset_s(m),
                                  limit + rng.uniform(1.0, 2.5), mode="idm",
                                  v0=limit + rng.uniform(1.5, 3.0)))
    params = {"speed_limit": limit, "amplitude": amp, "wavelength": wl}
    return m, ego, agents, 200, params


def _lead_brake(rng, seed):
    r = PARAM_RANGES["lead_brake"]
    limit = rng.uniform(*r["speed_limit"])
    route = _wavy_route(rng, ROUTE_LENGTH, rng.uniform(0.0, 0.15), rng.uniform(150, 220))
    m = _road(route, 3.0, limit)
    v = limit * rng.uniform(0.85, 1.0)
    ego = _ego_start(m, rng, v)
    gap = rng.uniform(*r["gap"])
    brake_frame = int(rng.integers(r["brake_frame"][0], r["brake_frame"][1] + 1))
    decel = rng.uniform(*r["brake_decel"])
    lead_s = EGO_START_S + 5.0 + gap + 2.25
    agents = _background(rng, m)
    agents.append(AgentScript("lead", _route_path(m), lead_s + _path_offset_s(m),
                              v * rng.uniform(0.9, 1.0), mode="brake",
                              brake_frame=brake_frame, brake_decel=decel))
    params = {"gap": gap, "brake_frame": brake_frame, "brake_decel": decel, "speed_limit": limit}
    return m, ego, agents, 160, params


def _red_light(rng, seed):
    r = PARAM_RANGES["red_light_approach"]
    limit = rng.uniform(*r["speed_limit"])
    route = _centerline(np.zeros(int(ROUTE_LENGTH / ROUTE_STEP)))
    sig_s = rng.uniform(*r["signal_s"])
    red = int(rng.integers(r["red_frame"][0], r["red_frame"][1] + 1))
    dur = int(rng.integers(r["red_duration"][0], r["red_duration"][1] + 1))
    signal = Signal(float(sig_s), ((0, "green"), (red, "red"), (red + dur, "green")))
    m = _road(route, 3.0, limit, signal)
    ego = _ego_start(m, rng, limit * rng.uniform(0.85, 1.0))
    # cross traffic from the right through the intersection while the light is red
    cx, cy = m.route_line.point_at(sig_s + 9.0)
    cross_speed = rng.uniform(7.0, 9.0)
    path = ((float(cx), float(cy - CROSS_APPROACH)), (float(cx), float(cy + CROSS_APPROACH)))
    agents = _background(rng, m, max_count=2)
    spacing = rng.uniform(7.5, 9.0)
    first = red + 10
    last = red + dur - 15
    t_gap = spacing / cross_speed
    n_cross = int((last - first) * 0.1 / t_gap) + 1
    for i in range(n_cross):
        # position so the car reaches the route at frame first + i * t_gap / dt
        arrive = (first + i * t_gap / 0.1) * 0.1
        s0 = CROSS_APPROACH - cross_speed * arrive
        agents.append(AgentScript(f"cross{i}", path, s0, cross_speed))
    params = {"signal_s": sig_s, "red_frame": red, "red_duration": dur, "speed_limit": limit}
    return m, ego, agents, 200, params


def _guardrail(rng, seed):
    r = PARAM_RANGES["guardrail_overtake"]
    limit = rng.uniform(*r["speed_limit"])
    hw = rng.uniform(*r["half_width"])
    route = _wavy_route(rng, ROUTE_LENGTH, rng.uniform(0.0, 0.12), rng.uniform(160, 220))
    m = _road(route, hw, limit)
    ego = _ego_start(m, rng, limit * rng.uniform(0.85, 1.0), jitter=False)
    gap = rng.uniform(*r["gap"])
    lead_speed = rng.uniform(*r["lead_speed"])
    agents = [AgentScript("slow", _route_path(m), EGO_START_S + 5.0 + gap + 2.25 + _path_offset_s(m),
                          lead_speed, mode="const")]
    agents += _background(rng, m, max_count=2, road_half_width=hw + 0.5)
    params = {"gap": gap, "lead_speed": lead_speed, "half_width": hw, "speed_limit": limit}
    return m, ego, agents, 160, params


def _pedestrian_crossing(rng, seed):
    r = PARAM_RANGES["pedestrian_crossing"]
    limit = rng.uniform(*r["speed_limit"])
    route = _centerline(np.zeros(int(ROUTE_LENGTH / ROUTE_STEP)))
    m = _road(route, 3.0, limit)
    v = limit * rng.uniform(0.85, 1.0)
    ego = _ego_start(m, rng, v)
    cross_s = rng.uniform(*r["cross_s"])
    ped_speed = rng.uniform(*r["ped_speed"])
    cx, cy = m.route_line.point_at(cross_s)
    path = ((float(cx), float(cy - 20.0)), (float(cx), float(cy + 20.0)))
    # pedestrian reaches the lane centre roughly when the bus would
    arrive = (cross_s - EGO_START_S) / v + rng.uniform(-1.0, 0.5)
    s0 = 20.0 - ped_speed * arrive
    agents = [AgentScript("ped", path, s0, ped_speed, 0.3, 0.3, "pedestrian")]
    agents += _background(rng, m, max_count=2)
    params = {"cross_s": cross_s, "ped_speed": ped_speed, "speed_limit": limit}
    return m, ego, agents, 200, params


def _unprotected_turn(rng, seed):
    r = PARAM_RANGES["unprotected_turn"]
    limit = rng.uniform(*r["speed_limit"])
    turn_s = rng.uniform(*r["turn_s"])
    radius = rng.uniform(*r["radius"])
    n_arc = int(radius * math.pi / 2 / ROUTE_STEP)
    headings = np.concatenate([np.zeros(int(turn_s / ROUTE_STEP)), np.linspace(0, math.pi / 2, n_arc),
                               np.full(int(60 / ROUTE_STEP), math.pi / 2)])
    route = _centerline(headings)
    m = _road(route, 3.0, limit)
    ego = _ego_start(m, rng, limit * rng.uniform(0.8, 1.0))
    # oncoming stream on a straight path through the turn area
    turn_pt = route[int(turn_s / ROUTE_STEP) + n_arc // 2]
    speed = rng.uniform(7.0, 9.0)
    path = ((float(turn_pt[0] + 150.0), float(turn_pt[1] + 4.0)),
            (float(turn_pt[0] - 150.0), float(turn_pt[1] + 4.0)))
    eta = (turn_s + radius * math.pi / 4 - EGO_START_S) / (limit * 0.9)
    agents = []
    for i in range(4):
        arrive = eta + rng.uniform(-1.0, 0.5) + 1.6 * i
        agents.append(AgentScript(f"oncoming{i}", path, 150.0 - speed * arrive, speed))
    agents += _background(rng, m, max_count=2)
    params = {"turn_s": turn_s, "radius": radius, "speed_limit": limit}
    return m, ego, agents, 200, params


_BUILDERS = {
    "nominal_cruise": _nominal_cruise,
    "lead_brake": _lead_brake,
    "red_light_approach": _red_light,
    "guardrail_overtake": _guardrail,
    "pedestrian_crossing": _pedestrian_crossing,
    "unprotected_turn": _unprotected_turn,
}


def build_instance(template: str, seed: int) -> ScenarioInstance:
    if template not in _BUILDERS:
        raise ValueError(f"unknown template {template!r}")
    rng = np.random.default_rng(seed)
    m, ego, agents, horizon, params = _BUILDERS[template](rng, seed)
    goal = m.route_line.length - 15.0
    return ScenarioInstance(f"{template}-{seed}", template, seed, m, ego, tuple(agents),
                            horizon, goal, params)


def sample_scenarios(template: str, n: int, seed: int = 0, split: str = "train") -> list:
    """Deterministically sample ``n`` instances; splits use disjoint seed ranges."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [build_instance(template, instance_seed(template, split, seed, i)) for i in range(n)]
