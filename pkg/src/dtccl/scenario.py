"""Domain value types shared by every stage, plus the JSON-lines log format.

Everything here is immutable after construction. Constructors validate the
type invariants so that a bad log is rejected at load time instead of
surfacing as a confusing failure deep inside training.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from .geometry import Polyline, points_in_polygon, polygon_is_simple, signed_area, wrap_angle

FORMAT_VERSION = "dtccl/1"
DT = 0.1
SEGMENT_LENGTH = 50
CRUISE = "cruise"
OFF = "off"
STATUSES = (CRUISE, OFF)
AGENT_CLASSES = ("vehicle", "pedestrian")

# Ego footprint of a 10 m bus.
EGO_HALF_LENGTH = 5.0
EGO_HALF_WIDTH = 1.25


def resample_heading(theta: float) -> float:
    """Wrap a heading into (-pi, pi]; non-finite input raises ValueError."""
    return wrap_angle(float(theta))


def _check_heading(theta: float, what: str) -> None:
    if not (-math.pi < theta <= math.pi):
        raise ValueError(f"{what} heading {theta!r} is not wrapped to (-pi, pi]")


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    speed: float
    accel: float = 0.0
    yaw_rate: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.heading, self.speed, self.accel, self.yaw_rate)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite ego state {vals}")
        if self.speed < 0:
            raise ValueError(f"negative ego speed {self.speed}")
        _check_heading(self.heading, "ego")


@dataclass(frozen=True)
class AgentState:
    agent_id: str
    x: float
    y: float
    heading: float
    speed: float
    half_length: float
    half_width: float
    cls: str = "vehicle"

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0:
            raise ValueError(f"agent {self.agent_id}: box dimensions must be positive")
        if self.cls not in AGENT_CLASSES:
            raise ValueError(f"agent {self.agent_id}: unknown class {self.cls!r}")
        if self.speed < 0:
            raise ValueError(f"agent {self.agent_id}: negative speed")
        _check_heading(self.heading, f"agent {self.agent_id}")


@dataclass(frozen=True)
class Frame:
    t: int
    ego: EgoState
    agents: tuple = ()
    status: str = CRUISE

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"frame {self.t}: unknown status {self.status!r}")
        if not isinstance(self.agents, tuple):
            object.__setattr__(self, "agents", tuple(self.agents))
        ids = [a.agent_id for a in self.agents]
        if len(ids) != len(set(ids)):
            raise ValueError(f"frame {self.t}: duplicate agent ids")


@dataclass(frozen=True)
class Signal:
    """Traffic signal at an arc-length position on the route with a fixed schedule."""

    position: float
    schedule: tuple = ()  # ((frame, "red" | "green"), ...), sorted by frame

    def __post_init__(self):
        sched = tuple((int(t), str(s)) for t, s in self.schedule)
        if any(s not in ("red", "green") for _, s in sched):
            raise ValueError("signal states must be 'red' or 'green'")
        if list(sched) != sorted(sched, key=lambda e: e[0]):
            raise ValueError("signal schedule must be sorted by frame")
        object.__setattr__(self, "schedule", sched)

    def state_at(self, t: int) -> str:
        state = "green"
        for frame, s in self.schedule:
            if frame <= t:
                state = s
            else:
                break
        return state


@dataclass(frozen=True)
class MapContext:
    route: tuple
    drivable_area: tuple
    speed_limit: float
    signal: Optional[Signal] = None

    def __post_init__(self):
        route = tuple((float(x), float(y)) for x, y in self.route)
        area = tuple((float(x), float(y)) for x, y in self.drivable_area)
        object.__setattr__(self, "route", route)
        object.__setattr__(self, "drivable_area", area)
        if self.speed_limit <= 0:
            raise ValueError("speed_limit must be positive")
        if len(area) < 3 or signed_area(area) <= 0:
            raise ValueError("drivable_area must be a counterclockwise polygon")
        if not polygon_is_simple(area):
            raise ValueError("drivable_area is self-intersecting")
        if not points_in_polygon(np.asarray(route), np.asarray(area)).all():
            raise ValueError("route leaves the drivable area")

    @cached_property
    def route_line(self) -> Polyline:
        return Polyline(self.route)

    @cached_property
    def polygon(self) -> np.ndarray:
        return np.asarray(self.drivable_area, dtype=float)

    def signal_state(self, t: int) -> Optional[str]:
        return None if self.signal is None else self.signal.state_at(t)


@dataclass(frozen=True)
class FrameLog:
    frames: tuple
    map: MapContext
    dt: float = DT
    log_id: str = "log"

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for a, b in zip(self.frames, self.frames[1:]):
            if b.t != a.t + 1:
                raise ValueError(f"frame indices not consecutive at {a.t} -> {b.t}")

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class DisengagementSegment:
    frames: tuple
    takeover_index: int
    map: MapContext
    source_id: str
    dt: float = DT

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if len(frames) != SEGMENT_LENGTH:
            raise ValueError(f"segment must hold {SEGMENT_LENGTH} frames, got {len(frames)}")
        k = self.takeover_index
        if not 0 < k < len(frames):
            raise ValueError(f"takeover_index {k} out of range")
        if any(f.status != CRUISE for f in frames[:k]) or any(f.status != OFF for f in frames[k:]):
            raise ValueError("segment must be a cruise prefix followed by an off suffix")
        for a, b in zip(frames, frames[1:]):
            if b.t != a.t + 1:
                raise ValueError("segment frame indices not consecutive")

    def agent_ids(self) -> set:
        return {a.agent_id for f in self.frames for a in f.agents}

    def with_frames(self, frames) -> "DisengagementSegment":
        return replace(self, frames=tuple(frames))


@dataclass(frozen=True)
class Trajectory:
    states: tuple

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))

    def __len__(self):
        return len(self.states)

    def arrays(self):
        """(x, y, heading, speed) as float arrays."""
        s = self.states
        return (
            np.array([e.x for e in s], dtype=float),
            np.array([e.y for e in s], dtype=float),
            np.array([e.heading for e in s], dtype=float),
            np.array([e.speed for e in s], dtype=float),
        )

    @classmethod
    def of(cls, frames: Sequence[Frame]) -> "Trajectory":
        return cls(tuple(f.ego for f in frames))


@dataclass(frozen=True)
class AugmentedSample:
    anchor: DisengagementSegment
    positive: Optional[DisengagementSegment]
    negative: Optional[DisengagementSegment]
    positive_op: Optional[str]
    negative_op: Optional[str]
    rng_seed: int
    negative_violations: tuple = field(default=())

    @property
    def contrastive_eligible(self) -> bool:
        return self.positive is not None and self.negative is not None


# ---------------------------------------------------------------- serialization


def _ego_record(e: EgoState) -> dict:
    return {"x": e.x, "y": e.y, "heading": e.heading, "speed": e.speed,
            "accel": e.accel, "yaw_rate": e.yaw_rate}


def _agent_record(a: AgentState) -> dict:
    return {"id": a.agent_id, "x": a.x, "y": a.y, "heading": a.heading, "speed": a.speed,
            "half_length": a.half_length, "half_width": a.half_width, "class": a.cls}


def _frame_record(f: Frame) -> dict:
    return {"t": f.t, "ego": _ego_record(f.ego),
            "agents": [_agent_record(a) for a in f.agents], "status": f.status}


def map_record(m: MapContext) -> dict:
    rec = {"route": [list(p) for p in m.route],
           "drivable_area": [list(p) for p in m.drivable_area],
           "speed_limit": m.speed_limit, "signal": None}
    if m.signal is not None:
        rec["signal"] = {"position": m.signal.position,
                         "schedule": [[t, s] for t, s in m.signal.schedule]}
    return rec


def map_from_record(rec: dict) -> MapContext:
    sig = rec.get("signal")
    signal = None
    if sig is not None:
        signal = Signal(float(sig["position"]), tuple((int(t), s) for t, s in sig["schedule"]))
    return MapContext(tuple(map(tuple, rec["route"])), tuple(map(tuple, rec["drivable_area"])),
                      float(rec["speed_limit"]), signal)


def _frame_from_record(rec: dict) -> Frame:
    e = rec["ego"]
    ego = EgoState(float(e["x"]), float(e["y"]), float(e["heading"]), float(e["speed"]),
                   float(e["accel"]), float(e["yaw_rate"]))
    agents = tuple(
        AgentState(str(a["id"]), float(a["x"]), float(a["y"]), float(a["heading"]),
                   float(a["speed"]), float(a["half_length"]), float(a["half_width"]), a["class"])
        for a in rec["agents"]
    )
    return Frame(int(rec["t"]), ego, agents, rec["status"])


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def serialize_scenario(item: Union[FrameLog, DisengagementSegment]) -> bytes:
    """Render a log or segment as UTF-8 JSON lines: one header, then one line per frame."""
    header = {"format": FORMAT_VERSION, "dt": item.dt, "map": map_record(item.map)}
    if isinstance(item, DisengagementSegment):
        header["kind"] = "segment"
        header["takeover_index"] = item.takeover_index
        header["source_id"] = item.source_id
    elif isinstance(item, FrameLog):
        header["kind"] = "log"
        header["log_id"] = item.log_id
    else:
        raise TypeError(f"cannot serialize {type(item).__name__}")
    lines = [_dumps(header)] + [_dumps(_frame_record(f)) for f in item.frames]
    return ("\n".join(lines) + "\n").encode("utf-8")


def deserialize_scenario(data: bytes) -> Union[FrameLog, DisengagementSegment]:
    lines = [ln for ln in data.decode("utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty scenario file")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported format {header.get('format')!r}")
    frames = tuple(_frame_from_record(json.loads(ln)) for ln in lines[1:])
    m = map_from_record(header["map"])
    dt = float(header["dt"])
    if header.get("kind") == "segment" or "takeover_index" in header:
        return DisengagementSegment(frames, int(header["takeover_index"]), m,
                                    str(header["source_id"]), dt)
    return FrameLog(frames, m, dt, str(header.get("log_id", "log")))


def save_scenario(item, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_scenario(item))


def load_scenario(path):
    with open(path, "rb") as fh:
        return deserialize_scenario(fh.read())
