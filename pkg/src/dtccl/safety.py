"""Trajectory safety checks: box collisions, drivable-area compliance, dynamic limits.

This module is the single authority on what counts as "safe". Augmentation
uses it to accept or reject variants, the simulator's takeover monitor uses
it to decide when the safety driver intervenes, and replay verification uses
it to confirm planner failures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import box_corners, boxes_overlap, points_in_polygon, wrap_angles
from .scenario import EGO_HALF_LENGTH, EGO_HALF_WIDTH, AgentState, MapContext, Trajectory

log = logging.getLogger(__name__)

COLLISION = "collision"
DRIVABLE = "drivable"
DYNAMICS = "dynamics"
LIMIT_EPS = 1e-9
STANDSTILL = 1e-6


@dataclass(frozen=True)
class DynamicLimits:
    max_yaw_rate: float = 0.6
    max_accel: float = 2.5
    max_jerk: float = 4.0

    def __post_init__(self):
        if min(self.max_yaw_rate, self.max_accel, self.max_jerk) <= 0:
            raise ValueError("dynamic limits must be strictly positive")


@dataclass(frozen=True)
class SafetyConfig:
    limits: DynamicLimits = field(default_factory=DynamicLimits)
    horizon: int = 30

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("safety.horizon must be >= 1")


@dataclass(frozen=True)
class Violation:
    kind: str
    frame: int
    detail: str = ""


@dataclass(frozen=True)
class SafetyVerdict:
    violations: tuple = ()
    warnings: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set:
        return {v.kind for v in self.violations}

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [{"kind": v.kind, "frame": v.frame, "detail": v.detail}
                           for v in self.violations],
            "warnings": list(self.warnings),
        }


def ego_corners(traj: Trajectory, ego_dims=(EGO_HALF_LENGTH, EGO_HALF_WIDTH)) -> np.ndarray:
    x, y, h, _ = traj.arrays()
    return box_corners(x, y, h, ego_dims[0], ego_dims[1])


def agent_corners(agents: Sequence[AgentState]) -> np.ndarray:
    if not agents:
        return np.zeros((0, 4, 2))
    arr = np.array([(a.x, a.y, a.heading, a.half_length, a.half_width) for a in agents])
    return box_corners(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4])


def check_collision(ego_traj: Trajectory, agents_per_frame, ego_dims=(EGO_HALF_LENGTH, EGO_HALF_WIDTH),
                    horizon: int | None = None) -> list:
    """Report every frame index below ``horizon`` where the ego box overlaps an agent box."""
    n = len(ego_traj)
    if len(agents_per_frame) != n:
        raise ValueError(f"ego trajectory has {n} frames but agents cover {len(agents_per_frame)}")
    horizon = n if horizon is None else horizon
    if horizon > n:
        raise ValueError(f"horizon {horizon} exceeds trajectory length {n}")
    if horizon <= 0:
        return []
    ego = ego_corners(Trajectory(ego_traj.states[:horizon]), ego_dims)
    rows = [(k, a) for k in range(horizon) for a in agents_per_frame[k]]
    if not rows:
        return []
    frame_idx = np.array([k for k, _ in rows])
    hit = boxes_overlap(ego[frame_idx], agent_corners([a for _, a in rows]))
    out = []
    for k in np.unique(frame_idx[hit]):
        ids = ",".join(a.agent_id for (kk, a), h in zip(rows, hit) if h and kk == k)
        out.append(Violation(COLLISION, int(k), f"overlap with {ids}"))
    return out


def check_drivable(ego_traj: Trajectory, map_ctx: MapContext,
                   ego_dims=(EGO_HALF_LENGTH, EGO_HALF_WIDTH)) -> list:
    """A frame violates iff any ego corner lies strictly outside the drivable polygon."""
    n = len(ego_traj)
    if n == 0:
        return []
    corners = ego_corners(ego_traj, ego_dims).reshape(-1, 2)
    inside = points_in_polygon(corners, map_ctx.polygon).reshape(n, 4)
    bad = np.flatnonzero(~inside.all(axis=1))
    return [Violation(DRIVABLE, int(k), f"{int((~inside[k]).sum())} corner(s) outside")
            for k in bad]


def finite_differences(speed: np.ndarray, heading: np.ndarray, dt: float):
    """Yaw rate, acceleration and jerk from consecutive states.

    ``jerk[k]`` is left as NaN where the speed stencil touches standstill: the
    zero-speed clamp makes the finite-difference acceleration discontinuous
    there, so it says nothing about how the vehicle was actually driven.
    """
    yaw_rate = wrap_angles(np.diff(heading)) / dt
    accel = np.diff(speed) / dt
    jerk = np.diff(accel) / dt
    if len(jerk):
        moving = speed > STANDSTILL
        stencil_moving = moving[:-2] & moving[1:-1] & moving[2:]
        jerk = np.where(stencil_moving, jerk, np.nan)
    return yaw_rate, accel, jerk


def check_dynamics(ego_traj: Trajectory, limits: DynamicLimits, dt: float) -> list:
    """Compare finite-difference yaw rate, acceleration and jerk against ``limits``."""
    if len(ego_traj) < 3:
        log.warning("dynamics check skipped: trajectory has %d frames (< 3)", len(ego_traj))
        return []
    _, _, heading, speed = ego_traj.arrays()
    yaw_rate, accel, jerk = finite_differences(speed, heading, dt)
    out = []
    for k in np.flatnonzero(np.abs(yaw_rate) > limits.max_yaw_rate + LIMIT_EPS):
        out.append(Violation(DYNAMICS, int(k), f"yaw_rate {yaw_rate[k]:.3f} rad/s"))
    for k in np.flatnonzero(np.abs(accel) > limits.max_accel + LIMIT_EPS):
        out.append(Violation(DYNAMICS, int(k), f"accel {accel[k]:.3f} m/s^2"))
    with np.errstate(invalid="ignore"):
        over = np.abs(jerk) > limits.max_jerk + LIMIT_EPS
    for k in np.flatnonzero(over):
        out.append(Violation(DYNAMICS, int(k), f"jerk {jerk[k]:.3f} m/s^3"))
    out.sort(key=lambda v: v.frame)
    return out


def check_all(ego_traj: Trajectory, agents_per_frame, map_ctx: MapContext,
              limits: DynamicLimits, horizon: int | None, dt: float,
              ego_dims=(EGO_HALF_LENGTH, EGO_HALF_WIDTH)) -> SafetyVerdict:
    """Union of the collision, drivable-area and dynamics checks."""
    violations = check_collision(ego_traj, agents_per_frame, ego_dims, horizon)
    violations += check_drivable(ego_traj, map_ctx, ego_dims)
    violations += check_dynamics(ego_traj, limits, dt)
    warnings = () if len(ego_traj) >= 3 else ("dynamics check skipped: fewer than 3 frames",)
    violations.sort(key=lambda v: (v.frame, v.kind))
    return SafetyVerdict(tuple(violations), warnings)


def check_frames(frames, map_ctx: MapContext, cfg: SafetyConfig, dt: float) -> SafetyVerdict:
    """check_all over a frame window, collision horizon clipped to the window length."""
    traj = Trajectory.of(frames)
    agents = [f.agents for f in frames]
    return check_all(traj, agents, map_ctx, cfg.limits, min(cfg.horizon, len(frames)), dt)
