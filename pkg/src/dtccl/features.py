"""Scene featurization in the route frame.

Every quantity is relative to the route or to the ego pose, so a rigid
translation of the whole scene (map included) leaves the features unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import wrap_angle
from .scenario import Frame, MapContext

MAX_AGENTS = 8
ROUTE_SAMPLES = 10
ROUTE_SPACING = 3.0
EGO_DIM = 6
AGENT_DIM = 7
ROUTE_DIM = 2
NO_SIGNAL = 100.0  # stands in for "no red signal ahead"
MAX_ROUTE_OFFSET = 20.0


class OffRouteError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SceneFeatures:
    ego: np.ndarray  # (6,)   s, lateral offset, heading error, speed, accel, distance to red signal
    agents: np.ndarray  # (A, 7) dx, dy, dheading (ego frame), speed, half_length, half_width, is_pedestrian
    mask: np.ndarray  # (A,)   1 for present agents
    route: np.ndarray  # (R, 2) curvature, lateral offset of route points ahead (ego frame)

    def __eq__(self, other):
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("ego", "agents", "mask", "route"))


def featurize(frame: Frame, map_ctx: MapContext) -> SceneFeatures:
    ego = frame.ego
    line = map_ctx.route_line
    s_arr, d_arr = line.project((ego.x, ego.y))
    s, d = float(s_arr[0]), float(d_arr[0])
    if abs(d) > MAX_ROUTE_OFFSET:
        raise OffRouteError(f"ego is {d:.1f} m off the route at frame {frame.t}")
    heading_err = wrap_angle(ego.heading - float(line.heading_at(s)))

    dist_signal = NO_SIGNAL
    if map_ctx.signal is not None and map_ctx.signal.state_at(frame.t) == "red":
        gap = map_ctx.signal.position - s
        if -1.0 < gap < NO_SIGNAL:
            dist_signal = gap
    ego_tok = np.array([s, d, heading_err, ego.speed, ego.accel, dist_signal])

    c, sn = math.cos(ego.heading), math.sin(ego.heading)
    agents = np.zeros((MAX_AGENTS, AGENT_DIM))
    mask = np.zeros(MAX_AGENTS)
    ranked = sorted(frame.agents, key=lambda a: (math.hypot(a.x - ego.x, a.y - ego.y), a.agent_id))
    for i, a in enumerate(ranked[:MAX_AGENTS]):
        dx, dy = a.x - ego.x, a.y - ego.y
        agents[i] = (c * dx + sn * dy, -sn * dx + c * dy, wrap_angle(a.heading - ego.heading),
                     a.speed, a.half_length, a.half_width, 1.0 if a.cls == "pedestrian" else 0.0)
        mask[i] = 1.0

    ahead = s + ROUTE_SPACING * np.arange(1, ROUTE_SAMPLES + 1)
    pts = line.point_at(ahead)
    lat = -sn * (pts[:, 0] - ego.x) + c * (pts[:, 1] - ego.y)
    route = np.stack([line.curvature_at(ahead), lat], axis=1)
    return SceneFeatures(ego_tok, agents, mask, route)


def stack(features: Sequence[SceneFeatures]) -> dict:
    """Batch a list of SceneFeatures into arrays keyed ego/agents/mask/route."""
    if not features:
        return {"ego": np.zeros((0, EGO_DIM)), "agents": np.zeros((0, MAX_AGENTS, AGENT_DIM)),
                "mask": np.zeros((0, MAX_AGENTS)), "route": np.zeros((0, ROUTE_SAMPLES, ROUTE_DIM))}
    return {
        "ego": np.stack([f.ego for f in features]),
        "agents": np.stack([f.agents for f in features]),
        "mask": np.stack([f.mask for f in features]),
        "route": np.stack([f.route for f in features]),
    }


def concat(*batches: dict) -> dict:
    return {k: np.concatenate([b[k] for b in batches], axis=0) for k in batches[0]}


def take(batch: dict, idx) -> dict:
    return {k: v[idx] for k, v in batch.items()}


def batch_size(batch: dict) -> int:
    return len(batch["ego"])
