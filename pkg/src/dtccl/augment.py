"""Disengagement-triggered augmentation.

Positives keep the scene's meaning and stay safe: P1 nudges the ego state,
P2 drops agents that do not interact with the ego. Negatives break the scene:
N1 inserts a slow braking lead, N2 removes the lead, N3 removes an interacting
agent, N4 pushes the ego far off its path. Every acceptance decision goes
through the safety checker on the pre-takeover window.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import box_corners, boxes_overlap, wrap_angle
from .safety import SafetyConfig, SafetyVerdict, check_frames
from .scenario import (EGO_HALF_LENGTH, EGO_HALF_WIDTH, AgentState, AugmentedSample,
                       DisengagementSegment, EgoState, load_scenario, save_scenario)
from .controllers import StopController
from .sim import ActuatorLimits, actuate, step_ego

log = logging.getLogger(__name__)

LEAD, PRIORITY, INTERACTIVE, BACKGROUND = "lead", "priority", "interactive", "background"
POSITIVE_OPS = ("P1", "P2")
NEGATIVE_OPS = ("N1", "N2", "N3", "N4")
INSERTED_ID = "inserted_lead"
LEAD_RANGE = 30.0
LEAD_LATERAL = 2.0
INTERACT_MARGIN = 1.0  # ego box inflation for the interactivity test


@dataclass(frozen=True)
class PerturbationLimits:
    micro_dp_xy: float = 0.5
    micro_dpsi: float = 0.087
    micro_dv: float = 1.0
    large_min_lateral: float = 2.0
    large_max_lateral: float = 4.0
    large_dpsi: float = 0.3
    large_dv: float = 3.0
    retries: int = 8
    backoff_factor: float = 0.5

    def __post_init__(self):
        if min(self.micro_dp_xy, self.micro_dpsi, self.micro_dv) < 0:
            raise ValueError("augmentation micro limits must be >= 0")
        if not self.micro_dp_xy < self.large_min_lateral <= self.large_max_lateral:
            raise ValueError("augmentation needs micro dp_xy < large min_lateral <= large max_lateral")
        if not (self.micro_dpsi < self.large_dpsi and self.micro_dv < self.large_dv):
            raise ValueError("augmentation micro bounds must be below the large bounds")
        if self.retries < 1:
            raise ValueError("augmentation.retries must be >= 1")
        if not 0 < self.backoff_factor < 1:
            raise ValueError("augmentation.backoff_factor must be in (0, 1)")


@dataclass(frozen=True)
class AugmentationConfig:
    limits: PerturbationLimits = field(default_factory=PerturbationLimits)
    dropout_prob: float = 0.5
    interactivity_horizon: int = 30
    lead_gap: float = 12.0
    lead_speed_ratio: float = 0.3
    lead_braking: float = 2.0
    smoothing_window: int = 5
    ramp_start: int = 10
    compose_positives: bool = False
    enable_positives: bool = True
    enable_negatives: bool = True
    rng_seed: int = 0
    safety: SafetyConfig = field(default_factory=SafetyConfig)

    def __post_init__(self):
        if not 0 <= self.dropout_prob <= 1:
            raise ValueError("augmentation.dropout_prob must be in [0, 1]")
        if not 1 <= self.interactivity_horizon <= 30:
            raise ValueError("augmentation.interactivity_horizon must be in [1, 30]")
        if self.lead_gap <= 0 or self.lead_braking <= 0:
            raise ValueError("augmentation lead_gap and lead_braking must be > 0")
        if not 0 <= self.lead_speed_ratio <= 1:
            raise ValueError("augmentation.lead_speed_ratio must be in [0, 1]")
        if self.smoothing_window < 1:
            raise ValueError("augmentation.smoothing_window must be >= 1")
        if self.ramp_start < 0:
            raise ValueError("augmentation.ramp_start must be >= 0")


@dataclass(frozen=True)
class InteractivityLabel:
    agent_id: str
    label: str


# ---------------------------------------------------------------- helpers


def pre_window(seg: DisengagementSegment):
    return seg.frames[:seg.takeover_index]


def verdict(seg: DisengagementSegment, cfg: AugmentationConfig) -> SafetyVerdict:
    """Safety verdict on the pre-takeover window."""
    return check_frames(pre_window(seg), seg.map, cfg.safety, seg.dt)


def sample_seed(global_seed: int, source_id: str) -> int:
    key = f"{global_seed}:{source_id}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def _tracks(seg: DisengagementSegment) -> dict:
    """agent id -> list of (frame index, AgentState), in frame order."""
    out = {}
    for k, f in enumerate(seg.frames):
        for a in f.agents:
            out.setdefault(a.agent_id, []).append((k, a))
    return out


def _drop(seg: DisengagementSegment, ids) -> DisengagementSegment:
    ids = set(ids)
    frames = [replace(f, agents=tuple(a for a in f.agents if a.agent_id not in ids))
              for f in seg.frames]
    return seg.with_frames(frames)


# ---------------------------------------------------------------- interactivity


def classify_interactivity(seg: DisengagementSegment, horizon: int = 30) -> list:
    """Label every agent lead / priority / interactive / background.

    Each agent is extrapolated at constant velocity from its first appearance.
    ``interactive``: a predicted box overlaps the ego box (inflated by 1 m)
    logged at the same frame. ``lead``: the nearest agent ahead on the route
    within 30 m and 2 m laterally, judged at frame 0. ``priority``: the
    predicted route-lateral offset changes sign ahead of the ego.
    """
    line = seg.map.route_line
    ego0 = seg.frames[0].ego
    s_ego0 = float(line.project((ego0.x, ego0.y))[0][0])
    n = min(horizon, len(seg.frames))
    ego = [f.ego for f in seg.frames[:n]]
    ego_boxes = box_corners([e.x for e in ego], [e.y for e in ego], [e.heading for e in ego],
                            EGO_HALF_LENGTH + INTERACT_MARGIN, EGO_HALF_WIDTH + INTERACT_MARGIN)
    labels = {}
    lead_id, lead_dist = None, math.inf
    for aid, track in sorted(_tracks(seg).items()):
        k0, a = track[0]
        if k0 >= n:
            labels[aid] = BACKGROUND
            continue
        ks = np.arange(k0, n)
        tt = (ks - k0) * seg.dt
        px = a.x + a.speed * math.cos(a.heading) * tt
        py = a.y + a.speed * math.sin(a.heading) * tt
        boxes = box_corners(px, py, a.heading, a.half_length, a.half_width)
        interactive = bool(boxes_overlap(boxes, ego_boxes[ks]).any())
        s_a, d_a = line.project(np.stack([px, py], axis=1))
        s_e = np.array([line.project((e.x, e.y))[0][0] for e in ego])[ks]
        ahead = s_a > s_e
        # a sign change between consecutive nonzero offsets; touching zero alone is not a crossing
        nz = np.flatnonzero(d_a != 0)
        sign = np.sign(d_a[nz])
        crosses = bool(np.any((sign[:-1] != sign[1:]) & ahead[nz[1:]])) if len(nz) > 1 else False
        if k0 == 0 and 0 < s_a[0] - s_ego0 <= LEAD_RANGE and abs(d_a[0]) < LEAD_LATERAL:
            if s_a[0] - s_ego0 < lead_dist:
                lead_id, lead_dist = aid, s_a[0] - s_ego0
        labels[aid] = PRIORITY if crosses else INTERACTIVE if interactive else BACKGROUND
    if lead_id is not None:
        labels[lead_id] = LEAD
    return [InteractivityLabel(aid, labels[aid]) for aid in sorted(labels)]


def labels_by_kind(labels: Sequence[InteractivityLabel]) -> dict:
    out = {LEAD: [], PRIORITY: [], INTERACTIVE: [], BACKGROUND: []}
    for lab in labels:
        out[lab.label].append(lab.agent_id)
    return out


# ---------------------------------------------------------------- ego perturbation


def apply_ego_perturbation(seg: DisengagementSegment, delta, ramp_start: int) -> DisengagementSegment:
    """Offset ego states by ``delta = (dx_long, dy_lat, dpsi, dv)`` on [ramp_start, t_d).

    The offset ramps linearly to full strength at t_d - 1. Frames from t_d on
    are re-simulated with the stop-while-tracking fallback controller starting
    from the perturbed state, so the corrective window matches the new scene.
    """
    delta = np.asarray(delta, dtype=float)
    if not np.any(delta):
        return seg
    td = seg.takeover_index
    frames = list(seg.frames)
    dt = seg.dt
    span = td - ramp_start
    egos = [f.ego for f in frames]
    new = list(egos)
    for k in range(ramp_start, td):
        r = (k - ramp_start + 1) / span
        e = egos[k]
        c, s = math.cos(e.heading), math.sin(e.heading)
        dx = r * (delta[0] * c - delta[1] * s)
        dy = r * (delta[0] * s + delta[1] * c)
        new[k] = EgoState(e.x + dx, e.y + dy, wrap_angle(e.heading + r * delta[2]),
                          max(0.0, e.speed + r * delta[3]))
    for k in range(max(1, ramp_start), td):
        new[k] = replace(new[k], accel=(new[k].speed - new[k - 1].speed) / dt,
                         yaw_rate=wrap_angle(new[k].heading - new[k - 1].heading) / dt)
    # the safety driver takes over from the perturbed state, as it would in the simulator
    stop = StopController()
    act = ActuatorLimits()
    for k in range(td - 1, len(frames) - 1):
        u = stop.control(replace(frames[k], ego=new[k]), seg.map)
        new[k + 1] = step_ego(new[k], actuate(new[k], u, act, dt), dt)
    out = [replace(f, ego=e) for f, e in zip(frames, new)]
    return seg.with_frames(out)


def _micro_delta(rng, lim: PerturbationLimits):
    ang = rng.uniform(0, 2 * math.pi)
    rad = lim.micro_dp_xy * math.sqrt(rng.uniform())
    return np.array([rad * math.cos(ang), rad * math.sin(ang),
                     rng.uniform(-lim.micro_dpsi, lim.micro_dpsi),
                     rng.uniform(-lim.micro_dv, lim.micro_dv)])


def perturb_ego_micro(seg: DisengagementSegment, cfg: AugmentationConfig, rng,
                      delta=None) -> Optional[DisengagementSegment]:
    """P1: small ego offset accepted only if the pre-takeover window stays safe.

    Each failed attempt scales the offset by ``backoff_factor``; after
    ``retries`` failures the operator gives up and returns None.
    """
    lim = cfg.limits
    d = _micro_delta(rng, lim) if delta is None else np.asarray(delta, dtype=float)
    for _ in range(lim.retries):
        cand = apply_ego_perturbation(seg, d, cfg.ramp_start)
        if verdict(cand, cfg).ok:
            return cand
        d = d * lim.backoff_factor
    return None


def perturb_ego_large(seg: DisengagementSegment, cfg: AugmentationConfig, rng):
    """N4: large ego offset accepted only if the safety checker rejects it.

    Returns (segment, violation kinds) or None. Each attempt that is still safe
    grows the offset by ``1 / backoff_factor``.
    """
    lim = cfg.limits
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    d = np.array([0.0, side * rng.uniform(lim.large_min_lateral, lim.large_max_lateral),
                  rng.uniform(-lim.large_dpsi, lim.large_dpsi),
                  rng.uniform(-lim.large_dv, lim.large_dv)])
    for _ in range(lim.retries):
        cand = apply_ego_perturbation(seg, d, cfg.ramp_start)
        v = verdict(cand, cfg)
        if not v.ok:
            return cand, tuple(sorted(v.kinds()))
        d = d / lim.backoff_factor
    log.warning("N4 found no violating variant for %s", seg.source_id)
    return None


# ---------------------------------------------------------------- agent edits


def smooth_tracks(seg: DisengagementSegment, window: int) -> DisengagementSegment:
    """Centered moving average of every agent's (x, y); headings follow the smoothed motion."""
    if window <= 1:
        return seg
    half = window // 2
    new_states = {}
    for aid, track in _tracks(seg).items():
        xy = np.array([(a.x, a.y) for _, a in track])
        n = len(xy)
        sm = np.empty_like(xy)
        for i in range(n):
            lo, hi = max(0, i - half), min(n, i + half + 1)
            sm[i] = xy[lo:hi].mean(axis=0)
        for i, (k, a) in enumerate(track):
            j0, j1 = max(0, i - 1), min(n - 1, i + 1)
            d = sm[j1] - sm[j0]
            heading = a.heading
            if j1 > j0 and math.hypot(d[0], d[1]) > 1e-3 * (j1 - j0):
                heading = wrap_angle(math.atan2(d[1], d[0]))
            new_states[(k, aid)] = replace(a, x=float(sm[i, 0]), y=float(sm[i, 1]), heading=heading)
    frames = [replace(f, agents=tuple(new_states[(k, a.agent_id)] for a in f.agents))
              for k, f in enumerate(seg.frames)]
    return seg.with_frames(frames)


def dropout_noninteractive(seg: DisengagementSegment, cfg: AugmentationConfig, rng,
                           labels=None) -> Optional[DisengagementSegment]:
    """P2: drop each background agent with ``dropout_prob`` and smooth the rest.

    If smoothing makes the pre-takeover window unsafe the plain deletion is
    used instead; None when even that is unsafe.
    """
    labels = labels if labels is not None else classify_interactivity(seg, cfg.interactivity_horizon)
    background = labels_by_kind(labels)[BACKGROUND]
    dropped = [aid for aid in background if rng.uniform() < cfg.dropout_prob]
    base = _drop(seg, dropped)
    cand = smooth_tracks(base, cfg.smoothing_window)
    if verdict(cand, cfg).ok:
        return cand
    if cand is not base and verdict(base, cfg).ok:
        return base
    return None


def insert_lead_agent(seg: DisengagementSegment, cfg: AugmentationConfig, rng):
    """N1: put a slow braking vehicle on the route ahead. Returns (segment, kinds) or None."""
    line = seg.map.route_line
    ego0 = seg.frames[0].ego
    s0 = float(line.project((ego0.x, ego0.y))[0][0])
    hl, hw = 2.25, 0.95
    v0 = cfg.lead_speed_ratio * ego0.speed
    b = cfg.lead_braking
    t = np.arange(len(seg.frames)) * seg.dt
    t_stop = v0 / b
    tc = np.minimum(t, t_stop)
    travel = v0 * tc - 0.5 * b * tc ** 2
    speed = np.maximum(0.0, v0 - b * t)
    gap = cfg.lead_gap
    aid = INSERTED_ID
    taken = seg.agent_ids()
    while aid in taken:
        aid += "_"
    for _ in range(cfg.limits.retries):
        s = s0 + EGO_HALF_LENGTH + gap + hl + travel
        xy = line.point_at(s)
        head = line.heading_at(s)
        frames = []
        for k, f in enumerate(seg.frames):
            a = AgentState(aid, float(xy[k, 0]), float(xy[k, 1]), wrap_angle(float(head[k])),
                           float(speed[k]), hl, hw, "vehicle")
            frames.append(replace(f, agents=f.agents + (a,)))
        cand = seg.with_frames(frames)
        v = verdict(cand, cfg)
        if not v.ok:
            return cand, tuple(sorted(v.kinds()))
        gap *= cfg.limits.backoff_factor
    log.warning("N1 found no violating variant for %s", seg.source_id)
    return None


def remove_lead_agent(seg: DisengagementSegment, labels=None, horizon: int = 30):
    """N2: delete the lead agent from every frame; None when there is no lead."""
    labels = labels if labels is not None else classify_interactivity(seg, horizon)
    leads = labels_by_kind(labels)[LEAD]
    if not leads:
        return None
    return _drop(seg, leads)


def dropout_interactive(seg: DisengagementSegment, cfg: AugmentationConfig, rng, labels=None):
    """N3: delete one uniformly chosen interactive or priority agent; None if there is none."""
    labels = labels if labels is not None else classify_interactivity(seg, cfg.interactivity_horizon)
    kinds = labels_by_kind(labels)
    cands = sorted(kinds[INTERACTIVE] + kinds[PRIORITY])
    if not cands:
        return None
    return _drop(seg, [cands[int(rng.integers(len(cands)))]])


# ---------------------------------------------------------------- dataset assembly


def _positive(seg, cfg, rng, labels, first: str):
    order = ["P1", "P2"] if first == "P1" else ["P2", "P1"]
    if cfg.compose_positives:
        base = dropout_noninteractive(seg, cfg, rng, labels)
        if base is not None:
            out = perturb_ego_micro(base, cfg, rng)
            if out is not None:
                return out, "P2+P1"
    for op in order:
        out = perturb_ego_micro(seg, cfg, rng) if op == "P1" else \
            dropout_noninteractive(seg, cfg, rng, labels)
        if out is not None:
            return out, op
    return None, None


def _negative(seg, cfg, rng, labels):
    kinds = labels_by_kind(labels)
    applicable = ["N1"]
    if kinds[LEAD]:
        applicable.append("N2")
    if kinds[INTERACTIVE] or kinds[PRIORITY]:
        applicable.append("N3")
    applicable.append("N4")
    first = applicable[int(rng.integers(len(applicable)))]
    order = [first] + [op for op in applicable if op != first]
    for op in order:
        if op == "N1":
            res = insert_lead_agent(seg, cfg, rng)
            if res is not None:
                return res[0], op, res[1]
        elif op == "N2":
            return remove_lead_agent(seg, labels), op, ()
        elif op == "N3":
            return dropout_interactive(seg, cfg, rng, labels), op, ()
        else:
            res = perturb_ego_large(seg, cfg, rng)
            if res is not None:
                return res[0], op, res[1]
    return None, None, ()


def augment_segment(seg: DisengagementSegment, cfg: AugmentationConfig, index: int = 0) -> AugmentedSample:
    seed = sample_seed(cfg.rng_seed, seg.source_id)
    rng = np.random.default_rng(seed)
    labels = classify_interactivity(seg, cfg.interactivity_horizon)
    pos, pos_op = (None, None)
    if cfg.enable_positives:
        pos, pos_op = _positive(seg, cfg, rng, labels, "P1" if index % 2 == 0 else "P2")
    neg, neg_op, kinds = (None, None, ())
    if cfg.enable_negatives:
        neg, neg_op, kinds = _negative(seg, cfg, rng, labels)
    return AugmentedSample(seg, pos, neg, pos_op, neg_op, seed, kinds)


@dataclass
class DatasetManifest:
    seed: int
    samples: list
    operators: dict
    contrastive_eligible: int
    anchor_only: list
    human_dataset: str = "nominal_cruise expert demonstrations"

    def to_dict(self) -> dict:
        return {"seed": self.seed, "num_samples": len(self.samples), "operators": self.operators,
                "contrastive_eligible": self.contrastive_eligible, "anchor_only": self.anchor_only,
                "human_dataset": self.human_dataset, "samples": self.samples}


def augment_batch(segments: Sequence[DisengagementSegment], cfg: AugmentationConfig,
                  human_dataset: str = "nominal_cruise expert demonstrations"):
    """One positive and one negative per segment; returns (samples, DatasetManifest)."""
    if not segments:
        raise ValueError("augment_batch needs at least one segment")
    samples = [augment_segment(seg, cfg, i) for i, seg in enumerate(segments)]
    ops = {op: 0 for op in POSITIVE_OPS + ("P2+P1",) + NEGATIVE_OPS}
    records, anchor_only = [], []
    for s in samples:
        for op in (s.positive_op, s.negative_op):
            if op:
                ops[op] += 1
        if s.positive is None:
            log.info("no positive for %s; kept as anchor only", s.anchor.source_id)
            anchor_only.append(s.anchor.source_id)
        records.append({"source_id": s.anchor.source_id, "positive_op": s.positive_op,
                        "negative_op": s.negative_op, "rng_seed": s.rng_seed,
                        "negative_violations": list(s.negative_violations)})
    manifest = DatasetManifest(cfg.rng_seed, records, ops,
                               sum(s.contrastive_eligible for s in samples), anchor_only,
                               human_dataset)
    return samples, manifest


# ---------------------------------------------------------------- persistence


def _safe_name(source_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in source_id)


def save_dataset(samples: Sequence[AugmentedSample], manifest: DatasetManifest, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for i, s in enumerate(samples):
        stem = os.path.join(out_dir, f"{i:04d}_{_safe_name(s.anchor.source_id)}")
        save_scenario(s.anchor, stem + ".anchor.jsonl")
        if s.positive is not None:
            save_scenario(s.positive, stem + ".pos.jsonl")
        if s.negative is not None:
            save_scenario(s.negative, stem + ".neg.jsonl")
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1, sort_keys=True)


def load_dataset(out_dir) -> list:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    samples = []
    for i, rec in enumerate(manifest["samples"]):
        stem = os.path.join(out_dir, f"{i:04d}_{_safe_name(rec['source_id'])}")
        pos = stem + ".pos.jsonl"
        neg = stem + ".neg.jsonl"
        samples.append(AugmentedSample(
            load_scenario(stem + ".anchor.jsonl"),
            load_scenario(pos) if os.path.exists(pos) else None,
            load_scenario(neg) if os.path.exists(neg) else None,
            rec["positive_op"], rec["negative_op"], int(rec["rng_seed"]),
            tuple(rec["negative_violations"])))
    return samples
