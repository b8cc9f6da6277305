"""Disengagement mining: detect cruise->off handovers, cut 50-frame segments,
and keep only those the current planner fails consistently on replay."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .scenario import CRUISE, OFF, SEGMENT_LENGTH, DisengagementSegment, FrameLog
from .sim import COLLISION, DRIVABLE, DYNAMICS, TAKEOVER, SimConfig, replay_agent_frames, simulate

log = logging.getLogger(__name__)

FAILURE_KINDS = (COLLISION, DRIVABLE, DYNAMICS)


@dataclass(frozen=True)
class MiningConfig:
    cruise_run: int = 30
    off_run: int = 20
    replay_trials: int = 5
    failure_threshold: int = 4
    time_warp: float = 0.05  # replays stretch agent time by up to this fraction

    def __post_init__(self):
        if self.cruise_run < 1 or self.off_run < 1:
            raise ValueError("mining.cruise_run and mining.off_run must be >= 1")
        if self.cruise_run + self.off_run != SEGMENT_LENGTH:
            raise ValueError(f"mining.cruise_run + mining.off_run must equal {SEGMENT_LENGTH}")
        if not 0 < self.failure_threshold <= self.replay_trials:
            raise ValueError("mining requires 0 < failure_threshold (K) <= replay_trials (M)")
        if not 0.0 <= self.time_warp < 1.0:
            raise ValueError("mining.time_warp must be in [0, 1)")


@dataclass
class MiningReport:
    logs: list = field(default_factory=list)

    @property
    def detected(self) -> int:
        return sum(r["detected"] for r in self.logs)

    @property
    def verified(self) -> int:
        return sum(r["verified"] for r in self.logs)

    def to_dict(self) -> dict:
        return {"detected": self.detected, "verified": self.verified, "logs": self.logs}


def detect_disengagements(frame_log: FrameLog, cfg: MiningConfig = MiningConfig()) -> list:
    """Start indices of every cruise_run-cruise then off_run-off window.

    With two statuses each off-run can match at most one window (the frame
    before the off-run must be cruise), so the overlap rule never has to choose.
    """
    status = [f.status for f in frame_log.frames]
    n = len(status)
    if n < cfg.cruise_run + cfg.off_run:
        return []
    out = []
    cruise_len = 0
    p = 0
    while p < n:
        if status[p] == CRUISE:
            cruise_len += 1
            p += 1
            continue
        q = p
        while q < n and status[q] == OFF:
            q += 1
        if cruise_len >= cfg.cruise_run and q - p >= cfg.off_run:
            out.append(p - cfg.cruise_run)
        cruise_len = 0
        p = q
    return out


def extract_segment(frame_log: FrameLog, start: int, cfg: MiningConfig = MiningConfig()) -> DisengagementSegment:
    n = cfg.cruise_run + cfg.off_run
    if not 0 <= start <= len(frame_log.frames) - n:
        raise ValueError(f"segment start {start} out of range for a {len(frame_log.frames)}-frame log")
    frames = frame_log.frames[start:start + n]
    return DisengagementSegment(frames, cfg.cruise_run, frame_log.map,
                                f"{frame_log.log_id}@{start}", frame_log.dt)


def replay_seed(seed: int, source_id: str, trial: int) -> int:
    key = f"{seed}:{source_id}:{trial}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def replay_outcomes(segment: DisengagementSegment, policy, sim: SimConfig,
                    cfg: MiningConfig = MiningConfig(), seed: int = 0) -> list:
    """One boolean per replay: True when the policy fails that replay.

    Each replay drives the ego with ``policy`` from the segment's first frame
    while the logged agents play back on a time axis stretched by a per-trial
    factor in [1 - time_warp, 1 + time_warp]. A replay fails if the safety
    checker flags the executed ego or the takeover monitor fires within the
    segment window.
    """
    n = len(segment.frames)
    run_cfg = replace(sim, horizon=n, takeover_lookahead=min(sim.takeover_lookahead, n))
    out = []
    for j in range(cfg.replay_trials):
        rng = np.random.default_rng(replay_seed(seed, segment.source_id, j))
        warp = 1.0 + rng.uniform(-cfg.time_warp, cfg.time_warp) if cfg.time_warp > 0 else 1.0
        agents = replay_agent_frames(segment.frames, n, segment.dt, warp)
        res = simulate(policy, segment.map, segment.frames[0].ego, agents, run_cfg,
                       monitor=True, log_id=f"{segment.source_id}#replay{j}",
                       t0=segment.frames[0].t)
        start = segment.frames[0].t
        failed = any(e.kind in FAILURE_KINDS + (TAKEOVER,) and e.frame < start + n
                     for e in res.events)
        out.append(bool(failed))
    return out


def replay_verify(segment: DisengagementSegment, policy, sim: SimConfig,
                  cfg: MiningConfig = MiningConfig(), seed: int = 0) -> bool:
    """True iff at least ``failure_threshold`` of ``replay_trials`` replays fail."""
    return sum(replay_outcomes(segment, policy, sim, cfg, seed)) >= cfg.failure_threshold


def mine(logs: Sequence[FrameLog], policy, sim: SimConfig, cfg: MiningConfig = MiningConfig(),
         seed: int = 0):
    """Detect, extract and replay-verify across ``logs``; returns (segments, MiningReport).

    Errors on one log are recorded in the report and do not stop the others.
    """
    segments = []
    report = MiningReport()
    for fl in logs:
        entry = {"log_id": fl.log_id, "detected": 0, "verified": 0, "segments": [], "error": None}
        try:
            for start in detect_disengagements(fl, cfg):
                seg = extract_segment(fl, start, cfg)
                outcomes = replay_outcomes(seg, policy, sim, cfg, seed)
                ok = sum(outcomes) >= cfg.failure_threshold
                entry["detected"] += 1
                entry["segments"].append({"source_id": seg.source_id, "replay_failures": outcomes,
                                          "verified": ok})
                if ok:
                    entry["verified"] += 1
                    segments.append(seg)
        except Exception as exc:  # noqa: BLE001 - per-log isolation is the contract
            log.warning("mining %s failed: %s", fl.log_id, exc)
            entry["error"] = f"{type(exc).__name__}: {exc}"
        report.logs.append(entry)
    return segments, report
