"""Batch assembly, optimisation and the fine-tuning driver.

Training data comes in two forms. Disengagement samples (anchor, positive,
negative segments) are turned into ``TrainItem``s with precomputed features;
nominal human driving is a ``NominalSet`` of (features, expert controls)
gathered from expert rollouts. A batch draws N_bs items and expands each into
its anchor, positive and negative instances.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .controllers import ExpertDriver
from .features import featurize, stack, take
from .geometry import wrap_angles
from .policy import (HORIZON, Batch, LossWeights, NonFiniteError, PolicyParams, _encode, _plan,
                     init_params, joint_loss)
from .scenario import AugmentedSample, DisengagementSegment, EgoState
from .sim import SimConfig, rollout
from .templates import sample_scenarios

log = logging.getLogger(__name__)

ANCHOR, POSITIVE, NEGATIVE = "anchor", "positive", "negative"
OPTIMIZERS = ("sgd", "adam")
STAB_MODES = ("output", "params")


class DivergenceError(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 25
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    w_bc: float = 1.0
    w_cl: float = 0.5
    w_stab: float = 0.1
    tau: float = 0.1
    grad_clip: Optional[float] = 1.0
    rehearsal: float = 0.5
    stab_mode: str = "output"
    probe_size: int = 32
    decision_window: tuple = (30, 40)  # BC decision frames within a segment
    embed_frame: int = 29  # frame whose scene is embedded for the contrastive loss
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("train.epochs must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("train.learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"train.optimizer must be one of {OPTIMIZERS}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("train adam parameters need 0 <= beta < 1 and eps > 0")
        if min(self.w_bc, self.w_cl, self.w_stab) < 0:
            raise ValueError("train loss weights must be >= 0")
        if not self.tau > 0:
            raise ValueError("train.tau must be > 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("train.grad_clip must be > 0 or none")
        if not 0 <= self.rehearsal <= 1:
            raise ValueError("train.rehearsal must be in [0, 1]")
        if self.stab_mode not in STAB_MODES:
            raise ValueError(f"train.stab_mode must be one of {STAB_MODES}")
        lo, hi = self.decision_window
        if not 0 <= lo < hi:
            raise ValueError("train.decision_window must be an increasing pair")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_bc, self.w_cl, self.w_stab)


# ---------------------------------------------------------------- data


def control_targets(frames, start: int, dt: float, horizon: int = HORIZON) -> np.ndarray:
    """Controls that reproduce frames[start..start+horizon] under the unicycle model."""
    if start + horizon >= len(frames):
        raise ValueError(f"need {horizon} frames after {start}")
    v = np.array([f.ego.speed for f in frames[start:start + horizon + 1]])
    h = np.array([f.ego.heading for f in frames[start:start + horizon + 1]])
    return np.stack([np.diff(v) / dt, wrap_angles(np.diff(h)) / dt], axis=1)


@dataclass
class NominalSet:
    feats: dict
    targets: np.ndarray  # (N, T, 2)

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "NominalSet":
        return NominalSet(take(self.feats, idx), self.targets[idx])


@dataclass
class TrainItem:
    """Precomputed features of one augmented sample."""

    source_id: str
    cl_anchor: object
    cl_pos: object = None
    cl_neg: object = None
    bc_anchor: list = field(default_factory=list)  # [(features, targets)] per decision frame
    bc_pos: list = field(default_factory=list)

    @property
    def eligible(self) -> bool:
        return self.cl_pos is not None and self.cl_neg is not None


def _bc_windows(seg: DisengagementSegment, cfg: TrainConfig, target_seg=None):
    target_seg = target_seg or seg
    lo, hi = cfg.decision_window
    hi = min(hi, len(seg.frames) - HORIZON)
    out = []
    for k in range(lo, hi):
        out.append((featurize(seg.frames[k], seg.map),
                    control_targets(target_seg.frames, k, target_seg.dt)))
    return out


def prepare_item(sample: AugmentedSample, cfg: TrainConfig) -> TrainItem:
    a = sample.anchor
    k = cfg.embed_frame
    item = TrainItem(a.source_id, featurize(a.frames[k], a.map), bc_anchor=_bc_windows(a, cfg))
    if sample.positive is not None:
        p = sample.positive
        item.cl_pos = featurize(p.frames[k], p.map)
        item.bc_pos = _bc_windows(p, cfg)
    if sample.negative is not None:
        n = sample.negative
        item.cl_neg = featurize(n.frames[k], n.map)
    return item


@dataclass(frozen=True)
class TrainInstance:
    role: str
    source_id: str
    has_target: bool


def _pool(items: Sequence[TrainItem], cfg: TrainConfig) -> list:
    if cfg.w_cl > 0:
        return [it for it in items if it.eligible]
    return list(items)


def make_batch(samples, nominal: Optional[NominalSet], cfg: TrainConfig, rng,
               order: Optional[Sequence[int]] = None, probe=None, probe_ref_plans=None) -> Batch:
    """Assemble one batch: up to N_bs samples expanded into anchor/positive/negative instances.

    ``samples`` are AugmentedSamples or prepared TrainItems. ``order`` selects
    which pooled items to use (an epoch slice); by default N_bs are drawn
    without replacement. Anchors and positives carry imitation targets drawn
    from the corrective window; negatives only enter the contrastive loss.
    """
    items = [s if isinstance(s, TrainItem) else prepare_item(s, cfg) for s in samples]
    pool = _pool(items, cfg)
    if not pool:
        raise ValueError("no usable samples for a batch")
    if order is None:
        n = min(cfg.batch_size, len(pool))
        if n < cfg.batch_size:
            log.warning("only %d samples available for a batch of %d", n, cfg.batch_size)
        order = rng.choice(len(pool), size=n, replace=False)
    chosen = [pool[i] for i in order]

    bc_f, bc_t, roles, inst = [], [], [], []
    for it in chosen:
        f, t = it.bc_anchor[int(rng.integers(len(it.bc_anchor)))]
        bc_f.append(f)
        bc_t.append(t)
        roles.append(ANCHOR)
        inst.append(TrainInstance(ANCHOR, it.source_id, True))
    for it in chosen:
        if it.cl_pos is not None:
            f, t = it.bc_pos[int(rng.integers(len(it.bc_pos)))]
            bc_f.append(f)
            bc_t.append(t)
            roles.append(POSITIVE)
            inst.append(TrainInstance(POSITIVE, it.source_id, True))
    triplets = [it for it in chosen if it.eligible]
    for it in triplets:
        roles.append(NEGATIVE)
        inst.append(TrainInstance(NEGATIVE, it.source_id, False))

    batch = Batch(bc_feats=stack(bc_f), bc_targets=np.stack(bc_t), rehearsal=cfg.rehearsal,
                  roles=tuple(roles), instances=tuple(inst), probe=probe,
                  probe_ref_plans=probe_ref_plans)
    if triplets and cfg.w_cl > 0:
        batch.cl_anchor = stack([it.cl_anchor for it in triplets])
        batch.cl_pos = stack([it.cl_pos for it in triplets])
        batch.cl_neg = stack([it.cl_neg for it in triplets])
    if nominal is not None and len(nominal) and cfg.rehearsal > 0:
        idx = rng.choice(len(nominal), size=min(len(chosen), len(nominal)), replace=False)
        batch.nom_feats = take(nominal.feats, idx)
        batch.nom_targets = nominal.targets[idx]
    return batch


# ---------------------------------------------------------------- optimisation


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))


def apply_update(params: PolicyParams, grads: dict, cfg: TrainConfig, state: OptimizerState):
    """One optimiser update with optional global-norm clipping; returns (params, state, norm)."""
    norm = global_norm(grads)
    scale = 1.0
    if cfg.grad_clip is not None and norm > cfg.grad_clip:
        scale = cfg.grad_clip / norm
    new = {}
    st = OptimizerState(state.step + 1, dict(state.m), dict(state.v))
    lr = cfg.learning_rate
    for k, w in params.tensors.items():
        g = grads[k] * scale
        if cfg.optimizer == "sgd":
            new[k] = w - lr * g
            continue
        m = cfg.beta1 * st.m.get(k, 0.0) + (1 - cfg.beta1) * g
        v = cfg.beta2 * st.v.get(k, 0.0) + (1 - cfg.beta2) * g * g
        st.m[k], st.v[k] = m, v
        m_hat = m / (1 - cfg.beta1 ** st.step)
        v_hat = v / (1 - cfg.beta2 ** st.step)
        new[k] = w - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return PolicyParams(new, params.version), st, norm


def train_step(params: PolicyParams, params_ref: Optional[PolicyParams], batch: Batch,
               cfg: TrainConfig, state: Optional[OptimizerState] = None):
    """One gradient step on the joint loss; returns (params, optimizer state, loss record)."""
    state = state or OptimizerState()
    total, comp, grads = joint_loss(batch, params, params_ref, cfg.weights, cfg.tau, cfg.stab_mode)
    new, state, norm = apply_update(params, grads, cfg, state)
    record = dict(comp, grad_norm=norm)
    return new, state, record


# ---------------------------------------------------------------- reports


REPORT_FIELDS = ("epoch", "bc", "cl", "stab", "total", "grad_norm")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # per-epoch means
    steps: list = field(default_factory=list)  # per-step records
    aborted: bool = False
    reason: str = ""
    wall_time: float = 0.0  # kept out of to_dict so reports are reproducible

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "steps": self.steps, "aborted": self.aborted,
                "reason": self.reason}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for e in self.epochs:
            w.writerow([e["epoch"]] + [repr(float(e[k])) for k in REPORT_FIELDS[1:]])
        return buf.getvalue()

    def write(self, stem) -> None:
        with open(f"{stem}.json", "w") as fh:
            fh.write(self.to_json())
        with open(f"{stem}.csv", "w") as fh:
            fh.write(self.to_csv())


def smoothed(values: Sequence[float], window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return v
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def probe_set(nominal: NominalSet, cfg: TrainConfig):
    if nominal is None or len(nominal) == 0:
        return None
    rng = np.random.default_rng(cfg.seed + 7919)
    idx = np.sort(rng.choice(len(nominal), size=min(cfg.probe_size, len(nominal)), replace=False))
    return take(nominal.feats, idx)


def fine_tune(params: PolicyParams, samples, nominal: Optional[NominalSet], cfg: TrainConfig,
              version: Optional[str] = None):
    """Fine-tune ``params`` on augmented samples with nominal rehearsal.

    Returns (new params, TrainReport). Raises DivergenceError when the
    window-10 smoothed total loss exceeds five times its starting value.
    """
    t_start = time.perf_counter()
    report = TrainReport()
    if not samples:
        raise ValueError("fine_tune needs a nonempty dataset")
    if cfg.epochs == 0:
        return params, report
    items = [s if isinstance(s, TrainItem) else prepare_item(s, cfg) for s in samples]
    pool = _pool(items, cfg)
    if not pool:
        raise ValueError("no usable training samples")
    if len(pool) < cfg.batch_size:
        log.warning("dataset has %d samples, fewer than batch size %d", len(pool), cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    ref = params.copy()
    probe = probe_set(nominal, cfg) if cfg.w_stab > 0 else None
    ref_plans = None
    if probe is not None and cfg.stab_mode == "output":
        ref_plans = _plan(_encode(probe, ref)[0], ref)
    state = OptimizerState()
    cur = params
    start_level = None
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(pool))
        recs = []
        for lo in range(0, len(perm), cfg.batch_size):
            batch = make_batch(pool, nominal, cfg, rng, order=perm[lo:lo + cfg.batch_size],
                               probe=probe, probe_ref_plans=ref_plans)
            try:
                cur, state, rec = train_step(cur, ref, batch, cfg, state)
            except NonFiniteError as exc:
                report.aborted, report.reason = True, str(exc)
                report.wall_time = time.perf_counter() - t_start
                raise DivergenceError(str(exc), report) from exc
            rec = {k: float(v) for k, v in rec.items()}
            rec["epoch"] = epoch
            report.steps.append(rec)
            recs.append(rec)
        report.epochs.append({"epoch": epoch, **{k: float(np.mean([r[k] for r in recs]))
                                                 for k in REPORT_FIELDS[1:]}})
        sm = smoothed([r["total"] for r in report.steps])
        if start_level is None:
            start_level = sm[0]
        if sm[-1] > 5.0 * start_level:
            report.aborted = True
            report.reason = f"diverged at epoch {epoch}: smoothed loss {sm[-1]:.4g} > 5x {start_level:.4g}"
            report.wall_time = time.perf_counter() - t_start
            raise DivergenceError(report.reason, report)
    report.wall_time = time.perf_counter() - t_start
    return PolicyParams(cur.tensors, version or params.version), report


def pretrain(nominal: NominalSet, cfg: TrainConfig, init_seed: int = 0, version: str = "pi0"):
    """Imitation pretraining on nominal human driving only."""
    t_start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    params = init_params(init_seed, version)
    bc_cfg = replace(cfg, w_cl=0.0, w_stab=0.0, rehearsal=0.0)
    state = OptimizerState()
    report = TrainReport()
    n = len(nominal)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        recs = []
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            batch = Batch(bc_feats=take(nominal.feats, idx), bc_targets=nominal.targets[idx])
            params, state, rec = train_step(params, None, batch, bc_cfg, state)
            recs.append({k: float(v) for k, v in rec.items()})
        report.epochs.append({"epoch": epoch, **{k: float(np.mean([r[k] for r in recs]))
                                                 for k in REPORT_FIELDS[1:]}})
    report.wall_time = time.perf_counter() - t_start
    return PolicyParams(params.tensors, version), report


# ---------------------------------------------------------------- gradient check


def grad_check(params: PolicyParams, batch: Batch, epsilon: float = 1e-5,
               params_ref: Optional[PolicyParams] = None, weights: LossWeights = LossWeights(),
               tau: float = 0.1, stab_mode: str = "output", seed: int = 0,
               max_entries: int = 10_000, loss_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every entry is checked when the model has at most ``max_entries`` of them,
    otherwise a seeded 5% subsample. Relative error is |a - n| / max(|a|, |n|, 1e-6),
    and 0 when both are zero.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if loss_fn is None:
        def loss_fn(p):
            total, _, g = joint_loss(batch, p, params_ref, weights, tau, stab_mode)
            return total, g
    _, grads = loss_fn(params)
    entries = [(k, i) for k in sorted(params.tensors) for i in range(params[k].size)]
    if len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(entries), size=max(1, len(entries) // 20), replace=False)
        entries = [entries[i] for i in sorted(pick)]
    worst = 0.0
    for k, i in entries:
        base = params[k]
        plus, minus = base.copy(), base.copy()
        plus.flat[i] += epsilon
        minus.flat[i] -= epsilon
        fp = loss_fn(PolicyParams({**params.tensors, k: plus}))[0]
        fm = loss_fn(PolicyParams({**params.tensors, k: minus}))[0]
        num = (fp - fm) / (2 * epsilon)
        ana = float(grads[k].flat[i])
        if num == 0.0 and ana == 0.0:
            continue
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst


# ---------------------------------------------------------------- nominal human data


class KickedExpert:
    """Expert driver with occasional random control kicks, to widen state coverage."""

    def __init__(self, rng, horizon: int, n_kicks: int = 3, duration: int = 5):
        self.expert = ExpertDriver()
        self.kicks = {}
        for _ in range(n_kicks):
            start = int(rng.integers(5, max(6, horizon - duration)))
            u = (float(rng.uniform(-1.5, 1.0)), float(rng.uniform(-0.25, 0.25)))
            for t in range(start, start + duration):
                self.kicks[t] = u

    def control(self, frame, map_ctx, world=None):
        if frame.t in self.kicks:
            return self.kicks[frame.t]
        return self.expert.control(frame, map_ctx)


def collect_human_data(n_instances: int, seed: int = 0, sim: SimConfig = SimConfig(),
                       template: str = "nominal_cruise", stride: int = 2) -> NominalSet:
    """Expert demonstrations on ``template`` with randomized starts and kicks.

    Samples whose label window overlaps a kick (or follows a collision) are skipped.
    """
    feats, targets = [], []
    for inst in sample_scenarios(template, n_instances, seed, "train"):
        rng = np.random.default_rng(inst.seed + 17)
        e = inst.ego
        line = inst.map.route_line
        h = float(line.heading_at(10.0))
        d = float(rng.uniform(-1.0, 1.0))
        ego = EgoState(e.x - math.sin(h) * d, e.y + math.cos(h) * d,
                       float(np.clip(e.heading + rng.uniform(-0.08, 0.08), -math.pi, math.pi)),
                       float(rng.uniform(0.0, inst.map.speed_limit)))
        inst = replace(inst, ego=ego)
        driver = KickedExpert(rng, inst.horizon)
        res = rollout(driver, inst, sim, monitor=False)
        frames = res.log.frames
        coll = res.first("collision")
        end = len(frames) if coll is None else coll.frame
        for k in range(0, end - HORIZON, stride):
            if any(t in driver.kicks for t in range(k, k + HORIZON)):
                continue
            feats.append(featurize(frames[k], inst.map))
            targets.append(control_targets(frames, k, res.log.dt))
    if not feats:
        raise ValueError("no nominal samples collected")
    return NominalSet(stack(feats), np.stack(targets))
