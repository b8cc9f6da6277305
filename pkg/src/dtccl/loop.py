"""The continual improvement loop: deploy, mine, augment, fine-tune, gate, promote.

Every cycle persists its artifacts under ``<workdir>/cycles/<t>/`` and the
loop state under ``<workdir>/state.json``. The state file is replaced
atomically only when a cycle finishes, so a crash leaves the previous state
intact and a rerun picks up the stage outputs already on disk.
"""

from __future__ import annotations

import glob
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

from filelock import FileLock, Timeout

from .augment import AugmentationConfig, augment_batch, load_dataset, save_dataset
from .metrics import MetricsConfig, evaluate
from .mining import MiningConfig, mine
from .policy import PolicyParams, load_params, save_params
from .scenario import load_scenario, save_scenario
from .sim import SimConfig, rollout
from .templates import HOTSPOTS, TEMPLATES, sample_scenarios
from .train import NominalSet, TrainConfig, collect_human_data, fine_tune

log = logging.getLogger(__name__)

STATE_FILE = "state.json"
REPORT_FILE = "loop_report.json"
LOCK_FILE = "loop.lock"
STAGES = ("deploy", "mine", "augment", "train", "gate", "promote")


class LoopError(RuntimeError):
    pass


@dataclass(frozen=True)
class GateConfig:
    eps_nom: float = 2.0
    delta_dis: float = 0.0
    nominal_template: str = "nominal_cruise"
    nominal_count: int = 15
    dis_templates: tuple = HOTSPOTS
    dis_count: int = 10  # per template
    seed: int = 0
    split: str = "gate"

    def __post_init__(self):
        if self.eps_nom < 0:
            raise ValueError("loop.eps_nom must be >= 0")
        if self.nominal_count < 1 or self.dis_count < 1:
            raise ValueError("loop gate sets must be nonempty")
        if self.split == "train":
            raise ValueError("loop gate sets must not use the training split")
        for t in (self.nominal_template,) + tuple(self.dis_templates):
            if t not in TEMPLATES:
                raise ValueError(f"loop gate template {t!r} unknown")

    def nominal_set(self) -> list:
        return sample_scenarios(self.nominal_template, self.nominal_count, self.seed, self.split)

    def dis_set(self) -> list:
        return [i for t in self.dis_templates
                for i in sample_scenarios(t, self.dis_count, self.seed, self.split)]


@dataclass(frozen=True)
class LoopConfig:
    deploy_templates: tuple = HOTSPOTS
    logs_per_template: int = 12
    min_segments: int = 8  # update runs once this many verified segments are pending
    human_instances: int = 40
    human_seed: int = 0
    gate: GateConfig = field(default_factory=GateConfig)

    def __post_init__(self):
        if not self.deploy_templates:
            raise ValueError("loop.deploy_templates must be nonempty")
        for t in self.deploy_templates:
            if t not in TEMPLATES:
                raise ValueError(f"loop.deploy_templates: unknown template {t!r}")
        if self.logs_per_template < 1:
            raise ValueError("loop.logs_per_template must be >= 1")
        if self.min_segments < 1:
            raise ValueError("loop.min_segments must be >= 1")
        if self.human_instances < 1:
            raise ValueError("loop.human_instances must be >= 1")


@dataclass(frozen=True)
class Stages:
    """Module configs the loop threads through its stages."""

    sim: SimConfig = field(default_factory=SimConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)


@dataclass
class LoopState:
    t: int = 0
    policy: str = ""  # checkpoint path relative to the workdir
    digest: str = ""
    archive: list = field(default_factory=list)  # [{"version", "path", "digest", "cycle"}]
    pending: list = field(default_factory=list)  # segment paths carried into the next update
    gate_history: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)  # digest -> {"nominal", "dis"}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LoopState":
        return cls(**d)

    def state_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def stage_seed(seed: int, t: int, stage: str) -> int:
    key = f"{seed}:{t}:{stage}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def _file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------- gate


def gate_scores(policy, gate: GateConfig, sim: SimConfig, metrics: MetricsConfig) -> dict:
    nom = evaluate(policy, gate.nominal_set(), metrics, sim, "nominal")
    dis = evaluate(policy, gate.dis_set(), metrics, sim, "dis")
    return {"nominal": nom.composite, "dis": dis.composite}


def gate_decision(cand: dict, base: dict, gate: GateConfig) -> bool:
    """Ties pass: a candidate equal to its baseline is promoted when eps_nom, delta_dis >= 0."""
    return (cand["nominal"] >= base["nominal"] - gate.eps_nom
            and cand["dis"] >= base["dis"] + gate.delta_dis)


def validate_gate(candidate, baseline, gate: GateConfig, sim: SimConfig = SimConfig(),
                  metrics: MetricsConfig = MetricsConfig(), baseline_scores: Optional[dict] = None) -> dict:
    """Score both policies on both gate sets and apply the thresholds.

    Returns {"passed", "candidate", "baseline", "reason"}; evaluation errors
    yield passed=False with the error as reason.
    """
    try:
        base = baseline_scores if baseline_scores is not None else gate_scores(baseline, gate, sim, metrics)
        cand = gate_scores(candidate, gate, sim, metrics)
    except Exception as exc:  # noqa: BLE001 - a failed evaluation must never promote
        return {"passed": False, "candidate": None, "baseline": baseline_scores,
                "reason": f"evaluation failed: {type(exc).__name__}: {exc}"}
    passed = gate_decision(cand, base, gate)
    reason = "passed" if passed else (
        f"nominal {cand['nominal']:.3f} < {base['nominal']:.3f} - {gate.eps_nom}"
        if cand["nominal"] < base["nominal"] - gate.eps_nom else
        f"dis {cand['dis']:.3f} < {base['dis']:.3f} + {gate.delta_dis}")
    return {"passed": passed, "candidate": cand, "baseline": base, "reason": reason}


# ---------------------------------------------------------------- stages


class _Cycle:
    """Stage runner for one cycle; each stage reuses its persisted output if present."""

    def __init__(self, workdir, state: LoopState, cfg: Stages, seed: int, human: NominalSet,
                 hook: Optional[Callable] = None):
        self.workdir = workdir
        self.state = state
        self.cfg = cfg
        self.seed = seed
        self.human = human
        self.hook = hook
        self.t = state.t
        self.dir = os.path.join(workdir, "cycles", str(self.t))
        self.policy = load_params(os.path.join(workdir, state.policy))

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    def _done(self, stage):
        return os.path.exists(self.path(f".{stage}.done"))

    def _mark(self, stage):
        with open(self.path(f".{stage}.done"), "w") as fh:
            fh.write(stage + "\n")
        if self.hook is not None:
            self.hook(stage, self.t)

    def deploy(self) -> list:
        out = self.path("logs")
        if not self._done("deploy"):
            os.makedirs(out, exist_ok=True)
            seed = stage_seed(self.seed, self.t, "deploy")
            i = 0
            for tpl in self.cfg.loop.deploy_templates:
                for inst in sample_scenarios(tpl, self.cfg.loop.logs_per_template, seed, "train"):
                    res = rollout(self.policy, inst, self.cfg.sim)
                    save_scenario(res.log, os.path.join(out, f"{i:04d}.jsonl"))
                    i += 1
            self._mark("deploy")
        return [load_scenario(p) for p in sorted(glob.glob(os.path.join(out, "*.jsonl")))]

    def mine(self, logs) -> dict:
        out = self.path("segments")
        if not self._done("mine"):
            os.makedirs(out, exist_ok=True)
            segs, report = mine(logs, self.policy, self.cfg.sim, self.cfg.mining,
                                stage_seed(self.seed, self.t, "mine"))
            for i, seg in enumerate(segs):
                save_scenario(seg, os.path.join(out, f"{i:04d}.jsonl"))
            _write_json(self.path("mining.json"), report.to_dict())
            self._mark("mine")
        report = _read_json(self.path("mining.json"))
        report["paths"] = [os.path.relpath(p, self.workdir)
                           for p in sorted(glob.glob(os.path.join(out, "*.jsonl")))]
        return report

    def augment(self, seg_paths):
        out = self.path("dataset")
        if not self._done("augment"):
            segs = [load_scenario(os.path.join(self.workdir, p)) for p in seg_paths]
            acfg = replace(self.cfg.augmentation, rng_seed=stage_seed(self.seed, self.t, "augment"))
            samples, manifest = augment_batch(segs, acfg)
            save_dataset(samples, manifest, out)
            self._mark("augment")
        return load_dataset(out), _file_digest(os.path.join(out, "manifest.json"))

    def train(self, samples):
        ckpt = self.path("candidate.ckpt")
        if not self._done("train"):
            tcfg = replace(self.cfg.train, seed=stage_seed(self.seed, self.t, "train"))
            cand, report = fine_tune(self.policy, samples, self.human, tcfg, version=f"cand{self.t}")
            report.write(self.path("train_report"))
            save_params(cand, ckpt)
            self._mark("train")
        return load_params(ckpt)

    def gate(self, cand: PolicyParams) -> dict:
        out = self.path("gate.json")
        if not self._done("gate"):
            g = self.cfg.loop.gate
            base = self.state.scores.get(self.state.digest)
            res = validate_gate(cand, self.policy, g, self.cfg.sim, self.cfg.metrics, base)
            _write_json(out, res)
            self._mark("gate")
        return _read_json(out)


def init_state(workdir, initial: PolicyParams) -> LoopState:
    os.makedirs(os.path.join(workdir, "policies"), exist_ok=True)
    rel = os.path.join("policies", "pi_0.ckpt")
    save_params(initial, os.path.join(workdir, rel))
    digest = initial.digest()
    state = LoopState(0, rel, digest, [{"version": initial.version, "path": rel, "digest": digest,
                                         "cycle": -1}])
    _write_json(os.path.join(workdir, STATE_FILE), state.to_dict())
    return state


def load_state(workdir) -> Optional[LoopState]:
    p = os.path.join(workdir, STATE_FILE)
    return LoopState.from_dict(_read_json(p)) if os.path.exists(p) else None


def run_cycle(state: LoopState, workdir, cfg: Stages = Stages(), seed: int = 0,
              human: Optional[NominalSet] = None, hook: Optional[Callable] = None) -> LoopState:
    """Run cycle ``state.t`` and return the next state (the input is not modified).

    Any stage error propagates as LoopError; the state file is untouched and
    the stage outputs already written are reused on the next attempt.
    """
    if human is None:
        human = collect_human_data(cfg.loop.human_instances, cfg.loop.human_seed, cfg.sim)
    new = LoopState.from_dict(json.loads(json.dumps(state.to_dict())))
    try:
        c = _Cycle(workdir, state, cfg, seed, human, hook)
        os.makedirs(c.dir, exist_ok=True)
        if new.digest not in new.scores:
            new.scores[new.digest] = gate_scores(c.policy, cfg.loop.gate, cfg.sim, cfg.metrics)
            c.state = new
        logs = c.deploy()
        mined = c.mine(logs)
        new.pending = list(state.pending) + mined["paths"]
        record = {"cycle": c.t, "deployed": state.digest, "logs": len(logs),
                  "disengagements": mined["detected"], "verified": mined["verified"],
                  "pending": len(new.pending), "trained": False, "candidate": None,
                  "manifest": None, "gate": None, "promoted": False}
        if len(new.pending) >= cfg.loop.min_segments:
            samples, manifest_digest = c.augment(new.pending)
            cand = c.train(samples)
            gate = c.gate(cand)
            record.update(trained=True, candidate=cand.digest(), manifest=manifest_digest, gate=gate)
            if gate["passed"]:
                version = f"pi_{len(new.archive)}"
                rel = os.path.join("policies", f"{version}.ckpt")
                save_params(PolicyParams(cand.tensors, version), os.path.join(workdir, rel))
                new.policy, new.digest = rel, load_params(os.path.join(workdir, rel)).digest()
                new.archive.append({"version": version, "path": rel, "digest": new.digest,
                                    "cycle": c.t, "manifest": manifest_digest})
                new.scores[new.digest] = gate["candidate"]
                new.pending = []
                record["promoted"] = True
        else:
            log.info("cycle %d: %d pending segments, below the update trigger", c.t, len(new.pending))
        new.gate_history.append(record)
        new.t = c.t + 1
        if hook is not None:
            hook("promote", c.t)
    except LoopError:
        raise
    except Exception as exc:
        raise LoopError(f"cycle {state.t} aborted: {type(exc).__name__}: {exc}") from exc
    _write_json(os.path.join(c.dir, "cycle.json"), record)
    _write_json(os.path.join(workdir, STATE_FILE), new.to_dict())
    return new


def loop_report(state: LoopState) -> dict:
    return {"cycles": state.t, "final_policy": state.digest,
            "promotions": [a for a in state.archive if a["cycle"] >= 0],
            "history": state.gate_history,
            "deployed_scores": [dict(state.scores[a["digest"]], version=a["version"])
                                for a in state.archive if a["digest"] in state.scores],
            "state_digest": state.state_digest()}


def run_loop(initial: PolicyParams, cycles: int, workdir, cfg: Stages = Stages(), seed: int = 0,
             hook: Optional[Callable] = None):
    """Run until ``cycles`` cycles are complete; returns (LoopState, report dict).

    Resumes from ``workdir`` when a state file exists (the initial policy must
    then match the archived one). Rerunning a finished loop is a no-op.
    """
    if cycles < 1:
        raise ValueError("loop needs cycles >= 1")
    os.makedirs(workdir, exist_ok=True)
    try:
        lock = FileLock(os.path.join(workdir, LOCK_FILE), timeout=0)
        lock.acquire()
    except Timeout as exc:
        raise LoopError(f"another loop driver holds {workdir}") from exc
    try:
        state = load_state(workdir)
        if state is None:
            state = init_state(workdir, initial)
        elif state.archive[0]["digest"] != initial.digest():
            raise LoopError("workdir was started from a different initial policy")
        human = None
        while state.t < cycles:
            if human is None:
                human = collect_human_data(cfg.loop.human_instances, cfg.loop.human_seed, cfg.sim)
            state = run_cycle(state, workdir, cfg, seed, human, hook)
        report = loop_report(state)
        _write_json(os.path.join(workdir, REPORT_FILE), report)
        return state, report
    finally:
        lock.release()


def gate_monotone(state: LoopState, eps_nom: float) -> bool:
    """Promoted versions never lose dis-set score nor drop nominal by more than eps_nom."""
    seq = [state.scores[a["digest"]] for a in state.archive if a["digest"] in state.scores]
    return all(b["dis"] >= a["dis"] and b["nominal"] >= a["nominal"] - eps_nom
               for a, b in zip(seq, seq[1:]))
