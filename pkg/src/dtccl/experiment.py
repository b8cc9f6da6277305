"""The reference experiment: pretrain a weak policy, run the loop, compare against direct imitation.

Layout under ``workdir``: ``pi0.ckpt``, ``loop/`` (the loop workdir),
``direct_il.ckpt`` and ``reference.json`` / ``reference_table.{json,csv}``.
"""

from __future__ import annotations

import glob
import json
import os
from dataclasses import dataclass, replace
from typing import Callable, Optional

from .config import GlobalConfig, apply_preset
from .loop import gate_monotone, run_loop
from .metrics import emit_report, evaluate
from .policy import PolicyParams, load_params, save_params
from .scenario import AugmentedSample, load_scenario
from .templates import HOTSPOTS, sample_scenarios
from .train import collect_human_data, fine_tune, pretrain


@dataclass(frozen=True)
class HeldOut:
    hotspot_count: int = 10  # per template
    nominal_count: int = 15
    seed: int = 1
    split: str = "heldout"

    def hotspots(self) -> list:
        return [i for t in HOTSPOTS for i in sample_scenarios(t, self.hotspot_count, self.seed, self.split)]

    def nominal(self) -> list:
        return sample_scenarios("nominal_cruise", self.nominal_count, self.seed, self.split)


def pretrain_initial(cfg: GlobalConfig, seed: int = 0) -> PolicyParams:
    p = cfg.policy
    human = collect_human_data(p.pretrain_instances, cfg.loop.human_seed, cfg.sim)
    params, _ = pretrain(human, p.pretrain_config(seed), p.init_seed, "pi0")
    return params


def mined_segments(loop_dir) -> list:
    paths = sorted(glob.glob(os.path.join(loop_dir, "cycles", "*", "segments", "*.jsonl")),
                   key=lambda p: (int(p.split(os.sep)[-3]), p))
    return [load_scenario(p) for p in paths]


def train_direct_il(initial: PolicyParams, segments, cfg: GlobalConfig, seed: int = 0) -> PolicyParams:
    """Plain imitation on the mined anchors, no augmentation, contrastive or stability terms."""
    dcfg = apply_preset(cfg, "direct_il")
    human = collect_human_data(cfg.loop.human_instances, cfg.loop.human_seed, cfg.sim)
    samples = [AugmentedSample(s, None, None, None, None, 0) for s in segments]
    params, _ = fine_tune(initial, samples, human, replace(dcfg.train, seed=seed), version="direct_il")
    return params


def run_reference(workdir, cfg: GlobalConfig = GlobalConfig(), cycles: int = 3, seed: int = 0,
                  held: HeldOut = HeldOut(), hook: Optional[Callable] = None) -> dict:
    """Run (or resume) the whole comparison and return the summary written to reference.json."""
    os.makedirs(workdir, exist_ok=True)
    cfg = cfg.with_seed(seed)
    p0_path = os.path.join(workdir, "pi0.ckpt")
    if not os.path.exists(p0_path):
        save_params(pretrain_initial(cfg, seed), p0_path)
    pi0 = load_params(p0_path)
    loop_dir = os.path.join(workdir, "loop")
    state, report = run_loop(pi0, cycles, loop_dir, cfg.stages(), seed, hook)
    final = load_params(os.path.join(loop_dir, state.policy))
    dil_path = os.path.join(workdir, "direct_il.ckpt")
    if not os.path.exists(dil_path):
        save_params(train_direct_il(pi0, mined_segments(loop_dir), cfg, seed), dil_path)
    dil = load_params(dil_path)

    hot_set, nom_set = held.hotspots(), held.nominal()
    hot, nom = [], []
    for name, p in (("pi0", pi0), ("dtccl", final), ("direct_il", dil)):
        hot.append(evaluate(p, hot_set, cfg.metrics, cfg.sim, name))
        nom.append(evaluate(p, nom_set, cfg.metrics, cfg.sim, name))
    emit_report(hot, os.path.join(workdir, "reference_hotspot"))
    emit_report(nom, os.path.join(workdir, "reference_nominal"))
    scores = {r.policy: {"hotspot": r.composite, "nominal": n.composite} for r, n in zip(hot, nom)}
    summary = {
        "scores": scores,
        "relative_gain": (scores["dtccl"]["hotspot"] / scores["pi0"]["hotspot"] - 1.0
                          if scores["pi0"]["hotspot"] > 0 else None),
        "margin_over_direct_il": scores["dtccl"]["hotspot"] - scores["direct_il"]["hotspot"],
        "promotions": len(report["promotions"]),
        "gate_monotone": gate_monotone(state, cfg.loop.gate.eps_nom),
        "disengagements": [h["disengagements"] for h in report["history"]],
        "state_digest": report["state_digest"],
        "final_policy": state.digest,
        "direct_il_policy": dil.digest(),
    }
    with open(os.path.join(workdir, "reference.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary
