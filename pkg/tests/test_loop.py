import json
import math
import os

import pytest
from filelock import FileLock

from dtccl.loop import (LOCK_FILE, REPORT_FILE, STATE_FILE, GateConfig, LoopConfig, LoopError,
                        LoopState, Stages, gate_decision, gate_monotone, load_state, run_loop,
                        stage_seed, validate_gate)
from dtccl.policy import init_params
from dtccl.train import TrainConfig

TINY = Stages(train=TrainConfig(batch_size=4, epochs=1),
              loop=LoopConfig(deploy_templates=("lead_brake",), logs_per_template=3, min_segments=1,
                              human_instances=2,
                              gate=GateConfig(nominal_count=2, dis_templates=("lead_brake",), dis_count=2)))


class Crash(Exception):
    pass


def files(root):
    out = {}
    for d, _, names in os.walk(root):
        for n in names:
            if n != LOCK_FILE:
                p = os.path.join(d, n)
                with open(p, "rb") as fh:
                    out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("loop")
    state, report = run_loop(init_params(0), 2, str(d), TINY, seed=0)
    return d, state, report


def test_gate_ties_pass_and_thresholds():
    g = GateConfig()
    base = {"nominal": 80.0, "dis": 30.0}
    assert gate_decision(base, base, g)
    assert gate_decision({"nominal": 78.0, "dis": 30.0}, base, g)
    assert not gate_decision({"nominal": 77.9, "dis": 99.0}, base, g)
    assert not gate_decision({"nominal": 80.0, "dis": 29.9}, base, g)
    assert not gate_decision(base, base, GateConfig(delta_dis=0.5))


def test_infinite_margin_retains_baseline():
    g = GateConfig(delta_dis=math.inf, nominal_count=1, dis_templates=("lead_brake",), dis_count=1)
    p = init_params(0)
    res = validate_gate(p, p, g, baseline_scores={"nominal": 0.0, "dis": 0.0})
    assert not res["passed"] and res["reason"].startswith("dis")


def test_evaluation_failure_never_promotes():
    g = GateConfig(nominal_count=1, dis_templates=("lead_brake",), dis_count=1)
    res = validate_gate(object(), init_params(0), g, baseline_scores={"nominal": 0.0, "dis": 0.0})
    assert not res["passed"] and res["reason"].startswith("evaluation failed")


def test_gate_config_rejects_training_split():
    with pytest.raises(ValueError):
        GateConfig(split="train")
    with pytest.raises(ValueError):
        LoopConfig(deploy_templates=("nowhere",))


def test_stage_seed_is_stable_and_distinct():
    assert stage_seed(0, 1, "mine") == stage_seed(0, 1, "mine")
    assert len({stage_seed(0, t, s) for t in range(3) for s in ("deploy", "mine", "train")}) == 9


def test_monotone_check():
    st = LoopState(archive=[{"digest": "a"}, {"digest": "b"}],
                   scores={"a": {"nominal": 80.0, "dis": 10.0}, "b": {"nominal": 78.5, "dis": 10.0}})
    assert gate_monotone(st, 2.0)
    assert not gate_monotone(st, 1.0)


def test_tiny_loop_artifacts(tiny_run):
    d, state, report = tiny_run
    assert state.t == 2 and len(state.gate_history) == 2
    assert gate_monotone(state, TINY.loop.gate.eps_nom)
    assert json.loads((d / REPORT_FILE).read_text()) == report
    assert load_state(str(d)).state_digest() == state.state_digest()
    for rec in state.gate_history:
        c = d / "cycles" / str(rec["cycle"])
        assert (c / "cycle.json").exists() and (c / "logs").is_dir()
        if rec["trained"]:
            assert (c / "candidate.ckpt").exists() and (c / "train_report.csv").exists()
    for a in state.archive:
        assert (d / a["path"]).exists()
    promoted = [r for r in state.gate_history if r["promoted"]]
    assert len(state.archive) == 1 + len(promoted)


def test_rerun_is_noop(tiny_run):
    d, state, _ = tiny_run
    before = files(d)
    again, _ = run_loop(init_params(0), 2, str(d), TINY, seed=0)
    assert again.state_digest() == state.state_digest()
    assert files(d) == before


def test_wrong_initial_policy_rejected(tiny_run):
    with pytest.raises(LoopError):
        run_loop(init_params(1), 2, str(tiny_run[0]), TINY, seed=0)


def test_lock_excludes_second_driver(tmp_path):
    with FileLock(str(tmp_path / LOCK_FILE)):
        with pytest.raises(LoopError):
            run_loop(init_params(0), 1, str(tmp_path), TINY)
    assert not (tmp_path / STATE_FILE).exists()


def test_kill_and_resume_matches_uninterrupted(tiny_run, tmp_path):
    d, state, _ = tiny_run

    def hook(stage, t):
        if (stage, t) == ("augment", 1):
            raise Crash()

    with pytest.raises(LoopError):
        run_loop(init_params(0), 2, str(tmp_path), TINY, seed=0, hook=hook)
    assert load_state(str(tmp_path)).t == 1
    resumed, _ = run_loop(init_params(0), 2, str(tmp_path), TINY, seed=0)
    assert resumed.state_digest() == state.state_digest()
    assert files(tmp_path) == files(d)
