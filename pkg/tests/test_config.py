import json
from pathlib import Path

import pytest

from dtccl.config import (PRESETS, ConfigError, GlobalConfig, apply_preset, dumps, load_config,
                          loads, to_dict)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
CONFIGS = sorted(CONFIG_DIR.glob("*.ini"))


def test_defaults_roundtrip_through_ini_and_json():
    cfg = GlobalConfig()
    assert loads(dumps(cfg)) == cfg
    assert dumps(loads(dumps(cfg))) == dumps(cfg)
    assert loads(json.dumps(to_dict(cfg)), "json") == cfg


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.name)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert loads(dumps(cfg)) == cfg


def test_reference_config_values():
    cfg = load_config(CONFIG_DIR / "reference.ini")
    assert cfg.train.w_stab == 1.0 and cfg.train.tau == 0.5
    assert cfg.loop.deploy_templates == ("lead_brake", "red_light_approach", "guardrail_overtake")
    assert cfg.loop.gate.eps_nom == 2.0 and cfg.loop.gate.delta_dis == 0.0


def test_safety_limits_injected_everywhere():
    cfg = loads("[safety]\nlimits.max_accel = 3.0\n")
    assert cfg.sim.limits.max_accel == 3.0
    assert cfg.augmentation.safety.limits.max_accel == 3.0
    with pytest.raises(ConfigError, match="sim.limits"):
        loads("[sim]\nlimits.max_accel = 3.0\n")


@pytest.mark.parametrize("text,key", [
    ("[train]\nbatch_size = 0\n", "train.batch_size"),
    ("[train]\nbogus = 1\n", "train.bogus"),
    ("[nowhere]\nx = 1\n", "nowhere"),
    ("[train]\nepochs = 2.5\n", "train.epochs"),
    ("[augmentation]\nenable_negatives = maybe\n", "augmentation.enable_negatives"),
    ("[meta]\nschema = 2\n", "meta.schema"),
    ("[train\n", "parse error"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        loads(text)


def test_optional_and_tuple_values():
    cfg = loads("[train]\ngrad_clip = none\ndecision_window = 31, 39\n")
    assert cfg.train.grad_clip is None and cfg.train.decision_window == (31, 39)


def test_presets():
    base = GlobalConfig()
    dil = apply_preset(base, "direct_il")
    assert dil.train.w_cl == 0 and dil.train.w_stab == 0
    assert not dil.augmentation.enable_positives and not dil.augmentation.enable_negatives
    assert apply_preset(base, "dtccl") == base
    assert set(PRESETS) == {"dtccl", "direct_il", "augmented_il"}
    with pytest.raises(ConfigError):
        apply_preset(base, "nope")


def test_with_seed_threads_root_seed():
    cfg = GlobalConfig().with_seed(7)
    assert cfg.sim.seed == cfg.train.seed == cfg.augmentation.rng_seed == 7


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.ini")
