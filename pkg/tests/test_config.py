import pytest
import yaml
from hypothesis import given, settings, strategies as st

from advgen.config import ConfigError, ExperimentConfig, env_overrides, load_config, loads


def test_defaults_round_trip(tmp_path):
    cfg = load_config(environ={})
    p = tmp_path / "c.yaml"
    p.write_text(cfg.dumps())
    back = load_config(p, environ={})
    assert back == cfg and back.hash() == cfg.hash()


def test_hash_changes_with_any_value():
    a = load_config(environ={})
    assert a.with_overrides(**{"advgen.lambda_phy": 0.5}).hash() != a.hash()
    assert a.with_overrides(seed=1).hash() != a.hash()


def test_partial_yaml_keeps_defaults():
    cfg = loads("advgen:\n  eps1: 0.2\n", environ={})
    assert cfg.advgen.eps1 == 0.2 and cfg.advgen.eps2 == ExperimentConfig().advgen.eps2


@pytest.mark.parametrize("text, key", [
    ("advgen:\n  eps1: -1\n", "advgen.eps1"),
    ("advgen:\n  residual_cap: 1.5\n", "advgen.residual_cap"),
    ("eval:\n  cw_confidence: -0.1\n", "eval.cw_confidence"),
    ("data:\n  split: [0.5, 0.5, 0.5]\n", "data.split"),
    ("idgan:\n  adv_mode: wasserstein\n", "idgan.adv_mode"),
    ("seed: -3\n", "seed"),
])
def test_range_errors_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        loads(text, environ={})


def test_unknown_key_and_type_errors():
    with pytest.raises(ConfigError, match=r"advgen\.lambda_fun: unknown key"):
        loads("advgen:\n  lambda_fun: 1\n", environ={})
    with pytest.raises(ConfigError, match="expected int"):
        loads("advgen:\n  iters: 2.5\n", environ={})
    with pytest.raises(ConfigError, match="expected bool"):
        loads("pad:\n  augment: 3\n", environ={})
    with pytest.raises(ConfigError, match="mapping"):
        loads("- 1\n- 2\n", environ={})
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/cfg.yaml", environ={})


def test_env_override_wins_over_file():
    env = {"ADVGEN__ADVGEN__LAMBDA_PHY": "0.25", "ADVGEN__SEED": "9", "OTHER": "x"}
    assert env_overrides(env) == {"advgen": {"lambda_phy": 0.25}, "seed": 9}
    cfg = loads("advgen:\n  lambda_phy: 2.0\n", environ=env)
    assert cfg.advgen.lambda_phy == 0.25 and cfg.seed == 9
    with pytest.raises(ConfigError):
        loads("", environ={"ADVGEN__ADVGEN__NOPE": "1"})


def test_fast_profile_applies_budgets():
    cfg = load_config(environ={}).with_fast()
    assert cfg.idgan.epochs == cfg.fast.idgan_epochs
    assert cfg.advgen.eot_samples == cfg.fast.eot_samples
    assert cfg.eval.cw_iterations == cfg.fast.cw_iterations


@settings(max_examples=40, deadline=None)
@given(eps1=st.floats(1e-4, 1.0), lam=st.floats(0, 10), seed=st.integers(0, 2**31))
def test_valid_overrides_round_trip(eps1, lam, seed):
    cfg = load_config(environ={}).with_overrides(**{"advgen.eps1": eps1, "advgen.lambda_geom": lam, "seed": seed})
    back = loads(yaml.safe_dump(cfg.to_dict()), environ={})
    assert back == cfg
