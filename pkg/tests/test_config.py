import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kidneyxfer import config
from kidneyxfer.config import ConfigError, RunConfig, dumps, load, loads, save


def test_defaults_roundtrip():
    text = dumps(RunConfig())
    assert loads(text) == RunConfig()
    assert dumps(loads(text)) == text


def test_every_section_is_written():
    text = dumps(RunConfig())
    for name in config.SECTIONS:
        assert f"[{name}]" in text
    assert "threshold = 0.4" in text


@settings(max_examples=30)
@given(
    st.integers(0, 10**6),
    st.floats(0.001, 1.0),
    st.integers(1, 16),
    st.one_of(st.none(), st.floats(0.01, 5.0)),
    st.lists(st.floats(0.5, 8.0), min_size=1, max_size=4),
    st.booleans(),
)
def test_modified_roundtrip(seed, lr, stride, c, scales, bright):
    cfg = RunConfig()
    cfg = dataclasses.replace(
        cfg,
        run=dataclasses.replace(cfg.run, seed=seed),
        adapt=dataclasses.replace(cfg.adapt, learning_rate=lr),
        sweep=dataclasses.replace(cfg.sweep, stride=stride),
        frangi=dataclasses.replace(cfg.frangi, c=c, scales=tuple(scales), bright=bright),
    )
    back = loads(dumps(cfg))
    assert back == cfg
    assert dumps(back) == dumps(cfg)


def test_missing_keys_take_defaults():
    cfg = loads("[run]\nseed = 9\n")
    assert cfg.run.seed == 9
    assert cfg.run.train == RunConfig().run.train
    assert cfg.sweep == RunConfig().sweep


@pytest.mark.parametrize(
    "text",
    [
        "[run]\nsed = 3\n",
        "[nonsense]\na = 1\n",
        "[run]\nseed = abc\n",
        "[run]\ntrain = 0\n",
        "[frangi]\nbright = maybe\n",
        "not a config",
    ],
)
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        loads(text)


def test_file_roundtrip(tmp_path):
    cfg = dataclasses.replace(RunConfig(), run=dataclasses.replace(RunConfig().run, val=3))
    path = tmp_path / "run.cfg"
    save(str(path), cfg)
    assert load(str(path)) == cfg


def test_experiment_view():
    cfg = RunConfig()
    exp = cfg.experiment()
    assert exp.sweep == cfg.sweep and exp.gbm == cfg.gbm and exp.seed == cfg.run.seed
