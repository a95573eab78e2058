from dataclasses import fields

import pytest
from hypothesis import given, strategies as st

from bruno.config import ExperimentConfig, apply_overrides, parse_config, serialize_config

_text = st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=126, blacklist_characters="#="), max_size=12)


def _strategy(f):
    if f.type in (bool, "bool"):
        return st.booleans()
    if f.type in (int, "int"):
        return st.integers(-10**9, 10**9)
    if f.type in (float, "float"):
        return st.floats(allow_nan=False, allow_infinity=False)
    return _text


configs = st.builds(ExperimentConfig, **{f.name: _strategy(f) for f in fields(ExperimentConfig)})


@given(configs)
def test_roundtrip(cfg):
    assert parse_config(serialize_config(cfg)) == cfg


def test_comments_blank_lines_and_defaults():
    cfg = parse_config("# experiment\n\ndepth = 3   # shallow\nmode=gaussian\nweightnorm = off\n")
    assert cfg.depth == 3 and cfg.mode == "gaussian" and cfg.weightnorm is False
    assert cfg.hidden == ExperimentConfig().hidden


def test_errors():
    with pytest.raises(KeyError):
        parse_config("nonsense = 1")
    with pytest.raises(ValueError):
        parse_config("depth")
    with pytest.raises(ValueError):
        parse_config("weightnorm = maybe")


def test_overrides_and_train_config():
    cfg = apply_overrides(ExperimentConfig(), {"iterations": "0", "learning_rate": "0.01"})
    tc = cfg.train_config()
    assert tc.iterations == 0 and tc.learning_rate == 0.01 and tc.batch_size == 32
