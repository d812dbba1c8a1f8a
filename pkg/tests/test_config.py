import json

import pytest

from blow.config import RunConfig, load_config
from blow.errors import ConfigError


def test_default_echo_is_canonical(tmp_path):
    text = RunConfig().dumps()
    p = tmp_path / "c.json"
    p.write_text(text)
    assert load_config(p).dumps() == text
    assert text.endswith("\n") and list(json.loads(text)) == sorted(json.loads(text))


def test_partial_file_fills_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"flow": {"n_blocks": 4, "frame_size": 512}, "seed": 3}))
    cfg = load_config(p)
    assert cfg.flow.n_blocks == 4 and cfg.flow.n_flows_per_block == 12 and cfg.seed == 3
    again = tmp_path / "d.json"
    again.write_text(cfg.dumps())
    assert again.read_bytes() == cfg.dumps().encode()


@pytest.mark.parametrize("data,key", [({"bogus": 1}, "bogus"), ({"train": {"bogus": 1}}, "train.bogus"),
                                      ({"flow": {"n_block": 2}}, "flow.n_block")])
def test_unknown_keys_named(data, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        RunConfig.from_dict(data)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"lr": -1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"flow": 3})


def test_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_overrides():
    cfg = RunConfig().with_overrides(["train.lr=3e-4", "flow.n_blocks=2", "seed=7"])
    assert cfg.train.lr == 3e-4 and cfg.flow.n_blocks == 2 and cfg.seed == 7
    with pytest.raises(ConfigError, match="train.nope"):
        RunConfig().with_overrides(["train.nope=1"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["train.lr"])
