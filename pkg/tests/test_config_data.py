import json

import numpy as np
import pytest

from unipool_lab.config import (
    ConfigError,
    ExperimentConfig,
    ModelConfig,
    TrainConfig,
    config_hash,
    unipool_config,
    vanilla_config,
)
from unipool_lab.data import CorpusError, encode, load_corpus, pack_windows


def test_defaults_describe_the_desk_scale_unipool_model():
    cfg = ModelConfig()
    assert (cfg.n_layers, cfg.hidden, cfg.num_experts, cfg.top_k, cfg.n_groups) == (4, 64, 32, 1, 1)
    assert cfg.router == "norm_router" and cfg.pool_alpha == 1e-2 and cfg.aux_alpha == 0.0
    assert cfg.ffn_dim == 256 and cfg.ownership == "global"


def test_presets():
    v = vanilla_config(4, 8)
    u = unipool_config(4, 8)
    assert v.ownership == "private" and v.group_size == 8 and v.router == "softmax"
    assert u.ownership == "global" and u.group_size == 32
    assert v.num_experts == u.num_experts


@pytest.mark.parametrize("bad,field", [
    ({"hidden": 30, "n_heads": 4}, "n_heads"),
    ({"n_groups": 3}, "n_groups"),
    ({"router": "hash"}, "router"),
    ({"top_k": 40}, "top_k"),
    ({"pool_size": 30, "n_groups": 4}, "pool_size"),
    ({"vocab_size": 100}, "vocab_size"),
])
def test_invalid_model_configs_name_the_field(bad, field):
    with pytest.raises(ConfigError) as ei:
        ModelConfig(**bad)
    assert ei.value.field == field


def test_experiment_config_rejects_unknown_and_mistyped_keys():
    with pytest.raises(ConfigError) as ei:
        ExperimentConfig.from_dict({"model": {"hiden": 3}})
    assert ei.value.field == "model.hiden"
    with pytest.raises(ConfigError) as ei:
        ExperimentConfig.from_dict({"train": {"steps": 1.5}})
    assert ei.value.field == "train.steps"
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_experiment_config_round_trip(tmp_path):
    exp = ExperimentConfig.from_dict({"model": {"n_layers": 2, "pool_size": 8}, "train": {"steps": 3}, "seed": 7})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(exp.to_dict()))
    assert ExperimentConfig.load(p) == exp


def test_config_hash_is_stable_and_sensitive():
    a = ModelConfig()
    assert config_hash(a) == config_hash(ModelConfig())
    assert config_hash(a) != config_hash(a.replace(pool_alpha=2e-2))
    assert len(config_hash(a)) == 16


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=10, micro_batches=3)
    with pytest.raises(ConfigError):
        TrainConfig(min_lr=1.0)


def test_pack_windows_shapes_and_shift():
    toks = np.arange(23)
    w = pack_windows(toks, 4)
    assert w.shape == (4, 5)
    assert np.array_equal(w[1], [5, 6, 7, 8, 9])
    assert pack_windows(np.arange(3), 4).shape == (0, 5)


def test_corpus_split_and_errors(tmp_path):
    p = tmp_path / "c.txt"
    p.write_bytes(bytes(range(200)) * 5)
    c = load_corpus(p, 0.1)
    assert len(c.val) == 100 and len(c.train) == 900
    assert np.array_equal(c.tokens[:3], [0, 1, 2])
    (tmp_path / "e.txt").write_bytes(b"")
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "e.txt")
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "missing.txt")


def test_encode_is_utf8_bytes():
    assert encode("é").tolist() == [0xC3, 0xA9]
