import pytest

from sslnet.config import config_from_dict, load_config, override
from sslnet.errors import ConfigError


def test_defaults():
    cfg = config_from_dict({})
    assert cfg.fusion.strategy == "sampling"
    assert cfg.train.epochs == 30 and cfg.train.batch_size == 32 and cfg.train.learning_rate == 1e-3
    assert cfg.spectral.n_fft == 1024 and cfg.spectral.n_mels == 64
    assert cfg.provider.d_emb == 256


def test_yaml_file(tmp_path):
    (tmp_path / "c.yaml").write_text("fusion:\n  strategy: shared\n  tau1: 2\ntrain:\n  epochs: 4\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.fusion.strategy == "shared" and cfg.fusion.tau1 == 2.0
    assert cfg.train.epochs == 4


def test_json_is_accepted(tmp_path):
    (tmp_path / "c.json").write_text('{"train": {"seed": 3}}')
    assert load_config(tmp_path / "c.json").train.seed == 3


@pytest.mark.parametrize("raw, match", [
    ({"train": {"epoch": 3}}, "train.epoch"),
    ({"trainer": {}}, "trainer"),
    ({"fusion": {"strategy": "bogus"}}, "fusion.strategy"),
    ({"train": {"epochs": "ten"}}, "train.epochs"),
    ({"train": {"epochs": 0}}, "train.epochs"),
    ({"spectral": {"n_fft": 1000}}, "spectral"),
    ({"provider": {"kind": "remote"}}, "provider.kind"),
    ({"fusion": {"tau1": 0}}, "fusion"),
    ({"model": {"branches": "three"}}, "model.branches"),
    ({"synth": {"snr": -1}}, "synth"),
])
def test_validation_names_the_key(raw, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(raw)


def test_override_wins_and_none_is_ignored():
    cfg = config_from_dict({"train": {"seed": 1, "epochs": 5}})
    cfg = override(cfg, "train", seed=7, epochs=None)
    assert cfg.train.seed == 7 and cfg.train.epochs == 5


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.yaml")


def test_bad_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")
