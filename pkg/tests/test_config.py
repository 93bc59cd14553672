import pytest

from fncgen.config import (
    Config,
    config_from_dict,
    default_config,
    load_config,
    load_config_snapshot,
    save_config_snapshot,
)
from fncgen.errors import ConfigError


def test_defaults_match_desk_scale():
    cfg = default_config()
    assert cfg.data.n_subjects == 400
    assert cfg.data.volume_dims == (32, 32, 32)
    assert cfg.data.fnc_order == 16
    assert cfg.model.patch_size == 8 and cfg.model.d_model == 64
    assert cfg.train.epochs == 300 and cfg.train.batch_size == 8
    assert cfg.train.lr == 1e-4 and cfg.train.milestones == (50, 150)
    assert cfg.train.cv_folds == 10
    assert (cfg.losses.lambda1, cfg.losses.lambda2, cfg.losses.lambda3) == (10.0, 0.5, 1.0)


def test_unknown_key_names_section_and_key():
    with pytest.raises(ConfigError, match=r"'epochz'.*'train'"):
        config_from_dict({"train": {"epochz": 5}})
    with pytest.raises(ConfigError, match="section"):
        config_from_dict({"optimizer": {}})


def test_section_must_be_object():
    with pytest.raises(ConfigError, match="object"):
        config_from_dict({"train": 5})


def test_validation_errors():
    with pytest.raises(ConfigError, match="epochs"):
        config_from_dict({"train": {"epochs": 0}})
    with pytest.raises(ConfigError, match="milestones"):
        config_from_dict({"train": {"milestones": [100, 50]}})
    with pytest.raises(ConfigError, match="gamma"):
        config_from_dict({"train": {"gamma": 0.0}})
    with pytest.raises(ConfigError, match="lambda3"):
        config_from_dict({"losses": {"lambda3": -1.0}})
    with pytest.raises(ConfigError, match="n_heads"):
        config_from_dict({"model": {"d_model": 30, "n_heads": 4}})


def test_round_trip_preserves_hash():
    cfg = config_from_dict({"train": {"epochs": 12, "milestones": [3, 7]},
                            "data": {"n_subjects": 20}})
    again = config_from_dict(cfg.to_dict())
    assert again == cfg
    assert again.hash() == cfg.hash()
    assert len(cfg.hash()) == 32


def test_hash_sensitivity():
    a = config_from_dict({"train": {"seed": 1}})
    b = config_from_dict({"train": {"seed": 2}})
    assert a.hash() != b.hash()


def test_effective_weights_gating():
    cfg = config_from_dict({"train": {"use_corr_loss": False}})
    w = cfg.effective_weights()
    assert w.lambda3 == 0.0 and w.lambda2 == 0.5 and w.lambda1 == 10.0
    cfg = config_from_dict({"train": {"use_perceptual_loss": False}})
    assert cfg.effective_weights().lambda2 == 0.0


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1,2]")
    with pytest.raises(ConfigError, match="object"):
        load_config(arr)
    assert isinstance(load_config(None), Config)


def test_snapshot_round_trip(tmp_path):
    cfg = config_from_dict({"train": {"epochs": 5, "seed": 3}})
    save_config_snapshot(cfg, tmp_path, meta={"data_dir": "/x", "cv_folds": 2})
    loaded, meta = load_config_snapshot(tmp_path)
    assert loaded == cfg
    assert meta["data_dir"] == "/x"
    # the snapshot itself parses as a plain config file
    assert load_config(tmp_path / "config.json") == cfg


def test_snapshot_without_meta(tmp_path):
    cfg = default_config()
    save_config_snapshot(cfg, tmp_path)
    loaded, meta = load_config_snapshot(tmp_path)
    assert loaded == cfg and meta == {}
