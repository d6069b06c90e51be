import json

import pytest

from dpm.config import ConfigError, RunConfig
from dpm.trainer import lr_schedule


def test_stated_hyperparameter_defaults():
    cfg = RunConfig().validate()
    assert (cfg.loss.alpha, cfg.loss.beta) == (0.5, 0.1)
    assert (cfg.loss.scale_s, cfg.loss.margin_m) == (30.0, 0.5)
    assert cfg.encoder.lambda_cam == 3.0
    assert (cfg.train.ids_per_batch, cfg.train.instances_per_id, cfg.train.batch_size) == (4, 16, 64)
    assert cfg.train.base_lr == 0.008
    assert lr_schedule(cfg.train.iterations // 2, cfg.train.iterations, cfg.train.base_lr) == pytest.approx(0.004)


def test_design_defaults():
    cfg = RunConfig()
    assert cfg.loss.branch_losses == "SA" and cfg.loss.triplet_margin == 0.3
    assert (cfg.train.momentum, cfg.train.weight_decay) == (0.9, 1e-4)
    assert cfg.hmg.hmg_gate == [2, 4, 10, 12] and cfg.hmg.mask_variant == "Pn"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"alpah": 0.5})


@pytest.mark.parametrize("key,value", [("p_occ", 1.5), ("alpha", 2.0), ("heads", 0), ("branch_losses", "XY"),
                                       ("margin_m", 1.6), ("ids_per_batch", 1), ("hmg_gate", [0])])
def test_invalid_values_name_the_field(key, value):
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict({key: value})
    assert err.value.field == key


def test_type_checks():
    with pytest.raises(ConfigError, match="integer"):
        RunConfig.from_dict({"depth": 2.5})
    with pytest.raises(ConfigError, match="boolean"):
        RunConfig.from_dict({"exclude_same_camera": 1})
    assert RunConfig.from_dict({"alpha": 1}).loss.alpha == 1.0


def test_shared_keys_apply_to_every_section():
    cfg = RunConfig.from_dict({"image_h": 24, "patch": 4, "cameras": 2})
    assert cfg.encoder.image_h == cfg.data.image_h == 24
    assert cfg.encoder.cameras == cfg.data.cameras == 2


def test_round_trip(tmp_path):
    cfg = RunConfig().replace(alpha=0.7, hmg_gate=[12, 2], iterations=33, output_dir="x/y")
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg and back.hmg.hmg_gate == [2, 12]
    assert json.loads((tmp_path / "c.json").read_text()) == cfg.to_dict()


def test_bad_json_file(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "c.json")
    (tmp_path / "c.json").write_text("[1, 2]")
    with pytest.raises(ConfigError, match="object"):
        RunConfig.load(tmp_path / "c.json")
