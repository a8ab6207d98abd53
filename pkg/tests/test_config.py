import json

import pytest

from musekd.config import ConfigError, fingerprint, parse_config
from musekd.nn import BackboneSpec


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture
def data_section(tmp_path):
    names = ["tr-img", "tr-lab", "te-img", "te-lab"]
    for n in names:
        (tmp_path / n).write_bytes(b"")
    return {"format": "idx", "train_images": "tr-img", "train_labels": "tr-lab",
            "test_images": "te-img", "test_labels": "te-lab"}


def test_minimal_config_fills_defaults(tmp_path, data_section):
    cfg = parse_config(write(tmp_path, {"mode": "self", "seed": 0, "output_dir": "out", "data": data_section}))
    assert cfg.objective.lambda_muse == 1.0 and cfg.objective.kd_temperature == 4.0
    assert cfg.objective.muse_variant == "additive"
    assert cfg.schedule.total_epochs == 20 and cfg.train.batch_size == 64
    assert cfg.output_dir == str(tmp_path / "out")  # relative to the config file
    assert cfg.data.train_images == str(tmp_path / "tr-img")
    assert cfg.run_id == "self"


def test_unknown_key_named(tmp_path, data_section):
    doc = {"mode": "self", "seed": 0, "output_dir": "o", "data": data_section,
           "objective": {"lamda_muse": 1.0}}
    with pytest.raises(ConfigError, match="lamda_muse"):
        parse_config(write(tmp_path, doc))
    with pytest.raises(ConfigError, match="epochs"):
        parse_config(write(tmp_path, {"mode": "count", "seed": 0, "epochs": 3}))


def test_negative_lambda_rejected(tmp_path):
    with pytest.raises(ConfigError, match="lambda_muse"):
        parse_config(write(tmp_path, {"mode": "count", "seed": 0, "objective": {"lambda_muse": -1}}))


@pytest.mark.parametrize(
    "doc,needle",
    [
        ({"mode": "self"}, "seed"),
        ({"seed": 1}, "mode"),
        ({"mode": "sideways", "seed": 1}, "mode"),
        ({"mode": "count", "seed": "1"}, "seed"),
        ({"mode": "count", "seed": 1, "train": {"batch_size": 3.5}}, "batch_size"),
        ({"mode": "count", "seed": 1, "objective": {"use_ce_heads": 1}}, "use_ce_heads"),
        ({"mode": "count", "seed": 1, "backbone": {"architecture": "vgg"}}, "architecture"),
        ({"mode": "count", "seed": 1, "schedule": {"milestones": [30]}}, "milestones"),
        ({"mode": "count", "seed": 1, "train": {"momentum": 0.5}}, "momentum"),
        ({"mode": "self", "seed": 1}, "output_dir"),
        ({"mode": "offline", "seed": 1, "output_dir": "o"}, "teacher"),
        ({"mode": "count", "seed": 1, "backbone": []}, "backbone"),
    ],
)
def test_schema_violations(tmp_path, doc, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(write(tmp_path, doc))


def test_missing_paths_rejected(tmp_path):
    doc = {"mode": "self", "seed": 0, "output_dir": "o",
           "data": {"train_images": "nope", "train_labels": "nope", "test_images": "nope", "test_labels": "nope"}}
    with pytest.raises(ConfigError, match="do not exist"):
        parse_config(write(tmp_path, doc))


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError):
        parse_config(tmp_path / "absent.json")


def test_invalid_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{mode: self")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(p)


def test_optim_section_feeds_settings(tmp_path):
    cfg = parse_config(write(tmp_path, {"mode": "count", "seed": 0, "optim": {"momentum": 0.5, "weight_decay": 0.0}}))
    s = cfg.settings()
    assert (s.momentum, s.weight_decay) == (0.5, 0.0)


def test_fingerprint_tracks_architecture():
    a = BackboneSpec("small-cnn-4", 10, in_channels=1, input_size=28)
    assert fingerprint(a) == fingerprint(BackboneSpec("small-cnn-4", 10, [1, 2, 3], 1, 28))
    assert len(fingerprint(a)) == 32
    assert fingerprint(a) != fingerprint(BackboneSpec("small-cnn-4", 11, in_channels=1, input_size=28))
    assert fingerprint(a) != fingerprint(BackboneSpec("small-cnn-4", 10, [2], in_channels=1, input_size=28))
