"""Config parsing, serialization, defaults, and validation."""

import dataclasses

import numpy as np
import pytest

from cbctnet.config import TrainConfig, load_config, parse_config_text, serialize_config


def test_protocol_defaults():
    cfg = TrainConfig()
    assert cfg.lr == 1e-3
    assert cfg.beta1 == 0.9
    assert cfg.beta2 == 0.999
    assert cfg.epochs == 151
    assert cfg.effective_batch == 16
    assert cfg.model == "pdunet"
    assert cfg.sparse_factor == 8
    assert cfg.precision == "f32"


def test_serialize_round_trip():
    cfg = dataclasses.replace(TrainConfig(), lr=3.25e-4, grid_nx=48, augment=False,
                              model="pdnet", scale_max=1.07)
    text = serialize_config(cfg)
    assert parse_config_text(text) == cfg


def test_serialized_defaults_contain_protocol_lines():
    text = serialize_config(TrainConfig())
    for line in ("lr = 0.001", "beta1 = 0.9", "beta2 = 0.999",
                 "epochs = 151", "effective_batch = 16"):
        assert line in text.splitlines(), f"missing {line!r}"


def test_parse_skips_comments_and_blanks():
    cfg = parse_config_text("# a comment\n\nlr = 0.01\n  # indented comment\nepochs = 3\n")
    assert cfg.lr == 0.01
    assert cfg.epochs == 3


def test_parse_unknown_key_reports_line():
    with pytest.raises(ValueError, match="line 3"):
        parse_config_text("lr = 0.01\n\nwarp_speed = 9\n")


def test_parse_duplicate_key_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        parse_config_text("lr = 0.01\nlr = 0.02\n")


def test_parse_bad_value_reports_line():
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("epochs = soon\n")
    with pytest.raises(ValueError, match="line 2"):
        parse_config_text("lr = 0.1\naugment = perhaps\n")


def test_parse_missing_equals():
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("lr 0.01\n")


def test_bool_values():
    assert parse_config_text("augment = true\n").augment is True
    assert parse_config_text("augment = false\n").augment is False


def test_load_config_from_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 5\nmodel = fdkconvnet\n")
    cfg = load_config(p)
    assert cfg.seed == 5
    assert cfg.model == "fdkconvnet"


def test_validate_catches_bad_settings():
    for kw in ({"lr": 0.0}, {"epochs": 0}, {"sparse_factor": 0},
               {"model": "resnet"}, {"precision": "f16"},
               {"hu_window_min": 3000.0}, {"effective_batch": 0},
               {"micro_batch": 0}, {"sid_mm": 500.0},
               {"scale_min": 1.2, "scale_max": 0.8}):
        cfg = dataclasses.replace(TrainConfig(), **kw)
        with pytest.raises(ValueError):
            cfg.validate()
    TrainConfig().validate()


def test_derived_objects():
    cfg = TrainConfig()
    full = cfg.full_geometry()
    assert full.n_views == 90
    sparse = cfg.sparse_geometry()
    assert sparse.n_views == 12  # 90 views, factor 8
    grid = cfg.grid()
    assert grid.shape == (32, 32, 32)
    assert cfg.dtype() == np.float32
    assert cfg.window() == (-1000.0, 2000.0)
    mc = cfg.model_config()
    assert mc.kind == "pdunet"
    assert mc.n_iterations == cfg.n_iterations


def test_augment_config_disabled_is_none():
    assert dataclasses.replace(TrainConfig(), augment=False).augment_config() is None
    ac = TrainConfig().augment_config()
    assert ac is not None and ac.flip and ac.rotate and ac.scale
