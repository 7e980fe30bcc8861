import json

import pytest

from gsvr.config import (GROUPS, ConfigError, ReconConfig, dump_config, from_dict,
                         load_config_dict, parse_config, preset_dict, to_dict)


def test_defaults_validate():
    cfg = from_dict({})
    assert isinstance(cfg, ReconConfig)
    assert [s.resolution for s in cfg.stages] == [2, 1]
    assert cfg.total_iterations == 6000
    assert len(GROUPS) == 6


@pytest.mark.parametrize("name", ["desk", "full"])
def test_presets_load(name):
    cfg = parse_config(preset=name)
    assert cfg.stages[-1].resolution == 1


def test_round_trip_through_yaml(tmp_path):
    cfg = parse_config(preset="desk", overrides={"seed": 7})
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    again = parse_config(p)
    assert to_dict(again) == to_dict(cfg)


def test_run_log_config_record(tmp_path):
    cfg = parse_config(preset="desk")
    p = tmp_path / "run.jsonl"
    p.write_text(json.dumps({"event": "config", "config": to_dict(cfg)}) + "\n"
                 + json.dumps({"event": "iter"}) + "\n")
    assert from_dict(load_config_dict(p)) == cfg
    q = tmp_path / "empty.jsonl"
    q.write_text(json.dumps({"event": "iter"}) + "\n")
    with pytest.raises(ConfigError):
        load_config_dict(q)


@pytest.mark.parametrize("data, path", [
    ({"loss": {"lambda1": -0.1}}, "loss.lambda1"),
    ({"loss": {"lambdaa": 1}}, "loss.lambdaa"),
    ({"bogus": 1}, "bogus"),
    ({"stages": [{"resolution": 1}, {"resolution": 2}]}, "stages[1].resolution"),
    ({"stages": [{"lr": {"mean": 0.1}}]}, "stages[0].lr.mean"),
    ({"psf": {"samples": [1, 2, 1]}}, "psf.samples"),
    ({"lr": {"scale": "fast"}}, "lr.scale"),
    ({"threads": 0}, "threads"),
    ({"stages": []}, "stages"),
    ({"gaussians": {"scale_min": 5, "scale_max": 1}}, "gaussians.scale_min"),
])
def test_invalid_values_name_their_field(data, path):
    with pytest.raises(ConfigError) as info:
        from_dict(data)
    assert info.value.path == path


def test_unknown_preset_and_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        preset_dict("nope")
    p = tmp_path / "bad.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        parse_config(p)
    p.write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        parse_config(p)


def test_overrides_merge_deeply():
    cfg = parse_config(preset="desk", overrides={"loss": {"lambda2": 0.5}})
    base = parse_config(preset="desk")
    assert cfg.loss.lambda2 == 0.5
    assert cfg.loss.lambda1 == base.loss.lambda1
