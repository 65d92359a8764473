"""Config schema: parsing, overrides, validation, hashing."""

import json

import pytest

from dreamstack.config import (Config, ConfigError, apply_overrides,
                               build_env, config_hash, from_dict, from_file,
                               parse_override, to_dict)
from dreamstack.envs import ConstantImageEnv, DodgeWorld, ResizeAdapter


class TestFromDict:
    def test_empty_dict_gives_defaults(self):
        cfg = from_dict({})
        assert cfg == Config()
        assert cfg.model.layers == 2
        assert cfg.train.lr == pytest.approx(4e-5)
        assert cfg.run.synchronous is True

    def test_partial_sections_merge_with_defaults(self):
        cfg = from_dict({"model": {"layers": 3}, "run": {"seed": 7}})
        assert cfg.model.layers == 3
        assert cfg.run.seed == 7
        assert cfg.model.h_size == 256  # untouched default

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown config key: nets"):
            from_dict({"nets": {}})

    def test_unknown_nested_key_reports_dotted_path(self):
        with pytest.raises(ConfigError,
                           match="unknown config key: model.depth"):
            from_dict({"model": {"depth": 4}})

    def test_section_must_be_object(self):
        with pytest.raises(ConfigError, match="model must be an object"):
            from_dict({"model": 3})
        with pytest.raises(ConfigError, match="root must be an object"):
            from_dict([1, 2])

    def test_type_checking(self):
        with pytest.raises(ConfigError, match="model.layers expects int"):
            from_dict({"model": {"layers": "two"}})
        with pytest.raises(ConfigError, match="expects bool"):
            from_dict({"model": {"use_hints": 1}})
        with pytest.raises(ConfigError, match="env.grid expects int"):
            from_dict({"env": {"grid": True}})  # bools are not ints here

    def test_integral_floats_coerce_to_int(self):
        cfg = from_dict({"model": {"layers": 3.0}})
        assert cfg.model.layers == 3
        assert isinstance(cfg.model.layers, int)
        with pytest.raises(ConfigError):
            from_dict({"model": {"layers": 2.5}})

    def test_floats_accept_ints(self):
        cfg = from_dict({"train": {"lr": 1}})
        assert cfg.train.lr == 1.0


class TestValidation:
    def test_env_validation(self):
        with pytest.raises(ConfigError, match="unknown env name"):
            from_dict({"env": {"name": "atari"}})
        with pytest.raises(ConfigError, match="parallel"):
            from_dict({"env": {"parallel": 0}})

    def test_train_validation(self):
        with pytest.raises(ConfigError, match="train_ratio"):
            from_dict({"train": {"train_ratio": 0}})
        with pytest.raises(ConfigError, match="prefill"):
            from_dict({"train": {"prefill": 4, "batch_length": 8}})
        with pytest.raises(ConfigError, match="discount"):
            from_dict({"train": {"discount": 1.5}})

    def test_run_validation(self):
        with pytest.raises(ConfigError, match="steps"):
            from_dict({"run": {"steps": 0}})
        with pytest.raises(ConfigError, match="log_every"):
            from_dict({"run": {"log_every": 0}})

    def test_model_ablation_rules_surface(self):
        with pytest.raises(ValueError):
            from_dict({"model": {"only_residual_hints": True,
                                 "no_residual": True}})
        with pytest.raises(ValueError):
            from_dict({"model": {"dreamer_plus_rollout": True}})  # layers=2


class TestOverrides:
    def test_parse_json_literals(self):
        assert parse_override("model.layers=3") == ("model.layers", 3)
        assert parse_override("train.lr=1e-4") == ("train.lr", 1e-4)
        assert parse_override("model.use_hints=false") == \
            ("model.use_hints", False)
        assert parse_override('env.name="constant"') == ("env.name",
                                                         "constant")

    def test_bare_strings_allowed(self):
        assert parse_override("env.name=constant") == ("env.name", "constant")
        assert parse_override("run.logdir=runs/x") == ("run.logdir", "runs/x")

    def test_parse_errors(self):
        with pytest.raises(ConfigError):
            parse_override("model.layers")
        with pytest.raises(ConfigError):
            parse_override("=3")

    def test_apply_is_pure_and_nested(self):
        base = {"model": {"layers": 2}}
        out = apply_overrides(base, ["model.layers=4", "run.seed=9"])
        assert out == {"model": {"layers": 4}, "run": {"seed": 9}}
        assert base == {"model": {"layers": 2}}  # untouched

    def test_apply_rejects_crossing_leaves(self):
        with pytest.raises(ConfigError, match="crosses a leaf"):
            apply_overrides({"model": {"layers": 2}},
                            ["model.layers.deep=1"])

    def test_overridden_unknown_key_caught_at_parse(self):
        data = apply_overrides({}, ["model.bogus=1"])
        with pytest.raises(ConfigError, match="model.bogus"):
            from_dict(data)


class TestSerialization:
    def test_round_trip_through_file(self, tmp_path):
        cfg = from_dict({"model": {"layers": 3, "h_size": 64},
                         "run": {"seed": 5}})
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(to_dict(cfg)))
        again = from_file(path)
        assert again == cfg

    def test_from_file_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            from_file(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            from_file(bad)

    def test_hash_is_stable_and_sensitive(self):
        a = config_hash(from_dict({}))
        b = config_hash(from_dict({}))
        c = config_hash(from_dict({"model": {"layers": 3}}))
        assert a == b
        assert a != c
        assert len(a) == 64 and int(a, 16) >= 0

    def test_shipped_config_files_parse(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        desk = from_file(root / "desk.json")
        assert desk.model.layers == 2
        full = from_file(root / "full_50Mx2.json")
        assert full.run.steps == 50_000_000
        assert full.model.h_size > desk.model.h_size


class TestHierarchyConfigBridge:
    def test_fields_carried_over(self):
        cfg = from_dict({"model": {"layers": 3, "foresight_frames": 8},
                         "env": {"image_size": 64}})
        hc = cfg.hierarchy_config(action_dim=4)
        assert hc.layers == 3
        assert hc.foresight_frames == 8
        assert hc.image_size == 64
        assert hc.action_dim == 4


class TestBuildEnv:
    def test_dodgeworld_native_resolution(self):
        cfg = from_dict({"env": {"grid": 16, "cell_px": 2,
                                 "image_size": 32}})
        env = build_env(cfg, seed=0)
        assert isinstance(env, DodgeWorld)
        assert env.reset(seed=0).image.shape == (32, 32, 3)

    def test_dodgeworld_resized_when_mismatched(self):
        cfg = from_dict({"env": {"grid": 16, "cell_px": 1,
                                 "image_size": 64}})
        env = build_env(cfg, seed=0)
        assert isinstance(env, ResizeAdapter)
        assert env.reset(seed=0).image.shape == (64, 64, 3)

    def test_constant_env(self):
        cfg = from_dict({"env": {"name": "constant", "constant_value": 7,
                                 "image_size": 16, "max_steps": 3}})
        env = build_env(cfg)
        assert isinstance(env, ConstantImageEnv)
        step = env.reset()
        assert step.image.shape == (16, 16, 3)
        assert (step.image == 7).all()
