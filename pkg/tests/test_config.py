import pytest

from vrb.config import TrainConfig, dump_config, flat_items, from_dict, load_config, to_dict, with_overrides
from vrb.errors import ConfigurationError


class TestDefaults:
    def test_hyperparameter_table(self):
        cfg = TrainConfig()
        assert cfg.vrb.phi == 0.001 and cfg.vrb.i_c == 0.5
        assert cfg.policy_lr == 1e-4 and cfg.value_lr == 1e-4 and cfg.estimator_lr == 1e-4
        assert cfg.ppo.epsilon_clip == 0.02 and cfg.ppo.lam == 0.95
        assert cfg.ppo.gamma == 0.99 == cfg.vrb.gamma
        assert cfg.iterations == 300 and cfg.sessions_per_iteration == 16

    def test_variant_validated(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(variant="gail")


class TestOverrides:
    def test_nested_keys(self):
        cfg = with_overrides(TrainConfig(), {"vrb.phi": "0.01", "ppo.epochs_per_batch": 2, "vrb.adaptive_phi": "true"})
        assert cfg.vrb.phi == 0.01 and cfg.ppo.epochs_per_batch == 2 and cfg.vrb.adaptive_phi is True

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="vrb.phii"):
            with_overrides(TrainConfig(), {"vrb.phii": 1.0})

    @pytest.mark.parametrize("key,value", [("iterations", "many"), ("vrb.phi", "x"), ("absorbing_padding", "maybe")])
    def test_bad_values(self, key, value):
        with pytest.raises(ConfigurationError):
            with_overrides(TrainConfig(), {key: value})

    def test_invalid_range_surfaces_as_configuration_error(self):
        with pytest.raises(ConfigurationError):
            with_overrides(TrainConfig(), {"vrb.gamma": 1.5})

    def test_tuple_from_text(self):
        cfg = with_overrides(TrainConfig(), {"nets.policy_hidden": "32, 16"})
        assert cfg.nets.policy_hidden == (32, 16)


class TestFiles:
    def test_dotted_keys(self, tmp_path):
        p = tmp_path / "cfg.toml"
        p.write_text('seed = 3\nvrb.phi = 0.25\n[ppo]\nlam = 0.9\n[env.goal]\nmax_domains = 1\n')
        cfg = load_config(p)
        assert cfg.seed == 3 and cfg.vrb.phi == 0.25 and cfg.ppo.lam == 0.9 and cfg.env.goal.max_domains == 1

    def test_dump_round_trip(self, tmp_path):
        cfg = with_overrides(TrainConfig(), {"vrb.phi": 0.1 + 0.2, "nets.head_hidden": (7, 3), "env.schema_path": 'a"b'})
        p = tmp_path / "cfg.toml"
        p.write_text(dump_config(cfg))
        assert load_config(p) == cfg

    def test_dict_round_trip(self):
        cfg = with_overrides(TrainConfig(), {"seed": 9, "ppo.minibatch_size": 8})
        assert from_dict(to_dict(cfg)) == cfg
        assert set(flat_items(cfg)) == set(flat_items(TrainConfig()))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="absent.toml"):
            load_config(tmp_path / "absent.toml")

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("vrb.phi = = 1\n")
        with pytest.raises(ConfigurationError):
            load_config(p)
