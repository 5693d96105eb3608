import json

import pytest

from triplay.config import (
    DEFAULT_DOMAINS,
    IterationConfig,
    RunConfig,
    config_from_dict,
    config_hash,
    deep_merge,
    load_config,
    resolve_run_dir,
    validate_config,
)
from triplay.errors import ConfigError


class TestDefaults:
    def test_iteration_defaults_pinned(self):
        it = IterationConfig()
        assert it.group_size == 8
        assert it.probe_rollouts == 10
        assert it.vote_trajectories == 9
        assert it.tau_txt == 0.5
        assert it.tau_vis == 0.1
        assert it.tau_low == 0.3
        assert it.tau_high == 0.8
        assert it.queries_per_iteration == 6000
        assert it.top_k == 5
        assert (it.searcher_steps, it.questioner_steps, it.solver_steps) == (10, 10, 30)
        assert it.cycles == 3
        assert it.reinit_each_cycle is False

    def test_world_defaults(self):
        cfg = RunConfig()
        assert cfg.world.count == 10000
        assert cfg.world.dim == 32
        assert cfg.grpo.eps_low == 0.2
        assert cfg.grpo.eps_high == 0.2
        assert cfg.judge.kind == "exact"
        assert len(DEFAULT_DOMAINS) == 4


class TestValidation:
    def test_inverted_window_message_names_both_bounds(self):
        cfg = RunConfig()
        cfg.iteration.tau_low = 0.9
        with pytest.raises(ConfigError) as exc:
            validate_config(cfg)
        assert "tau_low=0.9" in str(exc.value)
        assert "tau_high=0.8" in str(exc.value)

    def test_remote_mode_requires_backend_fields(self):
        with pytest.raises(ConfigError, match="endpoint"):
            config_from_dict({"mode": "remote", "manifest_path": "x.jsonl"})

    def test_remote_mode_requires_manifest(self):
        data = {
            "mode": "remote",
            "backend": {
                "endpoint": "https://x/chat",
                "model": "m",
                "embedding_endpoint": "https://x/embed",
                "embedding_model": "e",
            },
        }
        with pytest.raises(ConfigError, match="manifest_path"):
            config_from_dict(data)

    def test_group_size_floor(self):
        with pytest.raises(ConfigError, match="group_size"):
            config_from_dict({"iteration": {"group_size": 1}})

    def test_unknown_section_key(self):
        with pytest.raises(ConfigError, match="tau_mid"):
            config_from_dict({"iteration": {"tau_mid": 0.5}})

    def test_bad_penalty_scope(self):
        with pytest.raises(ConfigError, match="penalty_scope"):
            config_from_dict({"iteration": {"penalty_scope": "global"}})


class TestLoadingAndHash:
    def test_overrides_win(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 1, "iteration": {"group_size": 4}}))
        cfg = load_config(path, {"seed": 9})
        assert cfg.seed == 9
        assert cfg.iteration.group_size == 4

    def test_deep_merge_nested(self):
        merged = deep_merge(
            {"iteration": {"group_size": 4, "top_k": 5}},
            {"iteration": {"top_k": 3}},
        )
        assert merged == {"iteration": {"group_size": 4, "top_k": 3}}

    def test_domains_from_dicts(self):
        cfg = config_from_dict(
            {
                "iteration": {
                    "domains": [{"category": "charts", "exemplar": "a bar chart"}]
                },
                "world": {"dim": 8},
            }
        )
        assert cfg.iteration.domains[0].category == "charts"

    def test_hash_stable_and_sensitive(self):
        a = RunConfig(seed=1)
        b = RunConfig(seed=1)
        c = RunConfig(seed=2)
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)

    def test_run_dir_naming(self):
        cfg = RunConfig(seed=3)
        path = resolve_run_dir(cfg)
        assert path.name == f"{config_hash(cfg)}-seed3"
        cfg.run_dir = "explicit/dir"
        assert str(resolve_run_dir(cfg)) == "explicit/dir"
