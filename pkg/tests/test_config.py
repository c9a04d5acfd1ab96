import pytest

from dstgraph.config import ConfigError, ExperimentConfig, load_config, parse_config_text


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.data_lookback == 336 and cfg.train_lr == 0.0001
    assert cfg.train_batch_size == 32 and cfg.graph_k == 3
    assert "graph.k" in ExperimentConfig.keys()


def test_text_round_trip(tmp_path):
    cfg = ExperimentConfig().override({"graph.k": "1", "ablation.use_spatial": "false", "train.lr": "0.01"})
    path = tmp_path / "c.cfg"
    path.write_text(cfg.to_text())
    back = load_config(path)
    assert back == cfg
    assert back.hash() == cfg.hash()
    assert back.graph_k == 1 and back.ablation_use_spatial is False


def test_hash_changes_with_values():
    assert ExperimentConfig().hash() != ExperimentConfig().override({"graph.k": 2}).hash()
    assert len(ExperimentConfig().hash()) == 16


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig().override({"graph.kk": "1"})
    path = tmp_path / "c.cfg"
    path.write_text("model.tcn_layer = 4\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_parse_errors():
    with pytest.raises(ConfigError):
        parse_config_text("graph.k 3\n")
    with pytest.raises(ConfigError):
        ExperimentConfig().override({"graph.k": "three"})
    with pytest.raises(ConfigError):
        ExperimentConfig().override({"eval.setting": "XYZ"})


def test_comments_and_blank_lines():
    assert parse_config_text("# header\n\ngraph.k = 2  # inline\n") == {"graph.k": "2"}


def test_seed_and_channel_lists():
    cfg = ExperimentConfig().override({"train.seeds": "0, 1,2", "data.channels": "a,b"})
    assert cfg.seeds == [0, 1, 2]
    assert cfg.channel_list == ["a", "b"]
    assert ExperimentConfig(data_path="/x/electricity.csv").dataset_name == "electricity"
