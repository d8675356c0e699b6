from action_timelines import *
import pytest


TINY = dict(feat_dim=3, model_dim=8, query_embed_dim=8, ffn_dim=16, n_layers=1, n_heads=2, n_scales=2, num_classes=2)


def tiny_setup():
    config = RunConfig(seed=1)
    config.model = ModelConfig(**TINY, fusion="rgb")
    config.schedule.total_steps = 20
    config.train = TrainConfig(epochs=1, batch_size=2, num_proposals=6, top_k=2)
    config.sample.steps = 2
    config.sample.num_proposals = 6
    config.eval.thresholds = [0.3, 0.5]
    dataset = generate_synthetic(SyntheticSpec(num_videos=2, num_snippets=16, feature_dim=3, num_classes=2, seed=0))
    return config.validate(), dataset


def test_decomposition_rows():
    config, dataset = tiny_setup()
    table = run_ablation("decomposition", config, dataset)
    assert [(r.setting["ID"], r.setting["SC"]) for r in table.rows] == [
        ("off", "off"),
        ("off", "on"),
        ("on", "off"),
        ("on", "on"),
    ]
    assert all(0.0 <= r.average_map <= 1.0 for r in table.rows)
    assert all(list(r.maps) == [0.3, 0.5] for r in table.rows)


def test_nms_table_text():
    config, dataset = tiny_setup()
    table = run_ablation("nms", config, dataset)
    text = table.to_text()
    assert text.startswith("# ablation: nms\n")
    assert "on@0.50" in text
    assert len(text.splitlines()) == 4


def test_unknown_ablation():
    config, dataset = tiny_setup()
    with pytest.raises(ConfigError):
        run_ablation("everything", config, dataset)


def test_empty_table():
    assert AblationTable("x").to_text() == "x: no rows\n"
