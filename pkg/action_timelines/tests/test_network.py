from action_timelines import *
import pytest
import torch


TINY = dict(feat_dim=3, model_dim=8, query_embed_dim=8, ffn_dim=16, n_layers=1, n_heads=2, n_scales=2, num_classes=2)


def small_model(seed=0, **overrides):
    config = ModelConfig(**{**TINY, "fusion": "rgb", **overrides})
    torch.manual_seed(seed)
    return DenoiserModel(config)


def test_model_config_validation():
    with pytest.raises(InvalidValueError):
        ModelConfig(model_dim=10, n_heads=3).validate()
    with pytest.raises(InvalidValueError):
        ModelConfig(fusion="middle").validate()
    with pytest.raises(InvalidValueError):
        ModelConfig(query_embed_dim=5).validate()


def test_encoder_scale_lengths():
    torch.manual_seed(0)
    model = DenoiserModel(ModelConfig(feat_dim=32, model_dim=64, n_scales=3))
    out = model.encode_video(torch.randn(96, 32))
    assert out.features.shape == (1, 168, 64)
    assert out.bounds == [(0, 96), (96, 144), (144, 168)]
    assert out.scale_features(2).shape == (1, 24, 64)
    assert out.num_scales == 3


def test_encoder_is_position_aware():
    model = small_model()
    features = torch.randn(12, 3, generator=torch.Generator().manual_seed(4))
    swapped = features.clone()
    swapped[[2, 7]] = features[[7, 2]]
    with torch.no_grad():
        a = model.encode_video(features).features
        b = model.encode_video(swapped).features
    assert not torch.allclose(a, b)


def test_zero_input_gives_positional_response():
    model = small_model()
    with torch.no_grad():
        for stem in model.encoder.stems:
            stem.weight.zero_()
            stem.bias.zero_()
        out = model.encode_video(torch.zeros(8, 3))
        pe = temporal_position_encoding(8, 8, model.config.scale)
        expected = model.encoder.block(pe.unsqueeze(0))
    assert torch.allclose(out.scale_features(0), expected, atol=1e-6)


def test_encoder_rejects_empty_and_wrong_dim():
    model = small_model()
    with pytest.raises(ShapeMismatchError):
        model.encode_video(torch.zeros(0, 3))
    with pytest.raises(ShapeMismatchError):
        model.encode_video(torch.zeros(5, 4))


def test_decode_shapes_and_determinism():
    model = small_model()
    cond = model.encode_video(torch.randn(10, 3))
    queries = model.project_queries(torch.randn(6, 2) * 0.3).embeddings
    with torch.no_grad():
        a = model.decode(queries, cond, 17)
        b = model.decode(queries, cond, 17)
    assert a.shape == (6, 8)
    assert torch.equal(a, b)
    with pytest.raises(ShapeMismatchError):
        model.decode(queries[:0], cond, 17)


def test_zero_self_condition_adds_nothing():
    model = small_model()
    cond = model.encode_video(torch.randn(10, 3))
    queries = model.project_queries(torch.randn(6, 2) * 0.3).embeddings
    with torch.no_grad():
        plain = model.decode(queries, cond, 5)
        zeroed = model.decode(queries, cond, 5, torch.zeros(6, 2))
    assert torch.equal(plain, zeroed)


def test_heads_invariants():
    model = small_model()
    cond = model.encode_video(torch.randn(10, 3))
    with torch.no_grad():
        heads = model(torch.randn(20, 2), cond, 100)
    probs = heads.class_probs
    assert probs.shape == (20, 3)
    assert torch.allclose(probs.sum(dim=-1), torch.ones(20), atol=1e-6)
    assert bool(((heads.predicted_iou >= 0) & (heads.predicted_iou <= 1)).all())
    assert bool(((heads.completeness >= 0) & (heads.completeness <= 1)).all())
    for result in heads.results():
        assert sum(result.class_distribution) == pytest.approx(1.0, abs=1e-6)
        p_bc = max(result.class_distribution[:-1])
        assert result.score == pytest.approx((p_bc + result.completeness) / 2)
        assert result.class_distribution[result.label] == p_bc
        assert 0.0 <= result.proposal.start <= result.proposal.end <= 1.0


def test_heads_offset_anchor_signals():
    model = small_model()
    decoded = torch.randn(4, 8)
    anchors = torch.tensor([[-0.3, 0.1], [0.0, 0.2], [0.25, 0.5], [-0.5, -0.4]])
    with torch.no_grad():
        free = model.apply_heads(decoded)
        anchored = model.apply_heads(decoded, anchors)
        assert torch.allclose(anchored.signals, anchors + free.signals)
        assert torch.equal(anchored.completeness, free.completeness)
        model.heads.localizer.weight.zero_()
        model.heads.localizer.bias.zero_()
        assert torch.equal(model.apply_heads(decoded, anchors).signals, anchors)
    with pytest.raises(ShapeMismatchError):
        model.apply_heads(decoded, anchors[:2])


@pytest.mark.parametrize("p_bc, p_c, expected", [(1.0, 1.0, 1.0), (0.0, 1.0, 0.5), (0.8, 0.6, 0.7)])
def test_fuse_scores(p_bc, p_c, expected):
    assert fuse_scores(p_bc, p_c) == pytest.approx(expected)


def test_fuse_scores_range():
    with pytest.raises(InvalidValueError):
        fuse_scores(1.2, 0.5)
    with pytest.raises(InvalidValueError):
        fuse_scores(0.5, -0.1)


def test_parameter_groups_cover_everything():
    model = small_model()
    groups = model.parameter_groups()
    assert set(groups) == {"encoder", "decoder", "heads", "projection", "timestep"}
    names = [name for group in groups.values() for name, _ in group]
    assert sorted(names) == sorted(name for name, _ in model.named_parameters())
    assert all(name.startswith("decoder.time_mlp") for name, _ in groups["timestep"])


def test_streamed_detector_fusion_modes():
    late = StreamedDetector.initialize(ModelConfig(**TINY, fusion="late"), 0)
    assert late.stream_names() == ["rgb", "flow"]
    early = StreamedDetector.initialize(ModelConfig(**TINY, fusion="early"), 0)
    assert early.stream_names() == ["early"]
    assert early.streams["early"].config.feat_dim == 6
    inputs = early.stream_inputs({"rgb": torch.zeros(5, 3), "flow": torch.ones(5, 3)})
    assert inputs["early"].shape == (5, 6)
    single = StreamedDetector.initialize(ModelConfig(**TINY, fusion="flow"), 0)
    assert single.required_modalities() == ("flow",)
    with pytest.raises(ShapeMismatchError):
        single.stream_inputs({"rgb": torch.zeros(5, 3)})


def test_initialize_depends_only_on_seed():
    config = ModelConfig(**TINY, fusion="rgb")
    a = StreamedDetector.initialize(config, 42)
    torch.manual_seed(999)
    b = StreamedDetector.initialize(config, 42)
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), name
