from action_timelines import *
import itertools
import math
import pytest
import torch


def test_scale_signal_fixture():
    sp = scale_signal(TemporalProposal(0.25, 0.75), 0.5)
    assert sp.tolist() == [-0.25, 0.25]
    assert scale_signal(torch.tensor([0.0, 1.0]), 2.0).tolist() == [-2.0, 2.0]


def test_unscale_inverts_scale():
    g = torch.Generator().manual_seed(1)
    pairs = torch.sort(torch.rand((50, 2), generator=g, dtype=torch.float64), dim=-1).values
    for scale in (0.1, 0.5, 1.0, 2.0):
        assert torch.allclose(unscale_signal(scale_signal(pairs, scale), scale), pairs, atol=1e-12)


def test_unscale_clamps_and_orders():
    out = unscale_signal(torch.tensor([[0.9, -0.9], [0.1, 0.2]], dtype=torch.float64), 0.5)
    assert out[0].tolist() == [0.0, 1.0]
    assert out[1].tolist() == pytest.approx([0.6, 0.7])


def test_scale_must_be_positive():
    with pytest.raises(InvalidValueError):
        scale_signal(torch.zeros(2), 0.0)
    with pytest.raises(InvalidValueError):
        unscale_signal(torch.zeros(2), -1.0)


def test_to_proposals():
    proposals = to_proposals(torch.tensor([[0.1, 0.2], [0.3, 0.9]]))
    assert len(proposals) == 2
    assert proposals[1].end == pytest.approx(0.9)


def test_sinusoid_fixture():
    x = torch.tensor([0.25], dtype=torch.float64)
    features = sinusoid(x, 4)
    # frequencies 2π and 2π/100
    assert features[0, 0].item() == pytest.approx(math.sin(2 * math.pi * 0.25))
    assert features[0, 1].item() == pytest.approx(math.cos(2 * math.pi * 0.25), abs=1e-12)
    assert features[0, 2].item() == pytest.approx(math.sin(2 * math.pi * 0.25 / 100))


def test_sinusoidal_embed_shape_and_range():
    sp = torch.randn((7, 2), generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    emb = sinusoidal_embed(sp, 16)
    assert emb.shape == (7, 16)
    assert bool((emb.abs() <= 1).all())
    assert torch.equal(emb[:, :8], sinusoid(sp[:, 0], 8))
    assert torch.equal(emb[:, 8:], sinusoid(sp[:, 1], 8))


def test_sinusoidal_embed_errors():
    with pytest.raises(InvalidValueError):
        sinusoidal_embed(torch.zeros((1, 2)), 6 + 1)
    with pytest.raises(InvalidValueError):
        sinusoidal_embed(torch.zeros((1, 2)), 2)
    with pytest.raises(ShapeMismatchError):
        sinusoidal_embed(torch.zeros((1, 3)), 8)


def test_sinusoidal_embed_distinguishes_nearby_proposals():
    a = sinusoidal_embed(torch.tensor([[-0.25, 0.25]], dtype=torch.float64), 64)
    b = sinusoidal_embed(torch.tensor([[-0.24, 0.25]], dtype=torch.float64), 64)
    assert not torch.equal(a, b)


def test_timestep_embedding():
    emb = timestep_embedding(torch.tensor([0, 10, 500]), 8)
    assert emb.shape == (3, 8)
    assert emb[0, :4].tolist() == [0.0] * 4
    assert emb[0, 4:].tolist() == [1.0] * 4
    assert timestep_embedding(3, 7).shape == (7,)


def test_project_queries():
    torch.manual_seed(0)
    projection = QueryProjection(8, 16)
    signals = torch.zeros((5, 2))
    queries = project_queries(signals, projection, timestep=12)
    assert queries.embeddings.shape == (5, 16)
    assert len(queries) == 5
    assert queries.timestep == 12
    assert queries.proposals(0.5).tolist() == [[0.5, 0.5]] * 5
    with pytest.raises(ShapeMismatchError):
        project_queries(torch.zeros((5, 3)), projection)


def test_sinusoidal_embed_of_origin_alternates():
    emb = sinusoidal_embed(torch.zeros((1, 2), dtype=torch.float64), 12)
    assert emb[0].tolist() == [0.0, 1.0] * 6


def test_projection_features_use_position_resolution():
    projection = QueryProjection(8, 16)
    signals = torch.tensor([[-0.1, 0.2]])
    assert torch.allclose(projection.features(signals), sinusoidal_embed(signals * POSITION_RESOLUTION, 8))
    coarse = QueryProjection(8, 16, resolution=1.0)
    assert torch.allclose(coarse.features(signals), sinusoidal_embed(signals, 8))


def test_identity_output_layer_exposes_hidden_activations():
    torch.manual_seed(3)
    projection = QueryProjection(8, 16).double()
    with torch.no_grad():
        projection.output.weight.copy_(torch.eye(16, dtype=torch.float64))
        projection.output.bias.zero_()
    signals = torch.rand((5, 2), dtype=torch.float64) - 0.5
    hidden = projection.activation(projection.hidden(projection.features(signals)))
    assert torch.allclose(project_queries(signals, projection).embeddings, hidden, atol=1e-12)


def test_project_queries_gradient_matches_finite_differences():
    torch.manual_seed(4)
    projection = QueryProjection(8, 16).double()
    signals = (torch.rand((3, 2), dtype=torch.float64) - 0.5).requires_grad_(True)
    weights = torch.randn((3, 16), dtype=torch.float64)

    def objective(x):
        return (project_queries(x, projection).embeddings * weights).sum()

    objective(signals).backward()
    analytic = signals.grad.clone()
    numeric = torch.zeros_like(analytic)
    h = 1e-6
    with torch.no_grad():
        for index in itertools.product(range(3), range(2)):
            step = torch.zeros_like(signals)
            step[index] = h
            numeric[index] = (objective(signals + step) - objective(signals - step)) / (2 * h)
    assert float((analytic - numeric).norm() / numeric.norm()) < 1e-4
