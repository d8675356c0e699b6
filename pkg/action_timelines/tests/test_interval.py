from action_timelines import *
import math
import pytest
import torch


def test_proposal_string():
    p0 = TemporalProposal(0.25, 0.5)
    assert str(p0) == "[0.2500, 0.5000]"
    assert repr(p0) == "TemporalProposal(0.25, 0.5)"


def test_proposal_swaps_reversed_bounds():
    p0 = TemporalProposal(0.8, 0.2)
    assert p0.start == 0.2
    assert p0.end == 0.8
    assert tuple(p0) == (0.2, 0.8)


def test_proposal_operators():
    p0 = TemporalProposal(0.1, 0.3)
    p1 = TemporalProposal(0.2, 0.3)
    assert p0 < p1
    assert p0 == TemporalProposal(0.3, 0.1)
    assert p0 != p1
    assert len({p0, TemporalProposal(0.1, 0.3)}) == 1


def test_proposal_rejects_nan():
    with pytest.raises(InvalidValueError):
        TemporalProposal(float("nan"), 0.5)


def test_seconds_round_trip():
    p0 = TemporalProposal.from_seconds(10.0, 30.0, 40.0)
    assert (p0.start, p0.end) == (0.25, 0.75)
    assert p0.to_seconds(40.0) == (10.0, 30.0)
    with pytest.raises(InvalidValueError):
        TemporalProposal.from_seconds(1.0, 2.0, 0.0)


def test_canonicalize():
    assert canonicalize((0.7, 0.2)) == TemporalProposal(0.2, 0.7)
    assert canonicalize((-0.5, 1.5)) == TemporalProposal(0.0, 1.0)
    with pytest.raises(InvalidValueError):
        canonicalize((0.1, math.inf))


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((0.0, 0.5), (0.25, 0.75), 1 / 3),
        ((0.0, 0.2), (0.5, 0.7), 0.0),
        ((0.1, 0.4), (0.1, 0.4), 1.0),
        ((0.0, 1.0), (0.25, 0.5), 0.25),
        ((0.3, 0.3), (0.3, 0.3), 0.0),
        ((0.2, 0.4), (0.4, 0.6), 0.0),
    ],
)
def test_iou_fixtures(a, b, expected):
    assert iou(TemporalProposal(*a), TemporalProposal(*b)) == pytest.approx(expected)
    assert iou(TemporalProposal(*b), TemporalProposal(*a)) == pytest.approx(expected)


def test_pairwise_iou_matches_scalar():
    g = torch.Generator().manual_seed(3)
    xs = [canonicalize(pair) for pair in torch.rand((5, 2), generator=g, dtype=torch.float64).tolist()]
    ys = [canonicalize(pair) for pair in torch.rand((4, 2), generator=g, dtype=torch.float64).tolist()]
    matrix = pairwise_iou(xs, ys)
    assert matrix.shape == (5, 4)
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            assert float(matrix[i, j]) == pytest.approx(iou(x, y), abs=1e-12)


def test_paired_iou():
    a = torch.tensor([[0.0, 0.5], [0.2, 0.4]], dtype=torch.float64)
    b = torch.tensor([[0.25, 0.75], [0.2, 0.4]], dtype=torch.float64)
    assert paired_iou(a, b).tolist() == pytest.approx([1 / 3, 1.0])
    with pytest.raises(ShapeMismatchError):
        paired_iou(a, b[:1])


def test_nms_keeps_best_of_overlapping():
    proposals = [TemporalProposal(0.0, 0.5), TemporalProposal(0.05, 0.5), TemporalProposal(0.6, 0.9)]
    keep = nms(proposals, [0.9, 0.8, 0.7], 0.5)
    assert keep == [0, 2]


def test_nms_threshold_one_keeps_everything():
    proposals = [TemporalProposal(0.1, 0.2)] * 3
    assert nms(proposals, [0.1, 0.3, 0.2], 1.0) == [1, 2, 0]


def test_nms_errors():
    with pytest.raises(ShapeMismatchError):
        nms([TemporalProposal(0, 1)], [0.1, 0.2], 0.5)
    with pytest.raises(InvalidValueError):
        nms([TemporalProposal(0, 1)], [float("nan")], 0.5)


def test_nms_kept_pairs_below_threshold():
    g = torch.Generator().manual_seed(11)
    proposals = [canonicalize(pair) for pair in torch.rand((40, 2), generator=g, dtype=torch.float64).tolist()]
    scores = torch.rand(40, generator=g, dtype=torch.float64).tolist()
    keep = nms(proposals, scores, 0.4)
    for i in keep:
        for j in keep:
            if i != j:
                assert iou(proposals[i], proposals[j]) <= 0.4


def test_nms_keeps_pairs_at_the_threshold():
    proposals = [TemporalProposal(0.0, 0.5), TemporalProposal(0.25, 0.75)]
    threshold = iou(proposals[0], proposals[1])
    assert nms(proposals, [0.9, 0.8], threshold) == [0, 1]
    assert nms(proposals, [0.9, 0.8], threshold - 1e-9) == [0]


def test_nms_threshold_zero_keeps_disjoint_set():
    g = torch.Generator().manual_seed(5)
    proposals = [canonicalize(pair) for pair in torch.rand((25, 2), generator=g, dtype=torch.float64).tolist()]
    scores = torch.rand(25, generator=g, dtype=torch.float64).tolist()
    keep = nms(proposals, scores, 0.0)
    assert keep[0] == max(range(25), key=lambda i: scores[i])
    for i in keep:
        for j in keep:
            if i != j:
                assert iou(proposals[i], proposals[j]) == 0.0


def test_nms_matches_exhaustive_search():
    # greedy suppression keeps the independent set that wins earliest in score order
    proposals = [
        TemporalProposal(0.0, 0.3),
        TemporalProposal(0.05, 0.35),
        TemporalProposal(0.2, 0.5),
        TemporalProposal(0.4, 0.7),
        TemporalProposal(0.45, 0.75),
        TemporalProposal(0.8, 0.95),
    ]
    scores = [0.6, 0.9, 0.5, 0.7, 0.8, 0.1]
    threshold = 0.3
    order = sorted(range(6), key=lambda i: (-scores[i], i))
    best = None
    for mask in range(1 << 6):
        members = [i for i in range(6) if mask >> i & 1]
        if any(iou(proposals[a], proposals[b]) > threshold for a in members for b in members if a < b):
            continue
        rank = tuple(i in members for i in order)
        if best is None or rank > best[0]:
            best = (rank, [i for i in order if i in members])
    assert nms(proposals, scores, threshold) == best[1]


def test_canonicalize_is_idempotent():
    g = torch.Generator().manual_seed(8)
    for pair in (torch.rand((20, 2), generator=g, dtype=torch.float64) * 3.0 - 1.0).tolist():
        once = canonicalize(pair)
        assert canonicalize((once.start, once.end)) == once


def test_collision_sort_lanes_do_not_overlap():
    proposals = [TemporalProposal(0.0, 0.4), TemporalProposal(0.1, 0.2), TemporalProposal(0.5, 0.6), TemporalProposal(0.3, 0.7)]
    lanes = collision_sort(proposals)
    assert sorted(i for lane in lanes for i in lane) == [0, 1, 2, 3]
    for lane in lanes:
        for a, b in zip(lane, lane[1:]):
            assert proposals[a].end < proposals[b].start
