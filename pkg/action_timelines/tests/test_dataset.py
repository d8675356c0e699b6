from action_timelines import *
import numpy as np
import pytest
import struct


def small_spec(**overrides):
    values = dict(num_videos=5, num_snippets=24, feature_dim=6, num_classes=3, seed=11)
    values.update(overrides)
    return SyntheticSpec(**values)


def test_annotated_video_validation():
    with pytest.raises(InvalidValueError):
        AnnotatedVideo("v", 0.0)
    with pytest.raises(InvalidValueError):
        AnnotatedVideo("v", 10.0, [ActionInstance(5.0, 12.0, 0)])
    with pytest.raises(InvalidValueError):
        AnnotatedVideo("v", 10.0, [ActionInstance(5.0, 5.0, 0)])
    with pytest.raises(InvalidValueError):
        AnnotatedVideo("v", 10.0, [ActionInstance(1.0, 2.0, -1)])


def test_annotated_video_normalization():
    video = AnnotatedVideo("v", 40.0, [ActionInstance(10.0, 30.0, 2)])
    assert video.normalized_boundaries().tolist() == [[0.25, 0.75]]
    assert video.labels().tolist() == [2]
    assert video.ground_truth() == [GroundTruth("v", 10.0, 30.0, 2)]
    assert str(video) == "v (40.0s) [10.00, 30.00]:2"
    assert AnnotatedVideo("e", 5.0).normalized_boundaries().shape == (0, 2)


def test_feature_round_trip(tmp_path):
    matrix = np.arange(12, dtype=np.float32).reshape(4, 3) / 7
    write_features(VideoFeatures("clip", "flow", matrix), tmp_path / "clip.feat")
    loaded = read_features(tmp_path / "clip.feat")
    assert loaded.video_id == "clip"
    assert loaded.modality == "flow"
    assert np.array_equal(loaded.features, matrix)
    assert len((tmp_path / "clip.feat").read_bytes()) == 24 + 4 * 12


def test_truncated_feature_file(tmp_path):
    write_features(VideoFeatures("clip", "rgb", np.ones((4, 3))), tmp_path / "clip.feat")
    data = (tmp_path / "clip.feat").read_bytes()
    (tmp_path / "short.feat").write_bytes(data[:-4])
    with pytest.raises(TruncatedFileError):
        read_features(tmp_path / "short.feat")
    (tmp_path / "header.feat").write_bytes(data[:10])
    with pytest.raises(TruncatedFileError):
        read_features(tmp_path / "header.feat")
    (tmp_path / "long.feat").write_bytes(data + b"\x00")
    with pytest.raises(FormatError):
        read_features(tmp_path / "long.feat")


def test_bad_feature_headers(tmp_path):
    (tmp_path / "magic.feat").write_bytes(struct.pack("<8sIIII", b"NOTFEAT\x00", 1, 1, 1, 0) + b"\x00" * 4)
    with pytest.raises(FormatError):
        read_features(tmp_path / "magic.feat")
    (tmp_path / "version.feat").write_bytes(struct.pack("<8sIIII", b"ACTFEAT\x00", 9, 1, 1, 0) + b"\x00" * 4)
    with pytest.raises(FormatError):
        read_features(tmp_path / "version.feat")
    (tmp_path / "huge.feat").write_bytes(struct.pack("<8sIIII", b"ACTFEAT\x00", 1, 1 << 20, 1 << 20, 0))
    with pytest.raises(FormatError) as info:
        read_features(tmp_path / "huge.feat")
    assert not isinstance(info.value, TruncatedFileError)
    (tmp_path / "mode.feat").write_bytes(struct.pack("<8sIIII", b"ACTFEAT\x00", 1, 1, 1, 7) + b"\x00" * 4)
    with pytest.raises(FormatError):
        read_features(tmp_path / "mode.feat")


def test_video_features_validation():
    with pytest.raises(InvalidValueError):
        VideoFeatures("v", "depth", np.zeros((2, 2)))
    with pytest.raises(ShapeMismatchError):
        VideoFeatures("v", "rgb", np.zeros((0, 2)))
    with pytest.raises(InvalidValueError):
        VideoFeatures("v", "rgb", np.array([[np.nan, 1.0]]))


def test_annotation_round_trip(tmp_path):
    videos = [AnnotatedVideo("a", 10.0, [ActionInstance(1.0, 2.5, 0)]), AnnotatedVideo("b", 3.0)]
    write_annotations(videos, tmp_path / "ann.jsonl")
    assert read_annotations(tmp_path / "ann.jsonl") == videos


def test_bad_annotation_line(tmp_path):
    (tmp_path / "ann.jsonl").write_text('{"video_id": "a", "duration": 1.0, "instances": []}\n{"video_id": "b"}\n')
    with pytest.raises(FormatError) as info:
        read_annotations(tmp_path / "ann.jsonl")
    assert "line 2" in str(info.value)


def test_annotations_from_csv(tmp_path):
    path = tmp_path / "ann.csv"
    path.write_text("video,start,end,label,duration\nv1,1.0,3.0,jump,10\nv2,0.5,1.0,run,4\nv1,5.0,6.0,run,10\n")
    videos = annotations_from_csv(path, class_names=["run", "jump"])
    assert [v.video_id for v in videos] == ["v1", "v2"]
    assert videos[0].instances == [ActionInstance(1.0, 3.0, 1), ActionInstance(5.0, 6.0, 0)]
    with pytest.raises(FormatError):
        annotations_from_csv(path)


def test_prediction_file_round_trip(tmp_path):
    predictions = [Prediction("b", 1.0, 2.0, 0, 0.25), Prediction("a", 0.5, 1.5, 1, 0.5), Prediction("a", 3.0, 4.0, 0, 0.75)]
    write_predictions(predictions, tmp_path / "pred.csv", echo="[run]\nseed = 3\n")
    text = (tmp_path / "pred.csv").read_text()
    assert text.startswith("# [run]\n# seed = 3\nvideo_id,start,end,label,score\na,3.000000,4.000000,0,0.750000\n")
    loaded, echo = read_predictions(tmp_path / "pred.csv")
    assert echo == "[run]\nseed = 3"
    assert [p.score for p in loaded] == [0.75, 0.5, 0.25]
    assert sorted(loaded, key=lambda p: p.score) == sorted(predictions, key=lambda p: p.score)


def test_synthetic_layout():
    dataset = generate_synthetic(small_spec())
    assert len(dataset) == 5
    assert dataset.video_ids[0] == "video_0000"
    assert dataset.modalities() == ("rgb", "flow")
    assert dataset.feature_dim == 6
    for video in dataset:
        assert 1 <= len(video) <= 3
        assert video.duration == 24.0
        spans = sorted((i.start, i.end) for i in video.instances)
        for (_, end), (start, _) in zip(spans, spans[1:]):
            assert end <= start
        assert all(0 <= i.label < 3 for i in video.instances)
    assert dataset.video_features("video_0001")["rgb"].shape == (24, 6)


def test_synthetic_is_byte_identical(tmp_path):
    generate_synthetic(small_spec(), tmp_path / "a")
    generate_synthetic(small_spec(), tmp_path / "b")
    for path in sorted((tmp_path / "a").rglob("*")):
        if path.is_file():
            twin = tmp_path / "b" / path.relative_to(tmp_path / "a")
            assert path.read_bytes() == twin.read_bytes(), path.name
    other = generate_synthetic(small_spec(seed=12))
    assert [str(v) for v in other] != [str(v) for v in generate_synthetic(small_spec())]


def test_dataset_save_and_load(tmp_path):
    original = generate_synthetic(small_spec(), tmp_path)
    loaded = ActionDataset.load(tmp_path)
    assert loaded.video_ids == original.video_ids
    assert loaded.num_classes == 3
    for video_id in original.video_ids:
        assert loaded.videos[video_id] == original.videos[video_id]
        for modality, tensor in original.video_features(video_id).items():
            assert bool((loaded.video_features(video_id)[modality] == tensor).all())


def test_zero_strength_hides_actions():
    stats = pytest.importorskip("scipy.stats")
    dataset = generate_synthetic(small_spec(num_videos=8, num_snippets=64, strength=0.0))
    inside, outside = [], []
    for video in dataset:
        matrix = dataset.features[video.video_id]["rgb"].features
        mask = np.zeros(matrix.shape[0], dtype=bool)
        for inst in video.instances:
            mask[int(inst.start):int(inst.end)] = True
        inside.append(matrix[mask].ravel())
        outside.append(matrix[~mask].ravel())
    result = stats.ttest_ind(np.concatenate(inside), np.concatenate(outside))
    assert result.pvalue > 0.001


def test_synthetic_spec_validation():
    with pytest.raises(InvalidValueError):
        generate_synthetic(small_spec(num_snippets=8))
    with pytest.raises(InvalidValueError):
        generate_synthetic(small_spec(min_actions=3, max_actions=2))
