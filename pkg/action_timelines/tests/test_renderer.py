from action_timelines import *


def fixture_renderer(**kwargs):
    video = AnnotatedVideo("v", 60.0, [ActionInstance(5.0, 20.0, 0), ActionInstance(10.0, 15.0, 1), ActionInstance(30.0, 40.0, 1)])
    predictions = [
        Prediction("v", 4.0, 21.0, 0, 0.9),
        Prediction("v", 31.0, 39.0, 1, 0.7),
        Prediction("v", 6.0, 18.0, 0, 0.2),
        Prediction("w", 0.0, 1.0, 0, 1.0),
    ]
    return DetectionTimelineRenderer(video, predictions, **kwargs)


def test_keeps_top_detections_of_the_video():
    r0 = fixture_renderer(top_k=2)
    assert [p.score for p in r0.predictions] == [0.9, 0.7]


def test_lanes_do_not_overlap():
    r0 = fixture_renderer()
    gt_lanes = r0.ground_truth_lanes()
    assert len(gt_lanes) == 2
    assert sum(len(lane["start"]) for lane in gt_lanes) == 3
    det_lanes = r0.detection_lanes()
    assert [lane["lane"][0] for lane in det_lanes] == ["det0", "det1"]
    assert list(det_lanes[0].keys()) == ["lane", "start", "end", "mid", "label", "score"]
    assert r0.get_y_range(gt_lanes, det_lanes) == ["det1", "det0", "gt1", "gt0"]


def test_class_names():
    r0 = fixture_renderer(class_names=["jump", "run"])
    assert r0.class_name(1) == "run"
    assert r0.class_name(5) == "5"
    assert r0.ground_truth_lanes()[0]["label"][0] == "jump"


def test_output_timeline(tmp_path):
    r0 = fixture_renderer()
    p = r0.output_timeline(str(tmp_path / "v.html"))
    assert p.title.text == "v"
    assert (tmp_path / "v.html").exists()
