from typing import Optional, Sequence

from bokeh.core.properties import value
from bokeh.models import BoxZoomTool, ColumnDataSource, HoverTool, LabelSet, PanTool, ResetTool
from bokeh.plotting import figure, save, show

from .dataset import AnnotatedVideo
from .evaluation import Prediction
from .interval import TemporalProposal, collision_sort

__all__ = ["DetectionTimelineRenderer"]


class DetectionTimelineRenderer:
    """Draws one video's ground truth and detections as horizontal bars over time.

    Ground truth and detections get their own lanes; within each group,
    intervals are packed so that no two bars in one lane overlap.
    """

    def __init__(
        self,
        video: AnnotatedVideo,
        predictions: Sequence[Prediction],
        class_names: Optional[Sequence[str]] = None,
        top_k: int = 20,
        gt_color: str = "green",
        detection_color: str = "red",
        bg_color: str = "white",
    ) -> None:
        self.video = video
        ranked = sorted((p for p in predictions if p.video_id == video.video_id), key=lambda p: -p.score)
        self.predictions = ranked[:top_k]
        self.class_names = class_names
        self.gt_color = gt_color
        self.detection_color = detection_color
        self.bg_color = bg_color
        self.tools = [BoxZoomTool(), ResetTool(), PanTool(dimensions="width")]

    def class_name(self, label: int) -> str:
        if self.class_names and 0 <= label < len(self.class_names):
            return self.class_names[label]
        return str(label)

    def create_lanes(self, prefix: str, intervals: list[tuple], labels: list[int], scores: list) -> list[dict]:
        """Split intervals into non-overlapping lanes of bokeh column data

        Args:
            prefix (str): Lane name prefix; lanes are named prefix0, prefix1, ...
            intervals (list[tuple]): (start, end) pairs in seconds
            labels (list[int]): Class index per interval
            scores (list): Score per interval, or None for ground truth

        Returns:
            list[dict]: One column dict per lane
        """
        proposals = [TemporalProposal(s, e) for s, e in intervals]
        lanes = []
        for i, lane in enumerate(collision_sort(proposals)):
            lanes.append(
                {
                    "lane": [prefix + str(i)] * len(lane),
                    "start": [proposals[j].start for j in lane],
                    "end": [proposals[j].end for j in lane],
                    "mid": [proposals[j].center for j in lane],
                    "label": [self.class_name(labels[j]) for j in lane],
                    "score": ["" if scores[j] is None else "{:.3f}".format(scores[j]) for j in lane],
                }
            )
        return lanes

    def ground_truth_lanes(self) -> list[dict]:
        instances = self.video.instances
        return self.create_lanes(
            "gt", [(i.start, i.end) for i in instances], [i.label for i in instances], [None] * len(instances)
        )

    def detection_lanes(self) -> list[dict]:
        preds = self.predictions
        return self.create_lanes(
            "det", [(p.start, p.end) for p in preds], [p.label for p in preds], [p.score for p in preds]
        )

    def get_y_range(self, gt_lanes: list, det_lanes: list) -> list[str]:
        return [lane["lane"][0] for lane in det_lanes][::-1] + [lane["lane"][0] for lane in gt_lanes][::-1]

    def setup_figure(self, *args, **kwargs) -> figure:
        """Thin wrapper around bokeh's figure without the logo"""
        fig = figure(*args, **kwargs)
        fig.toolbar.logo = None
        return fig

    def render_lanes(self, plot: figure, lanes: list[dict], color: str, height: float = 0.5) -> None:
        for lane in lanes:
            source = ColumnDataSource(data=lane)
            y = value(lane["lane"][0])
            plot.hbar(left="start", right="end", y=y, height=height, color=color, alpha=0.6, source=source)
            plot.add_layout(
                LabelSet(
                    x="mid",
                    y=value(lane["lane"][0]),
                    text="label",
                    y_offset=-6,
                    text_font_size="11px",
                    text_color="#555555",
                    text_align="center",
                    source=source,
                )
            )

    def render_timeline(self) -> figure:
        """Build the figure: ground-truth lanes at the bottom, detection lanes above"""
        gt_lanes = self.ground_truth_lanes()
        det_lanes = self.detection_lanes()
        p = self.setup_figure(
            title=self.video.video_id,
            x_axis_label="seconds",
            y_axis_label="lane",
            height=120 + 40 * (len(gt_lanes) + len(det_lanes)),
            width=1200,
            x_range=(0, self.video.duration),
            y_range=self.get_y_range(gt_lanes, det_lanes) or ["gt0"],
            background_fill_color=self.bg_color,
            border_fill_color=self.bg_color,
            tools=self.tools,
        )
        self.render_lanes(p, gt_lanes, self.gt_color)
        self.render_lanes(p, det_lanes, self.detection_color)
        tooltips = [("class", "@label"), ("score", "@score"), ("start", "@start"), ("end", "@end")]
        p.add_tools(HoverTool(tooltips=tooltips))
        return p

    def output_timeline(self, output: str, show_timeline: bool = False) -> figure:
        """Render the timeline and save it as HTML (or show it)

        Args:
            output (str): The filename to save the timeline as
            show_timeline (bool, optional): Display instead of saving. Defaults to False.
        """
        p = self.render_timeline()
        if show_timeline:
            show(p)
        else:
            save(p, output, title=self.video.video_id, resources="cdn")
        return p
