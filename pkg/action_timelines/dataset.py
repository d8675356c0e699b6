import contextlib
import json
import logging
import os
import struct
from csv import DictReader, writer
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import torch

from .evaluation import GroundTruth, Prediction
from .exceptions import FormatError, InvalidValueError, ShapeMismatchError, TruncatedFileError
from .network import MODALITIES
from .seeding import derive_numpy_generator

__all__ = [
    "ActionInstance",
    "AnnotatedVideo",
    "VideoFeatures",
    "SyntheticSpec",
    "ActionDataset",
    "atomic_write",
    "generate_synthetic",
    "read_features",
    "write_features",
    "read_annotations",
    "write_annotations",
    "annotations_from_csv",
    "read_predictions",
    "write_predictions",
    "FEATURE_MAGIC",
    "FEATURE_VERSION",
]

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"ACTFEAT\x00"
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct("<8sIIII")
MODALITY_CODES = {name: code for code, name in enumerate(MODALITIES)}
# payloads beyond this many reals are rejected before allocation
MAX_FEATURE_VALUES = 1 << 31

ANNOTATION_FILE = "annotations.jsonl"
DATASET_FILE = "dataset.json"

PathLike = Union[str, Path]


@contextlib.contextmanager
def atomic_write(path: PathLike, mode: str = "w"):
    """Write to a temporary sibling and rename it over ``path`` on success"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    kwargs = {"newline": ""} if "b" not in mode else {}
    try:
        with open(tmp, mode, **kwargs) as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            tmp.unlink()
        raise


@dataclass(frozen=True)
class ActionInstance:
    """One labeled action: start and end in seconds and a class index"""

    start: float
    end: float
    label: int

    def as_list(self) -> list:
        return [self.start, self.end, self.label]


@dataclass
class AnnotatedVideo:
    video_id: str
    duration: float
    instances: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.duration > 0:
            raise InvalidValueError("{}: duration must be positive".format(self.video_id))
        for inst in self.instances:
            if not 0 <= inst.start < inst.end <= self.duration:
                raise InvalidValueError(
                    "{}: instance ({}, {}) outside [0, {}]".format(self.video_id, inst.start, inst.end, self.duration)
                )
            if inst.label < 0:
                raise InvalidValueError("{}: negative class index {}".format(self.video_id, inst.label))

    def __len__(self) -> int:
        return len(self.instances)

    def __str__(self) -> str:
        parts = ", ".join("[{:.2f}, {:.2f}]:{}".format(i.start, i.end, i.label) for i in self.instances)
        return "{} ({:.1f}s) {}".format(self.video_id, self.duration, parts)

    def normalized_boundaries(self) -> torch.Tensor:
        """(M, 2) float64 boundaries in normalized time"""
        if not self.instances:
            return torch.zeros((0, 2), dtype=torch.float64)
        return torch.tensor([[i.start, i.end] for i in self.instances], dtype=torch.float64) / self.duration

    def labels(self) -> torch.Tensor:
        return torch.tensor([i.label for i in self.instances], dtype=torch.long)

    def ground_truth(self) -> list[GroundTruth]:
        return [GroundTruth(self.video_id, i.start, i.end, i.label) for i in self.instances]

    def to_record(self) -> dict:
        instances = [i.as_list() for i in self.instances]
        return {"video_id": self.video_id, "duration": self.duration, "instances": instances}

    @staticmethod
    def from_record(record: dict) -> "AnnotatedVideo":
        instances = [ActionInstance(float(s), float(e), int(y)) for s, e, y in record["instances"]]
        return AnnotatedVideo(str(record["video_id"]), float(record["duration"]), instances)


@dataclass
class VideoFeatures:
    """Snippet feature matrix (T_snippets, D_feat) of one modality of one video"""

    video_id: str
    modality: str
    features: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.modality not in MODALITY_CODES:
            raise InvalidValueError("unknown modality {!r}".format(self.modality))
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeMismatchError("features must be a non-empty 2-D matrix, got {}".format(self.features.shape))
        if not np.isfinite(self.features).all():
            raise InvalidValueError("{}: features contain NaN or Inf".format(self.video_id))

    @property
    def num_snippets(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.features.copy())


def write_features(vf: VideoFeatures, path: PathLike) -> None:
    """Write a feature matrix: fixed header followed by little-endian float32 rows"""
    header = FEATURE_HEADER.pack(
        FEATURE_MAGIC, FEATURE_VERSION, vf.num_snippets, vf.feature_dim, MODALITY_CODES[vf.modality]
    )
    with atomic_write(path, "wb") as handle:
        handle.write(header)
        handle.write(vf.features.astype("<f4").tobytes(order="C"))


def read_features(path: PathLike) -> VideoFeatures:
    """Read a feature file written by write_features; the video id is the file stem

    Raises:
        FormatError: On a bad magic, version, modality code or oversized dimensions
        TruncatedFileError: When the payload is shorter than the header promises
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < FEATURE_HEADER.size:
        raise TruncatedFileError(path, "header needs {} bytes, file has {}".format(FEATURE_HEADER.size, len(data)))
    magic, version, snippets, dim, code = FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(path, "bad magic {!r}".format(magic))
    if version != FEATURE_VERSION:
        raise FormatError(path, "unsupported version {}".format(version))
    if code >= len(MODALITIES):
        raise FormatError(path, "unknown modality code {}".format(code))
    if snippets * dim > MAX_FEATURE_VALUES:
        raise FormatError(path, "dimensions {}x{} overflow".format(snippets, dim))
    expected = snippets * dim * 4
    payload = data[FEATURE_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedFileError(path, "payload has {} of {} bytes".format(len(payload), expected))
    if len(payload) > expected:
        raise FormatError(path, "{} trailing bytes".format(len(payload) - expected))
    matrix = np.frombuffer(payload, dtype="<f4").reshape(snippets, dim).astype(np.float32)
    try:
        return VideoFeatures(path.stem, MODALITIES[code], matrix)
    except (InvalidValueError, ShapeMismatchError) as error:
        raise FormatError(path, str(error)) from error


def write_annotations(videos: Sequence[AnnotatedVideo], path: PathLike) -> None:
    """One JSON object per line, keys sorted"""
    with atomic_write(path) as handle:
        for video in videos:
            handle.write(json.dumps(video.to_record(), sort_keys=True) + "\n")


def read_annotations(path: PathLike) -> list[AnnotatedVideo]:
    path = Path(path)
    videos = []
    with open(path) as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                videos.append(AnnotatedVideo.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as error:
                raise FormatError(path, "line {}: {}".format(number, error)) from error
    return videos


def annotations_from_csv(
    path: PathLike,
    video_name: str = "video",
    start_name: str = "start",
    end_name: str = "end",
    label_name: str = "label",
    duration_name: str = "duration",
    class_names: Optional[Sequence[str]] = None,
) -> list[AnnotatedVideo]:
    """Build annotations from a csv with one action instance per row

    This is the adapter for annotation dumps of real datasets. Rows of the
    same video are grouped; the video order is the order of first appearance.

    Args:
        path (str | Path): The path to the csv
        video_name (str, optional): The name of the video id column. Defaults to "video".
        start_name (str, optional): The name of the start-seconds column. Defaults to "start".
        end_name (str, optional): The name of the end-seconds column. Defaults to "end".
        label_name (str, optional): The name of the class column. Defaults to "label".
        duration_name (str, optional): The name of the video duration column. Defaults to "duration".
        class_names (Sequence[str], optional): Maps class names to indices; labels must be integers when None.

    Returns:
        list[AnnotatedVideo]: The grouped annotations
    """
    grouped: dict[str, dict] = {}
    with open(path, newline="") as csvfile:
        reader = DictReader(csvfile)
        for number, row in enumerate(reader, start=2):
            try:
                label = class_names.index(row[label_name]) if class_names else int(row[label_name])
                entry = grouped.setdefault(row[video_name], {"duration": float(row[duration_name]), "instances": []})
                entry["instances"].append(ActionInstance(float(row[start_name]), float(row[end_name]), label))
            except (KeyError, ValueError) as error:
                raise FormatError(path, "row {}: {}".format(number, error)) from error
    return [AnnotatedVideo(video_id, e["duration"], e["instances"]) for video_id, e in grouped.items()]


PREDICTION_COLUMNS = ["video_id", "start", "end", "label", "score"]


def write_predictions(predictions: Sequence[Prediction], path: PathLike, echo: str = "") -> None:
    """Write detections sorted by video, then score descending, under a commented config echo"""
    ordered = sorted(predictions, key=lambda p: (p.video_id, -p.score))
    with atomic_write(path) as handle:
        for line in echo.splitlines():
            handle.write("# {}\n".format(line) if line else "#\n")
        out = writer(handle, lineterminator="\n")
        out.writerow(PREDICTION_COLUMNS)
        for p in ordered:
            out.writerow(
                [p.video_id, "{:.6f}".format(p.start), "{:.6f}".format(p.end), p.label, "{:.6f}".format(p.score)]
            )


def read_predictions(path: PathLike) -> tuple[list[Prediction], str]:
    """Read a prediction file

    Returns:
        tuple[list[Prediction], str]: The records and the config echo from the header
    """
    path = Path(path)
    echo = []
    rows = []
    with open(path, newline="") as handle:
        for line in handle:
            if line.startswith("#"):
                echo.append(line[2:].rstrip("\n") if len(line) > 2 else "")
            else:
                rows.append(line)
    predictions = []
    for number, row in enumerate(DictReader(rows), start=2):
        try:
            predictions.append(
                Prediction(
                    row["video_id"], float(row["start"]), float(row["end"]), int(row["label"]), float(row["score"])
                )
            )
        except (KeyError, TypeError, ValueError) as error:
            raise FormatError(path, "record {}: {}".format(number, error)) from error
    return predictions, "\n".join(echo)


@dataclass
class SyntheticSpec:
    """Parameters of a generated dataset.

    Each class gets a fixed random signature per modality; inside an action
    extent the snippet features are background noise plus ``strength`` times
    that signature.
    """

    num_videos: int = 16
    num_snippets: int = 96
    feature_dim: int = 32
    num_classes: int = 4
    min_actions: int = 1
    max_actions: int = 3
    strength: float = 1.0
    noise: float = 1.0
    snippet_seconds: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if min(self.num_videos, self.num_snippets, self.feature_dim, self.num_classes, self.min_actions) < 1:
            raise InvalidValueError("synthetic sizes must be positive")
        if self.max_actions < self.min_actions:
            raise InvalidValueError("max_actions must be >= min_actions")
        if self.num_snippets < 4 * self.max_actions:
            raise InvalidValueError("{} snippets cannot hold {} actions".format(self.num_snippets, self.max_actions))
        if self.strength < 0 or self.noise < 0 or not self.snippet_seconds > 0:
            raise InvalidValueError("strength and noise must be non-negative, snippet_seconds positive")

    @property
    def duration(self) -> float:
        return self.num_snippets * self.snippet_seconds


def _place_actions(rng: np.random.Generator, spec: SyntheticSpec) -> list[tuple[int, int, int]]:
    count = int(rng.integers(spec.min_actions, spec.max_actions + 1))
    slot = spec.num_snippets // count
    actions = []
    for index in range(count):
        length = int(rng.integers(max(slot // 4, 1), max(slot * 3 // 4, 2)))
        offset = int(rng.integers(0, slot - length + 1))
        start = index * slot + offset
        actions.append((start, start + length, int(rng.integers(spec.num_classes))))
    return actions


@dataclass
class ActionDataset:
    """Annotations and per-modality features of a set of videos"""

    videos: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    num_classes: int = 0
    directory: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self) -> Iterator[AnnotatedVideo]:
        for video_id in self.video_ids:
            yield self.videos[video_id]

    def __str__(self) -> str:
        ret = ""
        for video in self:
            ret += str(video)
            ret += "\n"
        return ret

    @property
    def video_ids(self) -> list[str]:
        return sorted(self.videos)

    @property
    def feature_dim(self) -> int:
        for per_video in self.features.values():
            for vf in per_video.values():
                return vf.feature_dim
        return 0

    def modalities(self) -> tuple:
        found = {m for per_video in self.features.values() for m in per_video}
        return tuple(m for m in MODALITIES if m in found)

    def video_features(self, video_id: str) -> dict[str, torch.Tensor]:
        return {m: vf.tensor() for m, vf in self.features.get(video_id, {}).items()}

    def ground_truth(self) -> list[GroundTruth]:
        return [gt for video in self for gt in video.ground_truth()]

    def add(self, video: AnnotatedVideo, features: Sequence[VideoFeatures]) -> None:
        lengths = {vf.num_snippets for vf in features}
        if len(lengths) > 1:
            raise ShapeMismatchError("{}: modalities disagree on snippet count {}".format(video.video_id, lengths))
        self.videos[video.video_id] = video
        self.features[video.video_id] = {vf.modality: vf for vf in features}
        if video.instances:
            self.num_classes = max(self.num_classes, max(i.label for i in video.instances) + 1)

    def save(self, directory: PathLike) -> None:
        directory = Path(directory)
        write_annotations(list(self), directory / ANNOTATION_FILE)
        for video_id in self.video_ids:
            for modality, vf in sorted(self.features[video_id].items()):
                write_features(vf, directory / modality / "{}.feat".format(video_id))
        with atomic_write(directory / DATASET_FILE) as handle:
            json.dump({"num_classes": self.num_classes, "feature_dim": self.feature_dim}, handle, sort_keys=True)
            handle.write("\n")

    @staticmethod
    def load(directory: PathLike) -> "ActionDataset":
        """Read annotations.jsonl plus every <modality>/<video_id>.feat file found"""
        directory = Path(directory)
        dataset = ActionDataset(directory=directory)
        for video in read_annotations(directory / ANNOTATION_FILE):
            features = []
            for modality in MODALITIES:
                path = directory / modality / "{}.feat".format(video.video_id)
                if path.exists():
                    features.append(read_features(path))
            dataset.add(video, features)
        meta = directory / DATASET_FILE
        if meta.exists():
            try:
                dataset.num_classes = max(dataset.num_classes, int(json.loads(meta.read_text())["num_classes"]))
            except (ValueError, KeyError) as error:
                raise FormatError(meta, str(error)) from error
        logger.info("loaded %d videos from %s", len(dataset), directory)
        return dataset


def generate_synthetic(spec: SyntheticSpec, directory: Optional[PathLike] = None) -> ActionDataset:
    """Generate a deterministic synthetic detection dataset

    Every video draws from its own seed derived from ``spec.seed``, so videos
    can be produced in any order. Both modalities share the annotation; the
    flow signature is seeded independently of the rgb one.

    Args:
        spec (SyntheticSpec): Generation parameters
        directory (str | Path, optional): Where to write the dataset; nothing is written when None.

    Returns:
        ActionDataset: The generated dataset
    """
    spec.validate()
    signatures = {
        m: derive_numpy_generator(spec.seed, "signature", m).standard_normal((spec.num_classes, spec.feature_dim))
        for m in MODALITIES
    }
    dataset = ActionDataset(num_classes=spec.num_classes)
    for index in range(spec.num_videos):
        video_id = "video_{:04d}".format(index)
        actions = _place_actions(derive_numpy_generator(spec.seed, "layout", index), spec)
        features = []
        for modality in MODALITIES:
            rng = derive_numpy_generator(spec.seed, "features", modality, index)
            matrix = spec.noise * rng.standard_normal((spec.num_snippets, spec.feature_dim))
            for start, end, label in actions:
                matrix[start:end] += spec.strength * signatures[modality][label]
            features.append(VideoFeatures(video_id, modality, matrix.astype(np.float32)))
        instances = [
            ActionInstance(start * spec.snippet_seconds, end * spec.snippet_seconds, label)
            for start, end, label in actions
        ]
        dataset.add(AnnotatedVideo(video_id, spec.duration, instances), features)
    dataset.num_classes = spec.num_classes
    if directory is not None:
        dataset.save(directory)
        dataset.directory = Path(directory)
        logger.info("wrote %d synthetic videos to %s", len(dataset), directory)
    return dataset
