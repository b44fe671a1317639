"""Stateless per-frame tracking: the query feature is pooled once from the
first frame and every later frame is searched globally and independently."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import torch

from .data import ImageLike, ResizeSpec, load_image, resize_normalize
from .geometry import Box
from .model import GlobalTrack

RESULTS_HEADER = "# globaltrack-results v1"


@dataclass(frozen=True)
class TrackerConfig:
    tau: float = 0.84
    max_proposals: int = 1000
    resize: ResizeSpec = field(default_factory=ResizeSpec)

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


@dataclass(frozen=True)
class TrackRecord:
    frame: int
    box: Box
    score: float
    present: bool


@dataclass(frozen=True)
class TrackerState:
    query: torch.Tensor  # (C, k, k)
    config: TrackerConfig


def _prepare(image: ImageLike, resize: ResizeSpec) -> Tuple[torch.Tensor, float]:
    arr, scale = resize_normalize(load_image(image), resize)
    return torch.from_numpy(arr), scale


class GlobalTracker:
    """Runs a trained :class:`GlobalTrack` model frame by frame.

    The model is put in eval mode and never modified; one tracker may serve
    many sequences, each with its own :class:`TrackerState`.
    """

    def __init__(self, model: GlobalTrack, config: TrackerConfig = TrackerConfig()):
        self.model = model.eval()
        self.config = config

    def init(self, image: ImageLike, box) -> TrackerState:
        img = load_image(image)
        b = box if isinstance(box, Box) else Box.from_array(box)
        if not b.within(img.shape[1], img.shape[0]):
            raise ValueError(f"initial box {b} outside image of size {img.shape[1]}x{img.shape[0]}")
        x, scale = _prepare(img, self.config.resize)
        with torch.no_grad():
            fmaps = self.model.features(x)
            z = self.model.query_features(fmaps, b.as_array()[None] * scale)[0]
        return TrackerState(z, self.config)

    def track_frame(self, state: TrackerState, image: ImageLike, frame: int = 0) -> TrackRecord:
        img = load_image(image)
        x, scale = _prepare(img, state.config.resize)
        size = tuple(x.shape[1:])
        with torch.no_grad():
            fmaps = self.model.features(x)
            proposals = self.model.propose(state.query[None], fmaps, size, state.config.max_proposals)[0]
            if len(proposals) == 0:
                # nothing survived decoding; report the whole frame with zero confidence
                return TrackRecord(frame, Box(0.0, 0.0, float(img.shape[1]), float(img.shape[0])), 0.0, False)
            dets = self.model.classify_and_refine(state.query, proposals, fmaps, size)
        box = Box.from_array(dets.boxes[0] / scale)
        score = float(dets.scores[0])
        return TrackRecord(frame, box, score, score > state.config.tau)

    def track_sequence(self, frames: Sequence[ImageLike], init_box) -> List[TrackRecord]:
        if len(frames) == 0:
            raise ValueError("empty sequence")
        state = self.init(frames[0], init_box)
        b = init_box if isinstance(init_box, Box) else Box.from_array(init_box)
        records = [TrackRecord(0, b, 1.0, True)]
        for t in range(1, len(frames)):
            records.append(self.track_frame(state, frames[t], t))
        return records


# --------------------------------------------------------------------------
# results files


def format_results(records: Iterable[TrackRecord]) -> str:
    lines = [RESULTS_HEADER]
    for r in records:
        x, y, w, h = r.box.to_xywh()
        lines.append(f"{x:.6f},{y:.6f},{w:.6f},{h:.6f},{r.score:.6f},{int(r.present)}")
    return "\n".join(lines) + "\n"


def write_results(path, records: Iterable[TrackRecord]) -> None:
    Path(path).write_text(format_results(records))


def read_results(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner-form boxes (T, 4), scores (T,) and presence flags (T,)."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != RESULTS_HEADER:
        raise ValueError(f"{path}: missing '{RESULTS_HEADER}' header")
    rows = []
    for line in text[1:]:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split(",")
        if len(vals) != 6:
            raise ValueError(f"{path}: malformed line {line!r}")
        rows.append([float(v) for v in vals])
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    boxes = arr[:, :4].copy()
    boxes[:, 2:] += boxes[:, :2]
    return boxes, arr[:, 4], arr[:, 5].astype(bool)
