"""Boxes, overlaps, anchors, delta coding and non-maximum suppression.

All boxes are corner-form ``(x1, y1, x2, y2)`` in continuous pixel
coordinates. Array routines take ``(N, 4)`` float arrays; :class:`Box` is the
validated scalar form used at API boundaries.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import _accel

# |dw|, |dh| cap applied before exponentiation when decoding
DELTA_CLAMP = math.log(1000.0 / 16)


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise InvalidBoxError(f"non-finite box coordinate in {self!r}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBoxError(f"degenerate box {self!r}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + 0.5 * self.width, self.y1 + 0.5 * self.height)

    def to_cxcywh(self) -> Tuple[float, float, float, float]:
        cx, cy = self.center
        return (cx, cy, self.width, self.height)

    def to_xywh(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_cxcywh(cls, cx, cy, w, h) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "Box":
        return cls(x, y, x + w, y + h)

    @classmethod
    def from_array(cls, a) -> "Box":
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def within(self, width: float, height: float) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height


@dataclass(frozen=True)
class BoxDelta:
    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


@dataclass(frozen=True)
class AnchorGrid:
    """Anchor layout. ``ratios`` are height/width; the defaults are the usual
    base-detector configuration, not values tuned for tracking."""

    scales: Tuple[float, ...] = (32.0, 64.0, 128.0, 256.0, 512.0)
    ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    stride: int = 16

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.ratios)


def _as_boxes(a) -> np.ndarray:
    if isinstance(a, Box):
        return a.as_array()[None]
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected (N, 4) boxes, got shape {arr.shape}")
    return arr


def xywh_to_xyxy(boxes) -> np.ndarray:
    b = np.array(boxes, dtype=np.float64)
    b[..., 2:] += b[..., :2]
    return b


def xyxy_to_xywh(boxes) -> np.ndarray:
    b = np.array(boxes, dtype=np.float64)
    b[..., 2:] -= b[..., :2]
    return b


def box_area(boxes) -> np.ndarray:
    b = _as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


# --------------------------------------------------------------------------
# IoU kernels


@_accel.njit
def _iou_matrix_loops(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            if iw <= 0:
                continue
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if ih <= 0:
                continue
            inter = iw * ih
            union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
            if union > 0:
                out[i, j] = inter / union
    return out


def _iou_matrix_numpy(a, b):
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@_accel.njit
def _iou_aligned_loops(a, b):
    n = a.shape[0]
    out = np.zeros(n)
    for i in range(n):
        iw = min(a[i, 2], b[i, 2]) - max(a[i, 0], b[i, 0])
        ih = min(a[i, 3], b[i, 3]) - max(a[i, 1], b[i, 1])
        if iw <= 0 or ih <= 0:
            continue
        inter = iw * ih
        union = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1]) + (b[i, 2] - b[i, 0]) * (b[i, 3] - b[i, 1]) - inter
        if union > 0:
            out[i] = inter / union
    return out


def _iou_aligned_numpy(a, b):
    lt = np.maximum(a[:, :2], b[:, :2])
    rb = np.minimum(a[:, 2:], b[:, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[:, 0] * wh[:, 1]
    union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` boxes -> ``(N, M)``."""
    a = np.ascontiguousarray(_as_boxes(a))
    b = np.ascontiguousarray(_as_boxes(b))
    if _accel.USE_NUMBA:
        return _iou_matrix_loops(a, b)
    return _iou_matrix_numpy(a, b)


def iou_aligned(a, b) -> np.ndarray:
    """Row-wise IoU of two equally sized box arrays."""
    a = np.ascontiguousarray(_as_boxes(a))
    b = np.ascontiguousarray(_as_boxes(b))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if _accel.USE_NUMBA:
        return _iou_aligned_loops(a, b)
    return _iou_aligned_numpy(a, b)


def iou(a, b) -> float:
    """IoU of two valid boxes. Edge-touching boxes have IoU 0."""
    a = a if isinstance(a, Box) else Box.from_array(a)
    b = b if isinstance(b, Box) else Box.from_array(b)
    return float(_iou_aligned_numpy(a.as_array()[None], b.as_array()[None])[0])


# --------------------------------------------------------------------------
# delta coding


def encode_delta(targets, anchors, stds=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Offsets of ``targets`` relative to ``anchors``, divided by ``stds``."""
    t = _as_boxes(targets.as_array() if isinstance(targets, Box) else targets)
    a = _as_boxes(anchors.as_array() if isinstance(anchors, Box) else anchors)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    tw = t[:, 2] - t[:, 0]
    th = t[:, 3] - t[:, 1]
    d = np.stack(
        [
            ((t[:, 0] + 0.5 * tw) - (a[:, 0] + 0.5 * aw)) / aw,
            ((t[:, 1] + 0.5 * th) - (a[:, 1] + 0.5 * ah)) / ah,
            np.log(tw / aw),
            np.log(th / ah),
        ],
        axis=1,
    )
    return d / np.asarray(stds, dtype=np.float64)


def decode_delta(deltas, anchors, image_size: Optional[Tuple[int, int]] = None, stds=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Inverse of :func:`encode_delta`.

    ``image_size`` is ``(height, width)``; when given the result is clipped
    to ``[0, width] x [0, height]``.
    """
    d = np.asarray(deltas.as_array() if isinstance(deltas, BoxDelta) else deltas, dtype=np.float64)
    d = d.reshape(-1, 4) * np.asarray(stds, dtype=np.float64)
    a = _as_boxes(anchors.as_array() if isinstance(anchors, Box) else anchors)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    cx = a[:, 0] + 0.5 * aw + d[:, 0] * aw
    cy = a[:, 1] + 0.5 * ah + d[:, 1] * ah
    w = aw * np.exp(np.clip(d[:, 2], -DELTA_CLAMP, DELTA_CLAMP))
    h = ah * np.exp(np.clip(d[:, 3], -DELTA_CLAMP, DELTA_CLAMP))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if image_size is not None:
        out = clip_boxes(out, image_size)
    return out


def clip_boxes(boxes, image_size: Tuple[int, int]) -> np.ndarray:
    height, width = image_size
    b = np.array(_as_boxes(boxes))
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


# --------------------------------------------------------------------------
# NMS


@_accel.njit
def _nms_sorted_loops(boxes, threshold):
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    count = 0
    for i in range(n):
        if suppressed[i]:
            continue
        keep[count] = i
        count += 1
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for j in range(i + 1, n):
            if suppressed[j]:
                continue
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0 or ih <= 0:
                continue
            inter = iw * ih
            union = area_i + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter
            if union > 0 and inter / union > threshold:
                suppressed[j] = True
    return keep[:count]


def _nms_sorted_numpy(boxes, threshold):
    n = boxes.shape[0]
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in range(n):
        if not alive[i]:
            continue
        keep.append(i)
        rest = np.nonzero(alive[i + 1:])[0] + i + 1
        if rest.size:
            ov = _iou_matrix_numpy(boxes[i:i + 1], boxes[rest])[0]
            alive[rest[ov > threshold]] = False
    return np.asarray(keep, dtype=np.int64)


def nms(boxes, scores, iou_threshold: float = 0.7, max_keep: Optional[int] = None) -> np.ndarray:
    """Greedy NMS. Returns kept indices into the input, score-descending.

    Equal scores keep input order. A box is suppressed when its IoU with an
    already kept box is strictly above ``iou_threshold``.
    """
    b = _as_boxes(boxes) if len(boxes) else np.zeros((0, 4))
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if b.shape[0] != s.shape[0]:
        raise ValueError("boxes and scores differ in length")
    if s.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-s, kind="stable")
    sorted_boxes = np.ascontiguousarray(b[order])
    if _accel.USE_NUMBA:
        kept = _nms_sorted_loops(sorted_boxes, float(iou_threshold))
    else:
        kept = _nms_sorted_numpy(sorted_boxes, float(iou_threshold))
    out = order[kept]
    if max_keep is not None:
        out = out[:max_keep]
    return out


# --------------------------------------------------------------------------
# anchors


def base_anchor_shapes(grid: AnchorGrid) -> np.ndarray:
    """``(A, 2)`` widths/heights, scale-major then ratio."""
    shapes = []
    for s in grid.scales:
        for r in grid.ratios:
            shapes.append((s / math.sqrt(r), s * math.sqrt(r)))
    return np.asarray(shapes, dtype=np.float64)


def generate_anchors(feature_h: int, feature_w: int, grid: AnchorGrid) -> np.ndarray:
    """Anchors for a ``feature_h x feature_w`` map, enumerated as
    (row, column, scale, ratio) in row-major order. Centers sit at
    ``(j + 0.5) * stride, (i + 0.5) * stride``."""
    if feature_h <= 0 or feature_w <= 0:
        raise ValueError("feature dimensions must be positive")
    wh = base_anchor_shapes(grid)
    ys = (np.arange(feature_h, dtype=np.float64) + 0.5) * grid.stride
    xs = (np.arange(feature_w, dtype=np.float64) + 0.5) * grid.stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    centers = np.stack([cx, cy], axis=-1).reshape(-1, 1, 2)
    half = 0.5 * wh[None]
    anchors = np.concatenate([centers - half, centers + half], axis=-1)
    return anchors.reshape(-1, 4)


# --------------------------------------------------------------------------
# scored predictions


@dataclass(frozen=True)
class Prediction:
    box: Box
    score: float
    delta: Optional[BoxDelta] = None
    index: int = -1


@dataclass
class Detections:
    """Column-oriented batch of predictions, score-descending by convention."""

    boxes: np.ndarray
    scores: np.ndarray
    deltas: Optional[np.ndarray] = None
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.indices is None:
            self.indices = np.arange(len(self.scores))
        if len(self.boxes) != len(self.scores):
            raise ValueError("boxes and scores differ in length")

    def __len__(self) -> int:
        return len(self.scores)

    def __getitem__(self, i: int) -> Prediction:
        delta = None if self.deltas is None else BoxDelta(*map(float, self.deltas[i]))
        return Prediction(Box.from_array(self.boxes[i]), float(self.scores[i]), delta, int(self.indices[i]))

    def take(self, idx: Sequence[int]) -> "Detections":
        idx = np.asarray(idx, dtype=np.int64)
        return Detections(
            self.boxes[idx],
            self.scores[idx],
            None if self.deltas is None else self.deltas[idx],
            self.indices[idx],
        )

    def to_list(self):
        return [self[i] for i in range(len(self))]
