"""First stage: anchor scoring on query-modulated maps, proposal selection,
anchor targets and the proposal loss."""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import geometry
from .geometry import Detections


@dataclass(frozen=True)
class RpnConfig:
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    num_samples: int = 256
    pos_fraction: float = 0.5
    pre_nms_top_k: int = 2000
    train_max_proposals: int = 2000
    test_max_proposals: int = 1000
    nms_iou: float = 0.7
    min_size: float = 0.0
    delta_stds: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)


class RpnHead(nn.Module):
    """3x3 conv + ReLU, then per-anchor logit and 4 deltas."""

    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.num_anchors = num_anchors
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls = nn.Conv2d(channels, num_anchors, 1)
        self.reg = nn.Conv2d(channels, num_anchors * 4, 1)
        for m in (self.conv, self.cls, self.reg):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """``x``: (M, C, H, W) -> logits (M, H*W*A), deltas (M, H*W*A, 4),
        ordered like :func:`geometry.generate_anchors`."""
        m, _, h, w = x.shape
        t = F.relu(self.conv(x))
        logits = self.cls(t).permute(0, 2, 3, 1).reshape(m, -1)
        deltas = self.reg(t).reshape(m, self.num_anchors, 4, h, w).permute(0, 3, 4, 1, 2).reshape(m, -1, 4)
        return logits, deltas


@dataclass
class AnchorTargets:
    labels: np.ndarray  # 1 positive, 0 negative, -1 ignore
    deltas: np.ndarray  # NaN rows where label != 1

    @property
    def p_star(self) -> np.ndarray:
        return (self.labels == 1).astype(np.float64)


def assign_anchor_targets(anchors, groundtruth, pos_iou: float = 0.7, neg_iou: float = 0.3,
                          stds=(1.0, 1.0, 1.0, 1.0)) -> AnchorTargets:
    """Label anchors against a single groundtruth box.

    IoU >= ``pos_iou`` is positive, IoU <= ``neg_iou`` negative, the rest
    ignored. The single best-overlapping anchor (lowest index on ties) is
    forced positive as long as it overlaps at all.
    """
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0:
        raise ValueError("no anchors to assign")
    g = np.asarray(groundtruth.as_array() if hasattr(groundtruth, "as_array") else groundtruth, dtype=np.float64).reshape(1, 4)
    ov = geometry.iou_matrix(a, g)[:, 0]
    labels = np.full(len(a), -1, dtype=np.int8)
    labels[ov <= neg_iou] = 0
    labels[ov >= pos_iou] = 1
    best = int(np.argmax(ov))
    if ov[best] > 0:
        labels[best] = 1
    deltas = np.full((len(a), 4), np.nan)
    pos = labels == 1
    if pos.any():
        deltas[pos] = geometry.encode_delta(np.repeat(g, pos.sum(), axis=0), a[pos], stds)
    return AnchorTargets(labels, deltas)


def sample_labels(labels: np.ndarray, num: int, pos_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Keep at most ``num`` labelled entries, at most ``pos_fraction`` of them
    positive; the remainder are set to ignore."""
    out = np.array(labels, copy=True)
    pos = np.nonzero(out == 1)[0]
    neg = np.nonzero(out == 0)[0]
    n_pos = min(len(pos), int(num * pos_fraction))
    if len(pos) > n_pos:
        out[rng.choice(pos, len(pos) - n_pos, replace=False)] = -1
    n_neg = min(len(neg), num - n_pos)
    if len(neg) > n_neg:
        out[rng.choice(neg, len(neg) - n_neg, replace=False)] = -1
    return out


def smooth_l1(diff: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    a = diff.abs()
    return torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def rpn_loss(logits: torch.Tensor, deltas: torch.Tensor, labels, target_deltas, lam: float = 1.0,
             n_cls: Optional[float] = None, n_loc: Optional[float] = None):
    """Proposal-stage loss.

    ``logits`` (N,) and ``deltas`` (N, 4) are aligned with ``labels``
    (1/0/-1) and ``target_deltas``. ``n_cls`` defaults to the number of
    labelled anchors and ``n_loc`` to the number of positives (at least 1).
    Returns ``(total, {"cls": ..., "loc": ...})``.
    """
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    valid = labels >= 0
    if not bool(valid.any()):
        raise ValueError("no sampled anchors")
    pos = labels == 1
    n_cls = float(valid.sum()) if n_cls is None else float(n_cls)
    n_loc = max(float(pos.sum()), 1.0) if n_loc is None else float(n_loc)
    cls = F.binary_cross_entropy_with_logits(logits[valid], labels[valid].to(logits.dtype), reduction="sum") / n_cls
    if bool(pos.any()):
        tgt = torch.as_tensor(np.asarray(target_deltas)[pos.numpy()], dtype=deltas.dtype)
        loc = smooth_l1(deltas[pos] - tgt).sum() / n_loc
    else:
        loc = deltas.sum() * 0.0
    return cls + lam * loc, {"cls": cls, "loc": loc}


def select_proposals(logits: Sequence[torch.Tensor], deltas: Sequence[torch.Tensor], anchors: Sequence[np.ndarray],
                     image_size: Tuple[int, int], max_proposals: int, cfg: RpnConfig) -> Detections:
    """Turn one query's per-level anchor outputs into proposals: per-level
    top-k, decode, clip, drop empty boxes, NMS, cap at ``max_proposals``."""
    boxes, scores, raw, idx = [], [], [], []
    offset = 0
    for lg, dl, an in zip(logits, deltas, anchors):
        s = torch.sigmoid(lg.detach()).double().numpy()
        order = np.argsort(-s, kind="stable")[: cfg.pre_nms_top_k]
        d = dl.detach().double().numpy()[order]
        b = geometry.decode_delta(d, an[order], image_size, cfg.delta_stds)
        keep = ((b[:, 2] - b[:, 0]) > cfg.min_size) & ((b[:, 3] - b[:, 1]) > cfg.min_size)
        boxes.append(b[keep])
        scores.append(s[order][keep])
        raw.append(d[keep])
        idx.append(order[keep] + offset)
        offset += len(an)
    dets = Detections(np.concatenate(boxes), np.concatenate(scores), np.concatenate(raw), np.concatenate(idx))
    kept = geometry.nms(dets.boxes, dets.scores, cfg.nms_iou, max_proposals)
    return dets.take(kept)
