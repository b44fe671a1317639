"""Second stage: proposal classification/refinement head, proposal targets
and the per-proposal loss."""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import geometry
from .qg_rpn import sample_labels, smooth_l1  # noqa: F401  (re-exported for callers)


@dataclass(frozen=True)
class RcnnConfig:
    hidden: int = 1024
    pos_iou: float = 0.5
    num_samples: int = 512
    pos_fraction: float = 0.25
    add_gt_as_proposal: bool = True
    delta_stds: Tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)


class RcnnHead(nn.Module):
    """Two shared fully connected layers on flattened ROI features, then a
    single foreground logit and 4 deltas."""

    def __init__(self, channels: int, roi_size: int, hidden: int = 1024):
        super().__init__()
        self.fc1 = nn.Linear(channels * roi_size * roi_size, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, 1)
        self.reg = nn.Linear(hidden, 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.normal_(self.reg.weight, std=0.001)
        for m in (self.fc1, self.fc2, self.cls, self.reg):
            nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor):
        t = F.relu(self.fc1(x.flatten(1)))
        t = F.relu(self.fc2(t))
        return self.cls(t)[:, 0], self.reg(t)


@dataclass
class ProposalTargets:
    labels: np.ndarray  # 1 positive, 0 negative
    deltas: np.ndarray  # NaN rows for negatives


def assign_proposal_targets(proposals, groundtruth, pos_iou: float = 0.5, stds=(0.1, 0.1, 0.2, 0.2)) -> ProposalTargets:
    """IoU >= ``pos_iou`` with the groundtruth is positive, everything else
    negative."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if len(p) == 0:
        raise ValueError("no proposals to assign")
    g = np.asarray(groundtruth.as_array() if hasattr(groundtruth, "as_array") else groundtruth, dtype=np.float64).reshape(1, 4)
    ov = geometry.iou_matrix(p, g)[:, 0]
    labels = (ov >= pos_iou).astype(np.int8)
    deltas = np.full((len(p), 4), np.nan)
    pos = labels == 1
    if pos.any():
        deltas[pos] = geometry.encode_delta(np.repeat(g, pos.sum(), axis=0), p[pos], stds)
    return ProposalTargets(labels, deltas)


def rcnn_loss_terms(logits: torch.Tensor, deltas: torch.Tensor, labels, target_deltas, lam: float = 1.0):
    """Per-proposal loss ``L_cls + lam * p* * L_loc`` -> (cls, loc, total), each (N,)."""
    labels = torch.as_tensor(np.asarray(labels), dtype=logits.dtype)
    cls = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    tgt = torch.as_tensor(np.nan_to_num(np.asarray(target_deltas, dtype=np.float64)), dtype=deltas.dtype)
    # negatives are gated out before the smooth L1 so they carry no gradient
    gate = labels > 0.5
    diff = torch.where(gate[:, None], deltas - tgt, torch.zeros_like(deltas))
    loc = smooth_l1(diff).sum(dim=1)
    return cls, loc, cls + lam * loc


def rcnn_loss(logits: torch.Tensor, deltas: torch.Tensor, labels, target_deltas, lam: float = 1.0):
    """Mean over proposals of the per-proposal loss. Returns
    ``(total, {"cls": ..., "loc": ...})`` with the components also averaged."""
    if logits.numel() == 0:
        raise ValueError("no proposals")
    cls, loc, _ = rcnn_loss_terms(logits, deltas, labels, target_deltas, lam)
    cls_m, loc_m = cls.mean(), loc.mean()
    return cls_m + lam * loc_m, {"cls": cls_m, "loc": loc_m}
