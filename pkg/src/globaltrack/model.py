"""The two-stage query-guided detector assembled from its parts."""

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import geometry
from .geometry import AnchorGrid, Detections
from .modelcore import (
    BackboneConfig,
    FeatureMap,
    RcnnModulation,
    RpnModulation,
    build_backbone,
    extract_features,
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    pool_rois,
    save_checkpoint,
)
from .qg_rcnn import RcnnConfig, RcnnHead
from .qg_rpn import RpnConfig, RpnHead, select_proposals


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    roi_size: int = 7
    proj_channels: Optional[int] = None
    correlation: str = "depthwise"
    anchor_scales: Tuple[float, ...] = (32.0, 64.0, 128.0, 256.0, 512.0)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_octave_scale: float = 8.0
    rpn: RpnConfig = field(default_factory=RpnConfig)
    rcnn: RcnnConfig = field(default_factory=RcnnConfig)
    lam: float = 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        nested = {"backbone": BackboneConfig, "rpn": RpnConfig, "rcnn": RcnnConfig}
        for key, typ in nested.items():
            if key in d:
                d[key] = typ(**{k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()})
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class GlobalTrack(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.backbone.channels
        self.backbone = build_backbone(cfg.backbone)
        self.rpn_modulation = RpnModulation(c, cfg.roi_size, cfg.proj_channels, cfg.correlation)
        self.rcnn_modulation = RcnnModulation(c, cfg.proj_channels)
        self.rpn_head = RpnHead(c, self.anchor_grids()[0].num_anchors)
        self.rcnn_head = RcnnHead(c, cfg.roi_size, cfg.rcnn.hidden)
        self._anchor_cache = {}

    # -- anchors ----------------------------------------------------------

    def anchor_grids(self) -> List[AnchorGrid]:
        strides = self.backbone.strides
        if len(strides) == 1:
            return [AnchorGrid(tuple(self.cfg.anchor_scales), tuple(self.cfg.anchor_ratios), strides[0])]
        return [AnchorGrid((self.cfg.anchor_octave_scale * s,), tuple(self.cfg.anchor_ratios), s) for s in strides]

    def anchors(self, fmaps: Sequence[FeatureMap]) -> List[np.ndarray]:
        out = []
        for fm, grid in zip(fmaps, self.anchor_grids()):
            key = (fm.data.shape[1], fm.data.shape[2], grid)
            if key not in self._anchor_cache:
                self._anchor_cache[key] = geometry.generate_anchors(key[0], key[1], grid)
            out.append(self._anchor_cache[key])
        return out

    # -- forward pieces -----------------------------------------------------

    def features(self, image: torch.Tensor) -> List[FeatureMap]:
        return extract_features(self.backbone, image)

    def query_features(self, fmaps: Sequence[FeatureMap], boxes) -> torch.Tensor:
        """ROI features of query boxes -> (M, C, k, k)."""
        return pool_rois(fmaps, boxes, self.cfg.roi_size)

    def rpn_outputs(self, z: torch.Tensor, fmaps: Sequence[FeatureMap]):
        """Per-level ``(logits (M, N_l), deltas (M, N_l, 4))`` for ``M`` queries."""
        logits, deltas = [], []
        for fm in fmaps:
            lg, dl = self.rpn_head(self.rpn_modulation(z, fm.data))
            logits.append(lg)
            deltas.append(dl)
        return logits, deltas

    def propose(self, z: torch.Tensor, fmaps: Sequence[FeatureMap], image_size: Tuple[int, int],
                max_proposals: Optional[int] = None) -> List[Detections]:
        """Query-specific proposals for each of the ``M`` queries in ``z``."""
        if max_proposals is None:
            max_proposals = self.cfg.rpn.test_max_proposals
        with torch.no_grad():
            logits, deltas = self.rpn_outputs(z, fmaps)
        anchors = self.anchors(fmaps)
        return [
            select_proposals([lg[m] for lg in logits], [dl[m] for dl in deltas], anchors, image_size, max_proposals, self.cfg.rpn)
            for m in range(z.shape[0])
        ]

    def rcnn_outputs(self, z: torch.Tensor, fmaps: Sequence[FeatureMap], boxes) -> Tuple[torch.Tensor, torch.Tensor]:
        """Score and deltas for ``boxes`` under a single query ``z`` (C, k, k)."""
        rois = pool_rois(fmaps, boxes, self.cfg.roi_size)
        return self.rcnn_head(self.rcnn_modulation(z[None], rois))

    def classify_and_refine(self, z: torch.Tensor, proposals, fmaps: Sequence[FeatureMap],
                            image_size: Tuple[int, int]) -> Detections:
        """Final predictions for every proposal, score-descending with ties
        kept in proposal order. ``indices`` refer to positions in ``proposals``."""
        boxes = proposals.boxes if isinstance(proposals, Detections) else np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
        if len(boxes) == 0:
            raise ValueError("empty proposal list")
        with torch.no_grad():
            logits, deltas = self.rcnn_outputs(z, fmaps, boxes)
        scores = torch.sigmoid(logits).double().numpy()
        d = deltas.double().numpy()
        refined = geometry.decode_delta(d, boxes, image_size, self.cfg.rcnn.delta_stds)
        # a refinement pushed entirely off-image falls back to its proposal
        bad = ~(((refined[:, 2] - refined[:, 0]) > 0) & ((refined[:, 3] - refined[:, 1]) > 0))
        refined[bad] = boxes[bad]
        order = np.argsort(-scores, kind="stable")
        return Detections(refined[order], scores[order], d[order], order)

    # -- persistence ----------------------------------------------------------

    def save(self, path, extra: Optional[dict] = None, arrays: Optional[dict] = None) -> None:
        config = {"model": self.cfg.to_dict()}
        if extra:
            config.update(extra)
        payload = module_arrays(self)
        if arrays:
            payload.update(arrays)
        save_checkpoint(path, payload, config)

    @classmethod
    def load(cls, path, cfg: Optional[ModelConfig] = None):
        """Build a model from a checkpoint. Passing ``cfg`` checks the file
        against that configuration instead of the one echoed in the file."""
        config, arrays = load_checkpoint(path)
        model = cls(cfg if cfg is not None else ModelConfig.from_dict(config["model"]))
        load_module_arrays(model, arrays)
        model.eval()
        return model, config, arrays


def parameter_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
