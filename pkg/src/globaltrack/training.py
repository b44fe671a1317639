"""Frame-pair training: per-query and cross-query losses, the SGD schedule,
checkpointing and the metrics log."""

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import data as data_mod
from .data import PairSample, ResizeSpec
from .model import GlobalTrack
from .modelcore import CheckpointError, load_checkpoint, load_module_arrays
from .qg_rcnn import assign_proposal_targets, rcnn_loss
from .qg_rpn import assign_anchor_targets, rpn_loss, sample_labels, select_proposals

log = logging.getLogger(__name__)

TRAINLOG_HEADER = "# globaltrack-trainlog v1"
TRAINLOG_COLUMNS = "step,epoch,lr,total,rpn_cls,rpn_loc,rcnn_cls,rcnn_loc"
COMPONENTS = ("rpn_cls", "rpn_loc", "rcnn_cls", "rcnn_loc")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 12
    milestones: Tuple[int, ...] = (8, 11)
    gamma: float = 0.1
    iters_per_epoch: int = 1000
    warmup_iters: int = 0
    warmup_ratio: float = 1.0 / 3
    max_steps: int = 0
    frozen_prefixes: Tuple[str, ...] = ()
    grad_clip: float = 0.0  # max global gradient norm, 0 = off

    def __post_init__(self):
        if any(m < 1 or m > self.epochs for m in self.milestones):
            raise ValueError(f"milestones {self.milestones} outside 1..{self.epochs}")
        if self.batch_size < 1 or self.iters_per_epoch < 1:
            raise ValueError("batch size and iterations per epoch must be positive")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate in effect during 1-based ``epoch``: decayed by ``gamma``
    once for every milestone <= epoch."""
    return cfg.lr * cfg.gamma ** sum(1 for m in cfg.milestones if epoch >= m)


def lr_at_step(cfg: TrainConfig, epoch: int, step: int) -> float:
    lr = lr_at_epoch(cfg, epoch)
    if cfg.warmup_iters and step < cfg.warmup_iters:
        k = step / cfg.warmup_iters
        lr *= cfg.warmup_ratio + (1 - cfg.warmup_ratio) * k
    return lr


# --------------------------------------------------------------------------
# network inputs


@dataclass
class PreparedPair:
    query: torch.Tensor  # (3, H, W)
    search: torch.Tensor
    query_boxes: np.ndarray  # (M, 4) in network-input pixels
    search_boxes: np.ndarray

    @property
    def search_size(self) -> Tuple[int, int]:
        return tuple(self.search.shape[1:])

    @property
    def num_instances(self) -> int:
        return len(self.query_boxes)


def prepare_pair(sample: PairSample, resize: ResizeSpec = ResizeSpec(), dtype=torch.float32) -> PreparedPair:
    q, _, qb = data_mod.resize_normalize(sample.query_image, resize, sample.query_boxes)
    x, _, xb = data_mod.resize_normalize(sample.search_image, resize, sample.search_boxes)
    return PreparedPair(torch.from_numpy(q).to(dtype), torch.from_numpy(x).to(dtype), qb, xb)


def instance_seed(sampling_seed: int, query_box, gt_box) -> List[int]:
    """Seed words for one instance's target sampling. Derived from the boxes
    themselves so the cross-query loss does not depend on instance order."""
    words = np.concatenate([np.asarray(query_box, dtype=np.float64), np.asarray(gt_box, dtype=np.float64)]).view(np.uint32)
    return [int(sampling_seed) & 0xFFFFFFFF] + [int(w) for w in words]


# --------------------------------------------------------------------------
# stage losses


def rpn_stage_loss(model: GlobalTrack, logits: Sequence[torch.Tensor], deltas: Sequence[torch.Tensor], fmaps,
                   image_size, gt, rng: np.random.Generator):
    """Proposal-stage loss for one query from its per-level outputs
    (each ``(N_l,)`` / ``(N_l, 4)``). Returns ``(loss, parts, proposals)``."""
    cfg = model.cfg
    anchors = model.anchors(fmaps)
    tgt = assign_anchor_targets(np.concatenate(anchors), gt, cfg.rpn.pos_iou, cfg.rpn.neg_iou, cfg.rpn.delta_stds)
    labels = sample_labels(tgt.labels, cfg.rpn.num_samples, cfg.rpn.pos_fraction, rng)
    loss, parts = rpn_loss(torch.cat(list(logits)), torch.cat(list(deltas)), labels, tgt.deltas, cfg.lam)
    proposals = select_proposals(logits, deltas, anchors, image_size, cfg.rpn.train_max_proposals, cfg.rpn)
    return loss, parts, proposals


def rcnn_stage_loss(model: GlobalTrack, z: torch.Tensor, fmaps, proposals, gt, rng: np.random.Generator):
    """Second-stage loss for one query ``z`` (C, k, k) over sampled proposals."""
    cfg = model.cfg
    boxes = np.asarray(getattr(proposals, "boxes", proposals), dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt, dtype=np.float64).reshape(1, 4)
    if cfg.rcnn.add_gt_as_proposal:
        boxes = np.concatenate([g, boxes])
    tgt = assign_proposal_targets(boxes, g, cfg.rcnn.pos_iou, cfg.rcnn.delta_stds)
    labels = sample_labels(tgt.labels, cfg.rcnn.num_samples, cfg.rcnn.pos_fraction, rng)
    sel = labels >= 0
    logits, deltas = model.rcnn_outputs(z, fmaps, boxes[sel])
    return rcnn_loss(logits, deltas, labels[sel], tgt.deltas[sel], cfg.lam)


def _pair_loss_from_outputs(model, z, logits, deltas, fmaps, image_size, gt, seed_words):
    rpn_total, rpn_parts, proposals = rpn_stage_loss(
        model, logits, deltas, fmaps, image_size, gt, np.random.default_rng(seed_words + [0])
    )
    rcnn_total, rcnn_parts = rcnn_stage_loss(model, z, fmaps, proposals, gt, np.random.default_rng(seed_words + [1]))
    parts = {
        "rpn": rpn_total,
        "rcnn": rcnn_total,
        "rpn_cls": rpn_parts["cls"],
        "rpn_loc": rpn_parts["loc"],
        "rcnn_cls": rcnn_parts["cls"],
        "rcnn_loc": rcnn_parts["loc"],
    }
    return rpn_total + rcnn_total, parts


def pair_loss(model: GlobalTrack, z: torch.Tensor, fmaps, image_size, gt, seed_words: List[int]):
    """Loss of one query ``z`` (C, k, k) against a search image's features:
    the sum of the two stage losses. Returns ``(total, parts)``."""
    logits, deltas = model.rpn_outputs(z[None], fmaps)
    return _pair_loss_from_outputs(model, z, [lg[0] for lg in logits], [dl[0] for dl in deltas], fmaps, image_size, gt, seed_words)


def cross_query_loss(model: GlobalTrack, pair: PreparedPair, sampling_seed: int = 0):
    """Mean of the per-query losses over the ``M`` co-existing instances.

    The backbone runs once per image and the search-side projection of the
    proposal-stage modulation is shared across queries.
    """
    m = pair.num_instances
    if m == 0:
        raise ValueError("cross-query loss needs at least one instance")
    zmaps = model.features(pair.query)
    xmaps = model.features(pair.search)
    z = model.query_features(zmaps, pair.query_boxes)
    logits, deltas = model.rpn_outputs(z, xmaps)
    total = 0.0
    parts = {k: 0.0 for k in ("rpn", "rcnn") + COMPONENTS}
    for k in range(m):
        seed = instance_seed(sampling_seed, pair.query_boxes[k], pair.search_boxes[k])
        loss_k, parts_k = _pair_loss_from_outputs(
            model, z[k], [lg[k] for lg in logits], [dl[k] for dl in deltas], xmaps, pair.search_size, pair.search_boxes[k], seed
        )
        total = total + loss_k
        for key in parts:
            parts[key] = parts[key] + parts_k[key]
    return total / m, {key: v / m for key, v in parts.items()}


# --------------------------------------------------------------------------
# optimisation loop


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    steps: int
    losses: List[float]
    checkpoints: List[Path] = field(default_factory=list)


PairSource = Union[Sequence[PairSample], Callable[[np.random.Generator], PairSample]]

_CKPT_RE = re.compile(r"epoch_(\d+)\.gtck$")


def latest_checkpoint(out_dir) -> Optional[Path]:
    found = []
    for p in Path(out_dir).glob("epoch_*.gtck"):
        m = _CKPT_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found)[1] if found else None


def _dump_sample(out_dir: Path, step: int, sample: PairSample) -> Path:
    path = out_dir / f"nonfinite_step{step}.npz"
    np.savez(path, query_image=sample.query_image, search_image=sample.search_image,
             query_boxes=sample.query_boxes, search_boxes=sample.search_boxes)
    return path


def _format_log(step, epoch, lr, total, parts) -> str:
    vals = [f"{total:.8f}"] + [f"{float(parts[k]):.8f}" for k in COMPONENTS]
    return f"{step},{epoch},{lr:.8g}," + ",".join(vals)


def train(model: GlobalTrack, cfg: TrainConfig, pairs: PairSource, out_dir, seed: int = 0,
          resize: ResizeSpec = ResizeSpec(), resume: bool = True, config_echo: Optional[dict] = None) -> TrainResult:
    """SGD over sampled frame pairs.

    ``pairs`` is either a fixed list (cycled in a seeded order) or a callable
    drawing a :class:`PairSample` from a generator. A checkpoint is written
    at every epoch end; with ``resume`` the newest one in ``out_dir`` is
    loaded first. Per-step losses are appended to ``out_dir/train.log``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, p in model.named_parameters():
        if any(name.startswith(pre) for pre in cfg.frozen_prefixes):
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    start_epoch, step = 1, 0
    log_path = out_dir / "train.log"
    ckpt = latest_checkpoint(out_dir) if resume else None
    if ckpt is not None:
        meta, arrays = load_checkpoint(ckpt)
        load_module_arrays(model, arrays)
        named = dict(model.named_parameters())
        for name, p in named.items():
            buf = arrays.get("optim.momentum." + name)
            if buf is not None and p.requires_grad:
                opt.state[p]["momentum_buffer"] = torch.from_numpy(buf).to(p.dtype)
        start_epoch, step = meta["train_state"]["epoch"] + 1, meta["train_state"]["step"]
        log.info("resumed from %s at epoch %d step %d", ckpt, start_epoch, step)
    else:
        log_path.write_text(TRAINLOG_HEADER + "\n" + TRAINLOG_COLUMNS + "\n")

    result = TrainResult(step, [])
    model.train()
    with open(log_path, "a") as logf:
        for epoch in range(start_epoch, cfg.epochs + 1):
            rng = np.random.default_rng([seed, epoch])
            order = rng.permutation(len(pairs)) if isinstance(pairs, Sequence) else None
            for it in range(cfg.iters_per_epoch):
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                lr = lr_at_step(cfg, epoch, step)
                for g in opt.param_groups:
                    g["lr"] = lr
                opt.zero_grad(set_to_none=True)
                batch_total = 0.0
                batch_parts = {k: 0.0 for k in COMPONENTS}
                for b in range(cfg.batch_size):
                    if order is not None:
                        sample = pairs[order[(it * cfg.batch_size + b) % len(pairs)]]
                    else:
                        sample = pairs(rng)
                    prepared = prepare_pair(sample, resize)
                    loss, parts = cross_query_loss(model, prepared, int(rng.integers(2**31)))
                    if not torch.isfinite(loss):
                        dump = _dump_sample(out_dir, step, sample)
                        raise NonFiniteLossError(f"non-finite loss at step {step} (epoch {epoch}); sample saved to {dump}")
                    (loss / cfg.batch_size).backward()
                    batch_total += float(loss.detach()) / cfg.batch_size
                    for k in COMPONENTS:
                        batch_parts[k] += float(parts[k].detach()) / cfg.batch_size
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                step += 1
                result.losses.append(batch_total)
                logf.write(_format_log(step, epoch, lr, batch_total, batch_parts) + "\n")
                logf.flush()
            path = out_dir / f"epoch_{epoch:03d}.gtck"
            momentum = {
                "optim.momentum." + name: opt.state[p]["momentum_buffer"].numpy()
                for name, p in model.named_parameters()
                if p in opt.state and opt.state[p].get("momentum_buffer") is not None
            }
            extra = {"train_state": {"epoch": epoch, "step": step, "seed": seed}}
            if config_echo:
                extra["config"] = config_echo
            model.save(path, extra, momentum)
            result.checkpoints.append(path)
            if cfg.max_steps and step >= cfg.max_steps:
                break
    result.steps = step
    model.eval()
    return result


def read_train_log(path) -> List[Dict[str, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line == TRAINLOG_COLUMNS:
            continue
        vals = line.split(",")
        rows.append(dict(zip(TRAINLOG_COLUMNS.split(","), map(float, vals))))
    return rows


# --------------------------------------------------------------------------
# fit diagnostics


@dataclass
class PairPredictions:
    """Per-instance outputs over a set of pairs, flattened pair-major."""

    proposals: List[np.ndarray]  # score-descending proposal boxes
    detections: List[np.ndarray]  # score-descending refined boxes
    groundtruth: List[np.ndarray]


def predict_pairs(model: GlobalTrack, pairs: Sequence[PairSample], resize: ResizeSpec = ResizeSpec(),
                  max_proposals: Optional[int] = None) -> PairPredictions:
    """Run both stages for every query instance of every pair, in resized
    image coordinates."""
    model.eval()
    out = PairPredictions([], [], [])
    with torch.no_grad():
        for sample in pairs:
            p = prepare_pair(sample, resize)
            zmaps, xmaps = model.features(p.query), model.features(p.search)
            z = model.query_features(zmaps, p.query_boxes)
            props = model.propose(z, xmaps, p.search_size, max_proposals)
            for k in range(p.num_instances):
                dets = model.classify_and_refine(z[k], props[k], xmaps, p.search_size)
                out.proposals.append(props[k].boxes)
                out.detections.append(dets.boxes)
                out.groundtruth.append(p.search_boxes[k])
    return out
