"""Flat ``key = value`` configuration with dotted namespaces.

Every key has a default below; files and ``key=value`` overrides may only set
known keys. Where a key maps to a named symbol of the method (c, k, lambda, tau) the comment says so.
"""

from importlib import resources
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .data import (
    AugmentConfig,
    ImageDataset,
    MixtureSpec,
    ResizeSpec,
    SequenceDataset,
    SyntheticSpec,
    generate_synthetic,
    sample_pair,
)
from .model import ModelConfig
from .modelcore import BackboneConfig
from .qg_rcnn import RcnnConfig
from .qg_rpn import RpnConfig
from .tracker import TrackerConfig
from .training import TrainConfig

CONFIG_HEADER = "# globaltrack-config v1"


class ConfigError(ValueError):
    pass


class DatasetError(FileNotFoundError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _opt_int(s: str) -> Optional[int]:
    return None if s.strip().lower() in ("", "none", "auto") else int(s)


def _str(s: str) -> str:
    return s.strip()


# key: (default, parser, comment)
KEYS: Dict[str, Tuple[Any, Callable[[str], Any], str]] = {
    "model.backbone": ("resnet50_fpn", _str, "backbone architecture: desk | resnet50_fpn"),
    "model.channels": (256, int, "c, backbone feature channels"),
    "model.stride": (16, int, "desk backbone output stride (power of two)"),
    "model.pyramid": (True, _bool, "multi-level features; modulation applied per level with shared weights"),
    "model.desk_blocks": (5, int, "desk backbone conv blocks"),
    "model.desk_width": (16, int, "desk backbone first-block width"),
    "model.init": ("random", _str, "backbone initialisation: random | path to checkpoint"),
    "model.roi_size": (7, int, "k, ROI align output size"),
    "model.proj_channels": (256, _opt_int, "c', output channels of f_x, f_z, h_x, h_z"),
    "model.correlation": ("depthwise", _str, "f_z kernel form: depthwise | full"),
    "model.anchor_scales": ((32.0, 64.0, 128.0, 256.0, 512.0), _floats, "single-level anchor sides (base-detector default)"),
    "model.anchor_ratios": ((0.5, 1.0, 2.0), _floats, "anchor height/width ratios (base-detector default)"),
    "model.anchor_octave_scale": (8.0, float, "pyramid anchor side = octave_scale * level stride"),
    "loss.lambda": (1.0, float, "lambda, localisation loss weight in both stages"),
    "rpn.pos_iou": (0.7, float, "anchor positive IoU (base-detector default)"),
    "rpn.neg_iou": (0.3, float, "anchor negative IoU (base-detector default)"),
    "rpn.num_samples": (256, int, "anchors sampled per query for the loss (N_cls)"),
    "rpn.pos_fraction": (0.5, float, "max positive fraction of sampled anchors"),
    "rpn.pre_nms_top_k": (2000, int, "per-level candidates before NMS"),
    "rpn.train_max_proposals": (2000, int, "proposals kept for the loss"),
    "rpn.test_max_proposals": (1000, int, "proposals kept at inference"),
    "rpn.nms_iou": (0.7, float, "proposal NMS IoU threshold (base-detector default)"),
    "rpn.min_size": (0.0, float, "minimum proposal side in pixels"),
    "rpn.delta_stds": ((1.0, 1.0, 1.0, 1.0), _floats, "anchor delta normalisation"),
    "rcnn.hidden": (1024, int, "hidden width of the two FC layers"),
    "rcnn.pos_iou": (0.5, float, "proposal positive IoU"),
    "rcnn.num_samples": (512, int, "N_prop, proposals sampled per query"),
    "rcnn.pos_fraction": (0.25, float, "max positive fraction of sampled proposals"),
    "rcnn.add_gt_as_proposal": (True, _bool, "include the groundtruth box among proposals in training"),
    "rcnn.delta_stds": ((0.1, 0.1, 0.2, 0.2), _floats, "proposal delta normalisation"),
    "train.batch_size": (4, int, "pairs per SGD step"),
    "train.lr": (0.01, float, "initial learning rate"),
    "train.momentum": (0.9, float, "SGD momentum"),
    "train.weight_decay": (1e-4, float, "SGD weight decay"),
    "train.epochs": (12, int, "epochs per phase"),
    "train.milestones": ((8, 11), _ints, "epochs at which the learning rate decays"),
    "train.gamma": (0.1, float, "learning-rate decay factor"),
    "train.iters_per_epoch": (1000, int, "SGD steps per epoch"),
    "train.warmup_iters": (0, int, "linear warmup steps (0 = off)"),
    "train.warmup_ratio": (1.0 / 3, float, "warmup starting fraction of the learning rate"),
    "train.grad_clip": (0.0, float, "max global gradient norm (0 = off)"),
    "train.max_steps": (0, int, "stop after this many steps (0 = full schedule)"),
    "train.fixed_pairs": (0, int, "draw this many pairs once and cycle them (0 = fresh pairs every step)"),
    "train.frozen_prefixes": ("", _str, "comma-separated parameter-name prefixes to freeze"),
    "data.mixture": ("", _str, "comma-separated path:probability entries (reference mix: 0.4, 0.4, 0.2)"),
    "data.pretrain_mixture": ("", _str, "optional first-phase mixture; when set the schedule runs twice"),
    "data.max_long_edge": (1333, int, "resize limit on the longer edge"),
    "data.max_short_edge": (800, int, "resize limit on the shorter edge"),
    "data.rounding": ("floor", _str, "resized size rounding: floor | round"),
    "data.mean": ((123.675, 116.28, 103.53), _floats, "per-channel normalisation mean (RGB)"),
    "data.std": ((58.395, 57.12, 57.375), _floats, "per-channel normalisation std (RGB)"),
    "data.flip_prob": (0.5, float, "horizontal flip probability"),
    "data.brightness": (0.2, float, "brightness jitter range"),
    "data.contrast": (0.2, float, "contrast jitter range"),
    "data.saturation": (0.2, float, "saturation jitter range"),
    "data.augment": (True, _bool, "apply flip/jitter to sampled pairs"),
    "data.max_retries": (10, int, "attempts to find a co-present frame pair in one sequence"),
    "synth.sequences": (0, int, "synthetic sequences used when data.mixture is empty"),
    "synth.frames": (20, int, "frames per synthetic sequence"),
    "synth.height": (128, int, "synthetic frame height"),
    "synth.width": (128, int, "synthetic frame width"),
    "synth.instances": (2, int, "instances per synthetic sequence"),
    "synth.min_size": (20, int, "smallest synthetic object side"),
    "synth.max_size": (44, int, "largest synthetic object side"),
    "synth.seed": (0, int, "synthetic generator seed"),
    "track.tau": (0.84, float, "tau, presence threshold on the top-1 score"),
    "track.max_proposals": (1000, int, "proposals passed to the second stage while tracking"),
}


def defaults() -> Dict[str, Any]:
    return {k: v[0] for k, v in KEYS.items()}


def _unknown(keys: Iterable[str]) -> ConfigError:
    listing = "\n  ".join(sorted(KEYS))
    return ConfigError(f"unknown config key(s): {', '.join(sorted(keys))}\nvalid keys:\n  {listing}")


def parse_assignments(lines: Iterable[str], source: str = "<overrides>") -> Dict[str, Any]:
    out, bad = {}, []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            bad.append(key)
            continue
        try:
            out[key] = KEYS[key][1](value)
        except ValueError as e:
            raise ConfigError(f"{source}:{n}: bad value for {key}: {e}") from None
    if bad:
        raise _unknown(bad)
    return out


PRESETS = ("desk", "full")


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> Dict[str, Any]:
    """Defaults, then a config file (a path or a bundled preset name), then
    ``key=value`` overrides."""
    cfg = defaults()
    if path:
        if path in PRESETS:
            text = resources.files("globaltrack").joinpath(f"configs/{path}.cfg").read_text()
            source = f"<preset {path}>"
        else:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {path}")
            text, source = p.read_text(), str(p)
        cfg.update(parse_assignments(text.splitlines(), source))
    cfg.update(parse_assignments(overrides))
    return cfg


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def dump_config(cfg: Mapping[str, Any]) -> str:
    lines = [CONFIG_HEADER]
    for k in KEYS:
        lines.append(f"{k} = {_fmt(cfg[k])}  # {KEYS[k][2]}")
    return "\n".join(lines) + "\n"


def help_text() -> str:
    return "\n".join(f"  {k} (default {_fmt(v[0])}): {v[2]}" for k, v in KEYS.items())


# --------------------------------------------------------------------------
# builders


def model_config(cfg: Mapping[str, Any]) -> ModelConfig:
    backbone = BackboneConfig(
        arch=cfg["model.backbone"],
        channels=cfg["model.channels"],
        stride=cfg["model.stride"],
        pyramid=cfg["model.pyramid"] if cfg["model.backbone"] != "desk" else False,
        init=cfg["model.init"],
        desk_blocks=cfg["model.desk_blocks"],
        desk_width=cfg["model.desk_width"],
    )
    rpn = RpnConfig(
        pos_iou=cfg["rpn.pos_iou"], neg_iou=cfg["rpn.neg_iou"], num_samples=cfg["rpn.num_samples"],
        pos_fraction=cfg["rpn.pos_fraction"], pre_nms_top_k=cfg["rpn.pre_nms_top_k"],
        train_max_proposals=cfg["rpn.train_max_proposals"], test_max_proposals=cfg["rpn.test_max_proposals"],
        nms_iou=cfg["rpn.nms_iou"], min_size=cfg["rpn.min_size"], delta_stds=cfg["rpn.delta_stds"],
    )
    rcnn = RcnnConfig(
        hidden=cfg["rcnn.hidden"], pos_iou=cfg["rcnn.pos_iou"], num_samples=cfg["rcnn.num_samples"],
        pos_fraction=cfg["rcnn.pos_fraction"], add_gt_as_proposal=cfg["rcnn.add_gt_as_proposal"],
        delta_stds=cfg["rcnn.delta_stds"],
    )
    return ModelConfig(
        backbone=backbone, roi_size=cfg["model.roi_size"], proj_channels=cfg["model.proj_channels"],
        correlation=cfg["model.correlation"], anchor_scales=cfg["model.anchor_scales"],
        anchor_ratios=cfg["model.anchor_ratios"], anchor_octave_scale=cfg["model.anchor_octave_scale"],
        rpn=rpn, rcnn=rcnn, lam=cfg["loss.lambda"],
    )


def train_config(cfg: Mapping[str, Any]) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["train.batch_size"], lr=cfg["train.lr"], momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"], epochs=cfg["train.epochs"], milestones=cfg["train.milestones"],
        gamma=cfg["train.gamma"], iters_per_epoch=cfg["train.iters_per_epoch"],
        warmup_iters=cfg["train.warmup_iters"], warmup_ratio=cfg["train.warmup_ratio"],
        max_steps=cfg["train.max_steps"], grad_clip=cfg["train.grad_clip"],
        frozen_prefixes=tuple(p.strip() for p in cfg["train.frozen_prefixes"].split(",") if p.strip()),
    )


def resize_spec(cfg: Mapping[str, Any]) -> ResizeSpec:
    return ResizeSpec(cfg["data.max_long_edge"], cfg["data.max_short_edge"], cfg["data.rounding"],
                      tuple(cfg["data.mean"]), tuple(cfg["data.std"]))


def augment_config(cfg: Mapping[str, Any]) -> Optional[AugmentConfig]:
    if not cfg["data.augment"]:
        return None
    return AugmentConfig(cfg["data.flip_prob"], cfg["data.brightness"], cfg["data.contrast"], cfg["data.saturation"])


def synthetic_spec(cfg: Mapping[str, Any]) -> SyntheticSpec:
    return SyntheticSpec(
        num_sequences=cfg["synth.sequences"], num_frames=cfg["synth.frames"], height=cfg["synth.height"],
        width=cfg["synth.width"], num_instances=cfg["synth.instances"], min_size=cfg["synth.min_size"],
        max_size=cfg["synth.max_size"], seed=cfg["synth.seed"],
    )


def tracker_config(cfg: Mapping[str, Any]) -> TrackerConfig:
    return TrackerConfig(cfg["track.tau"], cfg["track.max_proposals"], resize_spec(cfg))


def _parse_mixture(spec: str) -> MixtureSpec:
    datasets, probs = [], []
    for entry in (e.strip() for e in spec.split(",")):
        if not entry:
            continue
        path, sep, p = entry.rpartition(":")
        if not sep:
            path, p = entry, "nan"
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"dataset not found: {path}")
        try:
            ds = ImageDataset.from_manifest(path) if path.is_file() else SequenceDataset.from_root(path)
        except (FileNotFoundError, ValueError) as e:
            raise DatasetError(str(e)) from None
        datasets.append(ds)
        probs.append(float(p))
    if not datasets:
        raise DatasetError("empty dataset mixture")
    if any(np.isnan(probs)):
        if not all(np.isnan(probs)):
            raise ConfigError("give a probability for every mixture entry or for none")
        probs = [1.0 / len(datasets)] * len(datasets)
    try:
        return MixtureSpec(datasets, probs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def mixture(cfg: Mapping[str, Any], key: str = "data.mixture") -> Optional[MixtureSpec]:
    """The dataset mixture under ``key``; the main mixture falls back to
    synthetic sequences when ``synth.sequences > 0``."""
    if cfg[key]:
        return _parse_mixture(cfg[key])
    if key == "data.mixture" and cfg["synth.sequences"] > 0:
        return MixtureSpec([generate_synthetic(synthetic_spec(cfg))], [1.0])
    return None


FIXED_PAIRS_STREAM = 0x5A17


def training_pairs(cfg: Mapping[str, Any], mix: MixtureSpec, seed: int):
    """A fixed list of ``train.fixed_pairs`` pairs, or a sampler drawing a
    fresh pair per step."""
    aug, retries = augment_config(cfg), cfg["data.max_retries"]
    if cfg["train.fixed_pairs"] > 0:
        rng = np.random.default_rng([seed, FIXED_PAIRS_STREAM])
        return [sample_pair(mix, rng, aug, retries) for _ in range(cfg["train.fixed_pairs"])]
    return lambda rng: sample_pair(mix, rng, aug, retries)
