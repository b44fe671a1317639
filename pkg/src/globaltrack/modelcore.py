"""Backbones, ROI align, query-guided feature modulation and checkpoint files.

Tensors are channel-first (``C x H x W``); a :class:`FeatureMap` wraps one
image's map together with its stride.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn


@dataclass
class FeatureMap:
    data: torch.Tensor  # (C, H, W)
    stride: int

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass(frozen=True)
class BackboneConfig:
    arch: str = "desk"
    channels: int = 256
    stride: int = 16
    pyramid: bool = False
    init: str = "random"
    desk_blocks: int = 5
    desk_width: int = 16

    def __post_init__(self):
        if self.channels <= 0:
            raise ValueError("channel count must be positive")
        if self.stride <= 0 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        if self.arch not in BACKBONES:
            raise ValueError(f"unknown backbone {self.arch!r}; choose from {sorted(BACKBONES)}")


# --------------------------------------------------------------------------
# backbones


class DeskBackbone(nn.Module):
    """Small conv stack: log2(stride) stride-2 conv/ReLU blocks, optional extra
    stride-1 blocks, and a linear 3x3 output conv producing ``channels``."""

    def __init__(self, channels: int = 64, stride: int = 16, blocks: int = 5, width: int = 16):
        super().__init__()
        n_down = int(math.log2(stride))
        if blocks < n_down + 1:
            raise ValueError(f"need at least {n_down + 1} blocks for stride {stride}")
        layers: List[nn.Module] = []
        cin = 3
        for i in range(blocks - 1):
            cout = min(channels, width * 2 ** min(i, n_down - 1))
            s = 2 if i < n_down else 1
            layers += [nn.Conv2d(cin, cout, 3, stride=s, padding=1), nn.ReLU(inplace=True)]
            cin = cout
        layers.append(nn.Conv2d(cin, channels, 3, padding=1))
        self.body = nn.Sequential(*layers)
        self.channels = channels
        self.strides = (stride,)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        return [self.body(image)]


class ResNet50FPN(nn.Module):
    """ResNet-50 body with frozen batch norm and a feature pyramid (P2-P6)."""

    def __init__(self, channels: int = 256):
        super().__init__()
        from torchvision.models import resnet50
        from torchvision.ops import FeaturePyramidNetwork
        from torchvision.ops.feature_pyramid_network import LastLevelMaxPool
        from torchvision.ops.misc import FrozenBatchNorm2d

        body = resnet50(weights=None, norm_layer=FrozenBatchNorm2d)
        self.stem = nn.Sequential(body.conv1, body.bn1, body.relu, body.maxpool)
        self.layers = nn.ModuleList([body.layer1, body.layer2, body.layer3, body.layer4])
        self.fpn = FeaturePyramidNetwork([256, 512, 1024, 2048], channels, extra_blocks=LastLevelMaxPool())
        self.channels = channels
        self.strides = (4, 8, 16, 32, 64)

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        x = self.stem(image)
        feats = {}
        for i, layer in enumerate(self.layers):
            x = layer(x)
            feats[str(i)] = x
        return list(self.fpn(feats).values())


BACKBONES = {"desk": DeskBackbone, "resnet50_fpn": ResNet50FPN}


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.arch == "desk":
        if cfg.pyramid:
            raise ValueError("the desk backbone has a single level")
        return DeskBackbone(cfg.channels, cfg.stride, cfg.desk_blocks, cfg.desk_width)
    return ResNet50FPN(cfg.channels)


def extract_features(backbone: nn.Module, image: torch.Tensor) -> List[FeatureMap]:
    """Run ``backbone`` on one normalized ``(3, H, W)`` image."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
    if min(image.shape[1:]) < max(backbone.strides):
        raise ValueError(f"image {tuple(image.shape[1:])} smaller than stride {max(backbone.strides)}")
    maps = backbone(image[None])
    return [FeatureMap(m[0], s) for m, s in zip(maps, backbone.strides)]


# --------------------------------------------------------------------------
# ROI align


def _bilinear_taps(coords: torch.Tensor, size: int):
    """Low/high indices and weights along one axis, ROI-align boundary rules."""
    valid = (coords >= -1.0) & (coords <= size)
    c = coords.clamp(min=0.0)
    low = c.floor().long()
    at_edge = low >= size - 1
    low = torch.where(at_edge, torch.full_like(low, size - 1), low)
    high = torch.where(at_edge, low, low + 1)
    c = torch.where(at_edge, low.to(c.dtype), c)
    frac = c - low.to(c.dtype)
    return low, high, 1.0 - frac, frac, valid


def _interp_matrix(coords: torch.Tensor, size: int, k: int, s: int) -> torch.Tensor:
    """(N, k, size) weights averaging the ``s`` bilinear taps of each output cell."""
    n = coords.shape[0]
    low, high, wl, wh, valid = _bilinear_taps(coords, size)
    m = coords.new_zeros((n, k * s, size))
    v = valid.to(coords.dtype)
    m.scatter_add_(2, low[..., None], (wl * v)[..., None])
    m.scatter_add_(2, high[..., None], (wh * v)[..., None])
    return m.reshape(n, k, s, size).mean(dim=2)


def roi_align(
    feature: torch.Tensor,
    boxes,
    output_size: int = 7,
    spatial_scale: float = 1.0,
    sampling_ratio: int = 2,
    aligned: bool = True,
    method: str = "auto",
) -> torch.Tensor:
    """Pool ``(N, 4)`` image-space boxes from a ``(C, H, W)`` map into
    ``(N, C, k, k)`` by averaging ``sampling_ratio**2`` bilinear samples per
    output cell. Differentiable with respect to ``feature``.

    The sampling grid is separable per box, so pooling can be done either as
    two small matmuls against per-box interpolation matrices (``"dense"``,
    cheap on small maps) or by gathering the four taps of every sample
    (``"gather"``, cheap on large maps). ``"auto"`` picks by operation count.
    """
    C, H, W = feature.shape
    b = torch.as_tensor(np.asarray(boxes, dtype=np.float64), dtype=feature.dtype).reshape(-1, 4)
    b = b * spatial_scale
    if aligned:
        b = b - 0.5
    n = b.shape[0]
    k, s = output_size, sampling_ratio
    steps = (torch.arange(k * s, dtype=feature.dtype) + 0.5) / s  # in bin units
    ys = b[:, 1:2] + steps[None] * ((b[:, 3] - b[:, 1]) / k)[:, None]  # (N, kS)
    xs = b[:, 0:1] + steps[None] * ((b[:, 2] - b[:, 0]) / k)[:, None]
    if method == "auto":
        method = "dense" if H * W * k <= 4 * (k * s) ** 2 * 8 else "gather"
    if method == "dense":
        py = _interp_matrix(ys, H, k, s)
        px = _interp_matrix(xs, W, k, s)
        t = torch.matmul(feature[None], px.transpose(1, 2)[:, None])  # (N, C, H, k)
        return torch.matmul(py[:, None], t)
    if method != "gather":
        raise ValueError(f"unknown roi_align method {method!r}")
    y0, y1, wy0, wy1, vy = _bilinear_taps(ys, H)
    x0, x1, wx0, wx1, vx = _bilinear_taps(xs, W)
    flat = feature.reshape(C, H * W)

    def gather(yi, xi):
        idx = (yi[:, :, None] * W + xi[:, None, :]).reshape(-1)
        return flat[:, idx].reshape(C, n, k * s, k * s)

    val = (
        gather(y0, x0) * (wy0[:, :, None] * wx0[:, None, :])
        + gather(y0, x1) * (wy0[:, :, None] * wx1[:, None, :])
        + gather(y1, x0) * (wy1[:, :, None] * wx0[:, None, :])
        + gather(y1, x1) * (wy1[:, :, None] * wx1[:, None, :])
    )
    val = val * (vy[:, :, None] & vx[:, None, :]).to(feature.dtype)
    val = val.reshape(C, n, k, s, k, s).mean(dim=(3, 5))
    return val.permute(1, 0, 2, 3).contiguous()


def pool_roi(fmap: FeatureMap, box, output_size: int = 7, image_size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """ROI feature of a single box -> ``(C, k, k)``.

    With ``image_size`` the box is clipped first; a box with no area left is
    rejected.
    """
    b = np.asarray(box.as_array() if hasattr(box, "as_array") else box, dtype=np.float64).reshape(4).copy()
    if image_size is not None:
        h, w = image_size
        b[0::2] = np.clip(b[0::2], 0, w)
        b[1::2] = np.clip(b[1::2], 0, h)
    if not (np.all(np.isfinite(b)) and b[2] > b[0] and b[3] > b[1]):
        raise ValueError(f"degenerate ROI {b.tolist()}")
    return roi_align(fmap.data, b[None], output_size, 1.0 / fmap.stride)[0]


def map_levels(boxes, strides: Sequence[int], canonical_scale: float = 224.0, canonical_level: int = 4) -> np.ndarray:
    """Index of the pyramid level each box is pooled from.

    Uses the usual ``floor(4 + log2(sqrt(wh) / 224))`` rule restricted to the
    levels that exist; single-level inputs always map to 0.
    """
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(strides) == 1:
        return np.zeros(len(b), dtype=np.int64)
    levels = np.log2(np.asarray(strides, dtype=np.float64)).astype(np.int64)
    # the extra max-pooled level is not used for ROI pooling
    usable = levels[:-1] if len(levels) > 4 else levels
    scale = np.sqrt(np.clip((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]), 1e-12, None))
    target = np.floor(canonical_level + np.log2(scale / canonical_scale + 1e-8)).astype(np.int64)
    target = np.clip(target, usable.min(), usable.max())
    return target - levels[0]


def pool_rois(fmaps: Sequence[FeatureMap], boxes, output_size: int = 7) -> torch.Tensor:
    """Pool many boxes from a (possibly multi-level) map list -> ``(N, C, k, k)``."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(fmaps) == 1:
        return roi_align(fmaps[0].data, b, output_size, 1.0 / fmaps[0].stride)
    lvl = map_levels(b, [f.stride for f in fmaps])
    c = fmaps[0].channels
    out = fmaps[0].data.new_zeros((len(b), c, output_size, output_size))
    for i, fm in enumerate(fmaps):
        sel = np.nonzero(lvl == i)[0]
        if sel.size:
            out = out.index_copy(0, torch.from_numpy(sel), roi_align(fm.data, b[sel], output_size, 1.0 / fm.stride))
    return out


# --------------------------------------------------------------------------
# query-guided modulation


class RpnModulation(nn.Module):
    """Projections for the proposal-stage correlation.

    ``f_x`` is 3x3 (padding 1) on the search map, ``f_z`` is a k x k valid
    conv that turns the query ROI feature into a 1x1 kernel, and ``f_out`` is
    a 1x1 conv back to ``channels``. With ``mode="depthwise"`` the kernel is
    applied per channel; ``mode="full"`` makes ``f_z`` emit a dense
    ``c' x c'`` 1x1 kernel instead.
    """

    def __init__(self, channels: int, roi_size: int = 7, proj_channels: Optional[int] = None, mode: str = "depthwise"):
        super().__init__()
        if mode not in ("depthwise", "full"):
            raise ValueError(f"unknown correlation mode {mode!r}")
        cp = proj_channels or channels
        self.channels, self.proj_channels, self.roi_size, self.mode = channels, cp, roi_size, mode
        self.f_x = nn.Conv2d(channels, cp, 3, padding=1)
        self.f_z = nn.Conv2d(channels, cp if mode == "depthwise" else cp * cp, roi_size, padding=0)
        self.f_out = nn.Conv2d(cp, channels, 1)
        for conv in (self.f_x, self.f_z, self.f_out):
            nn.init.zeros_(conv.bias)

    def forward(self, z: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """``z``: (M, C, k, k), ``x``: (C, H, W) -> (M, C, H, W)."""
        fx = self.f_x(x[None])
        kz = self.f_z(z)
        if self.mode == "depthwise":
            y = fx * kz
        else:
            kernel = kz.reshape(z.shape[0], self.proj_channels, self.proj_channels)
            y = torch.einsum("moc,chw->mohw", kernel, fx[0])
        return self.f_out(y)


class RcnnModulation(nn.Module):
    """Projections for the second-stage Hadamard modulation: ``h_x`` and
    ``h_z`` are 3x3 convs (padding 1), ``h_out`` is 1x1 back to ``channels``."""

    def __init__(self, channels: int, proj_channels: Optional[int] = None):
        super().__init__()
        cp = proj_channels or channels
        self.channels, self.proj_channels = channels, cp
        self.h_x = nn.Conv2d(channels, cp, 3, padding=1)
        self.h_z = nn.Conv2d(channels, cp, 3, padding=1)
        self.h_out = nn.Conv2d(cp, channels, 1)
        for conv in (self.h_x, self.h_z, self.h_out):
            nn.init.zeros_(conv.bias)

    def forward(self, z: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """``z``: (1, C, k, k) or (N, C, k, k), ``x``: (N, C, k, k) -> (N, C, k, k)."""
        return self.h_out(self.h_x(x) * self.h_z(z))


def _batched_query(z: torch.Tensor) -> torch.Tensor:
    return z[None] if z.ndim == 3 else z


def modulate_rpn_features(z: torch.Tensor, x: Union[FeatureMap, torch.Tensor], params: RpnModulation):
    """Correlate query ROI feature(s) with a search map.

    A single ``(C, k, k)`` query gives a ``(C, H, W)`` result (wrapped back
    into a :class:`FeatureMap` if one was passed); a ``(M, C, k, k)`` stack
    gives ``(M, C, H, W)``.
    """
    data = x.data if isinstance(x, FeatureMap) else x
    zb = _batched_query(z)
    if data.ndim != 3:
        raise ValueError(f"search features must be (C, H, W), got {tuple(data.shape)}")
    if zb.shape[1] != params.channels or data.shape[0] != params.channels:
        raise ValueError(f"channel mismatch: query {zb.shape[1]}, search {data.shape[0]}, params {params.channels}")
    if zb.shape[2:] != (params.roi_size, params.roi_size):
        raise ValueError(f"query ROI must be {params.roi_size}x{params.roi_size}, got {tuple(zb.shape[2:])}")
    out = params(zb, data)
    if z.ndim == 3:
        out = out[0]
        return FeatureMap(out, x.stride) if isinstance(x, FeatureMap) else out
    return out


def modulate_roi_features(z: torch.Tensor, x: torch.Tensor, params: RcnnModulation) -> torch.Tensor:
    """Hadamard modulation of proposal ROI feature(s) by the query ROI feature."""
    zb, xb = _batched_query(z), _batched_query(x)
    if zb.shape[1:] != xb.shape[1:]:
        raise ValueError(f"shape mismatch: query {tuple(zb.shape[1:])} vs proposal {tuple(xb.shape[1:])}")
    if xb.shape[1] != params.channels:
        raise ValueError(f"channel mismatch: features {xb.shape[1]}, params {params.channels}")
    out = params(zb, xb)
    return out[0] if x.ndim == 3 else out


# --------------------------------------------------------------------------
# checkpoint files
#
# layout (little-endian):
#   magic b"GTRKCKPT" | u32 version | u32 len + UTF-8 JSON config
#   u32 n_arrays | per array: u16 len + UTF-8 name, u8 ndim, ndim x u32, float32 data

CHECKPOINT_MAGIC = b"GTRKCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], config: Mapping) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)) + key)
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        return _parse_checkpoint(data)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({e})") from None


def _parse_checkpoint(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    pos = 8
    version, n = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * 4
        arrays[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes")
    return config, arrays


def module_arrays(module: nn.Module, prefix: str = "") -> Dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items() if v.is_floating_point()}


def load_module_arrays(module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``arrays`` into ``module``; any missing key or shape difference
    raises :class:`CheckpointMismatchError`."""
    state = module.state_dict()
    problems = []
    for k, v in state.items():
        if not v.is_floating_point():
            continue
        a = arrays.get(prefix + k)
        if a is None:
            problems.append(f"missing {prefix + k}")
        elif tuple(a.shape) != tuple(v.shape):
            problems.append(f"{prefix + k}: checkpoint {tuple(a.shape)} vs model {tuple(v.shape)}")
    if problems:
        raise CheckpointMismatchError("; ".join(problems[:10]))
    with torch.no_grad():
        for k, v in state.items():
            if v.is_floating_point():
                v.copy_(torch.from_numpy(arrays[prefix + k]).to(v.dtype))


def backbone_config_dict(cfg: BackboneConfig) -> dict:
    return asdict(cfg)
