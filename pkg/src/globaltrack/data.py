"""Datasets, frame-pair sampling, resizing/normalization, augmentation and a
synthetic sequence generator.

On-disk sequence layout (one directory per sequence)::

    <seq>/0001.png, 0002.png, ...     frames, sorted by file name
    <seq>/groundtruth.txt             "x,y,w,h" per frame, "nan,nan,nan,nan" if absent
    <seq>/groundtruth_<i>.txt         optional extra instances (i >= 1), same format
    <seq>/absence.label               optional 0/1 per frame, 1 marks the target absent

Image dataset manifest: a text file whose lines are
``<image path>\\t<x,y,w,h>;<x,y,w,h>;...`` with paths relative to the manifest.
Every written file starts with a ``# globaltrack-... v1`` header line.
"""

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .geometry import iou_matrix, xywh_to_xyxy, xyxy_to_xywh

GROUNDTRUTH_HEADER = "# globaltrack-groundtruth v1"
MANIFEST_HEADER = "# globaltrack-images v1"
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")

ImageLike = Union[np.ndarray, str, os.PathLike]


def load_image(img: ImageLike) -> np.ndarray:
    """RGB ``uint8`` array of shape (H, W, 3)."""
    if isinstance(img, np.ndarray):
        return img
    from PIL import Image

    with Image.open(img) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)


# --------------------------------------------------------------------------
# datasets


@dataclass
class VideoSequence:
    name: str
    frames: List[ImageLike]
    boxes: np.ndarray  # (T, K, 4) corner form, NaN rows where absent

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.boxes.ndim == 2:
            self.boxes = self.boxes[:, None, :]
        if len(self.frames) != len(self.boxes):
            raise ValueError(f"{self.name}: {len(self.frames)} frames but {len(self.boxes)} annotations")

    @property
    def present(self) -> np.ndarray:
        """(T, K) presence mask."""
        return np.all(np.isfinite(self.boxes), axis=-1)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SequenceDataset:
    sequences: List[VideoSequence]
    name: str = "sequences"

    def __len__(self) -> int:
        return len(self.sequences)

    @classmethod
    def from_root(cls, root, name: Optional[str] = None) -> "SequenceDataset":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {root}")
        dirs = sorted(p for p in root.iterdir() if (p / "groundtruth.txt").is_file())
        if (root / "groundtruth.txt").is_file():
            dirs = [root]
        if not dirs:
            raise FileNotFoundError(f"no sequences with groundtruth.txt under {root}")
        return cls([read_sequence_dir(d) for d in dirs], name or root.name)

    def write(self, root) -> None:
        root = Path(root)
        for seq in self.sequences:
            write_sequence_dir(root / seq.name, seq)


@dataclass
class ImageRecord:
    image: ImageLike
    boxes: np.ndarray  # (K, 4) corner form

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.boxes) == 0:
            raise ValueError("image record without instances")


@dataclass
class ImageDataset:
    records: List[ImageRecord]
    name: str = "images"

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def from_manifest(cls, path) -> "ImageDataset":
        path = Path(path)
        records = []
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            img, _, rest = line.partition("\t")
            boxes = [[float(v) for v in part.split(",")] for part in rest.split(";") if part.strip()]
            records.append(ImageRecord(str(path.parent / img), xywh_to_xyxy(np.asarray(boxes).reshape(-1, 4))))
        return cls(records, path.stem)

    def write_manifest(self, path) -> None:
        path = Path(path)
        lines = [MANIFEST_HEADER]
        for rec in self.records:
            if not isinstance(rec.image, (str, os.PathLike)):
                raise ValueError("only path-backed records can be written to a manifest")
            rel = os.path.relpath(rec.image, path.parent)
            boxes = ";".join(",".join(_fmt(v) for v in b) for b in xyxy_to_xywh(rec.boxes))
            lines.append(f"{rel}\t{boxes}")
        path.write_text("\n".join(lines) + "\n")


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.6f}"


def read_groundtruth(path) -> np.ndarray:
    """Corner-form boxes (T, 4) from an ``x,y,w,h`` file; absent rows are NaN."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.replace("\t", ",").replace(" ", ",").split(",") if v != ""]
        if len(vals) != 4:
            raise ValueError(f"{path}: expected 4 values per line, got {line!r}")
        rows.append(vals)
    return xywh_to_xyxy(np.asarray(rows, dtype=np.float64).reshape(-1, 4))


def write_groundtruth(path, boxes) -> None:
    lines = [GROUNDTRUTH_HEADER]
    for b in xyxy_to_xywh(np.asarray(boxes, dtype=np.float64).reshape(-1, 4)):
        lines.append(",".join(_fmt(v) for v in b))
    Path(path).write_text("\n".join(lines) + "\n")


def read_sequence_dir(d) -> VideoSequence:
    d = Path(d)
    frames = sorted(str(p) for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    tracks = [read_groundtruth(d / "groundtruth.txt")]
    i = 1
    while (d / f"groundtruth_{i}.txt").is_file():
        tracks.append(read_groundtruth(d / f"groundtruth_{i}.txt"))
        i += 1
    boxes = np.stack(tracks, axis=1)
    absence = d / "absence.label"
    if absence.is_file():
        flags = [int(v) for v in absence.read_text().split() if v.strip() and not v.startswith("#")]
        if len(flags) != len(boxes):
            raise ValueError(f"{absence}: {len(flags)} labels for {len(boxes)} frames")
        boxes[np.asarray(flags, dtype=bool), 0] = np.nan
    return VideoSequence(d.name, frames, boxes)


def write_sequence_dir(d, seq: VideoSequence) -> None:
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    frames = []
    for t, fr in enumerate(seq.frames):
        if isinstance(fr, np.ndarray):
            p = d / f"{t + 1:05d}.png"
            save_image(p, fr)
            frames.append(str(p))
        else:
            frames.append(str(fr))
    for k in range(seq.boxes.shape[1]):
        name = "groundtruth.txt" if k == 0 else f"groundtruth_{k}.txt"
        write_groundtruth(d / name, seq.boxes[:, k])


# --------------------------------------------------------------------------
# resizing / normalization

IMAGENET_MEAN = (123.675, 116.28, 103.53)
IMAGENET_STD = (58.395, 57.12, 57.375)


@dataclass(frozen=True)
class ResizeSpec:
    max_long: int = 1333
    max_short: int = 800
    rounding: str = "floor"  # "floor" or "round"
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.rounding not in ("floor", "round"):
            raise ValueError(f"unknown rounding mode {self.rounding!r}")


def resized_shape(height: int, width: int, spec: ResizeSpec = ResizeSpec()) -> Tuple[int, int, float]:
    """Target (height, width, scale) so the long edge is <= ``max_long`` and
    the short edge <= ``max_short``, with at least one limit met."""
    if height <= 0 or width <= 0:
        raise ValueError(f"zero-dimension image {height}x{width}")
    scale = min(spec.max_long / max(height, width), spec.max_short / min(height, width))
    if spec.rounding == "floor":
        # tolerate products like 479.99999999 that should be exact
        rnd = lambda v: int(math.floor(v + 1e-6))
    else:
        rnd = lambda v: int(math.floor(v + 0.5))
    return max(1, rnd(height * scale)), max(1, rnd(width * scale)), scale


def resize_image(image: np.ndarray, spec: ResizeSpec = ResizeSpec()) -> Tuple[np.ndarray, float]:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"expected a non-empty (H, W, 3) image, got {image.shape}")
    h, w, scale = resized_shape(image.shape[0], image.shape[1], spec)
    if (h, w) == image.shape[:2]:
        return image, scale
    from PIL import Image

    out = Image.fromarray(np.ascontiguousarray(image.astype(np.uint8))).resize((w, h), Image.BILINEAR)
    return np.asarray(out), scale


def normalize(image: np.ndarray, spec: ResizeSpec = ResizeSpec()) -> np.ndarray:
    """(H, W, 3) RGB -> (3, H, W) float32, per-channel standardized."""
    img = np.asarray(image, dtype=np.float32)
    img = (img - np.asarray(spec.mean, dtype=np.float32)) / np.asarray(spec.std, dtype=np.float32)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def resize_normalize(image: np.ndarray, spec: ResizeSpec = ResizeSpec(), boxes=None):
    """Resize under the edge limits, then normalize.

    Returns ``(array (3, H, W), scale)``, or ``(array, scale, boxes * scale)``
    when ``boxes`` is given.
    """
    resized, scale = resize_image(image, spec)
    out = normalize(resized, spec)
    if boxes is None:
        return out, scale
    return out, scale, np.asarray(boxes, dtype=np.float64) * scale


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2


def flip_boxes(boxes, width: float) -> np.ndarray:
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    x1 = width - b[:, 2]
    x2 = width - b[:, 0]
    b[:, 0], b[:, 2] = x1, x2
    return b


def _gray(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def augment(image: np.ndarray, boxes, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """Random horizontal flip and brightness/contrast/saturation jitter.
    Boxes follow the flip exactly; jitter with zero range is a no-op."""
    img = np.asarray(image)
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    if rng.random() < cfg.flip_prob:
        img = img[:, ::-1]
        b = flip_boxes(b, img.shape[1])
    factors = [
        (name, 1.0 + rng.uniform(-r, r)) if r > 0 else (name, None)
        for name, r in (("brightness", cfg.brightness), ("contrast", cfg.contrast), ("saturation", cfg.saturation))
    ]
    if any(f is not None for _, f in factors):
        out = img.astype(np.float32)
        for name, f in factors:
            if f is None:
                continue
            if name == "brightness":
                out = out * f
            elif name == "contrast":
                m = _gray(out).mean()
                out = (out - m) * f + m
            else:
                g = _gray(out)[..., None]
                out = g + (out - g) * f
        img = np.clip(np.rint(out), 0, 255).astype(np.uint8) if np.asarray(image).dtype == np.uint8 else out
    return np.ascontiguousarray(img), b


# --------------------------------------------------------------------------
# pair sampling


@dataclass
class PairSample:
    query_image: np.ndarray
    search_image: np.ndarray
    query_boxes: np.ndarray  # (M, 4) in the query image
    search_boxes: np.ndarray  # (M, 4) groundtruth in the search image
    source: str = ""

    def __post_init__(self):
        self.query_boxes = np.asarray(self.query_boxes, dtype=np.float64).reshape(-1, 4)
        self.search_boxes = np.asarray(self.search_boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.query_boxes) == 0:
            raise ValueError("a pair needs at least one co-existing instance")
        if self.query_boxes.shape != self.search_boxes.shape:
            raise ValueError("every query box needs a groundtruth partner")

    @property
    def num_instances(self) -> int:
        return len(self.query_boxes)


Dataset = Union[SequenceDataset, ImageDataset]


@dataclass
class MixtureSpec:
    datasets: List[Dataset]
    probabilities: List[float]

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if len(p) != len(self.datasets) or len(p) == 0:
            raise ValueError("one probability per dataset required")
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities must be positive and sum to 1, got {p.tolist()}")
        for ds in self.datasets:
            if len(ds) == 0:
                raise ValueError(f"dataset {getattr(ds, 'name', ds)!r} is empty")


def _sequence_pair(seq: VideoSequence, rng: np.random.Generator, retries: int):
    present = seq.present
    query_frames = np.nonzero(present.any(axis=1))[0]
    if len(query_frames) == 0:
        return None
    for _ in range(retries):
        qf = int(rng.choice(query_frames))
        shared = present & present[qf][None]
        candidates = np.nonzero(shared.any(axis=1))[0]
        if len(candidates) > 1:
            candidates = candidates[candidates != qf]
        sf = int(rng.choice(candidates))
        inst = np.nonzero(present[qf] & present[sf])[0]
        if len(inst):
            return qf, sf, inst
    return None


def sample_pair(mixture: MixtureSpec, rng: np.random.Generator, aug: Optional[AugmentConfig] = AugmentConfig(),
                max_retries: int = 10) -> PairSample:
    """Draw a dataset by mixture probability, then a pair from it.

    Sequences give two frames sharing at least one present instance; images
    are duplicated. Both sides are augmented independently when ``aug`` is
    set.
    """
    for _ in range(1000):
        di = int(rng.choice(len(mixture.datasets), p=np.asarray(mixture.probabilities)))
        ds = mixture.datasets[di]
        if isinstance(ds, ImageDataset):
            rec = ds.records[int(rng.integers(len(ds.records)))]
            img = load_image(rec.image)
            qi, qb, si, sb = img, rec.boxes, img, rec.boxes
        else:
            seq = ds.sequences[int(rng.integers(len(ds.sequences)))]
            found = _sequence_pair(seq, rng, max_retries)
            if found is None:
                continue
            qf, sf, inst = found
            qi, si = load_image(seq.frames[qf]), load_image(seq.frames[sf])
            qb, sb = seq.boxes[qf, inst], seq.boxes[sf, inst]
        if aug is not None:
            qi, qb = augment(qi, qb, rng, aug)
            si, sb = augment(si, sb, rng, aug)
        return PairSample(qi, si, qb, sb, getattr(ds, "name", ""))
    raise RuntimeError("could not draw a pair with a co-present instance")


# --------------------------------------------------------------------------
# synthetic sequences


@dataclass(frozen=True)
class SyntheticSpec:
    num_sequences: int = 4
    num_frames: int = 20
    height: int = 128
    width: int = 128
    num_instances: int = 2
    min_size: int = 20
    max_size: int = 44
    max_speed: float = 4.0
    # (frame index) at which instance 0 jumps to a non-overlapping location
    teleports: Tuple[int, ...] = ()
    # (start frame, length) spans during which instance 0 is absent
    absences: Tuple[Tuple[int, int], ...] = ()
    noise: float = 8.0
    seed: int = 0


def _texture(rng: np.random.Generator):
    c1 = rng.uniform(30, 225, 3)
    c2 = rng.uniform(30, 225, 3)
    while np.abs(c1 - c2).sum() < 120:
        c2 = rng.uniform(30, 225, 3)
    return {
        "c1": c1,
        "c2": c2,
        "period": float(rng.uniform(4, 10)),
        "angle": float(rng.uniform(0, np.pi)),
        "ellipse": bool(rng.random() < 0.5),
        "checker": bool(rng.random() < 0.3),
    }


def _draw(canvas: np.ndarray, box: np.ndarray, tex: dict) -> None:
    h, w = canvas.shape[:2]
    x1, y1, x2, y2 = box
    xs = np.arange(max(0, int(np.floor(x1))), min(w, int(np.ceil(x2))))
    ys = np.arange(max(0, int(np.floor(y1))), min(h, int(np.ceil(y2))))
    if len(xs) == 0 or len(ys) == 0:
        return
    yy, xx = np.meshgrid(ys + 0.5, xs + 0.5, indexing="ij")
    # texture coordinates are relative to the object so the pattern moves with it
    u, v = xx - x1, yy - y1
    if tex["checker"]:
        on = ((u // tex["period"]) + (v // tex["period"])) % 2 == 0
    else:
        on = np.sin((u * np.cos(tex["angle"]) + v * np.sin(tex["angle"])) * 2 * np.pi / tex["period"]) > 0
    mask = np.ones_like(on)
    if tex["ellipse"]:
        cx, cy, rx, ry = (x1 + x2) / 2, (y1 + y2) / 2, (x2 - x1) / 2, (y2 - y1) / 2
        mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    color = np.where(on[..., None], tex["c1"], tex["c2"])
    region = canvas[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1]
    region[mask] = color[mask]


def _random_box(rng, spec: SyntheticSpec, w=None, h=None):
    w = w if w is not None else rng.uniform(spec.min_size, spec.max_size)
    h = h if h is not None else rng.uniform(spec.min_size, spec.max_size)
    x = rng.uniform(0, spec.width - w)
    y = rng.uniform(0, spec.height - h)
    return np.array([x, y, x + w, y + h])


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> SequenceDataset:
    """Sequences of textured shapes moving over a noisy background.

    Instance 0 is the designated target: it is drawn on top, teleports at
    ``spec.teleports`` and disappears during ``spec.absences``. Groundtruth
    is the exact drawn extent (the bounding box for ellipses).
    """
    rng = np.random.default_rng(spec.seed)
    absent = np.zeros(spec.num_frames, dtype=bool)
    for start, length in spec.absences:
        absent[start:start + length] = True
    sequences = []
    for si in range(spec.num_sequences):
        bg = rng.uniform(60, 190, 3)
        textures = [_texture(rng) for _ in range(spec.num_instances)]
        boxes = np.stack([_random_box(rng, spec) for _ in range(spec.num_instances)])
        vel = rng.uniform(-spec.max_speed, spec.max_speed, (spec.num_instances, 2))
        frames, anns = [], []
        for t in range(spec.num_frames):
            if t > 0:
                boxes = boxes + np.concatenate([vel, vel], axis=1)
                for k in range(spec.num_instances):
                    for lo, hi, ax in ((0, spec.width, 0), (0, spec.height, 1)):
                        if boxes[k, ax] < lo:
                            boxes[k, [ax, ax + 2]] += lo - boxes[k, ax]
                            vel[k, ax] = abs(vel[k, ax])
                        if boxes[k, ax + 2] > hi:
                            boxes[k, [ax, ax + 2]] -= boxes[k, ax + 2] - hi
                            vel[k, ax] = -abs(vel[k, ax])
                if t in spec.teleports:
                    prev = boxes[0].copy()
                    w, h = prev[2] - prev[0], prev[3] - prev[1]
                    for _ in range(100):
                        cand = _random_box(rng, spec, w, h)
                        if iou_matrix(cand, prev)[0, 0] == 0:
                            break
                    boxes[0] = cand
            img = bg + rng.normal(0, spec.noise, (spec.height, spec.width, 3))
            for k in list(range(1, spec.num_instances)) + [0]:
                if k == 0 and absent[t]:
                    continue
                _draw(img, boxes[k], textures[k])
            frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
            ann = boxes.copy()
            if absent[t]:
                ann[0] = np.nan
            anns.append(ann)
        sequences.append(VideoSequence(f"synth_{si:03d}", frames, np.stack(anns)))
    return SequenceDataset(sequences, "synthetic")
