"""Synthetic coloured-shapes dataset with exact oracle score maps, and
augmentations that record their geometry so token labels can follow."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, GenerationError
from .scoremap import CropBox, DenseScoreMap, bilinear_sample
from .vit import parse_kv

SHAPE_KINDS = ("square", "circle", "triangle", "cross")
PALETTE = {
    "red": (0.9, 0.15, 0.1),
    "blue": (0.1, 0.3, 0.9),
    "green": (0.1, 0.8, 0.2),
    "yellow": (0.95, 0.85, 0.1),
}
SUPERSAMPLE = 4


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 9
    image_size: int = 64
    samples_train: int = 2000
    samples_val: int = 500
    shapes: tuple = SHAPE_KINDS
    colors: tuple = ("red", "blue")
    seed: int = 0
    scoremap_grid: int = 16
    max_shapes: int = 3
    # side of the dominant shape's bounding box as a fraction of the image
    min_size: float = 0.35
    max_size: float = 0.55

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "colors", tuple(self.colors))
        self.validate()

    @property
    def background_class(self):
        return self.num_classes - 1

    def validate(self):
        for s in self.shapes:
            if s not in SHAPE_KINDS:
                raise ConfigError(f"unknown shape kind {s!r}", "shapes")
        for c in self.colors:
            if c not in PALETTE:
                raise ConfigError(f"unknown colour {c!r}", "colors")
        if self.num_classes != len(self.shapes) * len(self.colors) + 1:
            raise ConfigError(
                "num_classes must equal shapes x colors + 1 (background)", "num_classes"
            )
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32", "image_size")
        if self.scoremap_grid < 1 or self.scoremap_grid > self.image_size:
            raise ConfigError("scoremap_grid must lie in [1, image_size]", "scoremap_grid")
        if not 1 <= self.max_shapes <= 3:
            raise ConfigError("max_shapes must lie in [1, 3]", "max_shapes")
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ConfigError("need 0 < min_size <= max_size <= 1", "min_size")

    def class_of(self, kind, color):
        return self.shapes.index(kind) * len(self.colors) + self.colors.index(color)

    def describe(self, class_id):
        if class_id == self.background_class:
            return ("background", None)
        return self.shapes[class_id // len(self.colors)], self.colors[class_id % len(self.colors)]

    def split_ids(self, split):
        if split == "train":
            return range(self.samples_train)
        if split == "val":
            return range(self.samples_train, self.samples_train + self.samples_val)
        raise ConfigError(f"unknown split {split!r}", "split")

    @classmethod
    def from_text(cls, text):
        kv = parse_kv(text)
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in kv.items():
            if key not in known:
                raise ConfigError(f"unknown dataset config key {key!r}", key)
            try:
                if key in ("shapes", "colors"):
                    kwargs[key] = tuple(p.strip() for p in raw.split(",") if p.strip())
                elif key in ("min_size", "max_size"):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = int(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}", key) from exc
        return cls(**kwargs)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Shape:
    class_id: int
    kind: str
    center: tuple  # (x, y) pixels
    size: float  # side of the bounding box in pixels

    def bbox(self):
        cx, cy = self.center
        h = self.size / 2
        return cx - h, cy - h, cx + h, cy + h


@dataclass
class SynthSample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    class_label: int
    shape_geometry: list
    sample_id: int


def shape_mask(shape, ys, xs):
    """Membership of the points ``(ys[:, None], xs[None, :])`` in ``shape``."""
    cx, cy = shape.center
    h = shape.size / 2
    dy = np.asarray(ys, dtype=np.float64)[:, None] - cy
    dx = np.asarray(xs, dtype=np.float64)[None, :] - cx
    if shape.kind == "square":
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if shape.kind == "circle":
        return dx * dx + dy * dy <= h * h
    if shape.kind == "triangle":
        t = (dy + h) / shape.size
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * h)
    if shape.kind == "cross":
        arm = shape.size / 6
        box = (np.abs(dx) <= h) & (np.abs(dy) <= h)
        return box & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    raise ValueError(shape.kind)


def _subpixel_centers(n, factor):
    return (np.arange(n * factor) + 0.5) / factor


def coverage(shapes, size, factor=SUPERSAMPLE):
    """Per-shape boolean masks on a ``factor``-times supersampled raster."""
    pts = _subpixel_centers(size, factor)
    return [shape_mask(s, pts, pts) for s in shapes]


def _overlaps(a, b, margin=1.0):
    ax0, ay0, ax1, ay1 = a.bbox()
    bx0, by0, bx1, by1 = b.bbox()
    return not (ax1 + margin <= bx0 or bx1 + margin <= ax0 or ay1 + margin <= by0 or by1 + margin <= ay0)


def _place(rng, size, side, placed, tries):
    for _ in range(tries):
        cx = rng.uniform(side / 2, size - side / 2)
        cy = rng.uniform(side / 2, size - side / 2)
        cand = (cx, cy)
        probe = Shape(0, "square", cand, side)
        if not any(_overlaps(probe, p) for p in placed):
            return cand
    return None


def generate_sample(config, sample_id, rng=None, max_tries=100):
    """Render sample ``sample_id``; deterministic in ``(config, sample_id)``.

    The dominant shape's class is drawn uniformly; up to two smaller shapes
    (side at most 0.6x the dominant) are placed without bounding-box overlap.
    """
    if rng is None:
        rng = np.random.default_rng([config.seed, sample_id])
    size = config.image_size
    n_fg = config.num_classes - 1
    label = int(rng.integers(n_fg))
    kind, color = config.describe(label)
    side = rng.uniform(config.min_size, config.max_size) * size
    shapes = []
    pos = _place(rng, size, side, shapes, max_tries)
    if pos is None:
        raise GenerationError(f"could not place the dominant shape for sample {sample_id}")
    shapes.append(Shape(label, kind, pos, side))
    n_extra = int(rng.integers(config.max_shapes))
    for _ in range(n_extra):
        cls = int(rng.integers(n_fg))
        k2, _ = config.describe(cls)
        s2 = rng.uniform(0.15 * size, 0.6 * side) if 0.6 * side > 0.15 * size else 0.6 * side
        pos = _place(rng, size, s2, shapes, max_tries)
        if pos is None:
            # a crowded canvas just yields fewer distractors
            continue
        shapes.append(Shape(cls, k2, pos, s2))

    c = 3
    img = rng.uniform(0.0, 0.3, size=(size, size, c))
    masks = coverage(shapes, size, factor=2)
    for s, m in zip(shapes, masks):
        alpha = m.reshape(size, 2, size, 2).mean(axis=(1, 3))[..., None]
        base = np.array(PALETTE[config.describe(s.class_id)[1]])
        rgb = np.clip(base + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
        img = img * (1 - alpha) + rgb * alpha
    image = np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)
    return SynthSample(image, label, shapes, sample_id)


def oracle_scoremap(sample, grid, num_classes, factor=SUPERSAMPLE):
    """Exact-coverage score map: class mass = covered fraction of each cell.

    Uncovered mass goes to the background class ``num_classes - 1``.
    """
    _, h, w = sample.image.shape
    hs, ws = grid
    if (h * factor) % hs or (w * factor) % ws:
        raise ConfigError("score-map grid must divide the supersampled image", "scoremap_grid")
    ys = _subpixel_centers(h, factor)
    xs = _subpixel_centers(w, factor)
    scores = np.zeros((hs, ws, num_classes))
    for shape in sample.shape_geometry:
        m = shape_mask(shape, ys, xs).astype(np.float64)
        scores[..., shape.class_id] += m.reshape(hs, m.shape[0] // hs, ws, m.shape[1] // ws).mean(axis=(1, 3))
    scores[..., num_classes - 1] = np.clip(1.0 - scores[..., : num_classes - 1].sum(axis=-1), 0.0, 1.0)
    return DenseScoreMap(scores, (h, w))


def oracle_annotator(config, grid=None):
    """An annotator callable for :func:`tlkit.scoremap.annotate` over synth samples."""
    g = grid or (config.scoremap_grid, config.scoremap_grid)

    def annotator(sample):
        return oracle_scoremap(sample, g, config.num_classes)

    return annotator


# -------------------------------------------------------------- augmentations


@dataclass(frozen=True)
class AugRecord:
    crop: CropBox
    erase_region: tuple | None = None  # (y0, x0, y1, x1) in output pixels
    rng_seed: int = -1


def resize_box(image, box, out_size):
    """Bilinear resample of the ``box`` region of a (C, H, W) image."""
    centers = (np.arange(out_size) + 0.5) / out_size
    ys = box.y0 + centers * (box.y1 - box.y0)
    xs = box.x0 + centers * (box.x1 - box.x0)
    out = bilinear_sample(image.transpose(1, 2, 0), ys, xs)
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=image.dtype)


def sample_crop_box(height, width, scale, ratio, rng, attempts=10):
    area = height * width
    log_ratio = np.log(ratio)
    for _ in range(attempts):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = np.exp(rng.uniform(log_ratio[0], log_ratio[1]))
        w = np.sqrt(target * aspect)
        h = np.sqrt(target / aspect)
        if 0 < w <= width and 0 < h <= height:
            x0 = rng.uniform(0, width - w)
            y0 = rng.uniform(0, height - h)
            return CropBox(x0, y0, x0 + w, y0 + h), False
    # centre crop at the nearest admissible aspect ratio
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, width / ratio[0]
    elif in_ratio > ratio[1]:
        h, w = height, height * ratio[1]
    else:
        w, h = width, height
    x0, y0 = (width - w) / 2, (height - h) / 2
    return CropBox(x0, y0, x0 + w, y0 + h), True


def random_resized_crop_aligned(image, scale, rng, out_size, ratio=(3 / 4, 4 / 3), seed=-1):
    """Crop a random box (area fraction in ``scale``) and resize to ``out_size``."""
    if not 0 < scale[0] <= scale[1] <= 1:
        raise ConfigError("scale range must lie within (0, 1]", "scale")
    _, h, w = image.shape
    box, _fallback = sample_crop_box(h, w, scale, ratio, rng)
    return resize_box(image, box, out_size), AugRecord(box, None, seed)


def hflip_aligned(image, aug):
    """Mirror the columns and toggle the crop's flip flag."""
    crop = replace(aug.crop, flip=not aug.crop.flip)
    region = aug.erase_region
    if region is not None:
        w = image.shape[-1]
        y0, x0, y1, x1 = region
        region = (y0, w - x1, y1, w - x0)
    return np.ascontiguousarray(image[..., ::-1]), replace(aug, crop=crop, erase_region=region)


def random_erase(image, rng, aug, prob=0.25, area=(0.02, 1 / 3), log_aspect=(np.log(0.3), np.log(1 / 0.3))):
    """With probability ``prob`` fill a random rectangle with uniform noise.

    Token labels are left alone; only the region is recorded.
    """
    if not 0.0 <= prob <= 1.0:
        raise ConfigError("erase probability must lie in [0, 1]", "erase_prob")
    if rng.uniform() >= prob:
        return image, aug
    c, h, w = image.shape
    for _ in range(10):
        target = h * w * rng.uniform(*area)
        aspect = np.exp(rng.uniform(*log_aspect))
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            y0 = int(rng.integers(0, h - eh + 1))
            x0 = int(rng.integers(0, w - ew + 1))
            out = image.copy()
            out[:, y0 : y0 + eh, x0 : x0 + ew] = rng.uniform(0.0, 1.0, size=(c, eh, ew))
            return out, replace(aug, erase_region=(y0, x0, y0 + eh, x0 + ew))
    return image, aug


def full_image_record(image):
    _, h, w = image.shape
    return AugRecord(CropBox(0.0, 0.0, float(w), float(h)))


class SynthDataset:
    """Lazily generated, cached samples for one split of a :class:`DatasetConfig`."""

    def __init__(self, config, split="train"):
        self.config = config
        self.split = split
        self.ids = list(config.split_ids(split))
        self._cache = {}

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        sid = self.ids[i]
        sample = self._cache.get(sid)
        if sample is None:
            sample = generate_sample(self.config, sid)
            self._cache[sid] = sample
        return sample

    def labels(self):
        return np.array([self[i].class_label for i in range(len(self))])

    def images(self):
        return np.stack([self[i].image for i in range(len(self))])
