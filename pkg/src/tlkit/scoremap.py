"""Dense score maps from a machine annotator, their top-k half-precision
storage format, and RoIAlign-style alignment of a crop to a token grid."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import AnnotationError, ConfigError, CropError, DegenerateCellError, FormatError

MAGIC = b"TLSM"
VERSION = 1
# magic, version, K, H_s, W_s, k, source height, source width
HEADER = struct.Struct("<4sHIHHBHH")
RECORD = np.dtype([("class_id", "<u2"), ("prob", "<f2")])
SUM_SLACK = 2.0**-8


@dataclass
class DenseScoreMap:
    scores: np.ndarray  # (H_s, W_s, K)
    source_size: tuple  # (height, width) in pixels

    @property
    def grid(self):
        return self.scores.shape[:2]

    @property
    def num_classes(self):
        return self.scores.shape[2]

    def validate(self, tol=1e-3):
        s = self.scores
        if s.ndim != 3:
            raise AnnotationError(f"score map must be (H, W, K), got shape {s.shape}")
        if not np.isfinite(s).all() or (s < 0).any() or (s > 1 + tol).any():
            raise AnnotationError("score map entries must lie in [0, 1]")
        err = np.abs(s.sum(axis=-1) - 1.0)
        if err.max() > tol:
            r, c = np.unravel_index(int(err.argmax()), err.shape)
            raise AnnotationError(f"cell ({r}, {c}) sums to {s[r, c].sum():.6g}, not 1")
        return self


@dataclass(eq=False)
class SparseScoreMap:
    class_ids: np.ndarray  # (H_s, W_s, k) uint16
    probs: np.ndarray  # (H_s, W_s, k) float16
    num_classes: int
    source_size: tuple

    @property
    def k(self):
        return self.class_ids.shape[2]

    @property
    def grid(self):
        return self.class_ids.shape[:2]

    def __eq__(self, other):
        if not isinstance(other, SparseScoreMap):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and tuple(self.source_size) == tuple(other.source_size)
            and self.class_ids.shape == other.class_ids.shape
            and np.array_equal(self.class_ids, other.class_ids)
            and np.array_equal(self.probs.view(np.uint16), other.probs.view(np.uint16))
        )

    def invariant_violation(self):
        """Return a (flat cell index, message) pair for the first bad cell, else None."""
        ids = self.class_ids.reshape(-1, self.k).astype(np.int64)
        p = self.probs.reshape(-1, self.k).astype(np.float64)
        checks = (
            ((ids >= self.num_classes).any(axis=1), "class id out of range"),
            ((np.sort(ids, axis=1)[:, 1:] == np.sort(ids, axis=1)[:, :-1]).any(axis=1), "duplicate class id"),
            ((np.diff(p, axis=1) > 0).any(axis=1), "probabilities not sorted"),
            (~np.isfinite(p).all(axis=1) | (p < 0).any(axis=1), "invalid probability"),
            (p.sum(axis=1) > 1.0 + SUM_SLACK, "probabilities sum above 1"),
        )
        for bad, msg in checks:
            if bad.any():
                return int(np.argmax(bad)), msg
        return None


def annotate(annotator, image):
    """Run a caller-supplied annotator and validate what it returns."""
    out = annotator(image)
    if not isinstance(out, DenseScoreMap):
        raise AnnotationError("annotator must return a DenseScoreMap")
    return out.validate()


def uniform_annotator(num_classes, grid, source_size):
    def annotator(image):
        return DenseScoreMap(np.full(tuple(grid) + (num_classes,), 1.0 / num_classes), tuple(source_size))

    return annotator


def sparsify_topk(dense, k=5):
    """Keep the k most probable classes per cell (ties -> smaller class id)."""
    num_classes = dense.num_classes
    if k < 1 or k > num_classes:
        raise ConfigError(f"k must lie in [1, {num_classes}], got {k}", "topk")
    if num_classes > 0xFFFF + 1:
        raise ConfigError("class ids must fit in 16 bits", "num_classes")
    order = np.argsort(-dense.scores, axis=-1, kind="stable")[..., :k]
    probs = np.take_along_axis(dense.scores, order, axis=-1).astype(np.float16)
    return SparseScoreMap(order.astype(np.uint16), probs, num_classes, tuple(dense.source_size))


def densify(sparse):
    """Scatter kept entries back to K classes and renormalize each cell to 1."""
    p = sparse.probs.astype(np.float64)
    total = p.sum(axis=-1)
    if (total <= 0).any():
        r, c = np.argwhere(total <= 0)[0]
        raise DegenerateCellError(f"cell ({r}, {c}) has zero total probability")
    h, w = sparse.grid
    out = np.zeros((h, w, sparse.num_classes))
    np.put_along_axis(out, sparse.class_ids.astype(np.intp), p, axis=-1)
    out /= total[..., None]
    return DenseScoreMap(out, tuple(sparse.source_size))


# ---------------------------------------------------------------------- codec


def encode_file(sparse):
    bad = sparse.invariant_violation()
    if bad is not None:
        cell, msg = bad
        raise FormatError(f"cannot encode: {msg} in cell {cell}", HEADER.size + cell * sparse.k * RECORD.itemsize)
    h, w = sparse.grid
    header = HEADER.pack(
        MAGIC, VERSION, sparse.num_classes, h, w, sparse.k, int(sparse.source_size[0]), int(sparse.source_size[1])
    )
    rec = np.empty(sparse.class_ids.shape, dtype=RECORD)
    rec["class_id"] = sparse.class_ids
    rec["prob"] = sparse.probs
    return header + rec.tobytes()


def decode_file(blob):
    blob = bytes(blob)
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("bad magic", 0)
    if len(blob) < HEADER.size:
        raise FormatError("truncated header", len(blob))
    _, version, num_classes, h, w, k, src_h, src_w = HEADER.unpack_from(blob)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if k < 1:
        raise FormatError("top-k size must be >= 1", 14)
    if k > num_classes:
        raise FormatError("top-k size exceeds class count", 14)
    n = h * w * k
    expected = HEADER.size + n * RECORD.itemsize
    if len(blob) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes", len(blob))
    if len(blob) > expected:
        raise FormatError("trailing bytes after payload", expected)
    rec = np.frombuffer(blob, dtype=RECORD, count=n, offset=HEADER.size).reshape(h, w, k)
    sparse = SparseScoreMap(rec["class_id"].copy(), rec["prob"].copy(), num_classes, (src_h, src_w))
    bad = sparse.invariant_violation()
    if bad is not None:
        cell, msg = bad
        raise FormatError(msg, HEADER.size + cell * k * RECORD.itemsize)
    return sparse


def write_scoremap(path, sparse):
    with open(path, "wb") as f:
        f.write(encode_file(sparse))


def read_scoremap(path):
    with open(path, "rb") as f:
        return decode_file(f.read())


def write_manifest(path, rows):
    """``rows``: iterable of (sample_id, relative_path, class_label)."""
    with open(path, "w") as f:
        for sample_id, rel, label in rows:
            f.write(f"{sample_id}\t{rel}\t{label}\n")


def read_manifest(path):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"manifest line {lineno}: expected 3 tab-separated fields", lineno)
            rows.append((int(parts[0]), parts[1], int(parts[2])))
    return rows


def load_scoremap_dir(directory):
    """Read a manifest plus its TLSM files into ``{sample_id: SparseScoreMap}``."""
    manifest = os.path.join(directory, "manifest.tsv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest.tsv in {directory}")
    return {sid: read_scoremap(os.path.join(directory, rel)) for sid, rel, _ in read_manifest(manifest)}


# ------------------------------------------------------------------ alignment


@dataclass(frozen=True)
class CropBox:
    x0: float
    y0: float
    x1: float
    y1: float
    flip: bool = False

    def validate(self, height, width):
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise CropError(f"box {self} is not inside a {height}x{width} image")
        return self


def bilinear_sample(grid, ys, xs):
    """Sample an (H, W, ...) array at continuous coordinates.

    Cell ``(r, c)`` has its centre at ``(r + 0.5, c + 0.5)``; reads outside the
    centre lattice clamp to the border.  ``ys``/``xs`` are 1-D and the result is
    ``(len(ys), len(xs), ...)``.
    """
    h, w = grid.shape[:2]
    u = np.clip(np.asarray(ys, dtype=np.float64) - 0.5, 0.0, h - 1)
    v = np.clip(np.asarray(xs, dtype=np.float64) - 0.5, 0.0, w - 1)
    r0 = np.floor(u).astype(np.intp)
    c0 = np.floor(v).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fu = (u - r0).reshape((-1,) + (1,) * (grid.ndim - 1))
    fv = (v - c0).reshape((1, -1) + (1,) * (grid.ndim - 2))
    # separable: interpolate along rows, then along columns
    rows = grid[r0] * (1 - fu) + grid[r1] * fu
    return rows[:, c0] * (1 - fv) + rows[:, c1] * fv


def align_crop(dense, box, token_grid):
    """Per-token labels (g*g, K) for an image crop, one bilinear sample per cell."""
    height, width = dense.source_size
    hs, ws = dense.grid
    bx0, bx1 = box.x0 * ws / width, box.x1 * ws / width
    by0, by1 = box.y0 * hs / height, box.y1 * hs / height
    if not (bx1 > bx0 and by1 > by0):
        raise CropError(f"box {box} has zero area on the score map")
    g = token_grid
    centers = (np.arange(g) + 0.5) / g
    ys = by0 + centers * (by1 - by0)
    xs = bx0 + centers * (bx1 - bx0)
    out = bilinear_sample(dense.scores, ys, xs)
    if box.flip:
        out = out[:, ::-1]
    total = out.sum(axis=-1, keepdims=True)
    if (total <= 0).any():
        raise CropError("aligned cell has zero probability mass")
    return (out / total).reshape(g * g, -1)
