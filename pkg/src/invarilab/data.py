"""Labeled image datasets: synthetic glyphs, the ILAB archive, splits and category partitions."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError, LineageError

ARCHIVE_MAGIC = b"ILAB"
ARCHIVE_VERSION = 1
_DTYPES = {0: np.dtype("u1"), 1: np.dtype("<f4")}


@dataclass
class LabeledDataset:
    images: np.ndarray  # N x H x W x C
    labels: np.ndarray
    category_count: int
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.category_count):
            raise InputError(f"labels must lie in [0, {self.category_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices, provenance=None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.category_count,
                              provenance if provenance is not None else self.provenance)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.category_count)

    def validate(self) -> None:
        counts = self.counts()
        if counts.min() < 2:
            raise InputError(f"category {int(counts.argmin())} has {int(counts.min())} samples; need >= 2")


# --- synthetic glyphs ------------------------------------------------------------------

_MARK_CENTERS = [(x, y) for y in (-0.45, -0.15, 0.15, 0.45) for x in (-0.45, -0.15, 0.15, 0.45)]
_MARK_ANGLES = (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)
MARK_LENGTH = 0.3


def _marks():
    marks = []
    for cx, cy in _MARK_CENTERS:
        for ang in _MARK_ANGLES:
            dx, dy = 0.5 * MARK_LENGTH * np.cos(ang), 0.5 * MARK_LENGTH * np.sin(ang)
            marks.append(("seg", (cx - dx, cy - dy), (cx + dx, cy + dy)))
    return marks


MARKS = _marks()
# shared by every category: outer ring plus a cross, drawn thicker than the marks
BLOBS_PER_IMAGE = 4
BLOB_AMPLITUDE = (60.0, 120.0)
FRAME = [("arc", q * np.pi / 2, (q + 1) * np.pi / 2, 0.9) for q in range(4)] + [
    ("seg", (-0.9, 0.0), (-0.65, 0.0)), ("seg", (0.65, 0.0), (0.9, 0.0)),
    ("seg", (0.0, -0.9), (0.0, -0.65)), ("seg", (0.0, 0.65), (0.0, 0.9))]


def glyph_designs(category_count: int, seed: int) -> list[tuple[int, ...]]:
    """One mark per image quadrant for every category, so coarse ink balance carries no label.

    Any two categories differ in at least two quadrants.
    """
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x61])
    by_quadrant = [[] for _ in range(4)]
    for i, (_, (ax, ay), (bx, by)) in enumerate(MARKS):
        cx, cy = (ax + bx) / 2, (ay + by) / 2
        by_quadrant[2 * (cy > 0) + (cx > 0)].append(i)
    designs: list[tuple[int, ...]] = []
    attempts = 0
    while len(designs) < category_count:
        attempts += 1
        cand = tuple(int(rng.choice(q)) for q in by_quadrant)
        if all(sum(a != b for a, b in zip(cand, d)) >= 2 for d in designs) or attempts > 10000:
            designs.append(cand)
    return designs


def _distance(px, py, prim):
    if prim[0] == "seg":
        (ax, ay), (bx, by) = prim[1], prim[2]
        dx, dy = bx - ax, by - ay
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        return np.hypot(px - ax - t * dx, py - ay - t * dy)
    _, t0, t1, radius = prim
    ang = np.arctan2(py, px) % (2 * np.pi)
    on_arc = (ang >= t0) & (ang <= t1)
    d_circle = np.abs(np.hypot(px, py) - radius)
    e0 = np.hypot(px - radius * np.cos(t0), py - radius * np.sin(t0))
    e1 = np.hypot(px - radius * np.cos(t1), py - radius * np.sin(t1))
    return np.where(on_arc, d_circle, np.minimum(e0, e1))


def _ink(dist, half_width, px_size):
    return np.clip(1.0 - (dist - half_width) / px_size, 0.0, 1.0)


def render_glyph(design, size: int, rng: np.random.Generator) -> np.ndarray:
    """One jittered RGB sample of a glyph, uint8 HWC.

    Soft blobs of random sign and position are added as nuisance, so smooth
    low-frequency structure carries no label in untransformed images.
    """
    scale = rng.uniform(0.85, 1.15)
    shift = rng.uniform(-0.1, 0.1, size=2) * 2.0  # +-10% of the image side in [-1, 1] coords
    brightness = rng.uniform(0.8, 1.2)
    fg = rng.uniform(150, 255, size=3)
    bg = rng.uniform(0, 70, size=3)
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    px = (coords[None, :] - shift[0]) / (0.85 * scale)
    py = (coords[:, None] - shift[1]) / (0.85 * scale)
    px_size = 2.0 / size / (0.85 * scale)
    marks = np.min([_distance(px, py, MARKS[m]) for m in design], axis=0)
    frame = np.min([_distance(px, py, prim) for prim in FRAME], axis=0)
    ink = np.maximum(_ink(marks, 0.5 * px_size, px_size), _ink(frame, 1.0 * px_size, px_size))
    img = bg[None, None, :] + ink[:, :, None] * (fg - bg)[None, None, :]
    for _ in range(BLOBS_PER_IMAGE):
        cx, cy = rng.uniform(-0.6, 0.6, size=2)
        width = rng.uniform(0.1, 0.2)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(*BLOB_AMPLITUDE)
        blob = np.exp(-0.5 * ((coords[None, :] - cx) ** 2 + (coords[:, None] - cy) ** 2) / width ** 2)
        img = img + amp * blob[:, :, None]
    img = img * brightness + rng.normal(0.0, 6.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic(category_count: int, samples_per_category: int, image_size: int, seed: int) -> LabeledDataset:
    """Procedural glyph dataset; categories differ only in stroke layout, never in color."""
    if category_count < 2:
        raise InputError(f"need at least 2 categories, got {category_count}")
    if image_size < 16:
        raise InputError(f"image_size must be >= 16, got {image_size}")
    if samples_per_category < 2:
        raise InputError(f"need at least 2 samples per category, got {samples_per_category}")
    designs = glyph_designs(category_count, seed)
    images = np.empty((category_count * samples_per_category, image_size, image_size, 3), dtype=np.uint8)
    labels = np.empty(category_count * samples_per_category, dtype=np.int64)
    n = 0
    for c, design in enumerate(designs):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, 1, c])
        for _ in range(samples_per_category):
            images[n] = render_glyph(design, image_size, rng)
            labels[n] = c
            n += 1
    provenance = f"synthetic(categories={category_count},samples={samples_per_category},size={image_size},seed={seed})"
    return LabeledDataset(images, labels, category_count, provenance)


# --- ILAB archive ------------------------------------------------------------------------


def save_tensor_archive(dataset: LabeledDataset, path) -> None:
    images = dataset.images
    if images.dtype == np.uint8:
        code = 0
    elif images.dtype == np.float32:
        code = 1
    else:
        raise InputError(f"ILAB stores u8 or f32 samples, not {images.dtype}")
    extents = images.shape[1:]
    header = ARCHIVE_MAGIC + struct.pack("<HBIB", ARCHIVE_VERSION, code, len(dataset), len(extents))
    header += struct.pack(f"<{len(extents)}I", *extents)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dataset.labels.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(images, dtype=_DTYPES[code]).tobytes())


def load_tensor_archive(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    return _parse_archive(blob, str(path))


def _need(blob, offset, n, what):
    if len(blob) < offset + n:
        raise FormatError(f"truncated archive reading {what} at byte {offset}: "
                          f"expected length {offset + n}, actual length {len(blob)}")


def _parse_archive(blob: bytes, provenance: str) -> LabeledDataset:
    _need(blob, 0, 4, "magic")
    if blob[:4] != ARCHIVE_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at byte 0")
    _need(blob, 4, 8, "header")
    version, code, count, rank = struct.unpack_from("<HBIB", blob, 4)
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {version} at byte 4")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code} at byte 6")
    offset = 12
    _need(blob, offset, 4 * rank, "extents")
    extents = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    _need(blob, offset, 4 * count, "labels")
    labels = np.frombuffer(blob, dtype="<u4", count=count, offset=offset).astype(np.int64)
    offset += 4 * count
    dtype = _DTYPES[code]
    n_values = count * int(np.prod(extents, dtype=np.int64))
    _need(blob, offset, n_values * dtype.itemsize, "sample data")
    data = np.frombuffer(blob, dtype=dtype, count=n_values, offset=offset)
    offset += n_values * dtype.itemsize
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after byte {offset}")
    images = data.reshape((count,) + tuple(extents)).astype(dtype.newbyteorder("="))
    category_count = int(labels.max()) + 1 if count else 0
    return LabeledDataset(images, labels, category_count, provenance)


# --- splitting ------------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitConfig:
    test_fraction: float = 0.2
    seed: int = 0
    stratified: bool = True


def split_indices(labels, category_count: int, cfg: SplitConfig) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < cfg.test_fraction < 1:
        raise InputError(f"test_fraction must lie in (0, 1), got {cfg.test_fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0x5B])
    if cfg.stratified:
        train, test = [], []
        for c in range(category_count):
            idx = np.flatnonzero(labels == c)
            if len(idx) < 2:
                raise InputError(f"category {c} has {len(idx)} samples; a split needs >= 2")
            idx = rng.permutation(idx)
            n_test = min(max(int(round(cfg.test_fraction * len(idx))), 1), len(idx) - 1)
            test.append(idx[:n_test])
            train.append(idx[n_test:])
        train_idx, test_idx = np.concatenate(train), np.concatenate(test)
    else:
        perm = rng.permutation(len(labels))
        n_test = int(round(cfg.test_fraction * len(labels)))
        test_idx, train_idx = perm[:n_test], perm[n_test:]
        for name, part in (("train", train_idx), ("test", test_idx)):
            missing = set(range(category_count)) - set(labels[part].tolist())
            if missing:
                raise InputError(f"unstratified split leaves categories {sorted(missing)} without {name} samples")
    return np.sort(train_idx), np.sort(test_idx)


def train_test_split(dataset: LabeledDataset, cfg: SplitConfig) -> tuple[LabeledDataset, LabeledDataset]:
    train_idx, test_idx = split_indices(dataset.labels, dataset.category_count, cfg)
    return dataset.subset(train_idx), dataset.subset(test_idx)


# --- category partitions ------------------------------------------------------------------------


@dataclass(frozen=True)
class CategoryPartition:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]
    seed: int
    lineage: tuple[int, ...] = field(default=())

    @property
    def category_count(self) -> int:
        return len(self.seen) + len(self.unseen)

    def is_seen(self, labels) -> np.ndarray:
        return np.isin(np.asarray(labels), np.asarray(self.seen, dtype=np.int64))


def partition_categories(category_count: int, num_seen: int, seed: int,
                         previous: CategoryPartition | None = None) -> CategoryPartition:
    """Seen-transformed categories, grown from ``previous`` by uniform draws from its unseen set."""
    if not 0 <= num_seen <= category_count:
        raise InputError(f"num_seen must lie in [0, {category_count}], got {num_seen}")
    if previous is None:
        base, pool, lineage = (), tuple(range(category_count)), ()
    else:
        if previous.seed != seed:
            raise LineageError(f"previous partition has seed {previous.seed}, expected {seed}")
        if previous.category_count != category_count:
            raise LineageError(f"previous partition covers {previous.category_count} categories, not {category_count}")
        if num_seen < len(previous.seen):
            raise LineageError(f"num_seen {num_seen} is smaller than the previous seen set ({len(previous.seen)})")
        base, pool = previous.seen, previous.unseen
        lineage = previous.lineage + (len(previous.seen),)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x9A, *lineage])
    extra = rng.choice(np.array(pool, dtype=np.int64), size=num_seen - len(base), replace=False) if pool else []
    seen = base + tuple(int(c) for c in extra)
    unseen = tuple(c for c in range(category_count) if c not in set(seen))
    return CategoryPartition(seen, unseen, seed, lineage)


def partition_lineage(category_count: int, sizes, seed: int) -> list[CategoryPartition]:
    """Nested partitions for increasing ``sizes``, each grown from the one before."""
    out, prev = [], None
    for n in sorted(set(int(s) for s in sizes)):
        prev = partition_categories(category_count, n, seed, prev)
        out.append(prev)
    return out
