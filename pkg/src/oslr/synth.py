"""Procedural logo benchmark.

Each logo class is a small composition of vector primitives (disc, ring,
triangle, bar, block, 5x7 block letter) in a 2-3 colour palette. A scene
places one instance of the logo, at a seeded scale and position, over a
cluttered background drawn only from colours outside the class palette, so the
ground-truth mask is exactly the set of pixels the logo wrote.

Every image ``j`` of a class has its own seed. That seed fixes the instance
style (palette jitter, dropped secondary elements) shared by the query render
of image ``j`` and the scene of image ``j``; pairing query ``j`` with scene
``k != j`` yields ``n(n-1)`` triplets per class.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError

MAX_CLASSES = 10_000
GRID = 24
QUERY_FILL = 0.8
MIN_QUERY_COVERAGE = 0.10
# keeps the short side >= 4 px when the long side is 6 px (scale 0.1 of 64)
MAX_ASPECT = 1.5

# Well separated colours; class palettes and clutter draw from disjoint subsets.
COLORS = np.array(
    [
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
        (128, 128, 0),
        (0, 0, 128),
        (255, 255, 255),
        (0, 0, 0),
        (128, 128, 128),
        (170, 110, 40),
        (250, 190, 212),
        (0, 128, 128),
    ],
    dtype=np.int16,
)

FONT = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "C": ("#####", "#....", "#....", "#....", "#....", "#....", "#####"),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "O": ("#####", "#...#", "#...#", "#...#", "#...#", "#...#", "#####"),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "S": ("#####", "#....", "#....", "#####", "....#", "....#", "#####"),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", "#####"),
}
_FONT_BITS = {ch: np.array([[c == "#" for c in row] for row in rows]) for ch, rows in FONT.items()}
LETTERS = "".join(sorted(FONT))

KINDS = ("disc", "ring", "triangle", "bar", "block", "letter")


@dataclass(frozen=True)
class Primitive:
    """One glyph element on the ``GRID`` layout; ``x1``/``y1`` are exclusive."""

    kind: str
    x0: int
    y0: int
    x1: int
    y1: int
    color: int  # index into the class palette
    param: int | str = 0  # triangle orientation, ring inner radius (percent), or letter

    def as_list(self) -> list:
        return [self.kind, self.x0, self.y0, self.x1, self.y1, self.color, self.param]


@dataclass(frozen=True)
class LogoClass:
    class_id: int
    primitives: tuple[Primitive, ...]
    palette: tuple[int, ...]  # foreground colour indices into COLORS
    background: int  # backdrop colour index for query renders

    @property
    def extent(self) -> tuple[int, int, int, int]:
        return (
            min(p.x0 for p in self.primitives),
            min(p.y0 for p in self.primitives),
            max(p.x1 for p in self.primitives),
            max(p.y1 for p in self.primitives),
        )

    @property
    def aspect(self) -> float:
        """Width over height of the glyph layout."""
        x0, y0, x1, y1 = self.extent
        return (x1 - x0) / (y1 - y0)

    def glyph_key(self) -> tuple:
        return (tuple(p.as_list().__repr__() for p in self.primitives), self.palette)

    def to_json(self) -> str:
        return json.dumps(
            {
                "class_id": self.class_id,
                "palette": list(self.palette),
                "background": self.background,
                "primitives": [p.as_list() for p in self.primitives],
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "LogoClass":
        d = json.loads(text)
        prims = tuple(Primitive(*p) for p in d["primitives"])
        return cls(d["class_id"], prims, tuple(d["palette"]), d["background"])


# ---------------------------------------------------------------------------
# rasterization


def _primitive_pixels(p: Primitive, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Boolean coverage of pixel centres (given in layout units) by ``p``."""
    w, h = p.x1 - p.x0, p.y1 - p.y0
    inside = (sx >= p.x0) & (sx < p.x1) & (sy >= p.y0) & (sy < p.y1)
    if p.kind in ("bar", "block"):
        return inside
    u = (sx - p.x0) / w  # 0..1 across the primitive's box
    v = (sy - p.y0) / h
    if p.kind in ("disc", "ring"):
        r2 = ((u - 0.5) / 0.5) ** 2 + ((v - 0.5) / 0.5) ** 2
        cover = r2 <= 1.0
        if p.kind == "ring":
            cover &= r2 >= (int(p.param) / 100.0) ** 2
        return cover
    if p.kind == "triangle":
        # orientation: 0 apex up, 1 apex right, 2 apex down, 3 apex left
        along, across = {0: (v, u), 1: (1 - u, v), 2: (1 - v, u), 3: (u, v)}[int(p.param)]
        return inside & (np.abs(across - 0.5) <= 0.5 * along)
    if p.kind == "letter":
        bits = _FONT_BITS[str(p.param)]
        col = np.clip(np.floor(u * 5).astype(int), 0, 4)
        row = np.clip(np.floor(v * 7).astype(int), 0, 6)
        return inside & bits[row, col]
    raise ValueError(f"unknown primitive kind {p.kind!r}")


def rasterize(cls: LogoClass, width: int, height: int, keep: Sequence[bool] | None = None) -> np.ndarray:
    """Palette-index label map (``-1`` = empty) of the glyph stretched to ``height x width``."""
    x0, y0, x1, y1 = cls.extent
    px = (np.arange(width) + 0.5) / width * (x1 - x0) + x0
    py = (np.arange(height) + 0.5) / height * (y1 - y0) + y0
    sx, sy = np.meshgrid(px, py)
    labels = np.full((height, width), -1, dtype=np.int16)
    for i, p in enumerate(cls.primitives):
        if keep is not None and not keep[i]:
            continue
        labels[_primitive_pixels(p, sx, sy)] = p.color
    return labels


def _box_dims(cls: LogoClass, longest: int) -> tuple[int, int]:
    a = cls.aspect
    if a >= 1:
        return longest, max(1, round(longest / a))
    return max(1, round(longest * a)), longest


# ---------------------------------------------------------------------------
# classes


def _random_glyph(rng: np.random.Generator, class_id: int) -> LogoClass:
    n_colors = int(rng.integers(2, 4))
    chosen = rng.permutation(len(COLORS))
    palette = tuple(int(c) for c in chosen[:n_colors])
    background = int(chosen[n_colors])

    def param_for(kind: str):
        if kind == "triangle":
            return int(rng.integers(0, 4))
        if kind == "ring":
            return int(rng.choice([45, 55, 65]))
        if kind == "letter":
            return str(rng.choice(list(LETTERS)))
        return 0

    kind = str(rng.choice(KINDS))
    if kind == "bar":
        long_side, short_side = int(rng.integers(18, GRID + 1)), int(rng.integers(6, 10))
        w, h = (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
    else:
        w, h = int(rng.integers(12, GRID + 1)), int(rng.integers(12, GRID + 1))
    prims = [Primitive(kind, 0, 0, w, h, 0, param_for(kind))]

    for _ in range(int(rng.integers(1, 4))):
        k = str(rng.choice(KINDS))
        sw, sh = int(rng.integers(5, 13)), int(rng.integers(5, 13))
        cx = int(rng.integers(2, max(3, w - 1)))
        cy = int(rng.integers(2, max(3, h - 1)))
        color = int(rng.integers(1, n_colors)) if rng.random() < 0.8 else 0
        prims.append(Primitive(k, cx - sw // 2, cy - sh // 2, cx - sw // 2 + sw, cy - sh // 2 + sh, color, param_for(k)))
    return LogoClass(class_id, tuple(prims), palette, background)


def query_coverage(cls: LogoClass, size: int) -> float:
    """Fraction of a clean ``size x size`` query render covered by the logo."""
    return float(_query_labels(cls, size)[0].mean())


def make_classes(seed: int, n_classes: int) -> list[LogoClass]:
    """Deterministic, pairwise-distinct logo classes with ids ``0..n-1``."""
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if n_classes > MAX_CLASSES:
        raise ValueError(f"n_classes {n_classes} exceeds glyph-space capacity {MAX_CLASSES}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10C0]))
    classes: list[LogoClass] = []
    seen: set = set()
    while len(classes) < n_classes:
        cand = _random_glyph(rng, len(classes))
        key = cand.glyph_key()
        if key in seen or not 1 / MAX_ASPECT <= cand.aspect <= MAX_ASPECT:
            continue
        if min(query_coverage(cand, s) for s in (16, 64)) < MIN_QUERY_COVERAGE:
            continue
        seen.add(key)
        classes.append(cand)
    return classes


# ---------------------------------------------------------------------------
# rendering


@dataclass
class InstanceStyle:
    """Per-image appearance of a class: jittered palette and kept elements."""

    colors: np.ndarray  # len(palette) x 3, uint8
    keep: tuple[bool, ...]


def instance_style(cls: LogoClass, image_seed: int, jitter: int = 0, dropout: float = 0.0) -> InstanceStyle:
    rng = np.random.default_rng(np.random.SeedSequence([image_seed, 1]))
    base = COLORS[list(cls.palette)]
    offs = rng.integers(-jitter, jitter + 1, size=base.shape) if jitter else np.zeros_like(base)
    colors = np.clip(base + offs, 0, 255).astype(np.uint8)
    drops = rng.random(len(cls.primitives)) < dropout
    keep = [True] + [not d for d in drops[1:]]
    if sum(keep) < 2 and len(keep) > 1:
        keep = [True] * len(keep)
    return InstanceStyle(colors, tuple(keep))


def _query_labels(cls: LogoClass, size: int, keep=None) -> tuple[np.ndarray, np.ndarray]:
    bw, bh = _box_dims(cls, max(1, round(QUERY_FILL * size)))
    labels = np.full((size, size), -1, dtype=np.int16)
    ox, oy = (size - bw) // 2, (size - bh) // 2
    labels[oy : oy + bh, ox : ox + bw] = rasterize(cls, bw, bh, keep)
    return labels >= 0, labels


def render_query(
    cls: LogoClass, size: int, image_seed: int | None = None, jitter: int = 0, dropout: float = 0.0
) -> np.ndarray:
    """Clean logo render on the class backdrop colour, ``size x size x 3`` uint8."""
    style = instance_style(cls, image_seed if image_seed is not None else 0, jitter, dropout)
    if image_seed is None:
        style = InstanceStyle(COLORS[list(cls.palette)].astype(np.uint8), (True,) * len(cls.primitives))
    fg, labels = _query_labels(cls, size, style.keep)
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = COLORS[cls.background]
    img[fg] = style.colors[labels[fg]]
    return img


@dataclass
class SceneInfo:
    scale: float
    box: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max of the placement box, inclusive
    colors: np.ndarray


def _clutter_colors(cls: LogoClass) -> np.ndarray:
    return np.array([i for i in range(len(COLORS)) if i not in cls.palette])


def render_scene(
    cls: LogoClass,
    scene_seed: int,
    scale_range: tuple[float, float] = (0.2, 0.6),
    clutter_level: float = 0.5,
    target_size: int = 64,
    jitter: int = 0,
    dropout: float = 0.0,
    return_info: bool = False,
):
    """One logo instance over clutter. Returns ``(target, mask)`` (and ``SceneInfo`` if asked).

    The logo's longer side is ``round(scale * target_size)`` pixels with scale
    drawn uniformly from ``scale_range``. Clutter (rectangles, ellipses,
    pixel noise) never uses class colours and is painted before the logo.
    """
    lo, hi = scale_range
    if not 0 < lo <= hi <= 0.9:
        raise ValueError(f"scale_range must satisfy 0 < lo <= hi <= 0.9, got {scale_range}")
    if min(_box_dims(cls, round(lo * target_size))) < 4:
        raise ValueError(f"logo at scale {lo} is smaller than 4x4 pixels in a {target_size}px scene")
    style = instance_style(cls, scene_seed, jitter, dropout)
    rng = np.random.default_rng(np.random.SeedSequence([scene_seed, 2]))
    size = target_size
    others = _clutter_colors(cls)

    img = np.empty((size, size, 3), dtype=np.int16)
    img[:] = COLORS[rng.choice(others)]
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(round(clutter_level * 10))):
        w, h = rng.integers(max(2, size // 20), max(3, int(0.4 * size)) + 1, size=2)
        x0, y0 = rng.integers(-w // 2, size, size=2)
        color = COLORS[rng.choice(others)]
        if rng.random() < 0.5:
            region = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        else:
            cx, cy = x0 + w / 2, y0 + h / 2
            region = ((xx + 0.5 - cx) / (w / 2)) ** 2 + ((yy + 0.5 - cy) / (h / 2)) ** 2 <= 1
        img[region] = color
    if clutter_level > 0:
        amp = int(round(12 * clutter_level))
        img += rng.integers(-amp, amp + 1, size=img.shape, dtype=np.int16)
    img = np.clip(img, 0, 255).astype(np.uint8)

    scale = float(rng.uniform(lo, hi))
    bw, bh = _box_dims(cls, round(scale * size))
    x0 = int(rng.integers(0, size - bw + 1))
    y0 = int(rng.integers(0, size - bh + 1))
    labels = rasterize(cls, bw, bh, style.keep)
    fg = labels >= 0
    patch = img[y0 : y0 + bh, x0 : x0 + bw]
    patch[fg] = style.colors[labels[fg]]
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[y0 : y0 + bh, x0 : x0 + bw][fg] = 255
    if not mask.any():
        raise ValueError("rendered logo has no pixels")
    if return_info:
        return img, mask, SceneInfo(scale, (x0, y0, x0 + bw - 1, y0 + bh - 1), style.colors)
    return img, mask


# ---------------------------------------------------------------------------
# triplets and dataset files

DS_MAGIC = b"OSDS"
DS_VERSION = 1


def record_dtype(query_size: int, target_size: int) -> np.dtype:
    q, t = query_size, target_size
    return np.dtype(
        [
            ("class_id", "<u4"),
            ("query_image", "<u4"),
            ("target_image", "<u4"),
            ("scene_seed", "<u8"),
            ("query", "u1", (q, q, 3)),
            ("target", "u1", (t, t, 3)),
            ("mask", "u1", (t, t)),
        ]
    )


@dataclass
class Triplet:
    query: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    class_id: int
    scene_seed: int
    query_image: int = 0
    target_image: int = 0


@dataclass
class GenConfig:
    query_size: int = 16
    target_size: int = 64
    scale_range: tuple[float, float] = (0.2, 0.6)
    clutter_level: float = 0.5
    jitter: int = 12
    dropout: float = 0.15


@dataclass
class DatasetFile:
    """Header plus records; ``records`` is a structured array (possibly memory-mapped)."""

    query_size: int
    target_size: int
    classes: list[LogoClass]
    records: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> Triplet:
        r = self.records[i]
        return Triplet(
            np.asarray(r["query"]),
            np.asarray(r["target"]),
            np.asarray(r["mask"]),
            int(r["class_id"]),
            int(r["scene_seed"]),
            int(r["query_image"]),
            int(r["target_image"]),
        )

    def __iter__(self) -> Iterator[Triplet]:
        for i in range(len(self)):
            yield self[i]

    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    def subset(self, indices) -> "DatasetFile":
        return DatasetFile(self.query_size, self.target_size, self.classes, self.records[np.asarray(indices, dtype=np.int64)], dict(self.meta))


def image_seed(seed: int, class_id: int, image_index: int) -> int:
    return int(np.random.SeedSequence([seed, class_id, image_index]).generate_state(1, np.uint64)[0])


def triplet_count(n_classes: int, images_per_class: int) -> int:
    if images_per_class < 2:
        raise ValueError("need at least 2 images per class to form triplets")
    return n_classes * images_per_class * (images_per_class - 1)


def gen_triplets(
    classes: Sequence[LogoClass],
    images_per_class: int,
    seed: int,
    gen: GenConfig | None = None,
    first_image: int = 0,
) -> DatasetFile:
    """All ``n(n-1)`` (query j, scene k != j) pairs per class, class-major then j then k.

    Image indices run from ``first_image``; a test set drawn with an offset
    past the training images shares classes with it but no images.
    """
    gen = gen or GenConfig()
    n = images_per_class
    total = triplet_count(len(classes), n)
    recs = np.zeros(total, dtype=record_dtype(gen.query_size, gen.target_size))
    i = 0
    for cls in classes:
        seeds = [image_seed(seed, cls.class_id, first_image + j) for j in range(n)]
        queries = [render_query(cls, gen.query_size, s, gen.jitter, gen.dropout) for s in seeds]
        scenes = [
            render_scene(cls, s, gen.scale_range, gen.clutter_level, gen.target_size, gen.jitter, gen.dropout)
            for s in seeds
        ]
        for j in range(n):
            for k in range(n):
                if k == j:
                    continue
                r = recs[i]
                r["class_id"], r["query_image"], r["target_image"] = cls.class_id, first_image + j, first_image + k
                r["scene_seed"] = seeds[k]
                r["query"] = queries[j]
                r["target"], r["mask"] = scenes[k]
                i += 1
    meta = {
        "seed": str(seed),
        "images_per_class": str(n),
        "first_image": str(first_image),
        "scale_range": f"{gen.scale_range[0]},{gen.scale_range[1]}",
        "clutter_level": str(gen.clutter_level),
        "jitter": str(gen.jitter),
        "dropout": str(gen.dropout),
    }
    return DatasetFile(gen.query_size, gen.target_size, list(classes), recs, meta)


def split_one_shot(classes: Sequence[LogoClass], seed: int, train_count: int) -> tuple[list[LogoClass], list[LogoClass]]:
    """Disjoint train/test class sets; both keep ascending class-id order."""
    if not 0 < train_count < len(classes):
        raise ValueError(f"train_count must be in [1, {len(classes) - 1}], got {train_count}")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5917])).permutation(len(classes))
    train_idx = sorted(order[:train_count])
    test_idx = sorted(order[train_count:])
    return [classes[i] for i in train_idx], [classes[i] for i in test_idx]


def split_triplets(n_records: int, seed: int, train_fraction: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle of record indices into train/val (``floor(0.9 N)`` train)."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x9010])).permutation(n_records)
    n_train = int(n_records * train_fraction + 1e-9)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _header_bytes(ds: DatasetFile) -> bytes:
    meta = "".join(f"{k}={v}\n" for k, v in ds.meta.items()).encode("utf-8")
    parts = [
        DS_MAGIC,
        struct.pack("<IIIII", DS_VERSION, ds.query_size, ds.target_size, len(ds.classes), len(ds.records)),
        struct.pack("<I", len(meta)),
        meta,
    ]
    for cls in ds.classes:
        spec = cls.to_json().encode("utf-8")
        parts += [struct.pack("<IH", cls.class_id, len(spec)), spec]
    return b"".join(parts)


def write_dataset(ds: DatasetFile, path) -> None:
    expected = record_dtype(ds.query_size, ds.target_size)
    if ds.records.dtype != expected:
        raise ValueError("record layout does not match image dims")
    with open(path, "wb") as fh:
        fh.write(_header_bytes(ds))
        fh.write(np.ascontiguousarray(ds.records).tobytes())


def read_dataset(path) -> DatasetFile:
    """Parse the header and memory-map the records (random access, nothing loaded up front)."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        def take(n):
            b = fh.read(n)
            if len(b) != n:
                raise FormatError(f"{path}: truncated header")
            return b

        if take(4) != DS_MAGIC:
            raise FormatError(f"{path}: bad magic, not a dataset file")
        version, q, t, n_classes, n_records = struct.unpack("<IIIII", take(20))
        if version != DS_VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        (mlen,) = struct.unpack("<I", take(4))
        meta = {}
        for line in take(mlen).decode("utf-8").splitlines():
            if line:
                k, _, v = line.partition("=")
                meta[k] = v
        classes = []
        for _ in range(n_classes):
            cid, slen = struct.unpack("<IH", take(6))
            try:
                cls = LogoClass.from_json(take(slen).decode("utf-8"))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}: bad class table entry") from exc
            if cls.class_id != cid:
                raise FormatError(f"{path}: class id mismatch in class table")
            classes.append(cls)
        header = fh.tell()
    dtype = record_dtype(q, t)
    if header + n_records * dtype.itemsize != size:
        raise FormatError(
            f"{path}: size {size} != header {header} + {n_records} x {dtype.itemsize}-byte records (truncated?)"
        )
    if n_records:
        records = np.memmap(path, dtype=dtype, mode="r", offset=header, shape=(n_records,))
    else:
        records = np.zeros(0, dtype=dtype)
    return DatasetFile(q, t, classes, records, meta)
