"""Synthetic panoptic scenes: stuff bands with occluding thing shapes.

Class ids ``0 .. n_thing_classes-1`` are things, the remaining ids are stuff.
Everything a loss or metric needs (segments, semantic label map, binary
semantic masks) is derived from the final occluded raster, so occlusion is
always consistent across the ground-truth structures.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

VOID = 255
SHAPE_KINDS = ("circle", "rectangle", "triangle")

_PALETTE = np.array([
    [0.90, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.95, 0.80, 0.15],
    [0.55, 0.35, 0.20],
    [0.60, 0.60, 0.65],
    [0.80, 0.30, 0.80],
    [0.15, 0.80, 0.80],
])


class DatasetError(Exception):
    pass


class CorruptDatasetError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


@dataclass
class SceneConfig:
    h: int = 32
    w: int = 32
    n_thing_classes: int = 4
    n_stuff_classes: int = 2
    things_min: int = 1
    things_max: int = 4
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    noise_std: float = 0.05

    @property
    def n_classes(self) -> int:
        return self.n_thing_classes + self.n_stuff_classes

    def validate(self) -> None:
        if self.h < 16 or self.w < 16:
            raise ValueError("scene must be at least 16x16")
        if self.n_stuff_classes < 1 or self.n_thing_classes < 0:
            raise ValueError("need at least one stuff class")
        if not 0 <= self.things_min <= self.things_max:
            raise ValueError("things range must satisfy 0 <= min <= max")
        if self.things_max > 0 and self.n_thing_classes == 0:
            raise ValueError("things requested but no thing classes")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown or not self.shape_kinds:
            raise ValueError(f"bad shape kinds {sorted(unknown)}")


@dataclass
class GroundTruthSegment:
    mask: np.ndarray  # bool, same spatial shape as the scene
    class_id: int
    is_thing: bool


@dataclass
class ThingSpec:
    """One shape to paint; ``geom`` is kind-specific (pixel coordinates)."""

    kind: str
    class_id: int
    geom: tuple[float, ...]
    shade: float = 0.0


@dataclass
class PanopticSample:
    image: np.ndarray            # (H, W, 3) float32 in [0, 1]
    segments: list[GroundTruthSegment]
    label_map: np.ndarray        # (H, W) uint8 class per pixel, VOID if none
    segment_map: np.ndarray      # (H, W) int16 index into segments, -1 if void
    n_classes: int
    n_thing_classes: int = 0

    @property
    def hw(self) -> tuple[int, int]:
        return self.label_map.shape

    @property
    def S(self) -> np.ndarray:
        """Binary semantic masks, shape (H*W, n_classes)."""
        return semantic_masks(self.label_map, self.n_classes)

    def downsample(self, stride: int) -> PanopticSample:
        """Nearest-centre sampling of the annotation; block-mean of the image.

        Segments that vanish at the coarse grid are dropped.
        """
        if stride == 1:
            return self
        h, w = self.hw
        if h % stride or w % stride:
            raise ValueError("stride must divide the scene size")
        off = stride // 2
        labels = self.label_map[off::stride, off::stride].copy()
        seg_idx = self.segment_map[off::stride, off::stride]
        image = self.image.reshape(h // stride, stride, w // stride, stride, 3).mean(axis=(1, 3))
        segments, seg_map = [], np.full(labels.shape, -1, dtype=np.int16)
        for k, seg in enumerate(self.segments):
            m = seg_idx == k
            if m.any():
                seg_map[m] = len(segments)
                segments.append(GroundTruthSegment(m, seg.class_id, seg.is_thing))
        return PanopticSample(image.astype(np.float32), segments, labels, seg_map,
                              self.n_classes, self.n_thing_classes)


def semantic_masks(label_map: np.ndarray, n_classes: int) -> np.ndarray:
    flat = label_map.reshape(-1)
    S = np.zeros((flat.size, n_classes), dtype=np.uint8)
    valid = flat != VOID
    S[np.flatnonzero(valid), flat[valid]] = 1
    return S


# rasterisation ------------------------------------------------------------------

def _pixel_centres(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w]
    return yy + 0.5, xx + 0.5


def shape_mask(spec: ThingSpec, h: int, w: int) -> np.ndarray:
    yy, xx = _pixel_centres(h, w)
    if spec.kind == "circle":
        cy, cx, r = spec.geom
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if spec.kind == "rectangle":
        y0, x0, y1, x1 = spec.geom
        return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
    if spec.kind == "triangle":
        ay, ax, by, bx, cy, cx = spec.geom

        def side(py, px, qy, qx):
            return (xx - qx) * (py - qy) - (px - qx) * (yy - qy)

        d1 = side(ay, ax, by, bx)
        d2 = side(by, bx, cy, cx)
        d3 = side(cy, cx, ay, ax)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)
    raise ValueError(f"unknown shape kind {spec.kind!r}")


def class_color(class_id: int) -> np.ndarray:
    if class_id < len(_PALETTE):
        return _PALETTE[class_id]
    return np.random.default_rng(1000 + class_id).uniform(0.1, 0.9, size=3)


def render(things: Sequence[ThingSpec], bands: Sequence[tuple[int, int]], cfg: SceneConfig,
           rng: np.random.Generator | None = None) -> PanopticSample:
    """Paint stuff ``bands`` (``(start_row, class_id)``, sorted) then ``things`` back to front.

    Later things overwrite earlier ones. Occluded instances split into
    4-connected pieces become separate segments; fully hidden ones vanish.
    """
    h, w = cfg.h, cfg.w
    labels = np.full((h, w), VOID, dtype=np.uint8)
    instance = np.full((h, w), -1, dtype=np.int32)
    shade = np.zeros((h, w))
    starts = [s for s, _ in bands] + [h]
    for (start, cls), stop in zip(bands, starts[1:]):
        labels[start:stop] = cls
    for k, spec in enumerate(things):
        m = shape_mask(spec, h, w)
        labels[m] = spec.class_id
        instance[m] = k
        shade[m] = spec.shade

    segments: list[GroundTruthSegment] = []
    seg_map = np.full((h, w), -1, dtype=np.int16)
    stuff_ids = sorted({c for _, c in bands})
    for cls in stuff_ids:
        m = (labels == cls) & (instance < 0)
        if m.any():
            seg_map[m] = len(segments)
            segments.append(GroundTruthSegment(m, int(cls), False))
    for k, spec in enumerate(things):
        pieces, n = ndimage.label(instance == k)
        for piece in range(1, n + 1):
            m = pieces == piece
            seg_map[m] = len(segments)
            segments.append(GroundTruthSegment(m, int(spec.class_id), True))

    image = np.zeros((h, w, 3))
    valid = labels != VOID
    for cls in np.unique(labels[valid]):
        image[labels == cls] = class_color(int(cls))
    image += shade[..., None]
    if rng is not None and cfg.noise_std > 0:
        image += rng.normal(0.0, cfg.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return PanopticSample(image, segments, labels, seg_map, cfg.n_classes, cfg.n_thing_classes)


def _random_thing(rng: np.random.Generator, cfg: SceneConfig) -> ThingSpec:
    h, w = cfg.h, cfg.w
    kind = str(cfg.shape_kinds[rng.integers(len(cfg.shape_kinds))])
    cls = int(rng.integers(cfg.n_thing_classes))
    lo, hi = min(h, w) / 8.0, min(h, w) / 3.0
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    if kind == "circle":
        geom = (cy, cx, rng.uniform(lo, hi) / 1.5)
    elif kind == "rectangle":
        hh, ww = rng.uniform(lo, hi, size=2)
        geom = (cy - hh / 2, cx - ww / 2, cy + hh / 2, cx + ww / 2)
    else:
        r = rng.uniform(lo, hi) * 0.8
        angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, 3)
        geom = tuple(v for a in angles for v in (cy + r * np.sin(a), cx + r * np.cos(a)))
    return ThingSpec(kind, cls, tuple(float(g) for g in geom), float(rng.uniform(-0.08, 0.08)))


def generate(seed: int, cfg: SceneConfig | None = None) -> PanopticSample:
    cfg = cfg or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_bands = int(rng.integers(1, cfg.n_stuff_classes + 1))
    stuff = rng.choice(np.arange(cfg.n_thing_classes, cfg.n_classes), size=n_bands, replace=False)
    cuts = np.sort(rng.choice(np.arange(1, cfg.h), size=n_bands - 1, replace=False)) if n_bands > 1 else []
    bands = list(zip([0, *map(int, cuts)], map(int, stuff)))
    n_things = int(rng.integers(cfg.things_min, cfg.things_max + 1))
    things = [_random_thing(rng, cfg) for _ in range(n_things)]
    return render(things, bands, cfg, rng)


def generate_many(seed: int, count: int, cfg: SceneConfig | None = None) -> list[PanopticSample]:
    """Sample ``i`` uses the stream ``seed ^ i``."""
    return [generate(seed ^ i, cfg) for i in range(count)]


# dataset file -------------------------------------------------------------------
#
# b"RMXDS1" | u32 count | per sample:
#   u16 H, u16 W, u16 n_classes, u16 n_thing_classes
#   f32[H*W*3] image | u8[H*W] label map
#   u16 n_segments | n_segments x (u16 class_id, u8 is_thing) | u8[H*W] segment index (255 void)
# | u32 CRC32 of everything before it

MAGIC = b"RMXDS"
VERSION = b"1"


def _encode_sample(s: PanopticSample) -> bytes:
    h, w = s.hw
    if len(s.segments) >= VOID:
        raise DatasetError("too many segments for the u8 segment map")
    out = [struct.pack("<4H", h, w, s.n_classes, s.n_thing_classes),
           np.ascontiguousarray(s.image, dtype="<f4").tobytes(),
           np.ascontiguousarray(s.label_map, dtype=np.uint8).tobytes(),
           struct.pack("<H", len(s.segments))]
    out += [struct.pack("<HB", seg.class_id, int(seg.is_thing)) for seg in s.segments]
    seg_map = np.where(s.segment_map < 0, VOID, s.segment_map).astype(np.uint8)
    out.append(seg_map.tobytes())
    return b"".join(out)


def write_dataset(path: str | Path, samples: Iterable[PanopticSample]) -> None:
    samples = list(samples)
    body = MAGIC + VERSION + struct.pack("<I", len(samples)) + b"".join(map(_encode_sample, samples))
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptDatasetError("dataset file is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_dataset(path: str | Path) -> list[PanopticSample]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 1 + 8:
        raise CorruptDatasetError("dataset file is truncated")
    if raw[:len(MAGIC)] != MAGIC:
        raise CorruptDatasetError("not a dataset file (bad magic)")
    if raw[len(MAGIC):len(MAGIC) + 1] != VERSION:
        raise DatasetVersionError(f"unsupported dataset version {raw[len(MAGIC):len(MAGIC) + 1]!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptDatasetError("CRC mismatch")

    r = _Reader(body)
    r.take(len(MAGIC) + 1)
    (count,) = r.unpack("<I")
    samples = []
    for _ in range(count):
        h, w, n_classes, n_things = r.unpack("<4H")
        image = np.frombuffer(r.take(h * w * 3 * 4), dtype="<f4").reshape(h, w, 3).astype(np.float32)
        labels = np.frombuffer(r.take(h * w), dtype=np.uint8).reshape(h, w).copy()
        (n_seg,) = r.unpack("<H")
        table = [r.unpack("<HB") for _ in range(n_seg)]
        seg_u8 = np.frombuffer(r.take(h * w), dtype=np.uint8).reshape(h, w)
        seg_map = np.where(seg_u8 == VOID, -1, seg_u8).astype(np.int16)
        segments = [GroundTruthSegment(seg_map == k, int(c), bool(t)) for k, (c, t) in enumerate(table)]
        samples.append(PanopticSample(image, segments, labels, seg_map, n_classes, n_things))
    if r.pos != len(body):
        raise CorruptDatasetError("trailing bytes after the last sample")
    return samples
