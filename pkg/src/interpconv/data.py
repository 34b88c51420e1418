"""Deterministic synthetic "animal-part" datasets.

Each category is a rigid arrangement of glyph parts ("head", "torso", "legs")
drawn at jittered positions over light background clutter.  Head glyphs are
unique per category while body glyphs are shared, so the head carries the
discriminative signal.  Every sample ships its per-part binary masks and
landmark (mask centroid) coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .pgm import read_pgm, write_pgm

# ---------------------------------------------------------------------------
# glyph rasterizers (bool (s, s) footprints)
# ---------------------------------------------------------------------------

def _grid(s: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:s, 0:s]
    return yy.astype(np.float64), xx.astype(np.float64)


def _disc(s: int) -> np.ndarray:
    yy, xx = _grid(s)
    r = (s - 1) / 2.0
    return (yy - r) ** 2 + (xx - r) ** 2 <= r * r + 1e-9


def _ring(s: int) -> np.ndarray:
    yy, xx = _grid(s)
    r = (s - 1) / 2.0
    d2 = (yy - r) ** 2 + (xx - r) ** 2
    return (d2 <= r * r + 1e-9) & (d2 >= (0.45 * r) ** 2)


def _square(s: int) -> np.ndarray:
    return np.ones((s, s), dtype=bool)


def _diamond(s: int) -> np.ndarray:
    yy, xx = _grid(s)
    r = (s - 1) / 2.0
    return np.abs(yy - r) + np.abs(xx - r) <= r + 1e-9


def _triangle(s: int) -> np.ndarray:
    yy, xx = _grid(s)
    r = (s - 1) / 2.0
    return np.abs(xx - r) <= (yy + 1) * (r / s) + 1e-9


def _plus(s: int) -> np.ndarray:
    yy, xx = _grid(s)
    r = (s - 1) / 2.0
    w = max(s // 6, 1)
    return (np.abs(yy - r) <= w) | (np.abs(xx - r) <= w)


def _cross(s: int) -> np.ndarray:
    yy, xx = _grid(s)
    w = max(s // 5, 1)
    return (np.abs(yy - xx) <= w) | (np.abs(yy + xx - (s - 1)) <= w)


def _bar_h(s: int) -> np.ndarray:
    yy, _ = _grid(s)
    r = (s - 1) / 2.0
    return np.abs(yy - r) <= max(s // 5, 1)


def _legs(s: int) -> np.ndarray:
    _, xx = _grid(s)
    w = max(s // 4, 1)
    return (xx < w) | (xx >= s - w)


GLYPHS = {
    "disc": _disc,
    "ring": _ring,
    "square": _square,
    "diamond": _diamond,
    "triangle": _triangle,
    "plus": _plus,
    "cross": _cross,
    "bar_h": _bar_h,
    "legs": _legs,
}

_CLUTTER_GLYPHS = ("square", "disc", "diamond")
_HEAD_GLYPHS = ("disc", "plus", "triangle", "ring", "cross", "diamond")


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartSpec:
    name: str
    glyph: str
    offset: tuple[int, int]        # (drow, dcol) from the object center
    size: int


@dataclass(frozen=True)
class CategorySpec:
    category_id: int
    name: str
    parts: tuple[PartSpec, ...]
    jitter: int = 8                # object placement jitter, +- pixels per axis
    clutter: int = 6               # background clutter shapes per image


def default_category_specs(
    categories: int = 4,
    jitter: int = 8,
    clutter: int = 6,
) -> list[CategorySpec]:
    """Head/torso/legs layouts with unique head glyphs and shared body glyphs."""
    if not (2 <= categories <= len(_HEAD_GLYPHS)):
        raise ParameterError(f"categories must be in 2..{len(_HEAD_GLYPHS)}, got {categories}")
    specs = []
    for c in range(categories):
        parts = (
            PartSpec("head", _HEAD_GLYPHS[c], (-15, 0), 11),
            PartSpec("torso", "square", (0, 0), 12),
            PartSpec("legs", "legs", (14, 0), 11),
        )
        specs.append(CategorySpec(c, f"animal{c}", parts, jitter=jitter, clutter=clutter))
    return specs


def _validate_specs(specs: list[CategorySpec], image_size: int) -> None:
    if len(specs) < 2:
        raise ParameterError("need at least 2 categories")
    if image_size < 32:
        raise ParameterError(f"image_size must be >= 32, got {image_size}")
    ids = [s.category_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ParameterError("duplicate category ids")
    for spec in specs:
        if not spec.parts:
            raise ParameterError(f"category {spec.category_id} has no parts")
        for part in spec.parts:
            if part.size < 3:
                raise ParameterError(f"part {part.name} too small (size {part.size})")
            if part.glyph not in GLYPHS:
                raise ParameterError(f"unknown glyph {part.glyph!r}")
            half = part.size // 2
            for axis, off in enumerate(part.offset):
                lo = image_size // 2 + off - spec.jitter - half
                hi = image_size // 2 + off + spec.jitter + half
                if lo < 0 or hi >= image_size:
                    raise ParameterError(
                        f"part {part.name} of category {spec.category_id} can leave the "
                        f"canvas under jitter (axis {axis}: {lo}..{hi})"
                    )
    for a in specs:
        for b in specs:
            if a.category_id < b.category_id:
                ga = [p.glyph for p in a.parts]
                gb = [p.glyph for p in b.parts]
                if ga == gb:
                    raise ParameterError(
                        f"categories {a.category_id} and {b.category_id} share all glyphs"
                    )


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    image: np.ndarray                       # (H, W) float64 in [0, 1], 8-bit quantized
    label: int
    part_masks: dict[str, np.ndarray]       # part name -> bool (H, W)
    landmarks: dict[str, tuple[float, float]]  # part name -> centroid (row, col)
    bbox: tuple[int, int, int, int]         # (r0, c0, r1, c1), half-open


@dataclass
class PartDataset:
    image_size: int
    seed: int
    stream: int
    specs: list[CategorySpec]
    samples: list[SampleRecord] = field(default_factory=list)

    @property
    def num_categories(self) -> int:
        return len(self.specs)

    def images_array(self) -> np.ndarray:
        """(N, H, W, 1) channels-last stack in dataset order."""
        return np.stack([s.image for s in self.samples])[:, :, :, None]

    def labels_array(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def parts_of(self, category_id: int) -> list[str]:
        for spec in self.specs:
            if spec.category_id == category_id:
                return [p.name for p in spec.parts]
        raise DataError(f"unknown category {category_id}")


def _footprint(canvas_shape: tuple[int, int], glyph: np.ndarray, cr: int, cc: int) -> np.ndarray:
    """Glyph pasted (with clipping) as a canvas-sized bool mask."""
    h, w = canvas_shape
    s = glyph.shape[0]
    r0, c0 = cr - s // 2, cc - s // 2
    rr0, cc0 = max(r0, 0), max(c0, 0)
    rr1, cc1 = min(r0 + s, h), min(c0 + s, w)
    mask = np.zeros(canvas_shape, dtype=bool)
    if rr0 < rr1 and cc0 < cc1:
        mask[rr0:rr1, cc0:cc1] = glyph[rr0 - r0 : rr1 - r0, cc0 - c0 : cc1 - c0]
    return mask


def _centroid(mask: np.ndarray) -> tuple[float, float]:
    rows, cols = np.nonzero(mask)
    return (float(rows.mean()), float(cols.mean()))


def _generate_sample(
    spec: CategorySpec,
    image_size: int,
    rng: np.random.Generator,
) -> SampleRecord:
    h = w = image_size
    dr = int(rng.integers(-spec.jitter, spec.jitter + 1))
    dc = int(rng.integers(-spec.jitter, spec.jitter + 1))
    center = (h // 2 + dr, w // 2 + dc)

    part_masks: dict[str, np.ndarray] = {}
    for part in spec.parts:
        glyph = GLYPHS[part.glyph](part.size)
        part_masks[part.name] = _footprint(
            (h, w), glyph, center[0] + part.offset[0], center[1] + part.offset[1]
        )
    forbidden = np.zeros((h, w), dtype=bool)
    for m in part_masks.values():
        forbidden |= m

    img = rng.uniform(0.0, 0.06, size=(h, w))
    for _ in range(spec.clutter):
        size = int(rng.integers(3, 6))
        glyph = GLYPHS[_CLUTTER_GLYPHS[int(rng.integers(len(_CLUTTER_GLYPHS)))]](size)
        value = float(rng.uniform(0.25, 0.55))
        for _attempt in range(20):
            cr = int(rng.integers(0, h))
            cc = int(rng.integers(0, w))
            fp = _footprint((h, w), glyph, cr, cc)
            if fp.any() and not (fp & forbidden).any():
                img[fp] = value
                break
    for part in spec.parts:
        value = float(rng.uniform(0.75, 1.0))
        img[part_masks[part.name]] = value

    quantized = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    rows, cols = np.nonzero(forbidden)
    bbox = (int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
    landmarks = {name: _centroid(m) for name, m in part_masks.items()}
    return SampleRecord(
        image=quantized.astype(np.float64) / 255.0,
        label=spec.category_id,
        part_masks=part_masks,
        landmarks=landmarks,
        bbox=bbox,
    )


def generate_dataset(
    specs: list[CategorySpec],
    count_per_category: int,
    image_size: int,
    seed: int,
    stream: int = 0,
) -> PartDataset:
    """Deterministic dataset; every sample draws from its own derived RNG stream,
    so generation order (or parallelism) cannot change the result."""
    _validate_specs(specs, image_size)
    if count_per_category < 1:
        raise ParameterError("count_per_category must be >= 1")
    ds = PartDataset(image_size=image_size, seed=seed, stream=stream, specs=list(specs))
    for spec in sorted(specs, key=lambda s: s.category_id):
        for idx in range(count_per_category):
            rng = np.random.default_rng([seed, stream, spec.category_id, idx])
            ds.samples.append(_generate_sample(spec, image_size, rng))
    return ds


# ---------------------------------------------------------------------------
# on-disk layout: dataset.json + per-sample PGM image + per-part PGM masks
# ---------------------------------------------------------------------------

def save_dataset(ds: PartDataset, path: str | Path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format": "interpconv-parts-v1",
        "image_size": ds.image_size,
        "seed": ds.seed,
        "stream": ds.stream,
        "categories": [
            {
                "id": s.category_id,
                "name": s.name,
                "jitter": s.jitter,
                "clutter": s.clutter,
                "parts": [
                    {"name": p.name, "glyph": p.glyph, "offset": list(p.offset), "size": p.size}
                    for p in s.parts
                ],
            }
            for s in ds.specs
        ],
        "samples": [],
    }
    for i, sample in enumerate(ds.samples):
        img_rel = f"images/s_{i:06d}.pgm"
        write_pgm(root / img_rel, np.round(sample.image * 255.0).astype(np.uint8))
        masks = {}
        for name, mask in sample.part_masks.items():
            rel = f"masks/s_{i:06d}_{name}.pgm"
            write_pgm(root / rel, mask.astype(np.uint8) * 255)
            masks[name] = rel
        manifest["samples"].append(
            {
                "image": img_rel,
                "label": sample.label,
                "landmarks": {k: [v[0], v[1]] for k, v in sample.landmarks.items()},
                "bbox": list(sample.bbox),
                "masks": masks,
            }
        )
    with open(root / "dataset.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)


def load_dataset(path: str | Path) -> PartDataset:
    root = Path(path)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise DataError(f"missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt manifest {manifest_path}: {e}") from e
    if manifest.get("format") != "interpconv-parts-v1":
        raise DataError(f"unknown dataset format {manifest.get('format')!r}")
    specs = [
        CategorySpec(
            category_id=c["id"],
            name=c["name"],
            parts=tuple(
                PartSpec(p["name"], p["glyph"], tuple(p["offset"]), p["size"])
                for p in c["parts"]
            ),
            jitter=c["jitter"],
            clutter=c["clutter"],
        )
        for c in manifest["categories"]
    ]
    ds = PartDataset(
        image_size=manifest["image_size"],
        seed=manifest["seed"],
        stream=manifest.get("stream", 0),
        specs=specs,
    )
    size = (ds.image_size, ds.image_size)
    for entry in manifest["samples"]:
        img8 = read_pgm(root / entry["image"])
        if img8.shape != size:
            raise DataError(f"{entry['image']}: wrong shape {img8.shape}, expected {size}")
        masks = {}
        for name, rel in entry["masks"].items():
            m = read_pgm(root / rel)
            if m.shape != size:
                raise DataError(f"{rel}: wrong shape {m.shape}")
            masks[name] = m > 127
        ds.samples.append(
            SampleRecord(
                image=img8.astype(np.float64) / 255.0,
                label=int(entry["label"]),
                part_masks=masks,
                landmarks={k: (v[0], v[1]) for k, v in entry["landmarks"].items()},
                bbox=tuple(entry["bbox"]),
            )
        )
    return ds
