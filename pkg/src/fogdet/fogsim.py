"""Synthetic scenes with depth, plus fog synthesis via the atmospheric
scattering model I_t = I_s * e^{-beta d} + A * (1 - e^{-beta d}).

Five primitive shape categories (circle, square, triangle, bar, cross)
stand in for real object classes. Rendering is deterministic per seed and
every object carries a tight bounding-box annotation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .autodiff import Tensor, load_tensor, save_tensor

CATEGORIES = ("circle", "square", "triangle", "bar", "cross")
NUM_CATEGORIES = len(CATEGORIES)

BACKGROUND_DEPTH_NEAR = 1.0
BACKGROUND_DEPTH_FAR = 10.0

#: low/mid/high scattering presets per depth-unit; high fog drops far
#: background transmission below 0.5 (e^{-0.08*10} ~= 0.45).
FOG_PRESETS = {"low": 0.04, "mid": 0.06, "high": 0.08}
DEFAULT_ATMOSPHERIC_LIGHT = 0.9


class FogParamError(ValueError):
    pass


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class FogParams:
    beta: float
    atmospheric_light: float = DEFAULT_ATMOSPHERIC_LIGHT

    def __post_init__(self):
        if self.beta < 0:
            raise FogParamError(f"scattering coefficient must be >= 0, got {self.beta}")
        if not 0.0 <= self.atmospheric_light <= 1.0:
            raise FogParamError(
                f"atmospheric light must lie in [0,1], got {self.atmospheric_light}")


@dataclass(frozen=True)
class SceneObject:
    kind: str                  # one of CATEGORIES
    color: tuple               # RGB in [0,1]
    center: tuple              # (row, col) pixels
    size: int                  # radius / half-extent in pixels
    depth: float

    @property
    def category(self) -> int:
        return CATEGORIES.index(self.kind)


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    objects: tuple
    background: tuple = ((0.15, 0.2, 0.3), (0.45, 0.5, 0.55))  # top/bottom RGB
    seed: int = 0

    def validate(self):
        if not self.objects:
            raise SceneSpecError("a scene needs at least one object")
        for obj in self.objects:
            r, c = obj.center
            s = obj.size
            if r - s < 0 or c - s < 0 or r + s >= self.height or c + s >= self.width:
                raise SceneSpecError(
                    f"object {obj.kind} at {obj.center} size {s} leaves the "
                    f"{self.height}x{self.width} canvas")


@dataclass
class Annotation:
    boxes: list                # (cx, cy, w, h) normalized to [0,1]
    labels: list               # category ids

    def __post_init__(self):
        assert len(self.boxes) == len(self.labels)


# -- fog model -------------------------------------------------------------

def transmission(depth: np.ndarray, beta: float) -> np.ndarray:
    """Fraction of scene radiance surviving the fog path: e^{-beta d}."""
    if beta < 0:
        raise FogParamError(f"scattering coefficient must be >= 0, got {beta}")
    return np.exp(-beta * np.asarray(depth, dtype=np.float64))


def apply_fog(clear: np.ndarray, depth: np.ndarray, params: FogParams) -> np.ndarray:
    """Blend scene radiance toward the airlight by per-pixel transmission."""
    clear = np.asarray(clear, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if clear.shape[:2] != depth.shape:
        raise ValueError(
            f"image {clear.shape[:2]} and depth {depth.shape} dims differ")
    t = transmission(depth, params.beta)[..., None]
    foggy = clear * t + params.atmospheric_light * (1.0 - t)
    return np.clip(foggy, 0.0, 1.0)


def fog_density(depth: np.ndarray, params: FogParams) -> np.ndarray:
    """1 - e^{-beta d}: the airlight mixing weight, used as the auxiliary
    fog stream input for the weather-aware variants."""
    return 1.0 - transmission(depth, params.beta)


# -- rendering -------------------------------------------------------------

def _shape_mask(kind: str, h: int, w: int, center, size: int) -> np.ndarray:
    r0, c0 = center
    rr, cc = np.mgrid[0:h, 0:w]
    dr, dc = rr - r0, cc - c0
    if kind == "circle":
        return dr * dr + dc * dc <= size * size
    if kind == "square":
        return (np.abs(dr) <= size) & (np.abs(dc) <= size)
    if kind == "triangle":
        # upright isoceles: apex at top, base at bottom of the extent
        inside = (dr >= -size) & (dr <= size)
        half_width = (dr + size) / 2.0
        return inside & (np.abs(dc) <= half_width)
    if kind == "bar":
        return (np.abs(dr) <= max(1, size // 3)) & (np.abs(dc) <= size)
    if kind == "cross":
        arm = max(1, size // 3)
        return ((np.abs(dr) <= arm) & (np.abs(dc) <= size)) | \
               ((np.abs(dc) <= arm) & (np.abs(dr) <= size))
    raise SceneSpecError(f"unknown shape kind {kind!r}")


def render_scene(spec: SceneSpec):
    """Rasterize a spec into (image, depth map, annotation).

    Objects are painted far-to-near so nearer shapes occlude; each
    annotation box is the bounding box of the object's own pixel mask.
    """
    spec.validate()
    h, w = spec.height, spec.width
    top, bottom = np.asarray(spec.background[0]), np.asarray(spec.background[1])
    ramp = np.linspace(0.0, 1.0, h)[:, None, None]
    image = top * (1.0 - ramp) + bottom * ramp
    image = np.broadcast_to(image, (h, w, 3)).copy()
    depth = np.linspace(BACKGROUND_DEPTH_FAR, BACKGROUND_DEPTH_NEAR, h)[:, None]
    depth = np.broadcast_to(depth, (h, w)).copy()

    boxes, labels = [], []
    for obj in sorted(spec.objects, key=lambda o: -o.depth):
        mask = _shape_mask(obj.kind, h, w, obj.center, obj.size)
        image[mask] = obj.color
        depth[mask] = obj.depth
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        r1, r2 = rows[0], rows[-1] + 1
        c1, c2 = cols[0], cols[-1] + 1
        boxes.append((float(c1 + c2) / 2.0 / w, float(r1 + r2) / 2.0 / h,
                      float(c2 - c1) / w, float(r2 - r1) / h))
        labels.append(obj.category)
    return image, depth, Annotation(boxes=boxes, labels=labels)


def random_scene(rng: np.random.Generator, height: int = 32, width: int = 32,
                 max_objects: int = 3, seed: int = 0) -> SceneSpec:
    """Sample a valid scene with 1..max_objects non-degenerate shapes."""
    n = int(rng.integers(1, max_objects + 1))
    objects = []
    for _ in range(n):
        kind = CATEGORIES[int(rng.integers(NUM_CATEGORIES))]
        size = int(rng.integers(4, max(5, min(height, width) // 4)))
        r = int(rng.integers(size + 1, height - size - 1))
        c = int(rng.integers(size + 1, width - size - 1))
        color = tuple(rng.uniform(0.55, 1.0, 3).round(3))
        depth = float(rng.uniform(BACKGROUND_DEPTH_NEAR, BACKGROUND_DEPTH_FAR))
        objects.append(SceneObject(kind, color, (r, c), size, round(depth, 3)))
    return SceneSpec(height=height, width=width, objects=tuple(objects), seed=seed)


# -- image / dataset I/O ---------------------------------------------------

def write_ppm(path, image: np.ndarray):
    """8-bit binary PPM (P6)."""
    h, w, _ = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM (got {magic!r})")
        w, h = map(int, fh.readline().split())
        maxval = int(fh.readline())
        raw = np.frombuffer(fh.read(h * w * 3), dtype=np.uint8)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def save_depth(path, depth: np.ndarray):
    save_tensor(path, Tensor(depth))


def load_depth(path) -> np.ndarray:
    return load_tensor(path).data


@dataclass
class Sample:
    """One dataset record held in memory."""
    sample_id: str
    clear: np.ndarray
    foggy: np.ndarray
    depth: np.ndarray
    annotation: Annotation
    fog: FogParams


def make_dataset(out_dir, n: int, fog_levels, seed: int,
                 height: int = 32, width: int = 32,
                 max_objects: int = 3, split: str = "train") -> dict:
    """Write n paired clear/foggy samples plus annotations and a manifest.

    The fog level of each sample is drawn uniformly from fog_levels with
    the stream derived from (seed, split).
    """
    if n < 1:
        raise ValueError("dataset needs at least one sample")
    out = Path(out_dir)
    for sub in ("clear", "foggy", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    gen = rng_mod.derive(seed, "dataset", split)
    records = []
    for i in range(n):
        sid = f"{split}_{i:05d}"
        scene_rng = rng_mod.derive(seed, "dataset", split, f"scene{i}")
        spec = random_scene(scene_rng, height, width, max_objects, seed=seed)
        image, depth, ann = render_scene(spec)
        fog = fog_levels[int(gen.integers(len(fog_levels)))]
        foggy = apply_fog(image, depth, fog)
        write_ppm(out / "clear" / f"{sid}.ppm", image)
        write_ppm(out / "foggy" / f"{sid}.ppm", foggy)
        save_depth(out / "depth" / f"{sid}.bin", depth)
        records.append({
            "id": sid,
            "boxes": [list(b) for b in ann.boxes],
            "labels": ann.labels,
            "fog": {"beta": fog.beta, "A": fog.atmospheric_light},
        })
    with open(out / "annotations.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    manifest = {
        "split": split,
        "count": n,
        "height": height,
        "width": width,
        "seed": seed,
        "categories": list(CATEGORIES),
        "fog_levels": [{"beta": f.beta, "A": f.atmospheric_light}
                       for f in fog_levels],
        "has_fog_stream": True,
        "files": {"clear": "clear", "foggy": "foggy", "depth": "depth",
                  "annotations": "annotations.jsonl"},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_dataset(root) -> list:
    """Read a make_dataset directory back into memory."""
    root = Path(root)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    samples = []
    with open(root / "annotations.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            sid = rec["id"]
            samples.append(Sample(
                sample_id=sid,
                clear=read_ppm(root / "clear" / f"{sid}.ppm"),
                foggy=read_ppm(root / "foggy" / f"{sid}.ppm"),
                depth=load_depth(root / "depth" / f"{sid}.bin"),
                annotation=Annotation(boxes=[tuple(b) for b in rec["boxes"]],
                                      labels=list(rec["labels"])),
                fog=FogParams(beta=rec["fog"]["beta"],
                              atmospheric_light=rec["fog"]["A"]),
            ))
    return samples
