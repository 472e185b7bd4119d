"""Procedural top-down scenes with analytic lighting and shadow ground truth.

A scene is a curved floor (a shallow dome, so directional light produces a
brightness ramp toward the light) with 1-3 flat-topped primitives standing on
it.  Everything is orthographic and evaluated at pixel centres, so the maps
obey exact identities:

* ``image == albedo * shading * (1 - shadow_strength * shadow_mask)``
* floor normals are ``normalize(-dh/dx, -dh/dy, 1)`` of :func:`floor_height`
* each object's shadow is its footprint moved by
  ``height * cot(elevation) * (-cos az, sin az)`` in image coordinates,
  rounded to whole pixels so the shadow is an exact copy of the
  rasterized footprint.

The shadow mask is the projected shadow on the floor plane; it is not
clipped by the objects standing on it.
"""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .conditioning import light_direction

DTYPE = np.float32

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.15, 0.12),
    "green": (0.20, 0.70, 0.25),
    "blue": (0.15, 0.30, 0.85),
    "yellow": (0.92, 0.82, 0.15),
    "purple": (0.55, 0.22, 0.70),
    "orange": (0.95, 0.50, 0.10),
}
SHAPES = ("rectangle", "disk", "triangle")
FLOORS = {"plain": ((0.80, 0.78, 0.72),), "checkered": ((0.82, 0.80, 0.76), (0.55, 0.53, 0.50))}
COUNT_WORDS = {1: "a", 2: "two", 3: "three"}
COMPASS = ("east", "northeast", "north", "northwest", "west", "southwest", "south", "southeast")
TEMPLATE_WORDS = ("on", "a", "floor", "light", "from", "the")


@dataclass(frozen=True)
class SceneConfig:
    resolution: int = 64
    min_objects: int = 1
    max_objects: int = 3
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(PALETTE)
    floors: tuple[str, ...] = tuple(FLOORS)
    azimuths: tuple[float, ...] = (0.0, 90.0, 180.0, 270.0)
    elevations: tuple[float, ...] = (30.0, 45.0, 60.0)
    size_range: tuple[float, float] = (0.10, 0.16)     # half-extent / resolution
    height_range: tuple[float, float] = (0.04, 0.08)   # object height / resolution
    stripe_prob: float = 0.5
    stripe_periods: tuple[int, ...] = (2, 3, 4)
    stripe_dim: float = 0.55
    shadow_strength: float = 0.5
    ambient: float = 0.25
    curvature: float = 0.5
    checker_period: int = 8

    def validate(self) -> None:
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        if not 1 <= self.min_objects <= self.max_objects <= 3:
            raise ValueError("object counts must satisfy 1 <= min <= max <= 3")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")
        for c in self.colors:
            if c not in PALETTE:
                raise ValueError(f"unknown color {c!r}")
        for f in self.floors:
            if f not in FLOORS:
                raise ValueError(f"unknown floor {f!r}")
        if not self.azimuths or not self.elevations:
            raise ValueError("azimuth and elevation sets must be non-empty")
        for e in self.elevations:
            if not 0.0 < e <= 90.0:
                raise ValueError(f"elevation {e} outside (0, 90]")
        lo, hi = self.size_range
        if not 0.0 < lo <= hi < 0.5:
            raise ValueError("size_range must satisfy 0 < lo <= hi < 0.5")
        lo, hi = self.height_range
        if not 0.0 < lo <= hi:
            raise ValueError("height_range must be positive")
        for name in ("stripe_prob", "shadow_strength", "ambient", "stripe_dim"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if any(p < 2 for p in self.stripe_periods):
            raise ValueError("stripe periods must be >= 2")


@dataclass
class SceneObject:
    shape: str
    color: str
    cx: float
    cy: float
    half: float
    height: float
    stripe_period: int = 0
    stripe_axis: int = 0

    def footprint(self, H: int, W: int, dx: float = 0.0, dy: float = 0.0) -> np.ndarray:
        """Binary footprint at pixel centres, optionally translated."""
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        x = xs - (self.cx + dx)
        y = ys - (self.cy + dy)
        r = self.half
        if self.shape == "rectangle":
            m = (np.abs(x) <= r) & (np.abs(y) <= 0.7 * r)
        elif self.shape == "disk":
            m = x * x + y * y <= r * r
        else:
            # apex up: y in [-r, r], half-width shrinks linearly toward the apex
            m = (y >= -r) & (y <= r) & (np.abs(x) <= (y + r) / 2.0)
        return m


@dataclass
class SceneSample:
    image: np.ndarray
    albedo: np.ndarray
    shading: np.ndarray
    shadow_mask: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    object_masks: list[np.ndarray]
    light: tuple[float, float]          # (elevation deg, azimuth deg)
    camera: tuple[float, float, float]  # (roll, pitch, yaw) deg
    prompt: str
    seed: int
    objects: list[SceneObject] = field(default_factory=list)
    floor: str = "plain"
    shadow_strength: float = 0.5

    @property
    def mask(self) -> np.ndarray:
        """Union of the object masks."""
        out = np.zeros(self.shading.shape, dtype=DTYPE)
        for m in self.object_masks:
            out = np.maximum(out, m)
        return out


def floor_height(x: np.ndarray, y: np.ndarray, resolution: int, curvature: float) -> np.ndarray:
    c = (resolution - 1) / 2.0
    return -curvature * ((x - c) ** 2 + (y - c) ** 2) / (2.0 * resolution)


def floor_gradient(x: np.ndarray, y: np.ndarray, resolution: int,
                   curvature: float) -> tuple[np.ndarray, np.ndarray]:
    c = (resolution - 1) / 2.0
    return -curvature * (x - c) / resolution, -curvature * (y - c) / resolution


def _cos_sin_deg(deg: float) -> tuple[float, float]:
    if deg == 90.0:
        return 0.0, 1.0
    r = math.radians(deg)
    return math.cos(r), math.sin(r)


def shadow_offset(height: float, elevation_deg: float, azimuth_deg: float) -> tuple[float, float]:
    """Image-space displacement of a shadow cast from ``height`` pixels up."""
    ce, se = _cos_sin_deg(elevation_deg)
    ux, uy = light_direction(azimuth_deg)
    k = height * ce / se
    return -k * ux, -k * uy


def shadow_pixel_offset(height: float, elevation_deg: float,
                        azimuth_deg: float) -> tuple[int, int]:
    """:func:`shadow_offset` rounded to whole pixels (what the renderer uses)."""
    dx, dy = shadow_offset(height, elevation_deg, azimuth_deg)
    return int(np.rint(dx)), int(np.rint(dy))


def compass_word(azimuth_deg: float) -> str:
    idx = int(math.floor(((azimuth_deg % 360.0) + 22.5) / 45.0)) % 8
    return COMPASS[idx]


def _plural(shape: str, count: int) -> str:
    return shape if count == 1 else shape + "s"


def prompt_from_scene(scene: SceneSample) -> str:
    """``<count> <color> <shape>(s) on a <floor> floor, light from the <dir>``."""
    obj = scene.objects[0]
    n = len(scene.objects)
    return (f"{COUNT_WORDS[n]} {obj.color} {_plural(obj.shape, n)} on a {scene.floor} floor, "
            f"light from the {compass_word(scene.light[1])}")


def enumerate_prompts(config: SceneConfig = SceneConfig()) -> list[str]:
    out = []
    dirs = sorted({compass_word(a) for a in config.azimuths}, key=COMPASS.index)
    for n in range(config.min_objects, config.max_objects + 1):
        for color in config.colors:
            for shape in config.shapes:
                for floor in config.floors:
                    for d in dirs:
                        out.append(f"{COUNT_WORDS[n]} {color} {_plural(shape, n)} on a {floor} "
                                   f"floor, light from the {d}")
    return out


def vocabulary() -> list[str]:
    """Closed prompt vocabulary; index 0 is the null token."""
    words = set(TEMPLATE_WORDS) | set(COUNT_WORDS.values()) | set(PALETTE) | set(FLOORS)
    words |= set(COMPASS)
    for s in SHAPES:
        words |= {s, s + "s"}
    return ["<null>"] + sorted(words)


_WORD = re.compile(r"[a-z]+")


class Tokenizer:
    def __init__(self, words: list[str] | None = None):
        self.words = words if words is not None else vocabulary()
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, prompt: str) -> list[int]:
        """Whitespace/punctuation split; empty prompt -> [] (the null prompt)."""
        out = []
        for w in _WORD.findall(prompt.lower()):
            if w not in self.index:
                raise ValueError(f"word {w!r} not in the prompt vocabulary")
            out.append(self.index[w])
        return out


# ---------------------------------------------------------------- generation


def gen_scene(seed: int, config: SceneConfig = SceneConfig(), elevation: float | None = None,
              azimuth: float | None = None) -> SceneSample:
    config.validate()
    rng = np.random.default_rng(seed)
    H = W = config.resolution
    elev = float(config.elevations[rng.integers(len(config.elevations))])
    azim = float(config.azimuths[rng.integers(len(config.azimuths))])
    if elevation is not None:
        elev = float(elevation)
    if azimuth is not None:
        azim = float(azimuth)
    if not 0.0 < elev <= 90.0:
        raise ValueError(f"elevation {elev} outside (0, 90]")
    floor = config.floors[rng.integers(len(config.floors))]
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    shape = config.shapes[rng.integers(len(config.shapes))]
    color = config.colors[rng.integers(len(config.colors))]

    objects: list[SceneObject] = []
    max_h = config.height_range[1] * H
    ce, se = _cos_sin_deg(min(config.elevations + (elev,)))
    max_off = max_h * ce / se
    for _ in range(count):
        half = float(rng.uniform(*config.size_range) * H)
        height = float(rng.uniform(*config.height_range) * H)
        margin = half + max_off + 1.0
        lo, hi = margin, (H - 1) - margin
        if hi < lo:
            lo = hi = (H - 1) / 2.0
        cx = float(rng.uniform(lo, hi))
        cy = float(rng.uniform(lo, hi))
        striped = rng.random() < config.stripe_prob
        period = int(config.stripe_periods[rng.integers(len(config.stripe_periods))])
        axis = int(rng.integers(2))
        objects.append(SceneObject(shape, color, cx, cy, half, height,
                                   period if striped else 0, axis))
    return render_scene(objects, elev, azim, floor, config, seed)


def render_scene(objects: list[SceneObject], elevation: float, azimuth: float, floor: str,
                 config: SceneConfig = SceneConfig(), seed: int = 0) -> SceneSample:
    """Rasterize a fixed object list; pure function of its arguments."""
    H = W = config.resolution
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)

    # floor geometry
    hfloor = floor_height(xs, ys, H, config.curvature)
    gx, gy = floor_gradient(xs, ys, H, config.curvature)
    n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)

    tones = FLOORS[floor]
    albedo = np.empty((H, W, 3))
    if len(tones) == 1:
        albedo[:] = tones[0]
    else:
        p = config.checker_period
        checker = ((xs // p + ys // p) % 2).astype(int)
        albedo[:] = np.asarray(tones)[checker]

    # objects, tallest drawn last so it wins
    order = sorted(range(len(objects)), key=lambda i: (objects[i].height, i))
    owner = np.full((H, W), -1)
    for i in order:
        owner[objects[i].footprint(H, W)] = i
    surface = hfloor.copy()
    for i, obj in enumerate(objects):
        sel = owner == i
        col = np.asarray(PALETTE[obj.color], dtype=np.float64)
        if obj.stripe_period:
            coord = xs if obj.stripe_axis == 0 else ys
            dark = (coord.astype(int) % obj.stripe_period) < obj.stripe_period / 2.0
            tex = np.where(dark, config.stripe_dim, 1.0)
            albedo[sel] = col[None, :] * tex[sel][:, None]
        else:
            albedo[sel] = col
        n[sel] = (0.0, 0.0, 1.0)
        surface[sel] = hfloor[sel] + obj.height
    object_masks = [(owner == i).astype(DTYPE) for i in range(len(objects))]

    # lighting
    ce, se = _cos_sin_deg(elevation)
    ux, uy = light_direction(azimuth)
    ldir = np.array([ce * ux, ce * uy, se])
    ndotl = np.clip(n @ ldir, 0.0, None)
    shading = (config.ambient + (1.0 - config.ambient) * ndotl).astype(DTYPE)

    shadow = np.zeros((H, W), dtype=bool)
    for obj in objects:
        dx, dy = shadow_pixel_offset(obj.height, elevation, azimuth)
        shadow |= obj.footprint(H, W, dx, dy)
    shadow_mask = shadow.astype(DTYPE)

    albedo32 = albedo.astype(DTYPE)
    ks = DTYPE(config.shadow_strength)
    image = albedo32 * shading[..., None] * (DTYPE(1.0) - ks * shadow_mask)[..., None]

    cam_height = 4.0 * H
    depth = (cam_height - surface).astype(DTYPE)

    sample = SceneSample(
        image=image.astype(DTYPE), albedo=albedo32, shading=shading, shadow_mask=shadow_mask,
        depth=depth, normals=n.astype(DTYPE), object_masks=object_masks,
        light=(float(elevation), float(azimuth)), camera=(0.0, 90.0, 0.0), prompt="",
        seed=int(seed), objects=objects, floor=floor,
        shadow_strength=config.shadow_strength,
    )
    sample.prompt = prompt_from_scene(sample) if objects else ""
    return sample


def depth_scale(resolution: int) -> float:
    """Depth PNGs store ``depth / depth_scale`` in [0, 1]."""
    return 8.0 * resolution


# ---------------------------------------------------------------- datasets


MAP_NAMES = ("image", "albedo", "shading", "shadow", "depth", "normals")


def sample_seeds(master_seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def write_sample(scene: SceneSample, out_dir: Path, name: str) -> tuple[dict, list[str]]:
    """Write one sample's maps; returns (manifest record, per-file errors)."""
    d = out_dir / name
    errors: list[str] = []
    files = {
        "image": (scene.image, 8), "albedo": (scene.albedo, 8), "shading": (scene.shading, 16),
        "shadow": (scene.shadow_mask, 8), "depth": (scene.depth / depth_scale(
            scene.shading.shape[0]), 16), "normals": ((scene.normals + 1.0) / 2.0, 8),
    }
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        errors.append(f"{d}: {e}")
    rel: dict[str, str] = {}
    for key, (arr, bits) in files.items():
        path = d / f"{key}.png"
        rel[key] = f"{name}/{key}.png"
        try:
            imageio.write_png(path, arr, bits=bits)
        except (OSError, ValueError) as e:
            errors.append(f"{path}: {e}")
    masks = []
    for k, m in enumerate(scene.object_masks):
        path = d / f"mask_{k}.png"
        masks.append(f"{name}/mask_{k}.png")
        try:
            imageio.write_png(path, m, bits=8)
        except (OSError, ValueError) as e:
            errors.append(f"{path}: {e}")
    record = {
        "id": name,
        "seed": scene.seed,
        "resolution": int(scene.shading.shape[0]),
        "files": rel,
        "masks": masks,
        "light": {"elevation_deg": scene.light[0], "azimuth_deg": scene.light[1]},
        "camera": {"roll": scene.camera[0], "pitch": scene.camera[1], "yaw": scene.camera[2]},
        "prompt": scene.prompt,
        "shadow_strength": scene.shadow_strength,
        "objects": [asdict(o) for o in scene.objects],
    }
    try:
        (d / "record.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    except OSError as e:
        errors.append(f"{d / 'record.json'}: {e}")
    return record, errors


@dataclass
class DatasetResult:
    manifest_path: Path
    records: list[dict]
    errors: list[str]


def gen_dataset(n: int, seed: int, out_dir: str | Path, config: SceneConfig = SceneConfig(),
                workers: int = 1) -> DatasetResult:
    """Generate ``n`` scenes under ``out_dir`` plus ``manifest.jsonl``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    config.validate()
    out = Path(out_dir)
    seeds = sample_seeds(seed, n)
    names = [f"scene_{i:05d}" for i in range(n)]

    def work(i: int):
        return write_sample(gen_scene(seeds[i], config), out, names[i])

    out.mkdir(parents=True, exist_ok=True)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(work, range(n)))
    else:
        results = [work(i) for i in range(n)]
    records = [r for r, _ in results]
    errors = [e for _, errs in results for e in errs]
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return DatasetResult(manifest, records, errors)


def read_manifest(path: str | Path) -> list[dict]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
