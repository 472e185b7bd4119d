"""The six-channel conditioning stack: FG on white, mask, layout, light.

Images are ``H x W x C`` float32 arrays in [0, 1].  Coordinates: x runs right
(columns), y runs down (rows); an azimuth of 0 deg means light from the right
and angles grow counterclockwise as seen on screen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imageio

DTYPE = np.float32
SOBEL_MAX = 4.0 * math.sqrt(2.0)  # largest Sobel magnitude on [0, 1] data
DEFAULT_EDGE_THRESHOLD = 0.1
CHANNEL_ORDER = ("R", "G", "B", "M", "B_layout", "L")


class StackError(ValueError):
    pass


def _check_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[..., 0]
    if m.ndim != 2:
        raise StackError(f"{name}: expected H x W, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise StackError(f"{name}: values must be exactly 0 or 1")
    return m.astype(DTYPE)


def make_fg_canvas(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Object pixels kept, everything else white."""
    m = _check_mask(mask)
    if image.shape[:2] != m.shape:
        raise StackError(f"fg: image {image.shape} and mask {m.shape} differ")
    m3 = m[..., None]
    return (m3 * image + (DTYPE(1.0) - m3) * DTYPE(1.0)).astype(DTYPE)


def luminance(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=DTYPE)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[..., 0]
    return (DTYPE(0.299) * img[..., 0] + DTYPE(0.587) * img[..., 1]
            + DTYPE(0.114) * img[..., 2]).astype(DTYPE)


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    g = gray.astype(np.float64)
    gx = ndimage.sobel(g, axis=1, mode="reflect")
    gy = ndimage.sobel(g, axis=0, mode="reflect")
    return np.hypot(gx, gy)


def edge_layout(reference: np.ndarray, mask: np.ndarray,
                threshold: float = DEFAULT_EDGE_THRESHOLD) -> np.ndarray:
    """Sobel edge map of ``reference`` with the foreground zeroed.

    Magnitudes are divided by the largest possible Sobel response on [0, 1]
    data, weak responses (< threshold) are dropped.
    """
    if not 0.0 <= threshold <= 1.0:
        raise StackError(f"edge threshold {threshold} outside [0, 1]")
    m = _check_mask(mask)
    if reference.shape[:2] != m.shape:
        raise StackError(f"layout: reference {reference.shape} and mask {m.shape} differ")
    mag = sobel_magnitude(luminance(reference)) / SOBEL_MAX
    mag = np.clip(mag, 0.0, 1.0)
    mag[mag < threshold] = 0.0
    return (mag * (1.0 - m)).astype(DTYPE)


def layout_from_edge_file(path: str | Path, mask: np.ndarray) -> np.ndarray:
    """Ingest an externally computed single-channel edge map (e.g. HED)."""
    m = _check_mask(mask)
    edges = imageio.read_png(path)
    if edges.ndim == 3:
        edges = edges[..., 0]
    if edges.shape != m.shape:
        raise StackError(f"edge map {edges.shape} does not match mask {m.shape}")
    return (edges * (DTYPE(1.0) - m)).astype(DTYPE)


def light_direction(azimuth_deg: float) -> tuple[float, float]:
    """Unit vector (dx, dy) in image coordinates pointing toward the light.

    Opposite azimuths yield exactly negated vectors.
    """
    if not math.isfinite(azimuth_deg):
        raise ValueError(f"azimuth must be finite, got {azimuth_deg}")
    a = math.fmod(azimuth_deg, 360.0)
    if a < 0:
        a += 360.0
    sign = 1.0
    if a >= 180.0:
        a -= 180.0
        sign = -1.0
    r = math.radians(a)
    return sign * math.cos(r), -sign * math.sin(r)


_GRID = float(2 ** 24)


def light_map(azimuth_deg: float, H: int, W: int) -> np.ndarray:
    """Linear ramp 0.5 + (d . u) / (2 r_max), brightest toward the light.

    The offset is snapped to multiples of 2**-24 so that 0.5 +/- offset is
    exact in float32, which makes opposite azimuths sum to exactly 1.
    """
    ux, uy = light_direction(azimuth_deg)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    rmax = math.hypot(cx, cy)
    if rmax == 0.0:
        return np.full((H, W), 0.5, dtype=DTYPE)
    off = (dx * ux + dy * uy) / (2.0 * rmax)
    off = np.rint(off * _GRID) / _GRID
    return (0.5 + off).astype(DTYPE)


@dataclass
class ConditioningStack:
    fg_rgb: np.ndarray
    mask: np.ndarray
    bg_layout: np.ndarray
    light_map: np.ndarray
    has_bg: bool
    has_light: bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def to_array(self) -> np.ndarray:
        """``H x W x 6`` in the fixed order R, G, B, M, B_layout, L."""
        return np.concatenate([self.fg_rgb, self.mask[..., None],
                               self.bg_layout[..., None], self.light_map[..., None]],
                              axis=2).astype(DTYPE)

    @classmethod
    def from_array(cls, arr: np.ndarray, has_bg: bool, has_light: bool) -> ConditioningStack:
        if arr.ndim != 3 or arr.shape[2] != 6:
            raise StackError(f"stack array must be H x W x 6, got {arr.shape}")
        return assemble_stack(arr[..., :3], arr[..., 3],
                              arr[..., 4] if has_bg else None,
                              arr[..., 5] if has_light else None)

    def validate(self) -> None:
        violations = stack_violations(self)
        if violations:
            raise StackError("; ".join(violations))

    def replace(self, **kw) -> ConditioningStack:
        d = dict(fg_rgb=self.fg_rgb, mask=self.mask, bg_layout=self.bg_layout,
                 light_map=self.light_map, has_bg=self.has_bg, has_light=self.has_light)
        d.update(kw)
        return ConditioningStack(**d)


def stack_violations(s: ConditioningStack) -> list[str]:
    out = []
    hw = s.mask.shape
    if s.fg_rgb.shape != hw + (3,):
        out.append(f"fg_rgb: shape {s.fg_rgb.shape} does not match mask {hw}")
    for name in ("bg_layout", "light_map"):
        if getattr(s, name).shape != hw:
            out.append(f"{name}: shape {getattr(s, name).shape} does not match mask {hw}")
    if out:
        return out
    if not np.all((s.mask == 0) | (s.mask == 1)):
        out.append("mask: values must be exactly 0 or 1")
        return out
    outside = s.mask == 0
    if not np.all(s.fg_rgb[outside] == 1.0):
        out.append("fg_rgb: must be white (1.0) wherever mask == 0")
    if not np.all(s.bg_layout[s.mask == 1] == 0.0):
        out.append("bg_layout: must be zero wherever mask == 1")
    for name in ("fg_rgb", "bg_layout", "light_map"):
        a = getattr(s, name)
        if np.any(a < 0.0) or np.any(a > 1.0):
            out.append(f"{name}: values outside [0, 1]")
    if not s.has_bg and np.any(s.bg_layout != 0):
        out.append("bg_layout: has_bg is false but channel is nonzero")
    if not s.has_light and np.any(s.light_map != 0):
        out.append("light_map: has_light is false but channel is nonzero")
    return out


def assemble_stack(fg: np.ndarray, mask: np.ndarray, bg_layout: np.ndarray | None = None,
                   light: np.ndarray | None = None) -> ConditioningStack:
    """Build and validate a stack; missing B or L become zero channels."""
    m = _check_mask(mask)
    h, w = m.shape
    zeros = np.zeros((h, w), dtype=DTYPE)
    stack = ConditioningStack(
        fg_rgb=np.asarray(fg, dtype=DTYPE),
        mask=m,
        bg_layout=zeros.copy() if bg_layout is None else np.asarray(bg_layout, dtype=DTYPE),
        light_map=zeros.copy() if light is None else np.asarray(light, dtype=DTYPE),
        has_bg=bg_layout is not None,
        has_light=light is not None,
    )
    stack.validate()
    return stack


def prune_channels(stack: ConditioningStack, p_bg: float, p_light: float,
                   rng: np.random.Generator) -> ConditioningStack:
    """Independently drop the layout and light channels.

    Two uniforms are always drawn so the generator advances identically
    regardless of the probabilities.
    """
    for name, p in (("p_bg", p_bg), ("p_light", p_light)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} = {p} outside [0, 1]")
    u_bg, u_light = rng.random(2)
    out = stack
    if u_bg < p_bg:
        out = out.replace(bg_layout=np.zeros_like(stack.bg_layout), has_bg=False)
    if u_light < p_light:
        out = out.replace(light_map=np.zeros_like(stack.light_map), has_light=False)
    return out


# ---------------------------------------------------------------- files


def save_stack(stack: ConditioningStack, out_dir: str | Path, stem: str = "stack",
               azimuth_deg: float | None = None, elevation_deg: float | None = None,
               source_ids: list[str] | None = None) -> Path:
    """Write the stack as PNGs plus a JSON sidecar.

    Files: ``<stem>_fg.png`` (8-bit RGB), ``<stem>_mask.png`` (8-bit),
    ``<stem>_layout.png`` and ``<stem>_light.png`` (16-bit), ``<stem>.json``.
    PNG quantizes, so the exact float32 channels also go to ``<stem>.npy``;
    :func:`load_stack` prefers that file when present.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    imageio.write_png(out / f"{stem}_fg.png", stack.fg_rgb, bits=8)
    imageio.write_png(out / f"{stem}_mask.png", stack.mask, bits=8)
    imageio.write_png(out / f"{stem}_layout.png", stack.bg_layout, bits=16)
    imageio.write_png(out / f"{stem}_light.png", stack.light_map, bits=16)
    np.save(out / f"{stem}.npy", stack.to_array(), allow_pickle=False)
    side = {"azimuth_deg": azimuth_deg, "elevation_deg": elevation_deg,
            "has_bg": stack.has_bg, "has_light": stack.has_light,
            "source_ids": list(source_ids or [])}
    path = out / f"{stem}.json"
    path.write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def load_stack(sidecar: str | Path) -> tuple[ConditioningStack, dict]:
    side_path = Path(sidecar)
    side = json.loads(side_path.read_text())
    stem = side_path.with_suffix("")
    exact = Path(f"{stem}.npy")
    has_bg, has_light = bool(side.get("has_bg")), bool(side.get("has_light"))
    if exact.exists():
        arr = np.load(exact, allow_pickle=False)
        return ConditioningStack.from_array(arr, has_bg, has_light), side
    fg = imageio.read_png(f"{stem}_fg.png")
    mask = imageio.read_mask(f"{stem}_mask.png")
    layout = imageio.read_png(f"{stem}_layout.png")
    light = imageio.read_png(f"{stem}_light.png")
    stack = assemble_stack(fg, mask, layout * (1 - mask) if has_bg else None,
                           light if has_light else None)
    return stack, side
