"""Deterministic proxy metrics: masked fidelity, layout edge IoU, light angle.

These stand in for learned metrics (FID, CLIP score, aesthetic predictors);
the lighting metric in particular is an invented structure-tensor proxy.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imageio
from .conditioning import DEFAULT_EDGE_THRESHOLD, edge_layout, luminance

PSNR_CAP = 99.0
LIGHT_METRIC_NOTE = "structure-tensor lighting proxy (not a learned metric)"


def masked_fidelity(generated: np.ndarray, fg: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """(PSNR dB, mean L1) over pixels with ``mask == 1``; PSNR capped at 99."""
    g = np.asarray(generated, dtype=np.float64)
    f = np.asarray(fg, dtype=np.float64)
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[..., 0]
    if g.shape != f.shape or g.shape[:2] != m.shape:
        raise ValueError(f"shape mismatch: generated {g.shape}, fg {f.shape}, mask {m.shape}")
    sel = m > 0.5
    if not sel.any():
        raise ValueError("masked_fidelity: mask is empty")
    d = g[sel] - f[sel]
    l1 = float(np.abs(d).mean())
    mse = float((d * d).mean())
    psnr = PSNR_CAP if mse == 0.0 else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))
    return max(psnr, 0.0), l1


def edge_iou(generated: np.ndarray, B: np.ndarray, mask: np.ndarray,
             threshold: float = DEFAULT_EDGE_THRESHOLD) -> float | None:
    """IoU of binarized edges of ``generated`` and ``B`` over the background.

    Returns ``None`` (undefined) when ``B`` has no edges in the background.
    """
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[..., 0]
    bg = m < 0.5
    b = np.asarray(B)
    if b.ndim == 3:
        b = b[..., 0]
    eb = (b >= threshold) & bg
    if not eb.any():
        return None
    eg = (edge_layout(generated, (m >= 0.5).astype(np.float32), threshold) >= threshold) & bg
    union = np.count_nonzero(eg | eb)
    return float(np.count_nonzero(eg & eb) / union)


def _angle_diff(a: float, b: float) -> float:
    return abs((a - b + 180.0) % 360.0 - 180.0)


def estimate_light_azimuth(image: np.ndarray, mask: np.ndarray, sigma: float = 1.0,
                           min_energy: float = 1e-10) -> float | None:
    """Dominant brightening direction over the background, in degrees.

    The principal axis of the structure tensor of the blurred luminance gives
    the orientation; the mean gradient along it picks the sign.  Pixels whose
    stencil touches the mask or the frame border are ignored.
    """
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[..., 0]
    lum = luminance(np.asarray(image, dtype=np.float32)).astype(np.float64)
    if lum.shape != m.shape:
        raise ValueError(f"image {lum.shape} and mask {m.shape} differ")
    if not (m < 0.5).any():
        raise ValueError("estimate_light_azimuth: background region is empty")
    smooth = ndimage.gaussian_filter(lum, sigma, mode="nearest", truncate=3.0)
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    reach = int(math.ceil(3.0 * sigma)) + 1
    valid = ~ndimage.binary_dilation(m >= 0.5, iterations=reach)
    valid[:reach, :] = valid[-reach:, :] = False
    valid[:, :reach] = valid[:, -reach:] = False
    if not valid.any():
        return None
    x, y = gx[valid], gy[valid]
    jxx, jyy, jxy = float((x * x).sum()), float((y * y).sum()), float((x * y).sum())
    if jxx + jyy < min_energy * x.size:
        return None
    w, v = np.linalg.eigh(np.array([[jxx, jxy], [jxy, jyy]]))
    ex, ey = v[:, 1]
    if ex * x.mean() + ey * y.mean() < 0:
        ex, ey = -ex, -ey
    # image y points down; azimuths are counterclockwise on screen
    return math.degrees(math.atan2(-ey, ex)) % 360.0


def light_angle_error(generated: np.ndarray, mask: np.ndarray, phi_true: float,
                      sigma: float = 1.0) -> float | None:
    """Angle in [0, 180] between the estimated and the true light azimuth."""
    est = estimate_light_azimuth(generated, mask, sigma)
    if est is None:
        return None
    return _angle_diff(est, phi_true)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    samples: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=lambda: [LIGHT_METRIC_NOTE])

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        if csv_path is not None:
            keys = ["id"] + METRIC_KEYS
            with open(csv_path, "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=keys, extrasaction="ignore")
                w.writeheader()
                for s in self.samples:
                    w.writerow({k: ("" if s.get(k) is None else s.get(k)) for k in keys})


METRIC_KEYS = ["masked_psnr", "masked_l1", "edge_iou", "light_angle_error"]
# externally computed learned metrics may be merged under these names
EXTERNAL_KEYS = ["fid", "clip_s", "clip_iqa", "nima", "nrqm", "laion_aesthetic"]


def aggregate(samples: list[dict]) -> dict:
    out = {}
    for k in METRIC_KEYS:
        vals = [s[k] for s in samples if s.get(k) is not None]
        out[k] = ({"mean": float(np.mean(vals)), "median": float(np.median(vals)),
                   "count": len(vals)} if vals else {"mean": None, "median": None, "count": 0})
    return out


def evaluate_sample(generated, fg, mask, B=None, phi=None,
                    threshold: float = DEFAULT_EDGE_THRESHOLD) -> dict:
    psnr, l1 = masked_fidelity(generated, fg, mask)
    row = {"masked_psnr": psnr, "masked_l1": l1, "edge_iou": None, "light_angle_error": None}
    if B is not None:
        row["edge_iou"] = edge_iou(generated, B, mask, threshold)
    if phi is not None:
        row["light_angle_error"] = light_angle_error(generated, mask, float(phi))
    return row


def evaluate_manifest(records: list[dict], root: str | Path | None = None,
                      threshold: float = DEFAULT_EDGE_THRESHOLD) -> EvalReport:
    """Records carry ``generated``, ``fg``, ``mask`` paths and optional ``B``
    (layout PNG) and ``phi`` (degrees).  Aggregation follows record order."""
    base = Path(root) if root is not None else Path(".")

    def path(p):
        q = Path(p)
        return q if q.is_absolute() else base / q

    samples = []
    for i, rec in enumerate(records):
        gen = imageio.read_png(path(rec["generated"]))
        fg = imageio.read_png(path(rec["fg"]))
        mask = imageio.read_mask(path(rec["mask"]))
        B = imageio.read_png(path(rec["B"])) if rec.get("B") else None
        row = {"id": rec.get("id", str(i))}
        row.update(evaluate_sample(gen, fg, mask, B, rec.get("phi"), threshold))
        for k in EXTERNAL_KEYS:
            if k in rec:
                row[k] = rec[k]
        samples.append(row)
    return EvalReport(samples=samples, aggregates=aggregate(samples),
                      config={"edge_threshold": threshold, "psnr_cap": PSNR_CAP,
                              "light_blur_sigma": 1.0})
