"""Dataset curation: colorless filter, aesthetic threshold, VLM annotations."""

from __future__ import annotations

import json
import logging
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import imageio

log = logging.getLogger(__name__)

DTYPE = np.float32
D65 = (0.95047, 1.0, 1.08883)
_SRGB_TO_XYZ = np.array([[0.4124564, 0.3575761, 0.1804375],
                         [0.2126729, 0.7151522, 0.0721750],
                         [0.0193339, 0.1191920, 0.9503041]])
DEFAULT_COLOR_THRESHOLD = 3.0
DEFAULT_AESTHETIC_THRESHOLD = 5.0


# ---------------------------------------------------------------- color


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] -> CIELAB (D65, 2 deg observer), float64 ``H x W x 3``."""
    rgb = np.asarray(image, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected trailing RGB axis, got shape {rgb.shape}")
    if np.any(rgb < 0.0) or np.any(rgb > 1.0) or not np.all(np.isfinite(rgb)):
        raise ValueError("rgb_to_lab: input values must lie in [0, 1]")
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T
    xyz = xyz / np.asarray(D65)
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def colorfulness(image: np.ndarray) -> float:
    """Mean of |a*| + |b*| over pixels; zero on the neutral axis."""
    img = np.asarray(image)
    if img.ndim == 2 or img.shape[-1] == 1:
        return 0.0
    lab = rgb_to_lab(img)
    return float(np.mean(np.abs(lab[..., 1]) + np.abs(lab[..., 2])))


def heuristic_aesthetic(image: np.ndarray) -> float:
    """Deterministic stand-in scorer in [0, 10]: contrast plus colorfulness."""
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=-1) if img.ndim == 3 else img
    contrast = min(gray.std() / 0.25, 1.0)
    color = min(colorfulness(img) / 40.0, 1.0) if img.ndim == 3 else 0.0
    return float(10.0 * (0.5 * contrast + 0.5 * color))


# ---------------------------------------------------------------- filtering


@dataclass
class CurationReport:
    input_count: int = 0
    removed_colorless: int = 0
    removed_low_aesthetic: int = 0
    failed: int = 0
    retained: list[dict] = field(default_factory=list)
    scores: dict[str, dict] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)

    def partition_ok(self) -> bool:
        return (self.removed_colorless + self.removed_low_aesthetic + self.failed
                + len(self.retained)) == self.input_count

    def to_json(self) -> dict:
        d = asdict(self)
        d["retained_count"] = len(self.retained)
        return d


def _record_id(rec: dict, i: int) -> str:
    return str(rec.get("id", i))


def _image_path(rec: dict, root: Path | None) -> Path:
    rel = rec.get("image") or rec.get("files", {}).get("image")
    if rel is None:
        raise KeyError("record has no 'image' entry")
    p = Path(rel)
    return p if p.is_absolute() or root is None else root / p


def filter_images(manifest: list[dict], scorer: Callable[[np.ndarray], float],
                  aesthetic_threshold: float = DEFAULT_AESTHETIC_THRESHOLD,
                  color_threshold: float = DEFAULT_COLOR_THRESHOLD,
                  root: str | Path | None = None, workers: int = 1,
                  loader: Callable[[Path], np.ndarray] = imageio.read_png) -> CurationReport:
    """Colorless removal first, then aesthetic removal.

    An image is colorless when :func:`colorfulness` < ``color_threshold``; it
    fails the aesthetic check when ``scorer(image) < aesthetic_threshold``.
    Unreadable images are counted in ``failed`` and listed in ``errors``.
    """
    root_p = Path(root) if root is not None else None

    def score(i_rec):
        i, rec = i_rec
        rid = _record_id(rec, i)
        try:
            img = loader(_image_path(rec, root_p))
        except (OSError, KeyError, ValueError) as e:
            return rid, None, f"{rid}: {e}"
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        c = colorfulness(img)
        s = None if c < color_threshold else float(scorer(img))
        return rid, {"colorfulness": c, "aesthetic": s}, None

    items = list(enumerate(manifest))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(score, items))
    else:
        results = [score(it) for it in items]

    rep = CurationReport(input_count=len(manifest))
    for (i, rec), (rid, sc, err) in zip(items, results):
        if err is not None:
            rep.failed += 1
            rep.errors.append(err)
            continue
        rep.scores[rid] = sc
        if sc["colorfulness"] < color_threshold:
            rep.removed_colorless += 1
        elif sc["aesthetic"] < aesthetic_threshold:
            rep.removed_low_aesthetic += 1
        else:
            rep.retained.append(rec)
    return rep


# ---------------------------------------------------------------- annotations

AESTHETIC_KEYS = ("composition", "focus", "clarity", "memorability", "timelessness", "emotion")
TECHNICAL_KEYS = ("light_strength", "shadows_present", "color_palette", "depth_of_field",
                  "exposure")
INSTRUCTION_VERSION = "annotate-v1"


@dataclass
class AnnotationRecord:
    captions: list[str]
    lighting: dict
    camera: dict
    objects: list[dict]
    spatial_relations: list[str]
    action_relations: list[str]
    technical: dict
    aesthetics: dict

    @classmethod
    def from_dict(cls, d: dict) -> AnnotationRecord:
        missing = [k for k in cls.__dataclass_fields__ if k not in d]
        if missing:
            raise ValidationError([f"{k}: missing" for k in missing])
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


class ValidationError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x)


def validate_record(record: AnnotationRecord | dict) -> list[str]:
    """All invariant violations, each prefixed by its field path."""
    d = record.to_dict() if isinstance(record, AnnotationRecord) else record
    v: list[str] = []
    for k in AnnotationRecord.__dataclass_fields__:
        if k not in d:
            v.append(f"{k}: missing")
    caps = d.get("captions")
    if "captions" in d:
        if not isinstance(caps, list) or len(caps) != 5:
            v.append(f"captions: expected exactly 5, got "
                     f"{len(caps) if isinstance(caps, list) else type(caps).__name__}")
        if isinstance(caps, list):
            for i, c in enumerate(caps):
                if not isinstance(c, str):
                    v.append(f"captions[{i}]: not a string")
                    continue
                n = len(c.split())
                if not 20 <= n <= 50:
                    v.append(f"captions[{i}]: {n} words, need 20-50")
    light = d.get("lighting")
    if "lighting" in d:
        if not isinstance(light, dict):
            v.append("lighting: not an object")
        else:
            el, az = light.get("elevation_deg"), light.get("azimuth_deg")
            if not _num(el) or not -90.0 <= el <= 90.0:
                v.append(f"lighting.elevation_deg: {el!r} not in [-90, 90]")
            if not _num(az) or not 0.0 <= az < 360.0:
                v.append(f"lighting.azimuth_deg: {az!r} not in [0, 360)")
    cam = d.get("camera")
    if "camera" in d:
        if not isinstance(cam, dict):
            v.append("camera: not an object")
        else:
            for k in ("roll", "pitch", "yaw"):
                if not _num(cam.get(k)):
                    v.append(f"camera.{k}: missing or not a number")
    objs = d.get("objects")
    if "objects" in d:
        if not isinstance(objs, list):
            v.append("objects: not a list")
        else:
            for i, o in enumerate(objs):
                if not isinstance(o, dict):
                    v.append(f"objects[{i}]: not an object")
                    continue
                for k in ("name", "description"):
                    if not isinstance(o.get(k), str):
                        v.append(f"objects[{i}].{k}: missing or not a string")
                cnt = o.get("count")
                if not isinstance(cnt, int) or isinstance(cnt, bool) or cnt < 1:
                    v.append(f"objects[{i}].count: must be a positive integer")
    for key in ("spatial_relations", "action_relations"):
        if key in d:
            rel = d[key]
            if not isinstance(rel, list) or not all(isinstance(s, str) for s in rel):
                v.append(f"{key}: must be a list of strings")
    tech = d.get("technical")
    if "technical" in d:
        if not isinstance(tech, dict):
            v.append("technical: not an object")
        else:
            for k in TECHNICAL_KEYS:
                if k not in tech:
                    v.append(f"technical.{k}: missing")
    aes = d.get("aesthetics")
    if "aesthetics" in d:
        if not isinstance(aes, dict):
            v.append("aesthetics: not an object")
        else:
            for k in AESTHETIC_KEYS:
                s = aes.get(k)
                if not _num(s) or not 1.0 <= s <= 10.0:
                    v.append(f"aesthetics.{k}: {s!r} not in [1, 10]")
    return v


class TransportError(RuntimeError):
    pass


class VLMClient(Protocol):
    def request(self, payload: dict) -> dict: ...


class MockVLMClient:
    """Serves canned responses from ``<dir>/<image_id>.json``."""

    def __init__(self, response_dir: str | Path, fail_first: int = 0):
        self.dir = Path(response_dir)
        self.fail_first = fail_first
        self.calls: list[dict] = []

    def request(self, payload: dict) -> dict:
        self.calls.append(dict(payload))
        if len(self.calls) <= self.fail_first:
            raise TransportError("mock transport failure")
        path = self.dir / f"{payload['image_id']}.json"
        try:
            return json.loads(path.read_text())
        except FileNotFoundError as e:
            raise TransportError(f"no canned response for {payload['image_id']}") from e


class HttpVLMClient:
    """POSTs the request JSON to ``url`` and parses the JSON reply."""

    def __init__(self, url: str, timeout: float = 60.0, headers: dict | None = None):
        self.url = url
        self.timeout = timeout
        self.headers = {"Content-Type": "application/json", **(headers or {})}

    def request(self, payload: dict) -> dict:
        req = urllib.request.Request(self.url, data=json.dumps(payload).encode("utf-8"),
                                     headers=self.headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except (urllib.error.URLError, TimeoutError, OSError) as e:
            raise TransportError(str(e)) from e
        try:
            return json.loads(body)
        except json.JSONDecodeError as e:
            raise TransportError(f"response is not JSON: {e}") from e


def annotate(image_ref: str, client: VLMClient, retries: int = 3, backoff: float = 0.5,
             sleep: Callable[[float], None] = time.sleep) -> AnnotationRecord:
    """One structured request; the reply must pass :func:`validate_record`.

    Transport failures are retried ``retries`` times with exponential
    backoff; invalid replies are rejected, never repaired.
    """
    payload = {"image_id": image_ref, "instruction_version": INSTRUCTION_VERSION}
    attempt = 0
    while True:
        try:
            reply = client.request(payload)
            break
        except TransportError as e:
            if attempt >= retries:
                raise TransportError(f"{image_ref}: giving up after {attempt + 1} attempts: {e}")
            delay = backoff * (2 ** attempt)
            log.warning("annotate %s: transport error (%s), retrying in %.2fs", image_ref, e, delay)
            sleep(delay)
            attempt += 1
    if not isinstance(reply, dict):
        raise ValidationError(["response: not a JSON object"])
    violations = validate_record(reply)
    if violations:
        raise ValidationError(violations)
    return AnnotationRecord.from_dict(reply)


def annotate_many(image_refs: list[str], client: VLMClient, concurrency: int = 4,
                  **kw) -> list[AnnotationRecord | Exception]:
    """Bounded-concurrency :func:`annotate`; results in input order."""
    def one(ref):
        try:
            return annotate(ref, client, **kw)
        except (TransportError, ValidationError) as e:
            return e

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as ex:
        return list(ex.map(one, image_refs))
