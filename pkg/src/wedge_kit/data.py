"""Procedural multi-domain segmentation scenes and corpus ingestion.

Scenes are flat-coloured shapes (rectangles, discs, striped patches) on a
textured background; every object class has a base colour. Domains differ
only in appearance via :class:`DomainShift`, so label maps are shared
across domains by construction.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .features import IGNORE

log = logging.getLogger(__name__)

SPLITS = ("source", "web", "target")
SHAPES = ("rectangle", "circle", "stripes")
CACHE_ENV = "WEDGE_KIT_CACHE"

DEFAULT_CLASS_NAMES = ("background", "red", "green", "blue", "yellow")
DEFAULT_COLORS = (
    (0.50, 0.50, 0.50),
    (0.85, 0.22, 0.20),
    (0.22, 0.72, 0.28),
    (0.22, 0.30, 0.85),
    (0.86, 0.80, 0.22),
)


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 5
    height: int = 32
    width: int = 32
    colors: Tuple[Tuple[float, float, float], ...] = DEFAULT_COLORS
    shapes: Tuple[str, ...] = SHAPES
    density: float = 2.0  # objects per foreground class
    min_size: int = 5
    max_size: int = 12
    color_jitter: float = 0.05
    pixel_noise: float = 0.03

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.colors) != self.num_classes:
            raise ValueError(f"need {self.num_classes} base colours, got {len(self.colors)}")
        if not set(self.shapes) <= set(SHAPES) or not self.shapes:
            raise ValueError(f"shapes must be a non-empty subset of {SHAPES}")
        if self.density < 0:
            raise ValueError("density must be >= 0")


def _shape_mask(kind, h, w, rng, min_size, max_size):
    sh = int(rng.integers(min_size, max_size + 1))
    sw = int(rng.integers(min_size, max_size + 1))
    top = int(rng.integers(0, max(1, h - sh + 1)))
    left = int(rng.integers(0, max(1, w - sw + 1)))
    yy, xx = np.mgrid[0:h, 0:w]
    box = (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
    if kind == "rectangle":
        return box
    if kind == "circle":
        cy, cx = top + (sh - 1) / 2, left + (sw - 1) / 2
        return ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
    period = int(rng.integers(2, 4))
    if rng.random() < 0.5:
        return box & (((yy - top) // period) % 2 == 0)
    return box & (((xx - left) // period) % 2 == 0)


def generate_scene(spec: SceneSpec, seed: int, distractors: int = 0):
    """Render one scene; returns ``(image float32 (H, W, 3) in [0, 1], labels uint8 (H, W))``.

    ``distractors`` adds shapes in random non-class colours labelled as
    background, standing in for irrelevant content in web photos.
    """
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    colors = np.asarray(spec.colors, dtype=np.float64)
    labels = np.zeros((h, w), np.uint8)
    image = np.empty((h, w, 3))
    # background: base colour with a smooth low-frequency shading
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    shade = 0.06 * np.sin(2 * np.pi * (rng.random() + yy * rng.uniform(0.5, 1.5))) * np.cos(
        2 * np.pi * (rng.random() + xx * rng.uniform(0.5, 1.5))
    )
    image[:] = colors[0] + shade[..., None]

    whole, frac = divmod(spec.density, 1.0)
    objects = []
    for cls in range(1, spec.num_classes):
        n = int(whole) + int(rng.random() < frac)
        objects += [cls] * n
    objects += [-1] * distractors
    order = rng.permutation(len(objects))
    for i in order:
        cls = objects[i]
        kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
        mask = _shape_mask(kind, h, w, rng, spec.min_size, spec.max_size)
        if cls < 0:
            color = rng.uniform(0.0, 1.0, 3)
            labels[mask] = 0
        else:
            color = colors[cls] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
            labels[mask] = cls
        image[mask] = color
    image += rng.normal(0.0, spec.pixel_noise, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


@dataclass(frozen=True)
class DomainShift:
    """Appearance-only shift: palette rotation, per-channel gain/bias, contrast, noise.

    Applied in that order; values are clamped to [0, 1] after the affine
    step and again at the end.
    """

    gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    contrast: float = 1.0  # exponent applied to clamped values
    noise: float = 0.0
    palette_rotation: float = 0.0  # degrees about the grey axis

    def __post_init__(self):
        if min(self.gain) <= 0:
            raise ValueError("gains must be positive")
        if self.noise < 0 or self.contrast <= 0:
            raise ValueError("noise must be >= 0 and contrast > 0")

    @property
    def is_identity(self) -> bool:
        return self == DomainShift()


def _grey_axis_rotation(degrees):
    a = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(a) * kx + (1 - np.cos(a)) * (kx @ kx)


def apply_shift(image: np.ndarray, shift: DomainShift, seed: int = 0) -> np.ndarray:
    if shift.is_identity:
        return image
    x = np.asarray(image, dtype=np.float64)
    if shift.palette_rotation:
        x = (x - 0.5) @ _grey_axis_rotation(shift.palette_rotation).T + 0.5
    x = x * np.asarray(shift.gain) + np.asarray(shift.bias)
    x = np.clip(x, 0.0, 1.0)
    if shift.contrast != 1.0:
        x = x**shift.contrast
    if shift.noise:
        x = x + np.random.default_rng(seed).normal(0.0, shift.noise, x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


# Held-out target appearances. Web shifts are drawn by sample_web_shift, which
# never returns one of these.
TARGET_SHIFTS = {
    "dusk": DomainShift(gain=(0.70, 0.62, 0.78), bias=(0.02, 0.0, 0.08), contrast=1.25, noise=0.02),
    "fog": DomainShift(gain=(0.55, 0.55, 0.58), bias=(0.38, 0.38, 0.38), contrast=0.9, noise=0.01),
    "tint": DomainShift(gain=(1.05, 0.92, 0.80), bias=(0.0, 0.03, 0.05), palette_rotation=35.0, noise=0.02),
}


@dataclass(frozen=True)
class WebShiftFamily:
    gain: Tuple[float, float] = (0.45, 1.3)
    channel_spread: float = 0.2
    bias: Tuple[float, float] = (-0.05, 0.4)
    contrast: Tuple[float, float] = (0.75, 1.4)
    noise: Tuple[float, float] = (0.0, 0.05)
    rotation: Tuple[float, float] = (-50.0, 50.0)


def sample_web_shift(rng: np.random.Generator, family: WebShiftFamily = WebShiftFamily()) -> DomainShift:
    g = rng.uniform(*family.gain)
    gain = tuple(float(g * (1 + rng.uniform(-family.channel_spread, family.channel_spread))) for _ in range(3))
    b = rng.uniform(*family.bias)
    bias = tuple(float(b + rng.uniform(-0.05, 0.05)) for _ in range(3))
    shift = DomainShift(
        gain=gain,
        bias=bias,
        contrast=float(rng.uniform(*family.contrast)),
        noise=float(rng.uniform(*family.noise)),
        palette_rotation=float(rng.uniform(*family.rotation)),
    )
    assert shift not in TARGET_SHIFTS.values()
    return shift


# ---------------------------------------------------------------------------
# image IO


def save_image(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, optimize=False)


def save_labels(path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path, optimize=False)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: label maps must be 8-bit single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8)


# ---------------------------------------------------------------------------
# manifests


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    split: str
    path: Optional[str] = None
    url: Optional[str] = None
    note: str = ""
    label: Optional[str] = None
    domain: Optional[str] = None

    @property
    def key(self) -> str:
        return self.path if self.path is not None else self.url

    def to_json(self) -> str:
        d = {k: v for k, v in self.__dict__.items() if v not in (None, "")}
        return json.dumps(d, sort_keys=True)


@dataclass(frozen=True)
class CorpusManifest:
    records: Tuple[ManifestRecord, ...] = ()
    root: Path = Path(".")

    def select(self, split: str, domain: Optional[str] = None) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == split and (domain is None or r.domain == domain)]

    def domains(self) -> List[str]:
        return sorted({r.domain for r in self.records if r.split == "target" and r.domain})


def parse_manifest(lines: Sequence[str], source: str = "<manifest>", root: Path = Path(".")) -> CorpusManifest:
    records = []
    seen = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{source}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(raw, dict):
            raise ManifestError(f"{source}:{lineno}: expected an object")
        unknown = set(raw) - {"path", "url", "split", "note", "label", "domain"}
        if unknown:
            raise ManifestError(f"{source}:{lineno}: unknown fields {sorted(unknown)}")
        if ("path" in raw) == ("url" in raw):
            raise ManifestError(f"{source}:{lineno}: exactly one of 'path' or 'url' is required")
        if raw.get("split") not in SPLITS:
            raise ManifestError(f"{source}:{lineno}: split must be one of {SPLITS}, got {raw.get('split')!r}")
        rec = ManifestRecord(**raw)
        if rec.key in seen:
            raise ManifestError(f"{source}:{lineno}: duplicate path {rec.key!r} (first on line {seen[rec.key]})")
        seen[rec.key] = lineno
        records.append(rec)
    return CorpusManifest(tuple(records), root)


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc.strerror}") from None
    return parse_manifest(text.splitlines(), str(path), path.parent)


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


# ---------------------------------------------------------------------------
# ingestion


@dataclass
class Corpus:
    items: List[Tuple[ManifestRecord, np.ndarray]] = field(default_factory=list)
    failures: List[Tuple[ManifestRecord, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.items)


def cache_dir(default=None) -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path(default) if default is not None else Path.home() / ".cache" / "wedge_kit"


def _download(url: str, cache: Path, attempts: int, backoff: float, timeout: float) -> Path:
    cache.mkdir(parents=True, exist_ok=True)
    target = cache / (hashlib.sha256(url.encode()).hexdigest()[:24] + Path(url.split("?")[0]).suffix)
    if target.exists():
        return target
    for attempt in range(attempts):
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                data = resp.read()
            tmp = target.with_suffix(target.suffix + ".part")
            tmp.write_bytes(data)
            tmp.replace(target)
            return target
        except OSError as exc:
            if attempt == attempts - 1:
                raise
            log.debug("fetch %s failed (%s); retrying", url, exc)
            time.sleep(backoff * 2**attempt)
    raise AssertionError("unreachable")


def fetch_corpus(
    manifest: CorpusManifest,
    dest=None,
    max_connections: int = 4,
    attempts: int = 3,
    backoff: float = 0.5,
    timeout: float = 10.0,
) -> Corpus:
    """Resolve every record to a decoded RGB image.

    Local paths are relative to the manifest's directory. URLs are
    downloaded into ``dest`` (or ``$WEDGE_KIT_CACHE``) with retries and
    exponential backoff. A failing record is logged in ``failures`` and
    never aborts the batch. Licence notes are carried, not enforced.
    """
    cache = cache_dir(dest)

    def resolve(rec: ManifestRecord):
        try:
            if rec.url is not None:
                local = _download(rec.url, cache, attempts, backoff, timeout)
            else:
                local = Path(rec.path)
                if not local.is_absolute():
                    local = manifest.root / local
            return rec, load_image(local), None
        except Exception as exc:  # per-record isolation
            return rec, None, f"{type(exc).__name__}: {exc}"

    corpus = Corpus()
    with ThreadPoolExecutor(max_workers=max(1, max_connections)) as pool:
        for rec, image, err in pool.map(resolve, manifest.records):
            if err is None:
                corpus.items.append((rec, image))
            else:
                corpus.failures.append((rec, err))
    return corpus
