"""Procedural audio-visual scenes with exact sounding/silent labels.

Each clip shows a few anti-aliased shapes (disks, rectangles, triangles) over a
textured background. A class is a (color, shape) pair; within a clip every
object has a distinct class. Some objects are silent: they are rendered and
carry a semantic label, but their class is absent from the audio and from the
binary mask. The audio of a frame is the sum of the prototype vectors of the
sounding classes plus Gaussian noise, so telling a sounding object from a
silent one requires the audio.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensorio import CorruptDataError, load_tensor, save_tensor

log = logging.getLogger(__name__)

SHAPES = ("disk", "rectangle", "triangle")
COLORS = {
    "red": (0.90, 0.20, 0.15),
    "green": (0.20, 0.80, 0.25),
    "blue": (0.20, 0.35, 0.95),
    "yellow": (0.95, 0.85, 0.15),
    "magenta": (0.85, 0.20, 0.85),
}
TENSOR_NAMES = ("frames", "audio", "semantic", "binary")
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


class DatasetValidationError(ValueError):
    """Dataset contents violate a manifest invariant (label range, event log, mask consistency)."""


def class_table(num_classes: int) -> list[tuple[str, str]]:
    """(color, shape) per class id 1..C, listed as index 0..C-1."""
    combos = list(product(COLORS, SHAPES))
    if not 1 <= num_classes <= len(combos):
        raise ConfigError(f"num_classes must be in [1, {len(combos)}], got {num_classes}")
    return combos[:num_classes]


@dataclass
class GeneratorConfig:
    height: int = 96
    width: int = 96
    frames: int = 5
    num_classes: int = 8
    audio_dim: int = 32
    min_objects: int = 1
    max_objects: int = 3
    silent_fraction: float = 0.4
    min_sounding: int = 1
    max_sounding: int | None = None
    audio_noise: float = 0.1
    prototype_seed: int = 0
    min_radius: float = 11.0
    max_radius: float = 20.0
    max_speed: float = 2.0
    supersample: int = 4

    def validate(self) -> None:
        if self.height % 32 or self.width % 32 or self.height <= 0 or self.width <= 0:
            raise ConfigError(f"height/width must be positive multiples of 32, got {self.height}x{self.width}")
        if self.frames < 1 or self.audio_dim < 1:
            raise ConfigError("frames and audio_dim must be >= 1")
        class_table(self.num_classes)
        if not 1 <= self.min_objects <= self.max_objects <= self.num_classes:
            raise ConfigError("need 1 <= min_objects <= max_objects <= num_classes")
        if not 0.0 <= self.silent_fraction < 1.0:
            raise ConfigError("silent_fraction must be in [0, 1)")
        if not 1 <= self.min_sounding <= self.min_objects:
            raise ConfigError("need 1 <= min_sounding <= min_objects")
        if self.max_sounding is not None and self.max_sounding < self.min_sounding:
            raise ConfigError("max_sounding < min_sounding")

    @property
    def class_names(self) -> list[str]:
        return [f"{c}_{s}" for c, s in class_table(self.num_classes)]


PRESETS = {
    # single sounding source among silent distractors
    "s4": dict(min_objects=1, max_objects=3, min_sounding=1, max_sounding=1, silent_fraction=0.5),
    # several simultaneous sources
    "ms3": dict(min_objects=2, max_objects=4, min_sounding=2, max_sounding=None, silent_fraction=0.3),
    "avss": dict(min_objects=1, max_objects=3, min_sounding=1, max_sounding=None, silent_fraction=0.4),
}


def preset_config(name: str, **overrides) -> GeneratorConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return GeneratorConfig(**{**PRESETS[name], **overrides})


@dataclass
class SceneSample:
    frames: np.ndarray          # [T,3,H,W] float32 in [0,1]
    audio: np.ndarray           # [T,D_a] float32
    semantic_mask: np.ndarray   # [T,H,W] uint8, 0 = background
    binary_mask: np.ndarray     # [T,H,W] uint8
    clip_id: str = ""
    sounding: list[list[int]] = field(default_factory=list)  # per frame, sorted class ids

    @property
    def sounding_semantic(self) -> np.ndarray:
        """Semantic labels restricted to sounding pixels (the AVSS target)."""
        return self.semantic_mask * self.binary_mask


@dataclass
class DatasetManifest:
    num_clips: int
    T: int
    H: int
    W: int
    D_a: int
    C: int
    class_names: list[str]
    sounding_event_log: dict[str, list[list[int]]]
    split: str = "train"
    clip_ids: list[str] = field(default_factory=list)
    checksums: dict[str, dict[str, str]] = field(default_factory=dict)
    generator: dict | None = None
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


def audio_prototypes(cfg: GeneratorConfig) -> np.ndarray:
    """Per-class audio signature vectors [C, D_a], row c-1 for class c."""
    rng = np.random.default_rng(cfg.prototype_seed)
    protos = rng.normal(size=(cfg.num_classes, cfg.audio_dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def _coverage(kind, center, radius, angle, aspect, yy, xx, s):
    """Fraction of each pixel covered by a shape, from an s x s subpixel grid."""
    dy, dx = yy - center[0], xx - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "disk":
        inside = u * u + v * v <= radius * radius
    elif kind == "rectangle":
        inside = (np.abs(u) <= radius * aspect) & (np.abs(v) <= radius)
    else:
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            phi = np.pi / 2 + 2 * np.pi * k / 3
            # edge normals of an equilateral triangle with circumradius `radius`
            inside &= u * np.cos(phi) + v * np.sin(phi) <= radius / 2
    h, w = yy.shape[0] // s, yy.shape[1] // s
    return inside.reshape(h, s, w, s).mean(axis=(1, 3))


def _background(rng, h, w):
    low = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=8)
    low = low / (low.std() + 1e-8)
    fine = rng.normal(size=(h, w)) * 0.03
    yy, xx = np.mgrid[0:h, 0:w]
    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(0.15, 0.4)
    theta = rng.uniform(0, np.pi)
    stripes = 0.04 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    gray = 0.45 + 0.08 * low + fine + stripes
    tint = rng.uniform(-0.05, 0.05, size=3)
    return np.clip(gray[None] + tint[:, None, None], 0.0, 1.0)


def gen_scene(cfg: GeneratorConfig, seed: int, clip_id: str = "") -> SceneSample:
    """Render one clip. Deterministic in ``(cfg, seed)``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    T, H, W, s = cfg.frames, cfg.height, cfg.width, cfg.supersample
    table = class_table(cfg.num_classes)

    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    classes = rng.choice(cfg.num_classes, size=n_obj, replace=False) + 1
    silent = rng.random(n_obj) < cfg.silent_fraction
    n_sound = int((~silent).sum())
    order = rng.permutation(n_obj)
    for k in order:
        if n_sound >= cfg.min_sounding:
            break
        if silent[k]:
            silent[k] = False
            n_sound += 1
    if cfg.max_sounding is not None:
        for k in order:
            if n_sound <= cfg.max_sounding:
                break
            if not silent[k]:
                silent[k] = True
                n_sound -= 1

    objs = []
    placed: list[tuple[np.ndarray, float]] = []
    for k in range(n_obj):
        radius = float(rng.uniform(cfg.min_radius, cfg.max_radius))
        for _ in range(30):
            center = rng.uniform([radius, radius], [H - radius, W - radius])
            if all(np.hypot(*(center - c)) >= 0.8 * (radius + r) for c, r in placed):
                break
        placed.append((center, radius))
        color = np.clip(np.array(COLORS[table[classes[k] - 1][0]]) + rng.uniform(-0.06, 0.06, 3), 0, 1)
        objs.append(dict(
            cls=int(classes[k]), kind=table[classes[k] - 1][1], center=center, radius=radius,
            angle=float(rng.uniform(0, 2 * np.pi)), spin=float(rng.uniform(-0.1, 0.1)),
            aspect=float(rng.uniform(0.6, 1.0)), color=color,
            velocity=rng.uniform(-cfg.max_speed, cfg.max_speed, size=2),
        ))

    bg = _background(rng, H, W)
    sub = (np.arange(H * s) + 0.5) / s, (np.arange(W * s) + 0.5) / s
    yy, xx = np.meshgrid(*sub, indexing="ij")

    frames = np.empty((T, 3, H, W), np.float32)
    semantic = np.zeros((T, H, W), np.uint8)
    for t in range(T):
        img = bg.copy()
        for o in objs:
            r = o["radius"]
            c = np.clip(o["center"] + t * o["velocity"], [r, r], [H - r, W - r])
            a = _coverage(o["kind"], c, r, o["angle"] + t * o["spin"], o["aspect"], yy, xx, s)
            img = img * (1 - a) + o["color"][:, None, None] * a
            semantic[t][a >= 0.5] = o["cls"]
        frames[t] = img

    sounding_classes = sorted(int(o["cls"]) for o, sil in zip(objs, silent) if not sil)
    sounding = [list(sounding_classes) for _ in range(T)]
    binary = np.stack([np.isin(semantic[t], sounding[t]) for t in range(T)]).astype(np.uint8)

    protos = audio_prototypes(cfg)
    audio = np.zeros((T, cfg.audio_dim))
    for t in range(T):
        for c in sounding[t]:
            audio[t] += protos[c - 1]
    audio += cfg.audio_noise * rng.normal(size=audio.shape)

    return SceneSample(frames, audio.astype(np.float32), semantic, binary, clip_id, sounding)


def clip_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, SPLITS.index(split), index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def generate_split(cfg: GeneratorConfig, num_clips: int, seed: int, split: str = "train"):
    """Generate ``num_clips`` clips and their manifest. Each clip has its own derived seed."""
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}")
    cfg.validate()
    samples = [gen_scene(cfg, clip_seed(seed, split, i), f"{split}_{i:05d}") for i in range(num_clips)]
    manifest = DatasetManifest(
        num_clips=num_clips, T=cfg.frames, H=cfg.height, W=cfg.width, D_a=cfg.audio_dim,
        C=cfg.num_classes, class_names=cfg.class_names,
        sounding_event_log={s.clip_id: s.sounding for s in samples},
        split=split, clip_ids=[s.clip_id for s in samples],
        generator=dataclasses.asdict(cfg), seed=seed,
    )
    return samples, manifest


def validate_samples(samples, manifest: DatasetManifest) -> None:
    if len(samples) != manifest.num_clips:
        raise DatasetValidationError(f"manifest lists {manifest.num_clips} clips, got {len(samples)}")
    if len(manifest.class_names) != manifest.C:
        raise DatasetValidationError("class_names length differs from C")
    for s in samples:
        if s.clip_id not in manifest.sounding_event_log:
            raise DatasetValidationError(f"event log misses clip {s.clip_id}")
        events = manifest.sounding_event_log[s.clip_id]
        if len(events) != manifest.T:
            raise DatasetValidationError(f"event log of {s.clip_id} has {len(events)} frames")
        top = int(s.semantic_mask.max(initial=0))
        if top > manifest.C:
            raise DatasetValidationError(f"{s.clip_id}: label {top} exceeds C={manifest.C}")
        for t in range(manifest.T):
            expect = np.isin(s.semantic_mask[t], events[t])
            if not np.array_equal(expect, s.binary_mask[t].astype(bool)):
                raise DatasetValidationError(f"{s.clip_id} frame {t}: binary mask disagrees with event log")


def _expected_shapes(m: DatasetManifest):
    return {
        "frames": (m.T, 3, m.H, m.W),
        "audio": (m.T, m.D_a),
        "semantic": (m.T, m.H, m.W),
        "binary": (m.T, m.H, m.W),
    }


def write_dataset(samples, manifest: DatasetManifest, directory) -> None:
    """Write ``manifest.json`` plus ``<clip_id>/{frames,audio,semantic,binary}.bin``."""
    validate_samples(samples, manifest)
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    manifest.clip_ids = [s.clip_id for s in samples]
    manifest.checksums = {}
    for s in samples:
        d = root / s.clip_id
        d.mkdir(exist_ok=True)
        arrays = {
            "frames": s.frames.astype(np.float32),
            "audio": s.audio.astype(np.float32),
            "semantic": s.semantic_mask.astype(np.uint8),
            "binary": s.binary_mask.astype(np.uint8),
        }
        manifest.checksums[s.clip_id] = {k: save_tensor(d / f"{k}.bin", v) for k, v in arrays.items()}
    tmp = root / "manifest.json.tmp"
    tmp.write_text(manifest.to_json())
    os.replace(tmp, root / "manifest.json")


def load_dataset(directory):
    root = Path(directory)
    try:
        manifest = DatasetManifest.from_json((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise CorruptDataError(f"unreadable manifest in {root}: {exc}") from exc
    shapes = _expected_shapes(manifest)
    samples = []
    for cid in manifest.clip_ids:
        sums = manifest.checksums.get(cid, {})
        try:
            arr = {k: load_tensor(root / cid / f"{k}.bin", sums.get(k), shapes[k]) for k in TENSOR_NAMES}
        except FileNotFoundError as exc:
            raise CorruptDataError(f"missing file for clip {cid}: {exc}") from exc
        samples.append(SceneSample(
            arr["frames"], arr["audio"], arr["semantic"], arr["binary"], cid,
            manifest.sounding_event_log.get(cid, []),
        ))
    validate_samples(samples, manifest)
    return samples, manifest


def _noise_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.normal(size=shape), sigma=sigma)
    return f / (f.std() + 1e-12)


def _soften(b: np.ndarray, width: float) -> np.ndarray:
    if b.all():
        return np.ones(b.shape, np.float32)
    if not b.any():
        return np.zeros(b.shape, np.float32)
    sd = np.where(b, ndimage.distance_transform_edt(b), -ndimage.distance_transform_edt(~b))
    return (1.0 / (1.0 + np.exp(-sd / width))).astype(np.float32)


def corrupt_mask(mask, target_iou: float, seed: int, *, blob_sigma: float = 4.0,
                 noise_amp: float = 4.0, band: float = 6.0, soft_width: float = 1.5) -> np.ndarray:
    """Degrade a binary mask so that its 0.5-threshold has IoU ~= ``target_iou`` with the input.

    For every frame a share of the error budget removes foreground pixels (boundary
    erosion and holes) and the rest adds background pixels (dilation and false blobs).
    Pixels are flipped in a fixed, seed-determined priority order: distance to the
    boundary capped at ``band`` plus a smooth noise field. Lower targets therefore
    flip a superset of the pixels flipped by higher targets. The result is blurred
    into a soft map whose 0.5-threshold is the corrupted mask.
    """
    if not 0.0 < target_iou <= 1.0:
        raise ValueError(f"target_iou must be in (0, 1], got {target_iou}")
    m = np.asarray(mask).astype(bool)
    squeeze = m.ndim == 2
    if squeeze:
        m = m[None]
    if not m.reshape(len(m), -1).any(axis=1).all():
        raise ValueError("every frame needs at least one foreground pixel")
    if target_iou == 1.0:
        out = m.astype(np.float32)
        return out[0] if squeeze else out

    rng = np.random.default_rng(seed)
    out = np.empty(m.shape, np.float32)
    for t, fg in enumerate(m):
        bg = ~fg
        n_fg, n_bg = int(fg.sum()), int(bg.sum())
        share = rng.uniform(0.35, 0.65)  # fraction of errors that are misses
        noise_in = _noise_field(rng, fg.shape, blob_sigma)
        noise_out = _noise_field(rng, fg.shape, blob_sigma)
        jitter = rng.random((2,) + fg.shape) * 1e-6

        budget = n_fg * (1 - target_iou) / (share + (1 - share) * target_iou)
        k_fn = min(int(round(share * budget)), n_fg)
        k_fp = int(round((n_fg - k_fn) / target_iou - n_fg))
        if k_fp > n_bg:
            k_fp = n_bg
            k_fn = min(n_fg, int(round(n_fg - target_iou * (n_fg + k_fp))))
        k_fp = max(k_fp, 0)

        b = fg.copy()
        if k_fn:
            score = np.minimum(ndimage.distance_transform_edt(fg), band) + noise_amp * noise_in + jitter[0]
            idx = np.flatnonzero(fg)
            b.flat[idx[np.argsort(score.flat[idx], kind="stable")[:k_fn]]] = False
        if k_fp:
            score = np.minimum(ndimage.distance_transform_edt(bg), band) + noise_amp * noise_out + jitter[1]
            idx = np.flatnonzero(bg)
            b.flat[idx[np.argsort(score.flat[idx], kind="stable")[:k_fp]]] = True
        out[t] = _soften(b, soft_width)
    return out[0] if squeeze else out
