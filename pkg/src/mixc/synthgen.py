"""Procedural Mie-style spray images over a continuous collapse parameter.

Dark background, bright liquid. A spray is ``n_plumes`` Gaussian-section
plumes fanning out from an injector tip at the top centre. The collapse
parameter ``c`` pulls every plume axis toward the vertical centreline and
widens the plumes, so ``c=0`` shows distinct narrow plumes and ``c=1`` a
single coalesced central plume.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

CLASSES = ("Pre/Post", "No collapse", "Transitional", "Collapse")
PRE_POST, NO_COLLAPSE, TRANSITIONAL, COLLAPSE = range(4)
THRESHOLDS = (0.35, 0.7)
CLASS_INTERVALS = {NO_COLLAPSE: (0.0, THRESHOLDS[0]), TRANSITIONAL: THRESHOLDS, COLLAPSE: (THRESHOLDS[1], 1.0)}
DEFAULT_COUNTS = (173, 199, 241, 265)
SPLIT_FRACTIONS = (("train", 0.75), ("val", 0.15), ("test", 0.10))
ANNOTATIONS = ("none", "red_solid_box", "white_dotted_box", "text_glyphs")
ANNOTATED_FRACTION = 0.3
RED_LUMA = 0.299
MIN_SIZE = 16
SCHEMA_VERSION = 1


@dataclass
class SprayParams:
    n_plumes: int = 6
    collapse: float = 0.0
    cone_half_angle: float = 35.0
    penetration: float = 0.8
    plume_width: float = 0.03
    tilt: float = 0.0
    intensity_gain: float = 0.9
    noise_sigma: float = 0.02
    annotate: str = "none"
    phase: str = "active"

    def validate(self):
        if self.phase not in ("active", "pre_post"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.annotate not in ANNOTATIONS:
            raise ValueError(f"unknown annotation {self.annotate!r}")
        if not 0.0 <= self.collapse <= 1.0:
            raise ValueError(f"collapse must lie in [0, 1], got {self.collapse}")
        if not 0.0 < self.penetration <= 1.0:
            raise ValueError(f"penetration must lie in (0, 1], got {self.penetration}")
        if self.n_plumes < 1:
            raise ValueError("n_plumes must be >= 1")
        if self.noise_sigma < 0 or self.plume_width <= 0:
            raise ValueError("noise_sigma must be >= 0 and plume_width > 0")


def class_of(c: float | None, phase: str = "active") -> int:
    if phase == "pre_post":
        return PRE_POST
    if c < THRESHOLDS[0]:
        return NO_COLLAPSE
    if c < THRESHOLDS[1]:
        return TRANSITIONAL
    return COLLAPSE


def axis_angles(params: SprayParams) -> np.ndarray:
    """Plume axis angles in degrees from vertical (positive toward +x)."""
    if params.n_plumes == 1:
        base = np.zeros(1)
    else:
        base = np.linspace(-params.cone_half_angle, params.cone_half_angle, params.n_plumes)
    return base * (1.0 - params.collapse) + params.tilt


def angular_spread(params: SprayParams) -> float:
    a = axis_angles(params)
    return float(a.max() - a.min())


def _plumes(params: SprayParams, size: int, rng: np.random.Generator) -> np.ndarray:
    c = params.collapse
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x0, y0 = (size - 1) / 2.0, 0.04 * size
    dx, dy = xx - x0, yy - y0
    length = min(params.penetration * (1.0 + 0.25 * c), 0.98) * size
    base_w = params.plume_width * size * (1.0 + 4.0 * c * c)
    amp = params.intensity_gain / (1.0 + (params.n_plumes - 1) * c)

    angles = axis_angles(params)
    jitter_angle = rng.normal(0.0, 1.5, size=len(angles)) * (1.0 - c)
    jitter_amp = rng.uniform(0.85, 1.15, size=len(angles))

    img = np.zeros((size, size))
    for theta, da, ja in zip(angles, jitter_angle, jitter_amp):
        t = math.radians(theta + da)
        along = dx * math.sin(t) + dy * math.cos(t)
        perp = dx * math.cos(t) - dy * math.sin(t)
        a = np.clip(along, 0.0, None)
        sigma = base_w * (0.6 + 0.8 * a / length)
        section = np.exp(-0.5 * (perp / sigma) ** 2)
        onset = 1.0 - np.exp(-a / (0.04 * size))
        tail = 1.0 / (1.0 + np.exp((along - length) / (0.03 * size)))
        decay = 1.0 - 0.4 * np.clip(a / length, 0.0, 1.0)
        img += amp * ja * section * onset * tail * decay * (along > 0)
    return img


def _residual_blobs(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(rng.integers(0, 3)):
        cy = rng.uniform(0.02, 0.3) * size
        cx = (0.5 + rng.uniform(-0.15, 0.15)) * size
        s = rng.uniform(0.03, 0.08) * size
        img += rng.uniform(0.02, 0.05) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return img


# 3x5 bitmaps for digits, used to imitate overlaid tool text.
_GLYPHS = {
    "0": "111101101101111", "1": "010110010010111", "2": "111001111100111",
    "3": "111001111001111", "4": "101101111001001", "5": "111100111001111",
    "6": "111100111101111", "7": "111001001001001", "8": "111101111101111",
    "9": "111101111001111",
}


def _box_coords(size, rng):
    top = int(rng.uniform(0.05, 0.12) * size)
    left = int(rng.uniform(0.05, 0.15) * size)
    bottom = size - 1 - int(rng.uniform(0.05, 0.12) * size)
    right = size - 1 - int(rng.uniform(0.05, 0.15) * size)
    return top, left, bottom, right


def _draw_annotation(img: np.ndarray, kind: str, rng: np.random.Generator):
    """Draws in place into an (H, W, C) image."""
    size = img.shape[0]
    channels = img.shape[2]
    if kind == "none":
        return
    if kind == "text_glyphs":
        scale = max(1, size // 64)
        digits = "".join(str(d) for d in rng.integers(0, 10, size=4))
        y, x = 1, 1
        for ch in digits:
            bits = np.array([int(b) for b in _GLYPHS[ch]], dtype=bool).reshape(5, 3)
            block = np.kron(bits, np.ones((scale, scale), dtype=bool))
            h, w = block.shape
            if x + w >= size:
                break
            img[y:y + h, x:x + w, :][block] = 1.0
            x += w + scale
        return
    top, left, bottom, right = _box_coords(size, rng)
    mask = np.zeros(img.shape[:2], dtype=bool)
    mask[top, left:right + 1] = mask[bottom, left:right + 1] = True
    mask[top:bottom + 1, left] = mask[top:bottom + 1, right] = True
    if kind == "white_dotted_box":
        yy, xx = np.mgrid[0:size, 0:size]
        mask &= ((yy + xx) // 2) % 2 == 0
        img[mask] = 1.0
    elif channels == 3:
        img[mask, 0] = 1.0
    else:
        img[mask, 0] = RED_LUMA


def render_spray(params: SprayParams, size: int = 64, rng_seed=0, channels: int = 1) -> np.ndarray:
    """Render one spray frame as an (H, W, channels) array in [0, 1].

    With ``channels=3`` the grayscale frame is triplicated and a red box, if
    requested, is drawn into channel 0 only. With one channel the red box is
    drawn at its luminance.
    """
    if size < MIN_SIZE:
        raise ValueError(f"size < {MIN_SIZE}")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    params.validate()
    rng = np.random.default_rng(rng_seed)
    if params.phase == "pre_post":
        gray = _residual_blobs(size, rng)
    else:
        gray = _plumes(params, size, rng)
    gray = np.clip(gray, 0.0, 1.0)
    if params.noise_sigma > 0:
        gray = np.clip(gray + rng.normal(0.0, params.noise_sigma, gray.shape), 0.0, 1.0)
    img = np.repeat(gray[:, :, None], channels, axis=2)
    _draw_annotation(img, params.annotate, rng)
    return img


# ---------------------------------------------------------------------------
# datasets


def sample_params(cls: int, rng: np.random.Generator, annotate: str = "none") -> SprayParams:
    """Nuisance-randomised parameters for one sample of class ``cls``."""
    p = SprayParams(
        n_plumes=int(rng.integers(5, 9)),
        cone_half_angle=float(rng.uniform(33.0, 37.0)),
        penetration=float(rng.uniform(0.6, 0.9)),
        plume_width=float(rng.uniform(0.022, 0.04)),
        tilt=float(rng.uniform(-5.0, 5.0)),
        intensity_gain=float(rng.uniform(0.6, 1.0)),
        noise_sigma=float(rng.uniform(0.02, 0.06)),
        annotate=annotate,
    )
    if cls == PRE_POST:
        p.phase = "pre_post"
    else:
        lo, hi = CLASS_INTERVALS[cls]
        p.collapse = float(rng.uniform(lo, hi))
    return p


def apportion(total: int, weights) -> list[int]:
    """Largest-remainder rounding of ``total * weights``; ties go to the lower index."""
    quotas = [total * w for w in weights]
    out = [math.floor(q + 1e-9) for q in quotas]
    rem = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - out[i]), i))
    for i in rem[: total - sum(out)]:
        out[i] += 1
    return out


def split_counts(counts) -> dict[str, list[int]]:
    """Stratified per-class split sizes whose column totals hit the global split sizes."""
    total = sum(counts)
    names = [n for n, _ in SPLIT_FRACTIONS]
    glob = dict(zip(names, apportion(total, [f for _, f in SPLIT_FRACTIONS])))
    out = {}
    for name in ("test", "train"):
        frac = dict(SPLIT_FRACTIONS)[name]
        quotas = [n * frac for n in counts]
        per = [math.floor(q + 1e-9) for q in quotas]
        order = sorted(range(len(counts)), key=lambda i: (-(quotas[i] - per[i]), i))
        for i in order[: glob[name] - sum(per)]:
            per[i] += 1
        out[name] = per
    out["val"] = [n - a - b for n, a, b in zip(counts, out["train"], out["test"])]
    return {k: out[k] for k in names}


@dataclass
class SampleMeta:
    true_collapse: Optional[float]
    assigned_class: int
    corrupted: bool
    source_id: str
    original_class: int
    phase: str = "active"
    annotate: str = "none"


@dataclass
class Entry:
    path: str
    label: list
    split: str
    meta: SampleMeta


@dataclass
class DatasetManifest:
    entries: list
    seed: int
    size: int
    counts: list
    image_format: str = "pgm"
    schema_version: int = SCHEMA_VERSION
    provenance: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def split_sizes(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name, _ in SPLIT_FRACTIONS}

    def class_counts(self) -> list[int]:
        out = [0] * len(CLASSES)
        for e in self.entries:
            out[e.meta.original_class] += 1
        return out

    def summary(self) -> str:
        s = self.split_sizes()
        return f"total {len(self.entries)}, splits {s['train']}/{s['val']}/{s['test']}"

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "size": self.size,
            "counts": list(self.counts),
            "image_format": self.image_format,
            "classes": list(CLASSES),
            "provenance": list(self.provenance),
            "entries": [
                {"path": e.path, "label": list(e.label), "split": e.split, "meta": vars(e.meta).copy()}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema {d.get('schema_version')!r}")
        entries = [Entry(e["path"], list(e["label"]), e["split"], SampleMeta(**e["meta"])) for e in d["entries"]]
        return cls(entries, d["seed"], d["size"], list(d["counts"]), d["image_format"],
                   d["schema_version"], list(d.get("provenance", [])))


def one_hot(cls: int) -> list[float]:
    v = [0.0] * len(CLASSES)
    v[cls] = 1.0
    return v


def sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def build_dataset(counts=DEFAULT_COUNTS, size: int = 64, seed: int = 0, image_format: str = "pgm"):
    """Render a dataset in memory. Returns (manifest, images[N, H, W])."""
    counts = [int(n) for n in counts]
    if len(counts) != len(CLASSES) or any(n <= 0 for n in counts):
        raise ValueError(f"counts must be {len(CLASSES)} positive integers, got {counts}")
    if size < MIN_SIZE:
        raise ValueError(f"size < {MIN_SIZE}")
    total = sum(counts)
    rng = np.random.default_rng(seed)
    annotated = np.zeros(total, dtype=bool)
    annotated[rng.permutation(total)[: round(ANNOTATED_FRACTION * total)]] = True

    sizes = split_counts(counts)
    entries, images = [], np.empty((total, size, size))
    index = 0
    for cls, n in enumerate(counts):
        tags = [name for name, _ in SPLIT_FRACTIONS for _ in range(sizes[name][cls])]
        tags = [tags[i] for i in rng.permutation(n)]
        for k in range(n):
            srng = np.random.default_rng(sample_seed(seed, index))
            kind = ANNOTATIONS[1 + int(srng.integers(0, 3))] if annotated[index] else "none"
            params = sample_params(cls, srng, kind)
            images[index] = render_spray(params, size, srng, channels=1)[:, :, 0]
            c = None if params.phase == "pre_post" else params.collapse
            meta = SampleMeta(c, cls, False, f"synth-{seed}-{index:05d}", cls, params.phase, kind)
            entries.append(Entry(f"images/{index:05d}.{image_format}", one_hot(cls), tags[k], meta))
            index += 1
    manifest = DatasetManifest(entries, seed, size, counts, image_format)
    return manifest, images


def generate_dataset(out_dir, counts=DEFAULT_COUNTS, size: int = 64, seed: int = 0, image_format: str = "pgm"):
    """Render, write images and ``manifest.json`` under ``out_dir``; returns the manifest."""
    from mixc import store

    manifest, images = build_dataset(counts, size, seed, image_format)
    store.write_dataset(out_dir, manifest, images)
    return manifest


# ---------------------------------------------------------------------------
# label corruption


def _adjacent(c: float) -> int:
    """Class on the far side of the threshold nearest to ``c``."""
    t = min(THRESHOLDS, key=lambda t: abs(c - t))
    return class_of(c) + (1 if c < t else -1)


def corrupt_labels(manifest: DatasetManifest, mode: str, fraction: float, seed: int,
                   delta: float = 0.05, splits=None) -> DatasetManifest:
    """Return a copy of ``manifest`` with a fraction of labels replaced.

    ``boundary`` relabels samples within ``delta`` of a class threshold to the
    adjacent regime; the fraction is taken over active-phase samples. ``random``
    relabels a fraction of all samples to a uniformly drawn different class.
    ``splits`` restricts both the pool and the denominator.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    if mode not in ("boundary", "random"):
        raise ValueError(f"unknown corruption mode {mode!r}")
    if mode == "boundary" and delta <= 0:
        raise ValueError("delta must be > 0")
    out = copy.deepcopy(manifest)
    rng = np.random.default_rng(seed)
    scope = [i for i, e in enumerate(out.entries) if splits is None or e.split in splits]

    if mode == "boundary":
        active = [i for i in scope if out.entries[i].meta.phase == "active"]
        target = math.floor(fraction * len(active) + 0.5)
        eligible = [i for i in active
                    if min(abs(out.entries[i].meta.true_collapse - t) for t in THRESHOLDS) < delta]
        chosen = sorted(rng.permutation(eligible)[:target].tolist()) if eligible else []
        for i in chosen:
            e = out.entries[i]
            _relabel(e, _adjacent(e.meta.true_collapse))
        denom = len(active)
    else:
        target = math.floor(fraction * len(scope) + 0.5)
        chosen = sorted(rng.permutation(scope)[:target].tolist()) if scope else []
        for i in chosen:
            e = out.entries[i]
            others = [k for k in range(len(CLASSES)) if k != e.meta.original_class]
            _relabel(e, others[int(rng.integers(0, len(others)))])
        denom = len(scope)

    achieved = len(chosen) / denom if denom else 0.0
    note = (f"corrupt mode={mode} fraction={fraction!r} delta={delta!r} seed={seed} "
            f"splits={','.join(splits) if splits else 'all'} corrupted={len(chosen)} "
            f"achieved={achieved:.6f}")
    if len(chosen) < target:
        note += " (eligible pool exhausted)"
    out.provenance.append(note)
    return out


def _relabel(entry: Entry, cls: int):
    entry.meta.assigned_class = cls
    entry.meta.corrupted = True
    entry.label = one_hot(cls)
