"""Mixup (convex pairs of images and labels) and geometric augmentation.

Mixup always runs before any geometric op so every training image keeps a
single injector tip at the top: mixing two differently shifted sprays would
produce two tips.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mixc.netcore import check_soft_labels

ROTATION_LIMIT = 20.0
SHIFT_LIMIT = 0.2


# ---------------------------------------------------------------------------
# Beta(alpha, alpha) via Gamma variates


def log_standard_gamma(shape: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """log of Gamma(shape, 1) draws, Marsaglia-Tsang squeeze/rejection.

    For shape < 1 the sampler draws Gamma(shape + 1) and multiplies by
    U**(1/shape); this is done in log space because U**(1/shape) underflows
    for tiny shapes.
    """
    if shape <= 0:
        raise ValueError(f"gamma shape must be > 0, got {shape}")
    boost = shape < 1.0
    a = shape + 1.0 if boost else shape
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        m = max(need + need // 4, 16)
        x = rng.standard_normal(m)
        u = rng.random(m)
        v = (1.0 + c * x) ** 3
        ok = v > 0
        logv = np.log(np.where(ok, v, 1.0))
        accept = ok & ((u < 1.0 - 0.0331 * x ** 4) | (np.log(u) < 0.5 * x * x + d * (1.0 - v + logv)))
        got = (math.log(d) + logv)[accept][:need]
        out[filled:filled + len(got)] = got
        filled += len(got)
    if boost:
        out += np.log(rng.random(size)) / shape
    return out


def sample_lambda(alpha: float, rng: np.random.Generator, size: int | None = None):
    """lambda ~ Beta(alpha, alpha) as X / (X + Y) with X, Y ~ Gamma(alpha, 1).

    ``alpha == 0`` is the no-mixup switch: lambda is 0 or 1 with equal odds.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    n = 1 if size is None else size
    if alpha == 0:
        lam = rng.integers(0, 2, size=n).astype(np.float64)
    else:
        lx = log_standard_gamma(alpha, n, rng)
        ly = log_standard_gamma(alpha, n, rng)
        # X/(X+Y) = 1/(1+exp(ly-lx)), stable when both gammas underflow
        lam = 1.0 / (1.0 + np.exp(np.clip(ly - lx, -700.0, 700.0)))
    return float(lam[0]) if size is None else lam


# ---------------------------------------------------------------------------
# mixup


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray


@dataclass(frozen=True)
class MixupRecord:
    lam: float
    index_a: int
    index_b: int


def mixup_pair(a: Sample, b: Sample, lam: float) -> Sample:
    if a.image.shape != b.image.shape:
        raise ValueError(f"image shapes differ: {a.image.shape} vs {b.image.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    check_soft_labels(np.stack([a.label, b.label]))
    if lam == 1.0:
        return Sample(a.image.copy(), np.array(a.label, dtype=np.float64))
    if lam == 0.0:
        return Sample(b.image.copy(), np.array(b.label, dtype=np.float64))
    image = lam * a.image + (1.0 - lam) * b.image
    label = lam * np.asarray(a.label) + (1.0 - lam) * np.asarray(b.label)
    return Sample(np.clip(image, 0.0, 1.0), label)


def mixup_batch(images: np.ndarray, labels: np.ndarray, alpha: float, rng: np.random.Generator):
    """Mix each sample with a partner from a seeded permutation, fresh lambda per pair.

    Returns (images, labels, records).
    """
    n = len(images)
    if n < 2:
        raise ValueError(f"mixup needs at least 2 samples, got {n}")
    if len(labels) != n:
        raise ValueError("images and labels differ in length")
    perm = rng.permutation(n)
    lams = sample_lambda(alpha, rng, size=n)
    out_x = np.empty_like(images, dtype=np.float64)
    out_y = np.empty((n, labels.shape[1]))
    records = []
    for i in range(n):
        j = int(perm[i])
        s = mixup_pair(Sample(images[i], labels[i]), Sample(images[j], labels[j]), float(lams[i]))
        out_x[i], out_y[i] = s.image, s.label
        records.append(MixupRecord(float(lams[i]), i, j))
    return out_x, out_y, records


# ---------------------------------------------------------------------------
# geometric ops; images are (H, W) or (H, W, C)


def bilinear_sample(img: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional (row, col) coordinates; outside pixels read as 0."""
    h, w = img.shape[:2]
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    fy, fx = yy - y0, xx - x0
    if img.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    out = 0.0
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            v = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            mask = inside[..., None] if img.ndim == 3 else inside
            out = out + wy * wx * np.where(mask, v, 0.0)
    return out


def _check_limit(value, limit, what):
    if abs(value) > limit + 1e-12:
        raise ValueError(f"{what} {value} exceeds limit {limit}")


def rotate(img: np.ndarray, degrees: float, max_degrees: float = ROTATION_LIMIT) -> np.ndarray:
    """Rotate about the image centre (counter-clockwise for positive angles), zero fill."""
    _check_limit(degrees, max_degrees, "rotation")
    if degrees == 0:
        return img.copy()
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = -math.radians(degrees)  # rows grow downward, so negate for on-screen CCW
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source location
    sy = cy + (yy - cy) * math.cos(t) - (xx - cx) * math.sin(t)
    sx = cx + (yy - cy) * math.sin(t) + (xx - cx) * math.cos(t)
    return np.clip(bilinear_sample(img, sy, sx), 0.0, 1.0)


def shift(img: np.ndarray, dx_frac: float, dy_frac: float, max_frac: float = SHIFT_LIMIT) -> np.ndarray:
    """Translate by whole pixels (rounded fractions of width/height), zero fill.

    Positive ``dx_frac`` moves content right, positive ``dy_frac`` down.
    """
    _check_limit(dx_frac, max_frac, "horizontal shift")
    _check_limit(dy_frac, max_frac, "vertical shift")
    h, w = img.shape[:2]
    dx, dy = int(round(dx_frac * w)), int(round(dy_frac * h))
    out = np.zeros_like(img)
    src = img[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class AugmentConfig:
    alpha: float = 0.0
    rotation_max: float = 0.0
    shift_max: float = 0.0
    hflip: bool = False
    allow_out_of_range: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.rotation_max < 0 or self.shift_max < 0:
            raise ValueError("augmentation magnitudes must be >= 0")
        if not self.allow_out_of_range:
            if self.rotation_max > ROTATION_LIMIT:
                raise ValueError(f"rotation_max {self.rotation_max} exceeds {ROTATION_LIMIT} degrees")
            if self.shift_max > SHIFT_LIMIT:
                raise ValueError(f"shift_max {self.shift_max} exceeds {SHIFT_LIMIT}")


class Pipeline:
    """Mixup first, then independently drawn geometric ops per image.

    The order is fixed; ``stages`` reports it. Every call is logged in
    ``calls`` with its split tag so callers can prove val/test were never
    augmented.
    """

    def __init__(self, config: AugmentConfig):
        self.config = config
        self.calls: list[str] = []

    @property
    def stages(self) -> list[str]:
        out = ["mixup"]
        if self.config.rotation_max > 0:
            out.append("rotate")
        if self.config.shift_max > 0:
            out.append("shift")
        if self.config.hflip:
            out.append("hflip")
        return out

    def describe(self) -> str:
        mix = f"mixup(alpha={self.config.alpha:g})" if self.config.alpha > 0 else "mixup(off)"
        return " -> ".join([mix] + self.stages[1:])

    def __call__(self, images, labels, rng: np.random.Generator, tag: str = "train"):
        self.calls.append(tag)
        cfg = self.config
        n = len(images)
        if cfg.alpha > 0:
            images, labels, records = mixup_batch(images, labels, cfg.alpha, rng)
        else:
            images, labels = images.copy(), labels.copy()
            records = [MixupRecord(1.0, i, i) for i in range(n)]
        if len(self.stages) > 1:
            lim_r = cfg.rotation_max if cfg.allow_out_of_range else ROTATION_LIMIT
            lim_s = cfg.shift_max if cfg.allow_out_of_range else SHIFT_LIMIT
            for i in range(n):
                img = images[i]
                if cfg.rotation_max > 0:
                    img = rotate(img, rng.uniform(-cfg.rotation_max, cfg.rotation_max), lim_r)
                if cfg.shift_max > 0:
                    dx, dy = rng.uniform(-cfg.shift_max, cfg.shift_max, size=2)
                    img = shift(img, dx, dy, lim_s)
                if cfg.hflip and rng.random() < 0.5:
                    img = hflip(img)
                images[i] = img
        return images, labels, records
