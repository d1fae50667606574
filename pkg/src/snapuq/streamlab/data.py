"""Synthetic datasets and label-preserving corruptions.

Two tasks are available:

``vector``
    Four Gaussian-manifold classes in 16 dimensions (features roughly on a
    unit scale). Each class is a centre plus a class-specific 3-d latent
    subspace plus isotropic noise. OOD samples come from two extra clusters
    built the same way, far from every ID centre.
``glyph``
    28x28 single-channel images of four stroke glyphs (vertical bar,
    horizontal bar, cross, ring) with position/thickness/intensity jitter.
    OOD samples are inverted glyphs.

OOD labels are ``n_classes + k`` and therefore never equal an ID label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ArgumentError

N_CLASSES = 4
VECTOR_DIM = 16
IMAGE_SIDE = 28
CORRUPTIONS = ("noise", "blur", "contrast", "occlusion")
SEVERITY_TABLE = {
    "noise": (0.05, 0.1, 0.2, 0.35, 0.5),
    "blur": (1, 3, 3, 5, 5),
    "contrast": (0.9, 0.75, 0.6, 0.45, 0.3),
    "occlusion": (0.05, 0.1, 0.2, 0.3, 0.4),
}


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "Split":
        return Split(self.x[idx], self.y[idx])


@dataclass
class Datasets:
    kind: str
    train: Split
    dev: Split
    test: Split
    ood_dev: Split
    ood_test: Split
    n_classes: int = N_CLASSES

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train.x.shape[1:])


# ------------------------------------------------------------------ vectors

def _vector_generator(seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    d, k = VECTOR_DIM, 3
    centres = rng.uniform(0.3, 0.7, size=(N_CLASSES, d))
    ood = []
    while len(ood) < 2:
        c = rng.uniform(0.0, 1.0, size=d)
        c = 0.5 + 1.6 * (c - 0.5)
        if np.min(np.linalg.norm(centres - c, axis=1)) > 1.2:
            ood.append(c)
    all_centres = np.vstack([centres, np.array(ood)])
    bases = rng.normal(size=(len(all_centres), k, d))
    bases /= np.linalg.norm(bases, axis=2, keepdims=True)

    def sample(labels, rng):
        labels = np.asarray(labels)
        h = rng.normal(size=(len(labels), k)) * 0.3
        x = all_centres[labels] + np.einsum("nk,nkd->nd", h, bases[labels])
        return x + 0.12 * rng.normal(size=x.shape)

    return sample


# ------------------------------------------------------------------- glyphs

def _glyph(cls, rng):
    s = IMAGE_SIDE
    img = np.zeros((s, s))
    cy, cx = s // 2 + rng.integers(-3, 4), s // 2 + rng.integers(-3, 4)
    t = int(rng.integers(2, 4))
    half = int(rng.integers(7, 10))
    val = rng.uniform(0.7, 1.0)
    y0, y1 = max(cy - half, 0), min(cy + half, s)
    x0, x1 = max(cx - half, 0), min(cx + half, s)
    if cls == 0:
        img[y0:y1, cx - t // 2:cx - t // 2 + t] = val
    elif cls == 1:
        img[cy - t // 2:cy - t // 2 + t, x0:x1] = val
    elif cls == 2:
        rr = np.arange(-half, half)
        for o in range(t):
            yy = np.clip(cy + rr, 0, s - 1)
            img[yy, np.clip(cx + rr + o, 0, s - 1)] = val
            img[yy, np.clip(cx - rr + o, 0, s - 1)] = val
    else:
        img[y0:y1, x0:x1] = val
        img[y0 + t:y1 - t, x0 + t:x1 - t] = 0.0
    return img


def _glyph_sample(labels, rng, invert=False):
    out = np.empty((len(labels), 1, IMAGE_SIDE, IMAGE_SIDE))
    for i, c in enumerate(labels):
        img = _glyph(int(c) % N_CLASSES, rng)
        if invert:
            img = 1.0 - img
        out[i, 0] = img + 0.05 * rng.normal(size=img.shape)
    return out


# ------------------------------------------------------------------ factory

def make_datasets(seed: int, kind="vector", n_train=2000, n_dev=1000, n_test=1000,
                  n_ood=300) -> Datasets:
    """Deterministic ID/OOD splits. Dev and test pools are disjoint draws."""
    if kind not in ("vector", "glyph"):
        raise ArgumentError(f"unknown dataset kind {kind!r}")
    root = np.random.SeedSequence([seed, 7])
    streams = [np.random.default_rng(s) for s in root.spawn(5)]
    sizes = (n_train, n_dev, n_test)
    splits = []
    if kind == "vector":
        sample = _vector_generator(seed)
        for rng, n in zip(streams[:3], sizes):
            y = rng.integers(0, N_CLASSES, size=n)
            splits.append(Split(sample(y, rng), y))
        for rng in streams[3:]:
            y = N_CLASSES + rng.integers(0, 2, size=n_ood)
            splits.append(Split(sample(y, rng), y))
    else:
        for rng, n in zip(streams[:3], sizes):
            y = rng.integers(0, N_CLASSES, size=n)
            splits.append(Split(_glyph_sample(y, rng), y))
        for rng in streams[3:]:
            base = rng.integers(0, N_CLASSES, size=n_ood)
            splits.append(Split(_glyph_sample(base, rng, invert=True), N_CLASSES + base))
    return Datasets(kind, *splits)


# -------------------------------------------------------------- corruptions

def _box_blur(x, k):
    if k <= 1:
        return x.copy()
    pad = k // 2
    if x.ndim == 2:
        xp = np.pad(x, ((0, 0), (pad, pad)), mode="edge")
        c = np.cumsum(np.pad(xp, ((0, 0), (1, 0))), axis=1)
        return (c[:, k:] - c[:, :-k]) / k
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    out = np.zeros_like(x)
    h, w = x.shape[2:]
    for dy in range(k):
        for dx in range(k):
            out += xp[:, :, dy:dy + h, dx:dx + w]
    return out / (k * k)


def _occlude(x, frac, rng):
    out = x.copy()
    if x.ndim == 2:
        d = x.shape[1]
        n = max(1, int(round(frac * d)))
        starts = rng.integers(0, d - n + 1, size=len(x))
        for i, s in enumerate(starts):
            out[i, s:s + n] = 0.0
        return out
    h, w = x.shape[2:]
    side = max(1, int(round(np.sqrt(frac) * h)))
    ys = rng.integers(0, h - side + 1, size=len(x))
    xs = rng.integers(0, w - side + 1, size=len(x))
    for i in range(len(x)):
        out[i, :, ys[i]:ys[i] + side, xs[i]:xs[i] + side] = 0.0
    return out


def corrupt(x, kind: str, severity: int, rng: np.random.Generator) -> np.ndarray:
    """Apply one corruption at severity 1..5 to a batch; severity 0 copies."""
    x = np.asarray(x, dtype=np.float64)
    if kind not in CORRUPTIONS:
        raise ArgumentError(f"unknown corruption {kind!r}")
    if not 0 <= severity <= 5:
        raise ArgumentError("severity must lie in 0..5")
    if severity == 0:
        return x.copy()
    level = SEVERITY_TABLE[kind][severity - 1]
    if kind == "noise":
        return x + level * rng.normal(size=x.shape)
    if kind == "blur":
        return _box_blur(x, int(level))
    if kind == "contrast":
        axes = tuple(range(1, x.ndim))
        mean = x.mean(axis=axes, keepdims=True)
        return mean + level * (x - mean)
    return _occlude(x, level, rng)
