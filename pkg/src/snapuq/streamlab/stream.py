"""Stream construction, serialisation and offline event labelling."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ArgumentError, ConfigError, FormatError, InputError
from .data import CORRUPTIONS, Split, corrupt

REGIMES = ("ID", "CID", "OOD")
FRAME_MAGIC = b"SNAPSTR1"


@dataclass
class StreamSpec:
    seed: int = 13
    id_len: int = 200
    cid_len: int = 100
    ood_len: int = 20
    window: int = 20
    cycle: int = 0          # frames per corruption type; 0 -> cid_len // 5
    corruptions: tuple = CORRUPTIONS
    n_bursts: int = 4

    @classmethod
    def full(cls, seed=13) -> "StreamSpec":
        return cls(seed=seed, id_len=2000, cid_len=1000, ood_len=100, window=100)

    @property
    def period(self) -> int:
        return self.cycle if self.cycle > 0 else max(1, self.cid_len // 5)

    @property
    def total(self) -> int:
        return self.id_len + (self.n_bursts + 1) * self.cid_len + self.n_bursts * self.ood_len

    def validate(self) -> None:
        for name in ("id_len", "cid_len", "ood_len"):
            if getattr(self, name) < self.window:
                raise ConfigError(f"{name} must be at least the window length")
        if self.window < 1:
            raise ConfigError("window must be positive")
        if self.n_bursts != 4:
            raise ConfigError("the stream plan uses four OOD bursts")
        unknown = set(self.corruptions) - set(CORRUPTIONS)
        if unknown or not self.corruptions:
            raise ConfigError(f"unknown corruptions: {sorted(unknown)}")

    def plan(self) -> list:
        """Segments as ``(regime, severity, length)`` in stream order."""
        segs = [("ID", 0, self.id_len)]
        for s in range(1, self.n_bursts + 1):
            segs.append(("CID", s, self.cid_len))
            segs.append(("OOD", 0, self.ood_len))
        segs.append(("CID", self.n_bursts + 1, self.cid_len))
        return segs


@dataclass
class LabeledStream:
    x: np.ndarray
    y: np.ndarray
    regime: np.ndarray      # codes into REGIMES
    severity: np.ndarray
    ctype: np.ndarray       # index into CORRUPTIONS, -1 if clean
    spec: StreamSpec = field(default_factory=StreamSpec)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def clean_id(self) -> np.ndarray:
        return self.regime == 0

    def truth(self) -> dict:
        return {"y": self.y.tolist(), "regime": self.regime.tolist(),
                "severity": self.severity.tolist(), "ctype": self.ctype.tolist(),
                "corruptions": list(CORRUPTIONS), "regimes": list(REGIMES),
                "spec": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in asdict(self.spec).items()},
                "frame_shape": list(self.x.shape[1:])}


def _generate(spec: StreamSpec, id_pool: Split, ood_pool: Split) -> LabeledStream:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 4242]))
    plan = spec.plan()
    n_id = sum(n for r, _, n in plan if r != "OOD")
    n_ood = sum(n for r, _, n in plan if r == "OOD")
    if n_id > len(id_pool) or n_ood > len(ood_pool):
        raise InputError(
            f"stream needs {n_id} ID and {n_ood} OOD frames, pools hold "
            f"{len(id_pool)} and {len(ood_pool)}")
    id_idx = iter(rng.permutation(len(id_pool))[:n_id])
    ood_idx = iter(rng.permutation(len(ood_pool))[:n_ood])
    xs, ys, regime, sev, ctype = [], [], [], [], []
    cid_count = 0
    for reg, s, n in plan:
        if reg == "OOD":
            idx = np.fromiter((next(ood_idx) for _ in range(n)), dtype=np.int64)
            xs.append(ood_pool.x[idx])
            ys.append(ood_pool.y[idx])
            ctype.append(np.full(n, -1))
        else:
            idx = np.fromiter((next(id_idx) for _ in range(n)), dtype=np.int64)
            x = id_pool.x[idx].astype(np.float64)
            kinds = np.full(n, -1)
            if reg == "CID":
                pos = cid_count + np.arange(n)
                kinds = np.array([CORRUPTIONS.index(spec.corruptions[(p // spec.period)
                                                                      % len(spec.corruptions)])
                                  for p in pos])
                for k in np.unique(kinds):
                    sel = kinds == k
                    x[sel] = corrupt(x[sel], CORRUPTIONS[k], s, rng)
                cid_count += n
            xs.append(x)
            ys.append(id_pool.y[idx])
            ctype.append(kinds)
        regime.append(np.full(n, REGIMES.index(reg)))
        sev.append(np.full(n, s))
    return LabeledStream(np.concatenate(xs).astype(np.float64), np.concatenate(ys),
                         np.concatenate(regime), np.concatenate(sev), np.concatenate(ctype),
                         spec)


def build_stream(spec: StreamSpec, id_pool: Split, ood_pool: Split):
    """Returns ``(unlabeled_frames, labeled_stream)``.

    Both copies are generated independently from the same seed, so their
    inputs agree frame by frame.
    """
    labeled = _generate(spec, id_pool, ood_pool)
    unlabeled = _generate(spec, id_pool, ood_pool).x
    return unlabeled, labeled


def build_id_stream(n: int, id_pool: Split, seed: int) -> Split:
    """Clean ID-only run used to estimate the accuracy band."""
    if n > len(id_pool):
        raise InputError("ID pool too small for the reference run")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 977]))
    return id_pool.take(rng.permutation(len(id_pool))[:n])


# ---------------------------------------------------------- serialisation

def write_stream(prefix, frames, labeled: LabeledStream | None = None):
    """Frames go to ``prefix.frames`` as length-prefixed float32 records;
    hidden truth (if given) to ``prefix.truth.json``."""
    frames = np.asarray(frames, dtype="<f4")
    with open(f"{prefix}.frames", "wb") as fh:
        shape = frames.shape[1:]
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<I", len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        for f in frames:
            b = f.tobytes()
            fh.write(struct.pack("<I", len(b)))
            fh.write(b)
    if labeled is not None:
        with open(f"{prefix}.truth.json", "w") as fh:
            json.dump(labeled.truth(), fh, sort_keys=True)


def read_frames(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != FRAME_MAGIC:
        raise FormatError("not a frame stream file")
    (nd,) = struct.unpack_from("<I", buf, 8)
    shape = struct.unpack_from(f"<{nd}I", buf, 12)
    pos = 12 + 4 * nd
    size = int(np.prod(shape)) * 4
    out = []
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        if n != size or pos + 4 + n > len(buf):
            raise FormatError("corrupt frame record")
        out.append(np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos + 4))
        pos += 4 + n
    return np.stack(out).reshape((-1, *shape)).astype(np.float64) if out else \
        np.zeros((0, *shape))


def read_stream(prefix) -> LabeledStream:
    x = read_frames(f"{prefix}.frames")
    with open(f"{prefix}.truth.json") as fh:
        t = json.load(fh)
    spec_d = dict(t["spec"])
    spec_d["corruptions"] = tuple(spec_d["corruptions"])
    return LabeledStream(x, np.asarray(t["y"]), np.asarray(t["regime"]),
                         np.asarray(t["severity"]), np.asarray(t["ctype"]), StreamSpec(**spec_d))


# -------------------------------------------------------- event labelling

@dataclass(frozen=True)
class EventInterval:
    onset: int
    offset: int   # inclusive

    def __len__(self) -> int:
        return self.offset - self.onset + 1


def windowed_accuracy(correct, m: int) -> np.ndarray:
    """Trailing-window mean; frames before the first full window are NaN."""
    c = np.asarray(correct, dtype=np.float64)
    if m < 1:
        raise ArgumentError("window must be positive")
    if len(c) < m:
        raise InputError("stream shorter than the window")
    cs = np.concatenate([[0.0], np.cumsum(c)])
    acc = np.full(len(c), np.nan)
    acc[m - 1:] = (cs[m:] - cs[:-m]) / m
    return acc


def accuracy_band(correct_id, m: int):
    """``(mean, std)`` of windowed accuracy on an ID-only run."""
    acc = windowed_accuracy(correct_id, m)
    acc = acc[~np.isnan(acc)]
    return float(np.mean(acc)), float(np.std(acc))


def events_from_mask(mask, m: int) -> list:
    """Runs of True, with gaps shorter than m merged and runs shorter than m dropped."""
    mask = np.asarray(mask, dtype=bool)
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    merged = []
    for s, e in zip(starts, ends):
        if merged and s - merged[-1][1] - 1 < m:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    return [EventInterval(int(s), int(e)) for s, e in merged if e - s + 1 >= m]


def events_from_accuracy(acc, threshold: float, m: int) -> list:
    acc = np.asarray(acc, dtype=np.float64)
    below = np.where(np.isnan(acc), False, acc < threshold)
    return events_from_mask(below, m)


def label_events(correct, m: int, band) -> list:
    """Intervals where windowed accuracy falls below ``mean - 3*std`` of the ID band."""
    mu, sd = band
    return events_from_accuracy(windowed_accuracy(correct, m), mu - 3.0 * sd, m)


def frame_labels(events, n: int) -> np.ndarray:
    lab = np.zeros(n, dtype=bool)
    for ev in events:
        lab[ev.onset:ev.offset + 1] = True
    return lab
