"""Post-training int8 export of tap heads and the integer surprisal path.

Fixed-point layout for one tap (all scales are positive floats kept in the
manifest, every runtime quantity below is an integer):

* ``a_prev`` and ``a`` are symmetric int8 with per-tap activation scales.
* ``z_acc = P_q @ a_prev_q`` (int32) is requantised to int8 ``z_q`` with an
  integer multiplier and right shift.
* ``mu_acc = Wmu_q @ z_q + bmu_q`` and ``xi_acc = Wxi_q @ z_q + bxi_q``
  accumulate in int32 (biases pre-scaled to the accumulator scale).
* ``xi_acc`` is mapped to a LUT index by comparing against 255 precomputed
  integer thresholds, so no exponential or logarithm is evaluated at runtime.
* Residuals live in the shared fixed-point scale ``act_scale / 256``; they are
  multiplied by the Q8.8 LUT entry, shifted back, squared and summed in int64
  with saturation. One float multiply at the very end yields ``ebar``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, IncompatibleArtifactError, InputError
from .heads import TapHead, head_forward, project, surprisal_diag
from .nnet import BackboneSpec, backbone_macs, layer_shapes

QMAX = 127
LUT_SIZE = 256
LUT_ONE = 256          # Q8.8
RESID_BITS = 8         # residual fixed point: act_scale / 2**RESID_BITS
SHIFT = 24             # requantisation shift
HEADROOM = 1.1
INT64_MAX = np.iinfo(np.int64).max


@dataclass(frozen=True)
class QuantTensor:
    values: np.ndarray  # int8
    scale: float

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale


def quantize_tensor(x, scale=None) -> QuantTensor:
    """Symmetric per-tensor int8, round half to even, zero point 0.

    With ``scale=None`` the scale is ``max|x| / 127`` (1.0 for all-zero input).
    """
    x = np.asarray(x, dtype=np.float64)
    if scale is None:
        peak = float(np.max(np.abs(x))) if x.size else 0.0
        scale = peak / QMAX if peak > 0 else 1.0
    if not scale > 0:
        raise ArgumentError("quantisation scale must be positive")
    q = np.clip(np.rint(x / scale), -QMAX, QMAX).astype(np.int8)
    return QuantTensor(q, float(scale))


def requant_params(ratio: float, shift: int = SHIFT) -> tuple:
    """Integer multiplier approximating ``ratio`` as ``mult / 2**shift``."""
    if not ratio > 0:
        raise ArgumentError("requantisation ratio must be positive")
    mult = int(round(ratio * (1 << shift)))
    while mult >= (1 << 31) and shift > 0:
        shift -= 1
        mult = int(round(ratio * (1 << shift)))
    return max(mult, 1), shift


def _requant(acc, mult, shift):
    acc = acc.astype(np.int64) * np.int64(mult)
    if shift == 0:
        return acc
    return (acc + np.int64(1 << (shift - 1))) >> np.int64(shift)


@dataclass(frozen=True)
class SigmaLut:
    """256-entry table of ``exp(-s/2)`` in unsigned Q8.8 over a uniform s grid."""

    entries: np.ndarray  # uint16
    lo: float
    hi: float

    @property
    def grid(self) -> np.ndarray:
        return self.lo + np.arange(LUT_SIZE) * (self.hi - self.lo) / (LUT_SIZE - 1)

    def decode(self) -> np.ndarray:
        return self.entries.astype(np.float64) / LUT_ONE

    def index_of(self, s) -> np.ndarray:
        """Nearest grid index for float log-variances (used off the integer path)."""
        step = (self.hi - self.lo) / (LUT_SIZE - 1)
        j = np.rint((np.clip(s, self.lo, self.hi) - self.lo) / step)
        return j.astype(np.int64)


def build_lut(bounds) -> SigmaLut:
    lo, hi = (float(b) for b in bounds)
    if not lo < hi:
        raise ArgumentError("LUT bounds must satisfy lo < hi")
    s = lo + np.arange(LUT_SIZE) * (hi - lo) / (LUT_SIZE - 1)
    vals = np.clip(np.rint(LUT_ONE * np.exp(-0.5 * s)), 0, np.iinfo(np.uint16).max)
    return SigmaLut(vals.astype(np.uint16), lo, hi)


def _xi_thresholds(lut: SigmaLut, eps: float, acc_scale: float) -> np.ndarray:
    """Smallest ``xi_acc`` selecting each LUT index 1..255.

    The log-variance ``s(xi) = log(softplus(xi) + eps^2)`` is increasing, so
    the boundary between grid points j-1 and j is the preimage of their
    midpoint. Thresholds are clipped into the int32 accumulator range.
    """
    step = (lut.hi - lut.lo) / (LUT_SIZE - 1)
    mids = lut.lo + (np.arange(1, LUT_SIZE) - 0.5) * step
    target = np.exp(mids) - eps * eps
    xi = np.full(target.shape, -np.inf)
    ok = target > 0
    # inverse softplus: log(expm1(y)), written stably for large y
    y = target[ok]
    xi[ok] = y + np.log(-np.expm1(-y))
    thr = np.ceil(xi / acc_scale)
    info = np.iinfo(np.int32)
    return np.clip(np.nan_to_num(thr, neginf=info.min, posinf=info.max),
                   info.min, info.max).astype(np.int32)


@dataclass
class QuantHead:
    tap: int
    d_out: int
    P: QuantTensor
    Wmu: QuantTensor
    Wxi: QuantTensor
    bmu: np.ndarray      # int32 at scale Wmu.scale * z_scale
    bxi: np.ndarray      # int32 at scale Wxi.scale * z_scale
    in_scale: float      # a_{l-1}
    out_scale: float     # a_l
    z_scale: float
    z_mult: int
    z_shift: int
    mu_mult: int
    mu_shift: int
    xi_thresholds: np.ndarray  # int32, 255 entries, nondecreasing

    @property
    def resid_scale(self) -> float:
        return self.out_scale / (1 << RESID_BITS)

    def quantize_inputs(self, a_prev, a):
        a_prev = np.atleast_2d(np.asarray(a_prev, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a_prev.shape[-1] != self.P.values.shape[1] or a.shape[-1] != self.d_out:
            raise InputError("activation widths do not match the quantised head")
        return (quantize_tensor(a_prev, self.in_scale).values,
                quantize_tensor(a, self.out_scale).values)


def quantize_head(head: TapHead, a_prev_dev, a_dev) -> QuantHead:
    """Export a float head to int8 using dev activations for the scales.

    ``a_prev_dev``/``a_dev`` are the (pooled) head input and target vectors.
    """
    if head.density == "lowrank" or head.B is not None:
        raise ArgumentError("the integer path supports diagonal heads only")
    for name, arr in head.weights().items():
        if not np.all(np.isfinite(arr)):
            raise ArgumentError(f"head weight {name} is not finite")
    a_prev_dev = np.atleast_2d(np.asarray(a_prev_dev, dtype=np.float64))
    a_dev = np.atleast_2d(np.asarray(a_dev, dtype=np.float64))

    def act_scale(x):
        peak = float(np.max(np.abs(x))) if x.size else 0.0
        return HEADROOM * peak / QMAX if peak > 0 else 1.0

    P = quantize_tensor(head.P)
    Wmu = quantize_tensor(head.Wmu)
    Wxi = quantize_tensor(head.Wxi)
    in_scale = act_scale(a_prev_dev)
    out_scale = act_scale(a_dev)
    z_scale = act_scale(project(head, a_prev_dev))
    z_mult, z_shift = requant_params(P.scale * in_scale / z_scale)
    mu_acc_scale = Wmu.scale * z_scale
    xi_acc_scale = Wxi.scale * z_scale
    mu_mult, mu_shift = requant_params(mu_acc_scale / (out_scale / (1 << RESID_BITS)))
    bmu = np.rint(head.bmu / mu_acc_scale).astype(np.int32)
    bxi = np.rint(head.bxi / xi_acc_scale).astype(np.int32)
    lut = build_lut(head.log_var_bounds)
    thr = _xi_thresholds(lut, head.eps, xi_acc_scale)
    return QuantHead(head.tap, head.d_out, P, Wmu, Wxi, bmu, bxi, in_scale, out_scale,
                     z_scale, z_mult, z_shift, mu_mult, mu_shift, thr)


def quantized_ebar(a_prev_q, a_q, qh: QuantHead, lut: SigmaLut, return_flag=False):
    """Integer-path ``ebar`` for int8 activations (single vector or batch).

    Returns float64 ``ebar`` (and the overflow flag when requested). The
    flag is set when any squared term or the accumulator saturated.
    """
    single = np.ndim(a_q) == 1
    a_prev_q = np.atleast_2d(a_prev_q).astype(np.int32)
    a_q = np.atleast_2d(a_q).astype(np.int64)
    z_acc = a_prev_q @ qh.P.values.astype(np.int32).T
    z_q = np.clip(_requant(z_acc, qh.z_mult, qh.z_shift), -QMAX, QMAX).astype(np.int32)
    mu_acc = z_q @ qh.Wmu.values.astype(np.int32).T + qh.bmu
    xi_acc = z_q @ qh.Wxi.values.astype(np.int32).T + qh.bxi
    idx = np.searchsorted(qh.xi_thresholds, xi_acc, side="right")
    mult = lut.entries.astype(np.int64)[idx]
    mu_fx = _requant(mu_acc, qh.mu_mult, qh.mu_shift)
    resid = (a_q << np.int64(RESID_BITS)) - mu_fx
    t = (resid * mult) >> np.int64(8)
    lim_sq = INT64_MAX // max(qh.d_out, 1)
    lim_abs = math.isqrt(lim_sq)
    big = np.abs(t) > lim_abs
    sq = np.where(big, lim_sq, np.where(big, 0, t) ** 2)
    acc = np.sum(sq, axis=-1, dtype=np.int64)
    overflow = bool(np.any(big))
    ebar = acc.astype(np.float64) * (qh.resid_scale ** 2 / qh.d_out)
    if single:
        ebar = float(ebar[0])
    return (ebar, overflow) if return_flag else ebar


def float_ebar(head: TapHead, a_prev, a) -> np.ndarray:
    out = head_forward(head, project(head, a_prev))
    return surprisal_diag(a, out)[1]


@dataclass
class QuantBundle:
    heads: list
    lut: SigmaLut
    meta: dict = field(default_factory=dict)

    def head(self, tap) -> QuantHead:
        for h in self.heads:
            if h.tap == tap:
                return h
        raise IncompatibleArtifactError(f"no quantised head for tap {tap}")

    def to_container(self):
        manifest = {"lut": {"lo": self.lut.lo, "hi": self.lut.hi,
                            "tensor": "quant.lut", "format": "u16-q8.8"},
                    "heads": [], "meta": self.meta}
        tensors = {"quant.lut": self.lut.entries}
        for h in self.heads:
            pre = f"quant.tap{h.tap}."
            manifest["heads"].append({
                "tap": h.tap, "d_out": h.d_out,
                "P_scale": h.P.scale, "Wmu_scale": h.Wmu.scale, "Wxi_scale": h.Wxi.scale,
                "in_scale": h.in_scale, "out_scale": h.out_scale, "z_scale": h.z_scale,
                "z_mult": h.z_mult, "z_shift": h.z_shift,
                "mu_mult": h.mu_mult, "mu_shift": h.mu_shift,
            })
            tensors[pre + "P"] = h.P.values
            tensors[pre + "Wmu"] = h.Wmu.values
            tensors[pre + "Wxi"] = h.Wxi.values
            tensors[pre + "bmu"] = h.bmu
            tensors[pre + "bxi"] = h.bxi
            tensors[pre + "xi_thresholds"] = h.xi_thresholds
        return manifest, tensors

    @classmethod
    def from_container(cls, manifest, tensors) -> "QuantBundle":
        try:
            lut = SigmaLut(tensors[manifest["lut"]["tensor"]].astype(np.uint16),
                           manifest["lut"]["lo"], manifest["lut"]["hi"])
            heads = []
            for m in manifest["heads"]:
                pre = f"quant.tap{m['tap']}."
                heads.append(QuantHead(
                    m["tap"], m["d_out"],
                    QuantTensor(tensors[pre + "P"], m["P_scale"]),
                    QuantTensor(tensors[pre + "Wmu"], m["Wmu_scale"]),
                    QuantTensor(tensors[pre + "Wxi"], m["Wxi_scale"]),
                    tensors[pre + "bmu"], tensors[pre + "bxi"],
                    m["in_scale"], m["out_scale"], m["z_scale"],
                    m["z_mult"], m["z_shift"], m["mu_mult"], m["mu_shift"],
                    tensors[pre + "xi_thresholds"]))
        except KeyError as exc:
            raise IncompatibleArtifactError(f"quantised bundle is incomplete: {exc}") from exc
        return cls(heads, lut, manifest.get("meta", {}))


def quantize_model(model, dev_trace) -> QuantBundle:
    """Quantise every head of ``model`` using activations from ``dev_trace``."""
    heads = [quantize_head(h, dev_trace.vector(h.tap - 1), dev_trace.vector(h.tap))
             for h in model.heads]
    bounds = {tuple(h.log_var_bounds) for h in model.heads}
    if len(bounds) != 1:
        raise ArgumentError("all heads must share clamp bounds for the shared LUT")
    return QuantBundle(heads, build_lut(bounds.pop()))


def quantized_ebars(bundle: QuantBundle, trace, return_flag=False):
    """Per-tap integer-path ``ebar`` for a forward trace, shape (N, n_taps)."""
    cols, flag = [], False
    for qh in bundle.heads:
        ap, a = qh.quantize_inputs(trace.vector(qh.tap - 1), trace.vector(qh.tap))
        e, f = quantized_ebar(ap, a, qh, bundle.lut, return_flag=True)
        cols.append(np.atleast_1d(e))
        flag |= f
    out = np.stack(cols, axis=1)
    return (out, flag) if return_flag else out


# ------------------------------------------------------------- accounting

def head_param_count(d_out: int, rank: int) -> int:
    """Two r->d heads with biases: ``2 d r + 2 d``."""
    return 2 * d_out * rank + 2 * d_out


def report_overhead(spec: BackboneSpec, heads) -> dict:
    """Parameter counts per tap and the head-to-backbone multiply-add ratio.

    The ratio uses ``sum(H*W*r + 2*r*d) / MACs(backbone)`` with ``H, W`` the
    spatial size of the head input (1 for vector layers). ``exact_macs``
    additionally counts the full ``H*W*C_in*r`` pointwise projection.
    """
    shapes = layer_shapes(spec)
    total_macs = backbone_macs(spec)
    taps = []
    formula = 0
    exact = 0
    for h in heads:
        r, d = h.rank, h.d_out
        prev = shapes[h.tap - 1]
        hw = int(np.prod(prev[1:])) if len(prev) == 3 else 1
        c_in = prev[0]
        f = hw * r + 2 * r * d
        e = hw * c_in * r + 2 * r * d
        formula += f
        exact += e
        taps.append({"tap": h.tap, "rank": r, "d": d, "d_prev": c_in,
                     "head_params": head_param_count(d, r),
                     "projector_params": r * c_in,
                     "flops": f, "exact_macs": e})
    return {"taps": taps,
            "head_params_total": sum(t["head_params"] for t in taps),
            "projector_params_total": sum(t["projector_params"] for t in taps),
            "backbone_macs": int(total_macs),
            "flop_ratio": formula / total_macs,
            "exact_ratio": exact / total_macs}
