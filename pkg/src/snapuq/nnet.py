"""Dense numpy kernels and the two tiny backbones (MLP, small conv net).

Tensors are plain ``numpy.ndarray`` objects, batch-first and row-major.
Training runs in float64; frozen models are exported as float32.

Layer indexing follows the usual convention: ``a_0`` is the input, ``a_1 ..
a_D`` are the post-ReLU outputs of the hidden layers/blocks and the logits
are a linear read-out of ``a_D`` (global-average-pooled for the conv net).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, ConfigError, InputError

__all__ = [
    "BackboneSpec",
    "Backbone",
    "ActivationTrace",
    "mlp_spec",
    "conv_spec",
    "init_backbone",
    "forward_collect",
    "backward",
    "clf_loss_grad",
    "stable_logsumexp",
    "softmax",
    "layer_shapes",
    "backbone_macs",
]


@dataclass(frozen=True)
class BackboneSpec:
    kind: str
    widths: tuple
    taps: tuple
    n_classes: int
    input_shape: tuple
    strides: tuple = ()
    activation: str = "relu"

    @property
    def depth(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if self.kind not in ("mlp", "conv"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.activation != "relu":
            raise ConfigError("only ReLU activations are supported")
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ConfigError("layer widths must be positive")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if not self.taps:
            raise ConfigError("at least one tap is required")
        taps = list(self.taps)
        if taps != sorted(set(taps)):
            raise ConfigError(f"tap indices must be strictly increasing, got {taps}")
        if taps[0] < 2 or taps[-1] > self.depth:
            raise ConfigError(
                f"tap indices must lie in [2, {self.depth}], got {taps}")
        if self.kind == "conv":
            if len(self.strides) != self.depth:
                raise ConfigError("conv backbone needs one stride per block")
            if len(self.input_shape) != 3:
                raise ConfigError("conv input shape must be (C, H, W)")
        elif len(self.input_shape) != 1:
            raise ConfigError("mlp input shape must be (d,)")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "widths": list(self.widths),
            "taps": list(self.taps),
            "n_classes": self.n_classes,
            "input_shape": list(self.input_shape),
            "strides": list(self.strides),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        spec = cls(
            kind=d["kind"],
            widths=tuple(int(w) for w in d["widths"]),
            taps=tuple(int(t) for t in d["taps"]),
            n_classes=int(d["n_classes"]),
            input_shape=tuple(int(s) for s in d["input_shape"]),
            strides=tuple(int(s) for s in d.get("strides", ())),
            activation=d.get("activation", "relu"),
        )
        spec.validate()
        return spec


def mlp_spec(d_in=16, n_classes=4, widths=(64, 64), taps=None) -> BackboneSpec:
    taps = tuple(taps) if taps is not None else (len(widths),)
    spec = BackboneSpec("mlp", tuple(widths), taps, n_classes, (d_in,))
    spec.validate()
    return spec


def conv_spec(n_classes=4, channels=(8, 16, 32, 32), strides=(1, 2, 1, 2),
              input_shape=(1, 28, 28), taps=None) -> BackboneSpec:
    # mid block (2) and the last block before the classifier
    taps = tuple(taps) if taps is not None else (2, len(channels))
    spec = BackboneSpec("conv", tuple(channels), taps, n_classes,
                        tuple(input_shape), tuple(strides))
    spec.validate()
    return spec


def layer_shapes(spec: BackboneSpec) -> list:
    """Output shape of every layer, index 0 being the input."""
    shapes = [tuple(spec.input_shape)]
    if spec.kind == "mlp":
        shapes += [(int(w),) for w in spec.widths]
        return shapes
    _, h, w = spec.input_shape
    for c, s in zip(spec.widths, spec.strides):
        h = (h - 1) // s + 1
        w = (w - 1) // s + 1
        shapes.append((int(c), h, w))
    return shapes


def vector_dims(spec: BackboneSpec) -> list:
    """Length of the (pooled) vector view of each layer."""
    return [s[0] for s in layer_shapes(spec)]


def backbone_macs(spec: BackboneSpec) -> int:
    """Multiply-accumulate count of one forward pass."""
    shapes = layer_shapes(spec)
    macs = 0
    for k in range(1, spec.depth + 1):
        prev, cur = shapes[k - 1], shapes[k]
        if spec.kind == "mlp":
            macs += prev[0] * cur[0]
        else:
            macs += cur[0] * cur[1] * cur[2] * prev[0] * 9
    macs += shapes[-1][0] * spec.n_classes
    return int(macs)


class Backbone:
    """Parameters plus spec. Parameters live in an ordered dict."""

    def __init__(self, spec: BackboneSpec, params: dict):
        spec.validate()
        self.spec = spec
        self.params = params

    @property
    def dtype(self):
        return self.params["out.W"].dtype

    def copy(self) -> "Backbone":
        return Backbone(self.spec, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "Backbone":
        return Backbone(self.spec, {k: v.astype(dtype) for k, v in self.params.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def init_backbone(spec: BackboneSpec, rng: np.random.Generator) -> Backbone:
    """He-uniform weights, zero biases, float64."""
    spec.validate()
    shapes = layer_shapes(spec)
    params = {}
    for k in range(1, spec.depth + 1):
        if spec.kind == "mlp":
            fan_in = shapes[k - 1][0]
            wshape = (shapes[k][0], fan_in)
        else:
            fan_in = shapes[k - 1][0] * 9
            wshape = (shapes[k][0], shapes[k - 1][0], 3, 3)
        limit = np.sqrt(6.0 / fan_in)
        params[f"layer{k}.W"] = rng.uniform(-limit, limit, size=wshape)
        params[f"layer{k}.b"] = np.zeros(shapes[k][0])
    d_last = shapes[-1][0]
    limit = np.sqrt(6.0 / d_last)
    params["out.W"] = rng.uniform(-limit, limit, size=(spec.n_classes, d_last))
    params["out.b"] = np.zeros(spec.n_classes)
    return Backbone(spec, params)


@dataclass
class ActivationTrace:
    """Per-layer activations of one batch.

    ``acts[k]`` is the full activation of layer k (spatial map for conv
    blocks), ``pooled[k]`` its vector view (global average pool for maps).
    ``pre`` and ``windows`` are backward-pass caches.
    """

    acts: list
    pooled: list
    logits: np.ndarray
    pre: list = field(default_factory=list)
    windows: list = field(default_factory=list)

    def vector(self, layer: int) -> np.ndarray:
        return self.pooled[layer]

    @property
    def depth(self) -> int:
        return len(self.acts) - 1


def stable_logsumexp(v, axis=-1):
    """log(sum(exp(v))) with the max-shift trick."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ArgumentError("logsumexp of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ArgumentError("logsumexp needs finite entries")
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    out = np.squeeze(out, axis=axis)
    return float(out) if out.ndim == 0 else out


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def _conv_windows(x, stride):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_forward(win, W, b):
    # win: (N, C, Ho, Wo, 3, 3), W: (O, C, 3, 3)
    out = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def _conv_backward(g, win, W, x_shape, stride):
    n, c, h, w = x_shape
    dW = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    db = g.sum(axis=(0, 2, 3))
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
    for i in range(3):
        for j in range(3):
            contrib = np.tensordot(g, W[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                contrib.transpose(0, 3, 1, 2)
    return dW, db, dxp[:, :, 1:-1, 1:-1]


def _check_input(spec, x):
    x = np.asarray(x)
    if x.shape == tuple(spec.input_shape):
        x = x[None]
    if x.ndim != len(spec.input_shape) + 1 or x.shape[1:] != tuple(spec.input_shape):
        raise InputError(
            f"input shape {x.shape} does not match backbone input {spec.input_shape}")
    return x


def forward_collect(backbone: Backbone, x):
    """One forward pass. Returns ``(trace, posteriors)``.

    A single unbatched example is promoted to a batch of one. Posteriors are
    always float64 so they sum to one to ~1e-15.
    """
    spec = backbone.spec
    p = backbone.params
    x = _check_input(spec, x).astype(backbone.dtype, copy=False)
    acts, pooled, pre, windows = [x], [], [], [None]
    if spec.kind == "mlp":
        pooled.append(x)
        h = x
        for k in range(1, spec.depth + 1):
            z = h @ p[f"layer{k}.W"].T + p[f"layer{k}.b"]
            h = np.maximum(z, 0.0)
            pre.append(z)
            acts.append(h)
            pooled.append(h)
        feats = h
    else:
        pooled.append(x.mean(axis=(2, 3)))
        h = x
        for k in range(1, spec.depth + 1):
            win = _conv_windows(h, spec.strides[k - 1])
            z = _conv_forward(win, p[f"layer{k}.W"], p[f"layer{k}.b"])
            h = np.maximum(z, 0.0)
            windows.append(win)
            pre.append(z)
            acts.append(h)
            pooled.append(h.mean(axis=(2, 3)))
        feats = pooled[-1]
    logits = feats @ p["out.W"].T + p["out.b"]
    trace = ActivationTrace(acts, pooled, logits, [None] + pre, windows)
    return trace, softmax(logits)


def backward(backbone: Backbone, trace: ActivationTrace, dlogits=None,
             act_grads=None) -> dict:
    """Reverse pass.

    ``dlogits`` is dL/dlogits (may be None); ``act_grads`` maps layer index to
    dL/d(vector view of that layer). Returns gradients keyed like params.
    """
    spec = backbone.spec
    p = backbone.params
    act_grads = act_grads or {}
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    D = spec.depth
    feats = trace.pooled[D]
    g_vec = np.zeros_like(feats)
    if dlogits is not None:
        grads["out.W"] = dlogits.T @ feats
        grads["out.b"] = dlogits.sum(axis=0)
        g_vec = dlogits @ p["out.W"]

    if spec.kind == "mlp":
        g = g_vec
        for k in range(D, 0, -1):
            if k in act_grads:
                g = g + act_grads[k]
            gz = g * (trace.pre[k] > 0)
            grads[f"layer{k}.W"] = gz.T @ trace.acts[k - 1]
            grads[f"layer{k}.b"] = gz.sum(axis=0)
            g = gz @ p[f"layer{k}.W"]
        return grads

    g_map = None
    for k in range(D, 0, -1):
        vec = g_vec if k == D else np.zeros_like(trace.pooled[k])
        if k in act_grads:
            vec = vec + act_grads[k]
        hw = trace.acts[k].shape[2] * trace.acts[k].shape[3]
        from_vec = np.broadcast_to((vec / hw)[:, :, None, None], trace.acts[k].shape)
        g = from_vec if g_map is None else g_map + from_vec
        gz = g * (trace.pre[k] > 0)
        dW, db, g_map = _conv_backward(gz, trace.windows[k], p[f"layer{k}.W"],
                                       trace.acts[k - 1].shape, spec.strides[k - 1])
        grads[f"layer{k}.W"] = dW
        grads[f"layer{k}.b"] = db
    return grads


def cross_entropy(posteriors, y) -> float:
    n = len(y)
    return float(-np.mean(np.log(np.maximum(posteriors[np.arange(n), y], 1e-300))))


def clf_loss_grad(backbone: Backbone, x, y):
    """Mean cross-entropy on a labelled batch and its parameter gradients."""
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ArgumentError("empty batch")
    if np.any(y < 0) or np.any(y >= backbone.spec.n_classes):
        raise ArgumentError("labels out of range")
    trace, post = forward_collect(backbone, x)
    if len(post) != len(y):
        raise InputError("inputs and labels differ in length")
    loss = cross_entropy(post, y)
    dlogits = post.copy()
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits /= len(y)
    return loss, backward(backbone, trace, dlogits.astype(backbone.dtype))
