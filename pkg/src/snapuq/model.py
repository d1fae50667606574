"""Backbone + tap heads bundle and its container (de)serialisation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import FormatError, IncompatibleArtifactError
from .heads import TapHead, init_head
from .nnet import Backbone, BackboneSpec, init_backbone, vector_dims

FORMAT_VERSION = 1


@dataclass
class SnapModel:
    backbone: Backbone
    heads: list
    calibration: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    quant: object = None

    @property
    def spec(self) -> BackboneSpec:
        return self.backbone.spec

    @property
    def taps(self) -> tuple:
        return tuple(h.tap for h in self.heads)

    def head(self, tap: int) -> TapHead:
        for h in self.heads:
            if h.tap == tap:
                return h
        raise KeyError(tap)

    def param_dict(self) -> dict:
        """Live references to every trainable array, backbone first."""
        params = dict(self.backbone.params)
        for h in self.heads:
            for name, arr in h.weights().items():
                params[f"tap{h.tap}.{name}"] = arr
        return params

    def copy(self) -> "SnapModel":
        return SnapModel(self.backbone.copy(), [h.copy() for h in self.heads],
                         copy.deepcopy(self.calibration), copy.deepcopy(self.meta), self.quant)

    def astype(self, dtype) -> "SnapModel":
        return SnapModel(self.backbone.astype(dtype), [h.astype(dtype) for h in self.heads],
                         copy.deepcopy(self.calibration), copy.deepcopy(self.meta), self.quant)


def build_model(spec: BackboneSpec, ranks, rng: np.random.Generator,
                density="diag", **head_kw) -> SnapModel:
    """Fresh model. ``rng`` is split so backbone init does not depend on the
    head configuration."""
    bb_rng, head_rng = [np.random.default_rng(s) for s in
                        rng.bit_generator.seed_seq.spawn(2)]
    backbone = init_backbone(spec, bb_rng)
    dims = vector_dims(spec)
    ranks = list(ranks) if np.ndim(ranks) else [int(ranks)] * len(spec.taps)
    if len(ranks) != len(spec.taps):
        raise ValueError("need one projector rank per tap")
    heads = []
    for tap, r in zip(spec.taps, ranks):
        heads.append(init_head(tap, dims[tap - 1], dims[tap], int(r), head_rng,
                               density=density, pool=spec.kind == "conv", **head_kw))
    return SnapModel(backbone, heads)


def _head_config(h: TapHead) -> dict:
    return {"tap": h.tap, "density": h.density, "nu": h.nu, "delta": h.delta,
            "eps": h.eps, "log_var_bounds": list(h.log_var_bounds),
            "rank": h.rank, "pool": h.pool, "lowrank_k": None if h.B is None else h.B.shape[1]}


def to_bytes(model: SnapModel, precision="f32") -> bytes:
    dtype = np.float32 if precision == "f32" else np.float64
    tensors = {}
    for name, arr in model.backbone.params.items():
        tensors[f"backbone.{name}"] = arr.astype(dtype)
    for h in model.heads:
        for name, arr in h.weights().items():
            tensors[f"tap{h.tap}.{name}"] = arr.astype(dtype)
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "activation_point": "post-relu",
        "taps": list(model.taps),
        "heads": [_head_config(h) for h in model.heads],
        "calibration": model.calibration,
        "meta": model.meta,
        "precision": precision,
    }
    if model.quant is not None:
        qman, qtens = model.quant.to_container()
        manifest["quant"] = qman
        tensors.update(qtens)
    return container.encode(manifest, tensors)


def save_model(model: SnapModel, path, precision="f32") -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model, precision))


def load_model(path) -> SnapModel:
    manifest, tensors = container.read_container(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError("unsupported container version")
    spec = BackboneSpec.from_dict(manifest["spec"])
    params = {}
    for key in list(tensors):
        if key.startswith("backbone."):
            params[key[len("backbone."):]] = tensors[key]
    backbone = Backbone(spec, params)
    heads = []
    for cfg in manifest["heads"]:
        t = cfg["tap"]
        try:
            B = tensors.get(f"tap{t}.B")
            heads.append(TapHead(
                t, tensors[f"tap{t}.P"], tensors[f"tap{t}.Wmu"], tensors[f"tap{t}.bmu"],
                tensors[f"tap{t}.Wxi"], tensors[f"tap{t}.bxi"], density=cfg["density"],
                nu=cfg["nu"], delta=cfg["delta"], B=B, eps=cfg["eps"],
                log_var_bounds=tuple(cfg["log_var_bounds"]), pool=cfg["pool"]))
        except KeyError as exc:
            raise IncompatibleArtifactError(f"container lacks tensors for tap {t}") from exc
    quant = None
    if "quant" in manifest:
        from .quantize import QuantBundle
        quant = QuantBundle.from_container(manifest["quant"], tensors)
    return SnapModel(backbone, heads, manifest.get("calibration", {}),
                     manifest.get("meta", {}), quant)
