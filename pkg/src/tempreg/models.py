"""Autoencoder architectures, whole-model forward/backward, and checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ArchError, CropUnderflow, FormatError, ShapeMismatch
from .layers import (
    Activation,
    Conv,
    ConvSpec,
    Deconv,
    Dense,
    Layer,
    LayerParams,
    MaxPool,
    Unpool,
    crop_offsets,
)
from .optim import InitSpec, sparse_init, xavier_init

MAGIC = b"TRAE"
VERSION = 1

PAPER_FC_WIDTHS = [204, 2000, 1000, 500, 30, 500, 1000, 2000, 204]
TINY_FC_WIDTHS = [204, 32, 8, 32, 204]

# (filters, kernel, stride, pad) per encoder conv; a 2x2 pool follows the first two.
CONV_PRESETS = {
    "paper": {"size": 227, "T": 10, "convs": [(512, 11, 4, 0), (256, 5, 1, 2), (128, 3, 1, 1)]},
    "tiny": {"size": 32, "T": 5, "convs": [(16, 4, 2, 1), (8, 3, 1, 1), (4, 3, 1, 1)]},
}


@dataclass
class ArchConfig:
    kind: str
    input_shape: list[int]
    layers: list[dict]
    preset: str = "custom"
    seed: int = 0
    init: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            kind=d["kind"],
            input_shape=list(d["input_shape"]),
            layers=[dict(l) for l in d["layers"]],
            preset=d.get("preset", "custom"),
            seed=int(d.get("seed", 0)),
            init=dict(d.get("init", {})),
        )


def _conv_spec(d: dict) -> ConvSpec:
    return ConvSpec(d["in"], d["out"], tuple(d["kernel"]), d.get("stride", 1), d.get("pad", 0))


def conv_ae_config(preset: str = "tiny", T: int | None = None, filters: list[int] | None = None) -> ArchConfig:
    """Encoder conv/pool stack plus its mirrored deconv/unpool decoder."""
    if preset not in CONV_PRESETS:
        raise ArchError(f"unknown conv preset {preset!r}")
    p = CONV_PRESETS[preset]
    T = p["T"] if T is None else T
    convs = p["convs"]
    if filters is not None:
        if len(filters) != len(convs):
            raise ArchError("need one filter count per conv layer")
        convs = [(f, *c[1:]) for f, c in zip(filters, convs)]
    return mirrored_conv_config([T, p["size"], p["size"]], convs, pools_after=(0, 1), preset=preset)


def mirrored_conv_config(input_shape, convs, pools_after=(0, 1), preset="custom") -> ArchConfig:
    c, h, w = input_shape
    enc: list[dict] = []
    stages = []  # (kind, info) for building the mirror
    for i, (filters, k, s, pad) in enumerate(convs):
        spec = {"type": "conv", "in": c, "out": filters, "kernel": [k, k], "stride": s, "pad": pad}
        try:
            h2, w2 = _conv_spec(spec).out_size(h, w)
        except ShapeMismatch as exc:
            raise ArchError(str(exc)) from exc
        enc.append(spec)
        enc.append({"type": "act", "kind": "tanh"})
        stages.append(("conv", spec, (h, w)))
        c, h, w = filters, h2, w2
        if i in pools_after:
            if h < 2 or w < 2:
                raise ArchError(f"cannot pool a {h}x{w} map")
            enc.append({"type": "pool"})
            stages.append(("pool", len(enc) - 1, (h, w)))
            h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    dec: list[dict] = []
    n_conv = sum(1 for s in stages if s[0] == "conv")
    seen = 0
    for kind, info, hw in reversed(stages):
        if kind == "pool":
            dec.append({"type": "unpool", "pool": info})
            continue
        seen += 1
        dec.append({
            "type": "deconv", "in": info["out"], "out": info["in"], "kernel": info["kernel"],
            "stride": info["stride"], "target": list(hw),
        })
        dec.append({"type": "act", "kind": "sigmoid" if seen == n_conv else "tanh"})
    cfg = ArchConfig("conv_ae", list(input_shape), enc + dec, preset=preset)
    validate_config(cfg)
    return cfg


def fc_ae_config(preset: str = "tiny", widths: list[int] | None = None) -> ArchConfig:
    if widths is None:
        if preset == "paper":
            widths = PAPER_FC_WIDTHS
        elif preset == "tiny":
            widths = TINY_FC_WIDTHS
        else:
            raise ArchError(f"unknown fc preset {preset!r}")
    if widths[0] != widths[-1] or list(widths) != list(reversed(widths)):
        raise ArchError(f"fc widths are not mirror-symmetric: {widths}")
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append({"type": "fc", "in": a, "out": b})
        last = i == len(widths) - 2
        layers.append({"type": "act", "kind": "sigmoid" if last else "tanh"})
    cfg = ArchConfig("fc_ae", [widths[0]], layers, preset=preset)
    validate_config(cfg)
    return cfg


def make_layers(cfg: ArchConfig) -> list[Layer]:
    out: list[Layer] = []
    for d in cfg.layers:
        t = d["type"]
        if t == "conv":
            out.append(Conv(_conv_spec(d)))
        elif t == "deconv":
            out.append(Deconv(_conv_spec(d), tuple(d["target"])))
        elif t == "pool":
            out.append(MaxPool())
        elif t == "unpool":
            out.append(Unpool())
        elif t == "fc":
            out.append(Dense(d["in"], d["out"]))
        elif t == "act":
            out.append(Activation(d["kind"]))
        else:
            raise ArchError(f"unknown layer type {t!r}")
    return out


def layer_shapes(cfg: ArchConfig) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer, raising ArchError on any inconsistency."""
    shape = tuple(cfg.input_shape)
    shapes = []
    pool_inputs: dict[int, tuple[int, ...]] = {}
    for i, d in enumerate(cfg.layers):
        t = d["type"]
        if t in ("conv", "deconv"):
            if len(shape) != 3 or shape[0] != d["in"]:
                raise ArchError(f"layer {i}: expected {d['in']} input channels, have shape {shape}")
            spec = _conv_spec(d)
            if t == "conv":
                try:
                    shape = (d["out"], *spec.out_size(*shape[1:]))
                except ShapeMismatch as exc:
                    raise ArchError(f"layer {i}: {exc}") from exc
            else:
                full = spec.full_deconv_size(*shape[1:])
                try:
                    for f, tgt in zip(full, d["target"]):
                        crop_offsets(f, tgt)
                except CropUnderflow as exc:
                    raise ArchError(f"layer {i}: {exc}") from exc
                shape = (d["out"], *d["target"])
        elif t == "pool":
            pool_inputs[i] = shape
            shape = (shape[0], (shape[1] - 2) // 2 + 1, (shape[2] - 2) // 2 + 1)
        elif t == "unpool":
            j = d["pool"]
            if j not in pool_inputs:
                raise ArchError(f"layer {i}: unpool refers to missing pool {j}")
            pre = pool_inputs.pop(j)
            pooled = (pre[0], (pre[1] - 2) // 2 + 1, (pre[2] - 2) // 2 + 1)
            if shape != pooled:
                raise ArchError(f"layer {i}: unpool input {shape} does not match pool output {pooled}")
            shape = pre
        elif t == "fc":
            if shape != (d["in"],):
                raise ArchError(f"layer {i}: fc expects width {d['in']}, have {shape}")
            shape = (d["out"],)
        elif t != "act":
            raise ArchError(f"unknown layer type {t!r}")
        shapes.append(shape)
    return shapes


def validate_config(cfg: ArchConfig) -> None:
    if cfg.kind not in ("conv_ae", "fc_ae"):
        raise ArchError(f"unknown model kind {cfg.kind!r}")
    shapes = layer_shapes(cfg)
    if not shapes or shapes[-1] != tuple(cfg.input_shape):
        raise ArchError(f"output shape {shapes[-1] if shapes else None} != input shape {cfg.input_shape}")
    if any(d["type"] == "pool" for d in cfg.layers) and sum(d["type"] == "pool" for d in cfg.layers) != sum(
        d["type"] == "unpool" for d in cfg.layers
    ):
        raise ArchError("every pool needs a matching unpool")


class Autoencoder:
    """Layer graph plus its parameters; ``params[i]`` is None for parameter-free layers."""

    def __init__(self, config: ArchConfig, params: list[LayerParams | None]):
        self.config = config
        self.layers = make_layers(config)
        if len(params) != len(self.layers):
            raise ArchError("one params entry per layer required")
        for layer, p in zip(self.layers, params):
            if layer.has_params:
                w_shape, b_shape = layer.param_shapes()
                if p is None or p.weights.shape != w_shape or p.bias.shape != b_shape:
                    raise ArchError(f"parameter shapes do not agree with {layer!r}")
        self.params = params

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.config.input_shape)

    @property
    def dtype(self):
        for p in self.params:
            if p is not None:
                return p.weights.dtype
        return np.dtype(np.float64)

    def param_count(self) -> int:
        return sum(p.weights.size + p.bias.size for p in self.params if p is not None)

    def astype(self, dtype) -> "Autoencoder":
        params = [None if p is None else LayerParams(p.weights.astype(dtype), p.bias.astype(dtype)) for p in self.params]
        return Autoencoder(self.config, params)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        shape = self.input_shape
        if x.shape != shape and x.shape[1:] != shape:
            raise ShapeMismatch(f"input {x.shape} does not match model input {shape}")
        return x

    def forward(self, x: np.ndarray):
        """Return ``(reconstruction, caches)``; caches belong to this call only."""
        x = self._check_input(x)
        caches = []
        records = {}
        h = x
        for i, (layer, p) in enumerate(zip(self.layers, self.params)):
            rec = records.get(self.config.layers[i].get("pool")) if isinstance(layer, Unpool) else None
            h, cache = layer.forward(h, p, rec)
            if isinstance(layer, MaxPool):
                records[i] = cache.record
            caches.append(cache)
        return h, caches

    def backward(self, caches, grad: np.ndarray):
        grads: list[LayerParams | None] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            grad, grads[i] = self.layers[i].backward(caches[i], grad, self.params[i])
        return grad, grads

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


def model_forward(model: Autoencoder, x: np.ndarray):
    return model.forward(x)


def _init_params(cfg: ArchConfig, init: InitSpec, rng_seed: int, dtype) -> list[LayerParams | None]:
    rng = np.random.default_rng(rng_seed)
    params: list[LayerParams | None] = []
    for layer in make_layers(cfg):
        if not layer.has_params:
            params.append(None)
            continue
        w_shape, b_shape = layer.param_shapes()
        fan_in = int(np.prod(w_shape[1:]))
        if init.scheme == "xavier":
            w = xavier_init(w_shape, fan_in, rng)
        else:
            w = sparse_init(w_shape, init.k, rng)
        params.append(LayerParams(w.astype(dtype), np.zeros(b_shape, dtype=dtype)))
    return params


def build_conv_ae(config: ArchConfig, init: InitSpec | None = None, rng_seed: int = 0, dtype=np.float64) -> Autoencoder:
    if config.kind != "conv_ae":
        raise ArchError(f"expected a conv_ae config, got {config.kind}")
    validate_config(config)
    init = init or InitSpec("xavier")
    config = replace(config, seed=int(rng_seed), init=asdict(init))
    return Autoencoder(config, _init_params(config, init, rng_seed, dtype))


def default_fc_init(config: ArchConfig) -> InitSpec:
    """Sparse init with k=15, capped at the narrowest fan-in of the stack."""
    min_fan_in = min(d["in"] for d in config.layers if d["type"] == "fc")
    return InitSpec("sparse_gaussian", k=min(15, min_fan_in))


def build_fc_ae(config: ArchConfig, init: InitSpec | None = None, rng_seed: int = 0, dtype=np.float64) -> Autoencoder:
    if config.kind != "fc_ae":
        raise ArchError(f"expected an fc_ae config, got {config.kind}")
    validate_config(config)
    init = init or default_fc_init(config)
    config = replace(config, seed=int(rng_seed), init=asdict(init))
    return Autoencoder(config, _init_params(config, init, rng_seed, dtype))


def build_model(config: ArchConfig, init: InitSpec | None = None, rng_seed: int = 0, dtype=np.float64) -> Autoencoder:
    builder = build_conv_ae if config.kind == "conv_ae" else build_fc_ae
    return builder(config, init, rng_seed, dtype)


# -- checkpoints ---------------------------------------------------------------

def checkpoint_bytes(model: Autoencoder) -> bytes:
    header = model.config.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header)), header]
    for p in model.params:
        if p is None:
            continue
        parts.append(np.ascontiguousarray(p.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(p.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Autoencoder, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_from_bytes(buf: bytes, dtype=np.float64) -> Autoencoder:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise FormatError("not a TRAE checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    try:
        cfg = ArchConfig.from_dict(json.loads(buf[16 : 16 + hlen].decode("utf-8")))
        validate_config(cfg)
    except (KeyError, ValueError, TypeError, ArchError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    offset = 16 + hlen
    params: list[LayerParams | None] = []
    for layer in make_layers(cfg):
        if not layer.has_params:
            params.append(None)
            continue
        arrays = []
        for shape in layer.param_shapes():
            n = int(np.prod(shape))
            if offset + 4 * n > len(buf):
                raise FormatError("truncated checkpoint")
            arrays.append(np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(shape).astype(dtype))
            offset += 4 * n
        params.append(LayerParams(*arrays))
    if offset != len(buf):
        raise FormatError("trailing bytes after checkpoint payload")
    return Autoencoder(cfg, params)


def load_checkpoint(path, dtype=np.float64) -> Autoencoder:
    return checkpoint_from_bytes(Path(path).read_bytes(), dtype)
