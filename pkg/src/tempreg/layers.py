"""Forward and backward passes for the layer types used by both autoencoders.

Every function accepts a single sample (``[C, H, W]`` / ``[n]``) or a batch
with a leading axis (``[N, C, H, W]`` / ``[N, n]``) and returns the same rank.
Convolution is cross-correlation (no kernel flip). Conv weights are laid out
``[out, in, kh, kw]``; deconv weights ``[in, out, kh, kw]`` so that a deconv
layer sharing a conv's tensor computes exactly that conv's input gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import CropUnderflow, ShapeMismatch, StaleCache, SwitchMismatch


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or self.stride < 1 or self.pad < 0:
            raise ShapeMismatch(f"invalid conv spec {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeMismatch(f"invalid channel counts in {self}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ho = (h + 2 * self.pad - kh) // self.stride + 1
        wo = (w + 2 * self.pad - kw) // self.stride + 1
        if h + 2 * self.pad < kh or w + 2 * self.pad < kw or ho < 1 or wo < 1:
            raise ShapeMismatch(f"input {h}x{w} too small for {self}")
        return ho, wo

    def full_deconv_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        return (h - 1) * self.stride + kh, (w - 1) * self.stride + kw


@dataclass
class PoolRecord:
    """Switches are flat indices into the pooled input array itself."""

    switches: np.ndarray
    pre_pool_shape: tuple[int, ...]


@dataclass
class LayerParams:
    weights: np.ndarray
    bias: np.ndarray


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeMismatch(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def _unbatch(y: np.ndarray, single: bool) -> np.ndarray:
    return y[0] if single else y


def _windows(xp: np.ndarray, kernel: tuple[int, int], stride: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Strided view ``[N, C, Ho, Wo, kh, kw]`` over a padded batch."""
    win = sliding_window_view(xp, kernel, axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, : out_hw[0], : out_hw[1]]


def _scatter(cols: np.ndarray, out: np.ndarray, stride: int) -> None:
    """Accumulate ``cols[N, C, kh, kw, H, W]`` into ``out[N, C, Hf, Wf]`` in place."""
    _, _, kh, kw, h, w = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride] += cols[:, :, i, j]


def _columns(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``cols[n, c, i, j, h, w] = sum_o x[n, o, h, w] * weights[o, c, i, j]``."""
    n, o, h, w = x.shape
    wm = weights.reshape(o, -1).T
    cols = np.matmul(wm, x.reshape(n, o, h * w))
    return cols.reshape(n, *weights.shape[1:], h, w)


def _check_conv_input(x: np.ndarray, spec: ConvSpec, params: LayerParams) -> None:
    if x.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    expected = (spec.out_channels, spec.in_channels, *spec.kernel)
    if params.weights.shape != expected:
        raise ShapeMismatch(f"conv weights {params.weights.shape}, expected {expected}")


# -- convolution -------------------------------------------------------------

def _im2col(xb: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, tuple[int, int]]:
    """Contiguous patch matrix ``[N, C*kh*kw, Ho*Wo]``."""
    ho, wo = spec.out_size(*xb.shape[2:])
    p = spec.pad
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    win = _windows(xp, spec.kernel, spec.stride, (ho, wo))
    n, c = xb.shape[:2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * spec.kernel[0] * spec.kernel[1], ho * wo)
    return cols, (ho, wo)


def _conv_cols(xb: np.ndarray, spec: ConvSpec, params: LayerParams) -> tuple[np.ndarray, np.ndarray]:
    _check_conv_input(xb, spec, params)
    cols, (ho, wo) = _im2col(xb, spec)
    y = np.matmul(params.weights.reshape(spec.out_channels, -1), cols)
    y = y.reshape(xb.shape[0], spec.out_channels, ho, wo) + params.bias[None, :, None, None]
    return y, cols


def conv_forward(x: np.ndarray, spec: ConvSpec, params: LayerParams) -> np.ndarray:
    xb, single = _as_batch(x, 3)
    return _unbatch(_conv_cols(xb, spec, params)[0], single)


def conv_input_backward(grad: np.ndarray, spec: ConvSpec, weights: np.ndarray, in_hw: tuple[int, int]) -> np.ndarray:
    """Gradient of a conv w.r.t. its input, i.e. the adjoint of the bias-free conv."""
    gb, single = _as_batch(grad, 3)
    h, w = in_hw
    p = spec.pad
    out = np.zeros((gb.shape[0], spec.in_channels, h + 2 * p, w + 2 * p), dtype=np.result_type(gb, weights))
    _scatter(_columns(gb, weights), out, spec.stride)
    if p:
        out = out[:, :, p : p + h, p : p + w]
    return _unbatch(np.ascontiguousarray(out), single)


def conv_backward(
    x: np.ndarray, spec: ConvSpec, params: LayerParams, grad: np.ndarray, cols: np.ndarray | None = None
) -> tuple[np.ndarray, LayerParams]:
    """``cols`` may carry the patch matrix from the forward pass to skip rebuilding it."""
    xb, single = _as_batch(x, 3)
    gb, _ = _as_batch(grad, 3)
    ho, wo = spec.out_size(*xb.shape[2:])
    if gb.shape != (xb.shape[0], spec.out_channels, ho, wo):
        raise ShapeMismatch(f"grad shape {gb.shape} does not match conv output")
    if cols is None:
        cols, _ = _im2col(xb, spec)
    g2 = gb.reshape(gb.shape[0], spec.out_channels, ho * wo)
    dw = np.einsum("nok,nck->oc", g2, cols, optimize=True).reshape(params.weights.shape)
    db = gb.sum(axis=(0, 2, 3))
    dx = conv_input_backward(gb, spec, params.weights, xb.shape[2:])
    return _unbatch(dx, single), LayerParams(dw, db)


# -- deconvolution -----------------------------------------------------------

def crop_offsets(full: int, target: int) -> tuple[int, int]:
    if target > full:
        raise CropUnderflow(f"target {target} exceeds full deconv output {full}")
    excess = full - target
    return excess // 2, excess - excess // 2


def deconv_forward(x: np.ndarray, spec: ConvSpec, params: LayerParams, target: tuple[int, int]) -> np.ndarray:
    """Transposed convolution, center-cropped to ``target`` (floor left, ceil right)."""
    xb, single = _as_batch(x, 3)
    if xb.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"input has {xb.shape[1]} channels, spec expects {spec.in_channels}")
    expected = (spec.in_channels, spec.out_channels, *spec.kernel)
    if params.weights.shape != expected:
        raise ShapeMismatch(f"deconv weights {params.weights.shape}, expected {expected}")
    fh, fw = spec.full_deconv_size(*xb.shape[2:])
    top, _ = crop_offsets(fh, target[0])
    left, _ = crop_offsets(fw, target[1])
    full = np.zeros((xb.shape[0], spec.out_channels, fh, fw), dtype=np.result_type(xb, params.weights))
    _scatter(_columns(xb, params.weights), full, spec.stride)
    y = full[:, :, top : top + target[0], left : left + target[1]] + params.bias[None, :, None, None]
    return _unbatch(np.ascontiguousarray(y), single)


def deconv_backward(
    x: np.ndarray, spec: ConvSpec, params: LayerParams, target: tuple[int, int], grad: np.ndarray
) -> tuple[np.ndarray, LayerParams]:
    xb, single = _as_batch(x, 3)
    gb, _ = _as_batch(grad, 3)
    if gb.shape != (xb.shape[0], spec.out_channels, *target):
        raise ShapeMismatch(f"grad shape {gb.shape} does not match deconv output")
    h, w = xb.shape[2:]
    fh, fw = spec.full_deconv_size(h, w)
    top, _ = crop_offsets(fh, target[0])
    left, _ = crop_offsets(fw, target[1])
    gfull = np.zeros((gb.shape[0], spec.out_channels, fh, fw), dtype=gb.dtype)
    gfull[:, :, top : top + target[0], left : left + target[1]] = gb
    # one patch matrix [N, O*kh*kw, h*w] serves both gradients
    win = _windows(gfull, spec.kernel, spec.stride, (h, w))
    n = xb.shape[0]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, -1, h * w)
    wm = params.weights.reshape(spec.in_channels, -1)
    dx = np.matmul(wm, cols).reshape(n, spec.in_channels, h, w)
    dw = np.einsum("nck,nmk->cm", xb.reshape(n, spec.in_channels, h * w), cols, optimize=True)
    db = gb.sum(axis=(0, 2, 3))
    return _unbatch(dx, single), LayerParams(dw.reshape(params.weights.shape), db)


# -- pooling -----------------------------------------------------------------

def maxpool_forward(x: np.ndarray) -> tuple[np.ndarray, PoolRecord]:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties resolve to the first maximum in row-major order within the window.
    """
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeMismatch(f"cannot 2x2-pool shape {x.shape}")
    h, w = x.shape[-2:]
    ho, wo = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    lead = x.shape[:-2]
    blocks = x[..., : 2 * ho, : 2 * wo].reshape(*lead, ho, 2, wo, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, ho, wo, 4)
    arg = np.argmax(blocks, axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(ho)[:, None] + arg // 2
    cols = 2 * np.arange(wo)[None, :] + arg % 2
    lead_idx = np.indices(lead, sparse=True) if lead else ()
    lead_idx = tuple(i[..., None, None] for i in lead_idx)
    switches = np.ravel_multi_index((*lead_idx, rows, cols), x.shape)
    return y, PoolRecord(np.broadcast_to(switches, y.shape).copy(), tuple(x.shape))


def maxpool_backward(record: PoolRecord, grad: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad)
    if grad.shape != record.switches.shape:
        raise SwitchMismatch(f"grad {grad.shape} vs pooled shape {record.switches.shape}")
    out = np.zeros(int(np.prod(record.pre_pool_shape)), dtype=grad.dtype)
    out[record.switches.ravel()] = grad.ravel()
    return out.reshape(record.pre_pool_shape)


def unpool_forward(x: np.ndarray, record: PoolRecord) -> np.ndarray:
    """Place each pooled value back at its recorded switch; zeros elsewhere."""
    x = np.asarray(x)
    if x.shape != record.switches.shape:
        raise SwitchMismatch(f"input {x.shape} vs pooled shape {record.switches.shape}")
    return maxpool_backward(record, x)


def unpool_backward(record: PoolRecord, grad: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad)
    if grad.shape != tuple(record.pre_pool_shape):
        raise SwitchMismatch(f"grad {grad.shape} vs pre-pool shape {record.pre_pool_shape}")
    return grad.ravel()[record.switches.ravel()].reshape(record.switches.shape)


# -- fully connected ---------------------------------------------------------

def fc_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    xb, single = _as_batch(x, 1)
    if xb.shape[1] != params.weights.shape[1]:
        raise ShapeMismatch(f"input width {xb.shape[1]} vs weights {params.weights.shape}")
    return _unbatch(xb @ params.weights.T + params.bias, single)


def fc_backward(x: np.ndarray, params: LayerParams, grad: np.ndarray) -> tuple[np.ndarray, LayerParams]:
    xb, single = _as_batch(x, 1)
    gb, _ = _as_batch(grad, 1)
    if gb.shape != (xb.shape[0], params.weights.shape[0]):
        raise ShapeMismatch(f"grad shape {gb.shape} does not match fc output")
    return _unbatch(gb @ params.weights, single), LayerParams(gb.T @ xb, gb.sum(axis=0))


# -- activations -------------------------------------------------------------

ACTIVATIONS = ("sigmoid", "tanh")


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return expit(x)
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def activate_backward(y: np.ndarray, kind: str, grad: np.ndarray) -> np.ndarray:
    """Backward from the activation *output* ``y``."""
    if kind == "sigmoid":
        return grad * y * (1.0 - y)
    if kind == "tanh":
        return grad * (1.0 - y * y)
    raise ValueError(f"unknown activation {kind!r}")


# -- layer objects used by the model graph -----------------------------------

@dataclass
class Cache:
    """State saved by one forward call; consumed once by the matching backward."""

    layer: Any
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    record: PoolRecord | None = None
    extra: dict = field(default_factory=dict)


class Layer:
    has_params = False

    def forward(self, x, params=None, record=None):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, cache: Cache, grad, params=None):  # pragma: no cover - interface
        raise NotImplementedError

    def _check(self, cache):
        if cache is None or cache.layer is not self:
            raise StaleCache(f"no forward cache for {self!r}")


class Conv(Layer):
    has_params = True

    def __init__(self, spec: ConvSpec):
        self.spec = spec

    def param_shapes(self):
        s = self.spec
        return (s.out_channels, s.in_channels, *s.kernel), (s.out_channels,)

    def forward(self, x, params=None, record=None):
        xb, single = _as_batch(x, 3)
        y, cols = _conv_cols(xb, self.spec, params)
        return _unbatch(y, single), Cache(self, x=x, extra={"cols": cols})

    def backward(self, cache, grad, params=None):
        self._check(cache)
        return conv_backward(cache.x, self.spec, params, grad, cache.extra.get("cols"))

    def __repr__(self):
        return f"Conv({self.spec})"


class Deconv(Layer):
    has_params = True

    def __init__(self, spec: ConvSpec, target: tuple[int, int]):
        self.spec = spec
        self.target = tuple(target)

    def param_shapes(self):
        s = self.spec
        return (s.in_channels, s.out_channels, *s.kernel), (s.out_channels,)

    def forward(self, x, params=None, record=None):
        return deconv_forward(x, self.spec, params, self.target), Cache(self, x=x)

    def backward(self, cache, grad, params=None):
        self._check(cache)
        return deconv_backward(cache.x, self.spec, params, self.target, grad)

    def __repr__(self):
        return f"Deconv({self.spec}, target={self.target})"


class MaxPool(Layer):
    def forward(self, x, params=None, record=None):
        y, rec = maxpool_forward(x)
        return y, Cache(self, record=rec)

    def backward(self, cache, grad, params=None):
        self._check(cache)
        return maxpool_backward(cache.record, grad), None


class Unpool(Layer):
    def forward(self, x, params=None, record=None):
        if record is None:
            raise SwitchMismatch("unpool needs the record of its matching pool")
        return unpool_forward(x, record), Cache(self, record=record)

    def backward(self, cache, grad, params=None):
        self._check(cache)
        return unpool_backward(cache.record, grad), None


class Dense(Layer):
    has_params = True

    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out

    def param_shapes(self):
        return (self.n_out, self.n_in), (self.n_out,)

    def forward(self, x, params=None, record=None):
        return fc_forward(x, params), Cache(self, x=x)

    def backward(self, cache, grad, params=None):
        self._check(cache)
        return fc_backward(cache.x, params, grad)


class Activation(Layer):
    def __init__(self, kind: str):
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x, params=None, record=None):
        y = activate(x, self.kind)
        return y, Cache(self, y=y)

    def backward(self, cache, grad, params=None):
        self._check(cache)
        return activate_backward(cache.y, self.kind, grad), None


def layer_backward(layer: Layer, cache: Cache | None, grad_out: np.ndarray, params: LayerParams | None = None):
    """Return ``(grad_in, param_grads)``; ``param_grads`` is None for parameter-free layers."""
    if cache is None:
        raise StaleCache(f"no forward cache for {layer!r}")
    return layer.backward(cache, grad_out, params)
