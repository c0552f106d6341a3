"""Dense f64 compute engine with hand-written reverse-mode gradients.

Only a fixed vocabulary of layers is supported (affine, conv2d, relu,
flatten, avgpool2d); networks are plain feed-forward stacks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .rng import stream

LAYER_KINDS = ("affine", "conv2d", "relu", "flatten", "avgpool2d")
PARAM_KINDS = ("affine", "conv2d")


class ShapeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, batch_index: int, value: float):
        super().__init__(f"non-finite loss {value!r} at batch index {batch_index}")
        self.batch_index = batch_index
        self.value = value


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = (0, 0)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "affine" and (self.in_features < 1 or self.out_features < 1):
            raise ValueError("affine needs positive in/out features")
        if self.kind == "conv2d":
            if self.in_channels < 1 or self.out_channels < 1 or min(self.kernel) < 1:
                raise ValueError("conv2d needs positive channels and kernel dims")
        if self.kind in ("conv2d", "avgpool2d"):
            if min(self.kernel) < 1 or self.stride < 1 or self.padding < 0:
                raise ValueError(f"{self.kind}: kernel >= 1, stride >= 1, padding >= 0")

    @property
    def parameterized(self) -> bool:
        return self.kind in PARAM_KINDS

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "affine":
            return (self.out_features, self.in_features)
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, *self.kernel)
        raise ValueError(f"{self.kind} has no weight")

    def output_shape(self, in_shape: tuple) -> tuple:
        """Per-sample output shape, or ShapeError if ``in_shape`` does not fit."""
        if self.kind == "affine":
            if tuple(in_shape) != (self.in_features,):
                raise ShapeError(f"expected {(self.in_features,)}, got {tuple(in_shape)}")
            return (self.out_features,)
        if self.kind == "relu":
            return tuple(in_shape)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        if len(in_shape) != 3:
            raise ShapeError(f"expected (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        kh, kw = self.kernel
        if self.kind == "conv2d":
            if c != self.in_channels:
                raise ShapeError(f"expected {self.in_channels} channels, got {c}")
            ho = (h + 2 * self.padding - kh) // self.stride + 1
            wo = (w + 2 * self.padding - kw) // self.stride + 1
            if ho < 1 or wo < 1:
                raise ShapeError(f"kernel {self.kernel} larger than padded input {(h, w)}")
            return (self.out_channels, ho, wo)
        # avgpool2d: non-overlapping windows
        if h % kh or w % kw:
            raise ShapeError(f"avgpool {self.kernel} does not tile input {(h, w)}")
        return (c, h // kh, w // kw)


def affine(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("affine", in_features=in_features, out_features=out_features)


def conv2d(in_channels, out_channels, kernel=3, stride=1, padding=0) -> LayerSpec:
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel=tuple(kernel), stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def avgpool2d(kernel=2) -> LayerSpec:
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    return LayerSpec("avgpool2d", kernel=tuple(kernel), stride=kernel[0])


def mlp(sizes: Sequence[int]) -> list:
    """Affine/ReLU stack, e.g. ``mlp([784, 300, 100, 10])``."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(affine(a, b))
        if i < len(sizes) - 2:
            layers.append(relu())
    return layers


@dataclass
class MaskedParam:
    """A weight tensor with a same-shape binary mask.

    ``weight`` is kept at exactly zero wherever ``mask`` is False.
    ``retained`` is only used by mask-only (keep-values) pruning and holds
    the frozen values of masked-out weights.
    """

    weight: np.ndarray
    mask: np.ndarray
    layer_id: str
    prunable: bool = True
    grad: Optional[np.ndarray] = None
    retained: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.weight.shape:
            raise ShapeError(f"{self.layer_id}: mask {self.mask.shape} vs weight {self.weight.shape}")

    @property
    def numel(self) -> int:
        return self.weight.size

    @property
    def nnz(self) -> int:
        return int(self.mask.sum())

    @property
    def density(self) -> float:
        return self.nnz / self.numel

    def apply_mask(self):
        self.weight[~self.mask] = 0.0


@dataclass
class Network:
    input_shape: tuple
    layers: list
    params: dict = field(default_factory=dict)  # layer index -> MaskedParam
    biases: dict = field(default_factory=dict)  # layer index -> ndarray
    bias_grads: dict = field(default_factory=dict)
    shapes: list = field(default_factory=list)  # per-layer input shape; last entry = output

    @classmethod
    def build(cls, input_shape, layers, seed: int = 0) -> "Network":
        net = cls(tuple(input_shape), list(layers))
        net.shapes = check_layers(net.input_shape, net.layers)
        rng = stream(seed, "init")
        for i, spec in enumerate(net.layers):
            if spec.parameterized:
                shape = spec.weight_shape
                w = kaiming_normal(shape, rng)
                net.params[i] = MaskedParam(w, np.ones(shape, dtype=bool), layer_id=f"{i}:{spec.kind}")
                net.biases[i] = np.zeros(shape[0])
        return net

    @property
    def masked_params(self) -> list:
        return [self.params[i] for i in sorted(self.params)]

    @property
    def prunable_params(self) -> list:
        return [p for p in self.masked_params if p.prunable]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def param_by_id(self, layer_id: str) -> MaskedParam:
        for p in self.masked_params:
            if p.layer_id == layer_id:
                return p
        raise KeyError(layer_id)

    def global_density(self) -> float:
        ps = self.prunable_params
        return sum(p.nnz for p in ps) / sum(p.numel for p in ps)

    def layer_densities(self) -> dict:
        return {p.layer_id: p.density for p in self.masked_params}

    def state(self) -> dict:
        """Deep copy of weights, masks and biases keyed by layer id."""
        out = {}
        for i, p in self.params.items():
            out[p.layer_id] = {"weight": p.weight.copy(), "mask": p.mask.copy(),
                               "bias": self.biases[i].copy()}
        return out

    def load_state(self, state: dict):
        for i, p in self.params.items():
            s = state[p.layer_id]
            p.weight[...] = s["weight"]
            p.mask[...] = s["mask"]
            self.biases[i][...] = s["bias"]
            p.retained = None

    def zero_grads(self):
        for i, p in self.params.items():
            p.grad = None
            self.bias_grads[i] = None


def kaiming_normal(shape, rng) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def check_layers(input_shape, layers) -> list:
    shapes = [tuple(input_shape)]
    for i, spec in enumerate(layers):
        try:
            shapes.append(spec.output_shape(shapes[-1]))
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({spec.kind}): {e}") from None
    if len(shapes[-1]) != 1:
        raise ShapeError(f"network must end in a vector of logits, got {shapes[-1]}")
    return shapes


# conv helpers ---------------------------------------------------------------

def _im2col(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # N, C, Ho, Wo, kh, kw
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, padding, ho, wo):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dx = np.zeros((n, c, hp, wp))
    d = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:padding + h, padding:padding + w]
    return dx


def _layer_forward(spec, x, weight=None, bias=None):
    """Returns (output, cache for backward)."""
    if spec.kind == "affine":
        return x @ weight.T + bias, x
    if spec.kind == "relu":
        return np.maximum(x, 0.0), x > 0
    if spec.kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if spec.kind == "conv2d":
        kh, kw = spec.kernel
        cols, ho, wo = _im2col(x, kh, kw, spec.stride, spec.padding)
        wmat = weight.reshape(weight.shape[0], -1)
        out = np.matmul(wmat, cols) + bias[None, :, None]
        return out.reshape(x.shape[0], weight.shape[0], ho, wo), (cols, x.shape, ho, wo)
    # avgpool2d
    kh, kw = spec.kernel
    n, c, h, w = x.shape
    out = x.reshape(n, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))
    return out, x.shape


def forward(net: Network, batch: np.ndarray, _caches: Optional[list] = None) -> np.ndarray:
    """Logits of shape [batch, classes]. Does not mutate the network."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 1 or tuple(x.shape[1:]) != net.shapes[0]:
        raise ShapeError(f"layer 0 ({net.layers[0].kind if net.layers else 'input'}): expected input "
                         f"[batch, {', '.join(map(str, net.shapes[0]))}], got {list(x.shape)}")
    for i, spec in enumerate(net.layers):
        if spec.parameterized:
            x, cache = _layer_forward(spec, x, net.params[i].weight, net.biases[i])
        else:
            x, cache = _layer_forward(spec, x)
        if _caches is not None:
            _caches.append(cache)
    return x


def softmax_cross_entropy(logits, labels):
    """Per-sample losses and d(mean loss)/d(logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    losses = logsum - z[np.arange(n), labels]
    probs = np.exp(z - logsum[:, None])
    probs[np.arange(n), labels] -= 1.0
    return losses, probs / n


def backward(net: Network, batch, labels) -> float:
    """Mean softmax cross-entropy; fills every parameter's grad buffer.

    Weight gradients are dense: masked-out (zero) positions also receive
    their gradient, which is what gradient-based regrowth ranks on.
    """
    labels = np.asarray(labels, dtype=np.int64)
    caches: list = []
    logits = forward(net, batch, caches)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    losses, d = softmax_cross_entropy(logits, labels)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NonFiniteLossError(int(bad[0]), float(losses[bad[0]]))
    for i in range(len(net.layers) - 1, -1, -1):
        spec, cache = net.layers[i], caches[i]
        if spec.kind == "affine":
            p = net.params[i]
            p.grad = d.T @ cache
            net.bias_grads[i] = d.sum(axis=0)
            d = d @ p.weight
        elif spec.kind == "conv2d":
            p = net.params[i]
            cols, x_shape, ho, wo = cache
            n, cout = d.shape[:2]
            dmat = d.reshape(n, cout, ho * wo)
            p.grad = np.einsum("nol,nkl->ok", dmat, cols).reshape(p.weight.shape)
            net.bias_grads[i] = dmat.sum(axis=(0, 2))
            if i > 0:
                dcols = np.matmul(p.weight.reshape(cout, -1).T, dmat)
                kh, kw = spec.kernel
                d = _col2im(dcols, x_shape, kh, kw, spec.stride, spec.padding, ho, wo)
        elif spec.kind == "relu":
            d = d * cache
        elif spec.kind == "flatten":
            d = d.reshape(cache)
        else:
            kh, kw = spec.kernel
            n, c, h, w = cache
            d = np.repeat(np.repeat(d, kh, axis=2), kw, axis=3) / (kh * kw)
    return float(losses.mean())


def predict(net: Network, x, batch_size: int = 1000) -> np.ndarray:
    out = [forward(net, x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, x, y, batch_size: int = 1000) -> float:
    if len(y) == 0:
        return 0.0
    return float((predict(net, x, batch_size) == np.asarray(y)).mean())
