"""Tiny fully-convolutional descriptor extractor and multi-scale pyramid."""

from __future__ import annotations

import itertools
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics
from .data import rescale_image
from .numerics import BatchNormState, ShapeError


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel_size: int
    stride: int
    in_channels: int
    out_channels: int
    has_bias: bool = True
    relu: bool = True

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid conv layer {self}")


@dataclass(frozen=True)
class FcnTopology:
    layers: tuple[ConvLayerSpec, ...]
    normalize_descriptors: bool = False
    batch_norm_before_head: bool = True

    def __post_init__(self):
        if not self.layers:
            raise ValueError("topology needs at least one conv layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError(
                    f"channel mismatch: layer emits {prev.out_channels}, next expects {nxt.in_channels}"
                )
        if self.descriptor_dim < 2:
            raise ValueError("descriptor dimension must be >= 2")

    @property
    def descriptor_dim(self) -> int:
        return self.layers[-1].out_channels

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    def to_spec_string(self) -> str:
        return ",".join(f"{l.kernel_size}x{l.out_channels}s{l.stride}" for l in self.layers)

    @classmethod
    def from_spec_string(
        cls, text: str, in_channels: int = 3, normalize: bool = False, batch_norm: bool = True
    ) -> FcnTopology:
        """Parse ``"5x16s2,3x32s2,3x64s1"``: ReLU after every layer except the last."""
        parts = [p.strip() for p in text.split(",") if p.strip()]
        layers = []
        c = in_channels
        for i, part in enumerate(parts):
            try:
                ks, rest = part.split("x")
                oc, st = rest.split("s")
                k, o, s = int(ks), int(oc), int(st)
            except ValueError:
                raise ValueError(f"bad layer spec {part!r}; expected <k>x<channels>s<stride>") from None
            layers.append(ConvLayerSpec(k, s, c, o, True, i < len(parts) - 1))
            c = o
        return cls(tuple(layers), normalize, batch_norm)


def default_topology(in_channels: int = 3, descriptor_dim: int = 64, **flags) -> FcnTopology:
    return FcnTopology(
        (
            ConvLayerSpec(5, 2, in_channels, 16),
            ConvLayerSpec(3, 2, 16, 32),
            ConvLayerSpec(3, 1, 32, descriptor_dim, relu=False),
        ),
        **flags,
    )


# ---------------------------------------------------------------------------
# shape arithmetic
# ---------------------------------------------------------------------------


def receptive_field(topology: FcnTopology) -> tuple[int, int]:
    """``(rf, jump)`` of one output cell, in input pixels."""
    rf, jump = 1, 1
    for layer in topology.layers:
        rf += (layer.kernel_size - 1) * jump
        jump *= layer.stride
    return rf, jump


def grid_size(topology: FcnTopology, height: int, width: int) -> tuple[int, int]:
    """Output grid dims for an input resolution."""
    h, w = height, width
    for layer in topology.layers:
        if h < layer.kernel_size or w < layer.kernel_size:
            rf, _ = receptive_field(topology)
            raise ShapeError(
                f"input {height}x{width} is too small for this topology; minimum input size is {rf}x{rf}"
            )
        h = (h - layer.kernel_size) // layer.stride + 1
        w = (w - layer.kernel_size) // layer.stride + 1
    return h, w


def eta(topology: FcnTopology, height: int, width: int | None = None) -> int:
    """Number of descriptors produced for an input of the given resolution."""
    h, w = grid_size(topology, height, height if width is None else width)
    return h * w


def resolution_for_grid(topology: FcnTopology, side: int) -> int:
    """Smallest square input resolution whose output grid has ``side`` cells per axis."""
    if side < 1:
        raise ValueError(f"grid side must be >= 1, got {side}")
    size = side
    for layer in reversed(topology.layers):
        size = (size - 1) * layer.stride + layer.kernel_size
    return size


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalePyramidConfig:
    """Square input resolutions ``round(base_resolution * factor)`` per scale.

    ``interpolation="nearest"`` first resizes to the base resolution and
    then replicates pixels, so it requires integer factors.
    """

    factors: tuple[float, ...] = (1.0, 1.5, 2.0)
    base_resolution: int = 48
    interpolation: str = "bilinear"

    def __post_init__(self):
        if not self.factors:
            raise ValueError("pyramid needs at least one scale")
        if any(f <= 0 for f in self.factors):
            raise ValueError(f"scale factors must be positive, got {self.factors}")
        if any(b <= a for a, b in zip(self.factors, self.factors[1:])):
            raise ValueError(f"scale factors must be strictly increasing, got {self.factors}")
        if self.base_resolution < 1:
            raise ValueError("base_resolution must be >= 1")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if self.interpolation == "nearest" and any(f != int(f) for f in self.factors):
            raise ValueError("nearest-neighbour pyramid needs integer factors")

    @property
    def m(self) -> int:
        return len(self.factors)

    def resolutions(self) -> list[int]:
        return [int(round(self.base_resolution * f)) for f in self.factors]

    def validate_for(self, topology: FcnTopology) -> None:
        rf, _ = receptive_field(topology)
        for r in self.resolutions():
            if r < rf:
                raise ShapeError(f"pyramid resolution {r} is below the receptive field {rf}")


@dataclass
class FcnModel:
    topology: FcnTopology
    weights: list[np.ndarray]
    biases: list[np.ndarray | None]
    pyramid: ScalePyramidConfig = field(default_factory=ScalePyramidConfig)
    bn: BatchNormState | None = None
    trainable: list[bool] | None = None

    def __post_init__(self):
        if self.trainable is None:
            self.trainable = [True] * len(self.topology.layers)
        for i, (spec, w, b) in enumerate(zip(self.topology.layers, self.weights, self.biases)):
            shape = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size)
            if w.shape != shape:
                raise ShapeError(f"conv{i}.weight has dims {w.shape}, topology expects {shape}")
            if spec.has_bias and (b is None or b.shape != (spec.out_channels,)):
                raise ShapeError(f"conv{i}.bias must be ({spec.out_channels},)")
        if self.topology.batch_norm_before_head and self.bn is None:
            self.bn = BatchNormState.create(self.topology.descriptor_dim, self.dtype)

    @classmethod
    def init(
        cls,
        topology: FcnTopology,
        rng: np.random.Generator,
        pyramid: ScalePyramidConfig | None = None,
        dtype=np.float32,
    ) -> FcnModel:
        """He-normal weights, zero biases."""
        weights, biases = [], []
        for spec in topology.layers:
            fan_in = spec.in_channels * spec.kernel_size**2
            shape = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size)
            weights.append((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype))
            biases.append(np.zeros(spec.out_channels, dtype=dtype) if spec.has_bias else None)
        pyramid = pyramid or ScalePyramidConfig()
        pyramid.validate_for(topology)
        return cls(topology, weights, biases, pyramid)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def set_trainable_last(self, n: int | None) -> None:
        """Train only the last ``n`` conv layers (``None``: all)."""
        L = len(self.topology.layers)
        n = L if n is None else max(0, min(n, L))
        self.trainable = [i >= L - n for i in range(L)]

    def parameters(self) -> dict[str, np.ndarray]:
        """Named learnable tensors (views, not copies)."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"fcn.conv{i}.weight"] = w
            if b is not None:
                out[f"fcn.conv{i}.bias"] = b
        if self.bn is not None:
            out["fcn.bn.gamma"] = self.bn.gamma
            out["fcn.bn.beta"] = self.bn.beta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        if self.bn is None:
            return {}
        return {"fcn.bn.running_mean": self.bn.running_mean, "fcn.bn.running_var": self.bn.running_var}

    def is_trainable(self, name: str) -> bool:
        if name.startswith("fcn.bn."):
            return any(self.trainable)
        layer = int(name.split(".")[1][len("conv") :])
        return self.trainable[layer]

    def copy(self) -> FcnModel:
        return FcnModel(
            self.topology,
            [w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            self.pyramid,
            None if self.bn is None else self.bn.copy(),
            list(self.trainable),
        )

    def astype(self, dtype) -> FcnModel:
        m = self.copy()
        m.weights = [w.astype(dtype) for w in m.weights]
        m.biases = [None if b is None else b.astype(dtype) for b in m.biases]
        if m.bn is not None:
            for name in ("gamma", "beta", "running_mean", "running_var"):
                setattr(m.bn, name, getattr(m.bn, name).astype(dtype))
        return m


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class FcnCache:
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    grid: tuple[int, int, int]  # (N, h, w)
    bn_cache: numerics.BatchNormCache | None
    raw_norms: np.ndarray | None
    normalized: np.ndarray | None


def fcn_forward(model: FcnModel, images: np.ndarray, train: bool = False) -> tuple[np.ndarray, FcnCache]:
    """Descriptor grid for ``(C,H,W)`` or ``(N,C,H,W)`` input.

    Returns ``(N, h, w, D)`` descriptors (``N`` dropped for unbatched input)
    and the cache needed by :func:`fcn_backward`. Batch norm, when enabled,
    pools statistics over every grid cell of every image in the call.
    """
    x = np.asarray(images)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != model.topology.in_channels:
        raise ShapeError(
            f"expected (N, {model.topology.in_channels}, H, W) input, got dims {np.asarray(images).shape}"
        )
    grid_size(model.topology, x.shape[2], x.shape[3])
    x = x.astype(model.dtype, copy=False)
    inputs, pre = [], []
    for spec, w, b in zip(model.topology.layers, model.weights, model.biases):
        inputs.append(x)
        x = numerics.conv2d(x, w, b, spec.stride)
        pre.append(x)
        if spec.relu:
            x = numerics.relu(x)
    n, d, h, w_ = x.shape
    z = x.transpose(0, 2, 3, 1).reshape(n * h * w_, d)
    bn_cache = None
    if model.topology.batch_norm_before_head:
        z, bn_cache = numerics.batch_norm(z, model.bn, "train" if train else "infer")
    raw_norms = normalized = None
    if model.topology.normalize_descriptors:
        raw_norms = np.linalg.norm(z, axis=1, keepdims=True)
        ok = raw_norms >= 1e-12
        z = np.where(ok, z / np.where(ok, raw_norms, 1.0), 0.0).astype(model.dtype, copy=False)
        normalized = z
    out = z.reshape(n, h, w_, d)
    cache = FcnCache(inputs, pre, (n, h, w_), bn_cache, raw_norms, normalized)
    return (out[0] if squeeze else out), cache


def fcn_backward(model: FcnModel, grad: np.ndarray, cache: FcnCache | None) -> dict[str, np.ndarray]:
    """Parameter gradients for upstream descriptor gradients ``grad``.

    Layers outside the trainable mask get zero gradients; backpropagation
    stops below the lowest trainable layer.
    """
    if cache is None:
        raise ValueError("fcn_backward called without a forward cache")
    grads = {name: np.zeros_like(p) for name, p in model.parameters().items()}
    g, bn_grads = _head_backward(model, grad, cache)
    if bn_grads is not None and any(model.trainable):
        grads["fcn.bn.gamma"], grads["fcn.bn.beta"] = bn_grads
    lowest = next((i for i, t in enumerate(model.trainable) if t), None)
    if lowest is None:
        return grads
    layers = model.topology.layers
    for i in range(len(layers) - 1, lowest - 1, -1):
        spec = layers[i]
        if spec.relu:
            g = numerics.relu_backward(g, cache.pre_activations[i])
        need_input = i > lowest
        gx, gw, gb = _conv_backward(g, cache.inputs[i], model.weights[i], spec.stride, need_input)
        if model.trainable[i]:
            grads[f"fcn.conv{i}.weight"] = gw.astype(model.dtype, copy=False)
            if spec.has_bias:
                grads[f"fcn.conv{i}.bias"] = gb.astype(model.dtype, copy=False)
        g = gx
    return grads


def _conv_backward(g, x, w, stride, need_input):
    if need_input:
        return numerics.conv2d_backward(g, x, w, stride)
    win = np.lib.stride_tricks.sliding_window_view(x, w.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    return None, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])), g.sum(axis=(0, 2, 3))


def _head_backward(model: FcnModel, grad: np.ndarray, cache: FcnCache):
    """Undo L2 normalization and batch norm; returns ``(N, D, h, w)`` grads and BN grads."""
    n, h, w_ = cache.grid
    d = model.topology.descriptor_dim
    g = np.asarray(grad).reshape(n * h * w_, d)
    if cache.normalized is not None:
        z = cache.normalized
        ok = cache.raw_norms >= 1e-12
        radial = (g * z).sum(axis=1, keepdims=True)
        g = np.where(ok, (g - z * radial) / np.where(ok, cache.raw_norms, 1.0), 0.0)
    bn_grads = None
    if cache.bn_cache is not None:
        g, gg, gb = numerics.batch_norm_backward(g, cache.bn_cache)
        bn_grads = (gg, gb)
    return g.reshape(n, h, w_, d).transpose(0, 3, 1, 2), bn_grads


def fcn_input_gradient(model: FcnModel, grad: np.ndarray, cache: FcnCache) -> np.ndarray:
    """Gradient with respect to the input images, ignoring the trainable mask."""
    g, _ = _head_backward(model, grad, cache)
    for i in range(len(model.topology.layers) - 1, -1, -1):
        spec = model.topology.layers[i]
        if spec.relu:
            g = numerics.relu_backward(g, cache.pre_activations[i])
        g = numerics.conv2d_backward(g, cache.inputs[i], model.weights[i], spec.stride)[0]
    return g


# ---------------------------------------------------------------------------
# multi-scale
# ---------------------------------------------------------------------------


def to_chw(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1))


def scale_pyramid(
    image: np.ndarray, cfg: ScalePyramidConfig, topology: FcnTopology | None = None
) -> list[np.ndarray]:
    """The image resized to each pyramid resolution, as ``(H, W, C)`` arrays."""
    if topology is not None:
        cfg.validate_for(topology)
    if cfg.interpolation == "nearest":
        base = rescale_image(image, size=(cfg.base_resolution, cfg.base_resolution))
        chw = to_chw(base)
        return [numerics.upsample_nearest(chw, int(f)).transpose(1, 2, 0) for f in cfg.factors]
    return [rescale_image(image, size=(r, r)) for r in cfg.resolutions()]


def pyramid_batch(images: Sequence[np.ndarray], model: FcnModel) -> list[np.ndarray]:
    """Stack the pyramids of several images: one ``(N, C, H_s, W_s)`` array per scale."""
    model.pyramid.validate_for(model.topology)
    per_image = [scale_pyramid(img, model.pyramid) for img in images]
    return [np.stack([to_chw(p[s]) for p in per_image]).astype(model.dtype) for s in range(model.pyramid.m)]


def multiscale_forward(
    model: FcnModel, scaled: Sequence[np.ndarray], train: bool = False
) -> tuple[list[np.ndarray], list[FcnCache]]:
    """Descriptors per scale as ``(N, eta_s, D)`` for pre-scaled batches."""
    outs, caches = [], []
    for x in scaled:
        desc, cache = fcn_forward(model, x, train=train)
        n, h, w_, d = desc.shape
        outs.append(desc.reshape(n, h * w_, d))
        caches.append(cache)
    return outs, caches


def multiscale_descriptors(model: FcnModel, image: np.ndarray) -> list[np.ndarray]:
    """Inference-mode descriptors of one ``(H, W, C)`` image: ``[(eta_s, D), ...]``."""
    outs, _ = multiscale_forward(model, pyramid_batch([image], model), train=False)
    return [o[0] for o in outs]


def closest_pyramid(topology: FcnTopology, count: int, max_scales: int = 3, max_side: int = 16) -> list[int]:
    """Grid sides of at most ``max_scales`` distinct scales whose total is closest to ``count``.

    Ties prefer the smallest largest grid, then fewer scales. Returns the
    sides in increasing order.
    """
    best = None
    for m in range(1, max_scales + 1):
        for sides in itertools.combinations(range(1, max_side + 1), m):
            key = (abs(sum(s * s for s in sides) - count), max(sides), m)
            if best is None or key < best[0]:
                best = (key, list(sides))
    return best[1]


def with_pyramid(model: FcnModel, pyramid: ScalePyramidConfig) -> FcnModel:
    """Shallow copy of ``model`` that shares weights but uses another pyramid."""
    return replace(model, pyramid=pyramid)
