"""Binary checkpoint format.

Layout: the magic ``FCNBNL1\\n`` followed by records, each
``u32 name length | name (utf-8) | u8 dtype (1=f32, 2=f64) | u8 ndim |
u32 dims... | raw values``, all little-endian. Configuration and metadata
travel as small float64 tensors under ``meta.*``, ``topology.*``,
``pyramid.*`` and ``nbnl.*`` names.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .fcn import ConvLayerSpec, FcnModel, FcnTopology, ScalePyramidConfig
from .nbnl import NbnlConfig, PrototypeBank
from .numerics import BatchNormState

MAGIC = b"FCNBNL1\n"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_INTERP = ("bilinear", "nearest")


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:len(MAGIC)]!r}; not an FCNBNL1 checkpoint")
    pos = len(MAGIC)
    out = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte offset {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"header of {name!r}"))
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of {name!r}"))
        dt = _DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64))
        data = take(count * dt.itemsize, f"values of {name!r}")
        out[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return out


def state_tensors(
    model: FcnModel, bank: PrototypeBank, epoch: int = 0, seed: int = 0
) -> dict[str, np.ndarray]:
    topo = model.topology
    layers = np.array(
        [[l.kernel_size, l.stride, l.in_channels, l.out_channels, l.has_bias, l.relu] for l in topo.layers],
        dtype=np.float64,
    )
    seed = int(seed)
    t = {
        "meta.format_version": np.array([FORMAT_VERSION], dtype=np.float64),
        "meta.epoch": np.array([epoch], dtype=np.float64),
        "meta.seed": np.array([seed >> 32, seed & 0xFFFFFFFF], dtype=np.float64),
        "topology.layers": layers,
        "topology.flags": np.array(
            [topo.normalize_descriptors, topo.batch_norm_before_head], dtype=np.float64
        ),
        "pyramid.factors": np.array(model.pyramid.factors, dtype=np.float64),
        "pyramid.config": np.array(
            [model.pyramid.base_resolution, _INTERP.index(model.pyramid.interpolation)], dtype=np.float64
        ),
        "nbnl.config": np.array([bank.config.k, bank.config.p, bank.config.q], dtype=np.float64),
    }
    t.update(model.parameters())
    t.update(model.buffers())
    t["nbnl.prototypes"] = bank.W
    return t


def save_checkpoint(
    path: str | os.PathLike, model: FcnModel, bank: PrototypeBank, epoch: int = 0, seed: int = 0
) -> None:
    Path(path).write_bytes(encode_tensors(state_tensors(model, bank, epoch, seed)))


def _require(t: dict, name: str) -> np.ndarray:
    if name not in t:
        raise CheckpointError(f"checkpoint is missing tensor {name!r}")
    return t[name]


def state_from_tensors(t: dict[str, np.ndarray], like: FcnModel | None = None):
    """Rebuild ``(model, bank, meta)``; with ``like``, shapes must match it."""
    version = int(_require(t, "meta.format_version")[0])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    rows = _require(t, "topology.layers")
    flags = _require(t, "topology.flags")
    layers = tuple(
        ConvLayerSpec(int(r[0]), int(r[1]), int(r[2]), int(r[3]), bool(r[4]), bool(r[5])) for r in rows
    )
    topology = FcnTopology(layers, bool(flags[0]), bool(flags[1]))
    pconf = _require(t, "pyramid.config")
    pyramid = ScalePyramidConfig(
        tuple(float(f) for f in _require(t, "pyramid.factors")), int(pconf[0]), _INTERP[int(pconf[1])]
    )
    if like is not None:
        expected = like.parameters()
        for name, arr in expected.items():
            got = _require(t, name)
            if got.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for tensor {name!r}: checkpoint {got.shape}, model {arr.shape}"
                )
        if like.topology != topology:
            raise CheckpointError("checkpoint topology differs from the expected model topology")
    weights, biases = [], []
    for i, spec in enumerate(layers):
        weights.append(_require(t, f"fcn.conv{i}.weight").copy())
        biases.append(_require(t, f"fcn.conv{i}.bias").copy() if spec.has_bias else None)
    bn = None
    if topology.batch_norm_before_head:
        bn = BatchNormState(
            _require(t, "fcn.bn.gamma").copy(),
            _require(t, "fcn.bn.beta").copy(),
            _require(t, "fcn.bn.running_mean").copy(),
            _require(t, "fcn.bn.running_var").copy(),
        )
    try:
        model = FcnModel(topology, weights, biases, pyramid, bn)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    k, p, q = _require(t, "nbnl.config")
    config = NbnlConfig(int(k), int(p), float(q))
    W = _require(t, "nbnl.prototypes").copy()
    if W.shape[:2] != (config.k, config.p) or W.shape[2] != topology.descriptor_dim:
        raise CheckpointError(
            f"shape mismatch for tensor 'nbnl.prototypes': {W.shape} vs "
            f"({config.k}, {config.p}, {topology.descriptor_dim})"
        )
    hi, lo = _require(t, "meta.seed")
    meta = {"epoch": int(_require(t, "meta.epoch")[0]), "seed": (int(hi) << 32) | int(lo), "version": version}
    return model, PrototypeBank(W, config), meta


def load_checkpoint(path: str | os.PathLike, like: FcnModel | None = None):
    return state_from_tensors(decode_tensors(Path(path).read_bytes()), like)
