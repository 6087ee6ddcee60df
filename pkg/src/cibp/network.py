"""Architectures, parameters, the nominal and interval forward passes, checkpoints."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .interval import (
    IntervalTensor,
    propagate_affine,
    propagate_channel_affine,
    propagate_conv2d,
    propagate_monotonic,
    propagate_reshape,
)
from .tensor import ShapeError, Tensor, conv_output_size

__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "CheckpointError",
    "LayerBounds",
    "LayerSpec",
    "Network",
    "NetworkSpec",
    "PRESETS",
    "forward",
    "forward_interval",
    "init",
    "load_checkpoint",
    "preset",
    "save_checkpoint",
]

LAYER_KINDS = ("conv", "dense", "relu", "sigmoid", "flatten", "normalize")
AFFINE_KINDS = ("conv", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_filters: int = 0
    out_filters: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    out_features: int = 0
    # fixed per-channel statistics for kind == "normalize"
    mean: tuple = ()
    std: tuple = ()

    @classmethod
    def conv(cls, in_filters, out_filters, kernel_size, stride=1, padding=0):
        return cls("conv", in_filters, out_filters, kernel_size, stride, padding)

    @classmethod
    def dense(cls, out_features):
        return cls("dense", out_features=out_features)

    @classmethod
    def normalize(cls, mean, std):
        return cls("normalize", mean=tuple(float(m) for m in mean), std=tuple(float(s) for s in std))

    def to_dict(self) -> dict:
        defaults = LayerSpec(self.kind)
        return {k: v for k, v in asdict(self).items() if k == "kind" or v != getattr(defaults, k)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        for key in ("mean", "std"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self) -> list[tuple]:
        """Output shape of every layer (per example); raises if the stack does not type-check."""
        shape = self.input_shape
        if len(shape) != 3 or min(shape) < 1:
            raise ShapeError(f"input_shape must be positive (C, H, W), got {shape}")
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"layer {i}: conv needs a (C, H, W) input, got {shape}")
                if min(layer.in_filters, layer.out_filters, layer.kernel_size, layer.stride) < 1:
                    raise ShapeError(f"layer {i}: conv dimensions must be positive")
                if shape[0] != layer.in_filters:
                    raise ShapeError(f"layer {i}: conv expects {layer.in_filters} channels, got {shape[0]}")
                h = conv_output_size(shape[1], layer.kernel_size, layer.stride, layer.padding)
                w = conv_output_size(shape[2], layer.kernel_size, layer.stride, layer.padding)
                if h < 1 or w < 1:
                    raise ShapeError(f"layer {i}: conv output size {h}x{w} is not positive")
                shape = (layer.out_filters, h, w)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"layer {i}: dense needs a flat input, got {shape}; add a flatten layer")
                if layer.out_features < 1:
                    raise ShapeError(f"layer {i}: dense out_features must be positive")
                shape = (layer.out_features,)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "normalize":
                if len(shape) != 3 or len(layer.mean) != shape[0] or len(layer.std) != shape[0]:
                    raise ShapeError(f"layer {i}: normalize needs per-channel stats for {shape}")
                if min(layer.std) <= 0:
                    raise ValueError(f"layer {i}: normalize std must be positive")
            out.append(shape)
        if out[-1:] != [(self.num_classes,)]:
            raise ShapeError(f"final layer output {out[-1] if out else None} != ({self.num_classes},)")
        return out

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec.from_dict(x) for x in d["layers"]), int(d["num_classes"]))


def _table(input_filters: int, name: str) -> list[LayerSpec]:
    C, D = LayerSpec.conv, LayerSpec.dense
    if name == "small":
        return [C(input_filters, 16, 4, 2), C(16, 32, 4, 1), D(100), D(10)]
    if name == "medium":
        return [C(input_filters, 32, 3, 1), C(32, 32, 4, 2), C(32, 64, 3, 1), C(64, 64, 4, 2), D(512), D(512), D(10)]
    if name == "large":
        return [
            C(input_filters, 64, 3, 1),
            C(64, 64, 3, 1),
            C(64, 128, 3, 2),
            C(128, 128, 3, 1),
            C(128, 128, 3, 1),
            D(200),
            D(10),
        ]
    raise ValueError(f"unknown architecture {name!r}; valid names: {', '.join(PRESETS)}")


PRESETS = ("small", "medium", "large")


def preset(name: str, input_shape=(1, 28, 28), num_classes: int = 10, normalization=None) -> NetworkSpec:
    """One of the small/medium/large conv stacks with relu after every hidden layer.

    ``normalization`` is an optional ``(mean, std)`` pair of per-channel
    sequences, inserted as a fixed first layer.
    """
    stack = _table(input_shape[0], name)
    # the last dense layer emits logits
    stack[-1] = LayerSpec.dense(num_classes)
    layers = []
    if normalization is not None:
        layers.append(LayerSpec.normalize(*normalization))
    flattened = False
    for i, layer in enumerate(stack):
        if layer.kind == "dense" and not flattened:
            layers.append(LayerSpec("flatten"))
            flattened = True
        layers.append(layer)
        if i < len(stack) - 1:
            layers.append(LayerSpec("relu"))
    return NetworkSpec(tuple(input_shape), tuple(layers), num_classes)


class LayerBounds(NamedTuple):
    index: int
    kind: str
    bounds: IntervalTensor


@dataclass
class Network:
    spec: NetworkSpec
    # parameter tensors keyed by layer index: (weight, bias)
    params: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        out = []
        for idx in sorted(self.params):
            out.extend(self.params[idx])
        return out

    def parameter_names(self) -> list[str]:
        names = []
        for idx in sorted(self.params):
            names += [f"layer{idx}.weight", f"layer{idx}.bias"]
        return names

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else T.get_default_dtype()

    def copy(self) -> "Network":
        return Network(
            self.spec,
            {i: tuple(Tensor(p.data.copy(), requires_grad=p.requires_grad) for p in ps) for i, ps in self.params.items()},
        )

    def astype(self, dtype) -> "Network":
        return Network(
            self.spec,
            {i: tuple(Tensor(p.data, requires_grad=p.requires_grad, dtype=dtype) for p in ps) for i, ps in self.params.items()},
        )


def _param_shapes(spec: NetworkSpec) -> dict[int, tuple[tuple, tuple]]:
    shapes = {}
    prev = spec.input_shape
    for i, (layer, out) in enumerate(zip(spec.layers, spec.shapes())):
        if layer.kind == "conv":
            k = layer.kernel_size
            shapes[i] = ((layer.out_filters, layer.in_filters, k, k), (layer.out_filters,))
        elif layer.kind == "dense":
            shapes[i] = ((layer.out_features, prev[0]), (layer.out_features,))
        prev = out
    return shapes


def init(spec: NetworkSpec, seed: int = 0, dtype=None) -> Network:
    """Weights uniform in +-1/sqrt(fan_in), zero biases."""
    dtype = np.dtype(dtype or T.get_default_dtype())
    rng = np.random.default_rng(seed)
    params = {}
    for idx, (wshape, bshape) in _param_shapes(spec).items():
        fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=wshape).astype(dtype)
        params[idx] = (Tensor(w, requires_grad=True), Tensor(np.zeros(bshape, dtype), requires_grad=True))
    return Network(spec, params)


def _check_input(net: Network, shape: tuple) -> bool:
    """Returns True when the input carries a batch axis."""
    want = net.spec.input_shape
    if tuple(shape) == want:
        return False
    if len(shape) == 4 and tuple(shape[1:]) == want:
        return True
    raise ShapeError(f"input shape {tuple(shape)} does not match network input {want} (optionally batched)")


def _as_input(net: Network, x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == net.dtype else Tensor(x.data, dtype=net.dtype)
    return Tensor(np.asarray(x), dtype=net.dtype)


def forward(net: Network, x) -> Tensor:
    """Logits for one example [C,H,W] or a batch [N,C,H,W]."""
    x = _as_input(net, x)
    batched = _check_input(net, x.shape)
    z = x
    for i, layer in enumerate(net.spec.layers):
        if layer.kind == "conv":
            w, b = net.params[i]
            z = T.conv2d(z, w, b, layer.stride, layer.padding)
        elif layer.kind == "dense":
            w, b = net.params[i]
            z = T.linear(z, w, b)
        elif layer.kind == "relu":
            z = T.relu(z)
        elif layer.kind == "sigmoid":
            z = T.sigmoid(z)
        elif layer.kind == "flatten":
            z = T.reshape(z, (z.shape[0], -1) if batched else (-1,))
        elif layer.kind == "normalize":
            z = T.channel_affine(z, 1.0 / np.asarray(layer.std), -np.asarray(layer.mean) / np.asarray(layer.std))
    return z


def forward_interval(net: Network, z0: IntervalTensor) -> tuple[list[LayerBounds], IntervalTensor]:
    """Propagate an input box; returns bounds after every conv/dense/activation layer and the logit box."""
    if z0.lower.dtype != net.dtype:
        z0 = IntervalTensor(Tensor(z0.lower.data, dtype=net.dtype), Tensor(z0.upper.data, dtype=net.dtype))
    batched = _check_input(net, z0.shape)
    z = z0
    recorded = []
    for i, layer in enumerate(net.spec.layers):
        if layer.kind == "conv":
            w, b = net.params[i]
            z = propagate_conv2d(z, w, b, layer.stride, layer.padding)
        elif layer.kind == "dense":
            w, b = net.params[i]
            z = propagate_affine(z, w, b)
        elif layer.kind in ("relu", "sigmoid"):
            z = propagate_monotonic(z, layer.kind)
        elif layer.kind == "flatten":
            z = propagate_reshape(z, (z.shape[0], -1) if batched else (-1,))
            continue
        elif layer.kind == "normalize":
            std = np.asarray(layer.std)
            z = propagate_channel_affine(z, 1.0 / std, -np.asarray(layer.mean) / std)
            continue
        recorded.append(LayerBounds(i, layer.kind, z))
    return recorded, z


# -- checkpoints -------------------------------------------------------------
#
# layout (all integers little-endian uint32):
#   b"IBPC" | version | manifest_len | manifest (utf-8 JSON)
#   per payload: ndim | dims... | float32 LE row-major data
#   crc32 of every preceding byte

CHECKPOINT_MAGIC = b"IBPC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the expected network."""


def _pack_array(buf: bytearray, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf += struct.pack("<I", arr.ndim)
    buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += arr.tobytes()


def save_checkpoint(path, net: Network, metadata: dict | None = None, extra: dict | None = None) -> None:
    """Write parameters (and optional named extra arrays, e.g. optimizer state) to ``path``."""
    extra = extra or {}
    names = net.parameter_names() + list(extra)
    manifest = {
        "network": net.spec.to_dict(),
        "metadata": metadata or {},
        "payloads": names,
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(text))
    buf += text
    for p in net.parameters():
        _pack_array(buf, p.data)
    for name in extra:
        _pack_array(buf, np.asarray(extra[name]))
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path, dtype=np.float32) -> tuple[Network, dict, dict]:
    """Returns ``(network, metadata, extra_arrays)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {CHECKPOINT_MAGIC!r}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt or truncated")
    version, mlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}, expected {CHECKPOINT_VERSION}")
    off = 12
    try:
        manifest = json.loads(raw[off : off + mlen].decode("utf-8"))
        spec = NetworkSpec.from_dict(manifest["network"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest at offset {off}: {exc}") from exc
    off += mlen
    end = len(raw) - 4
    arrays = {}
    for name in manifest["payloads"]:
        if off + 4 > end:
            raise CheckpointError(f"{path}: payload {name!r} missing at offset {off}")
        (ndim,) = struct.unpack_from("<I", raw, off)
        shape = struct.unpack_from(f"<{ndim}I", raw, off + 4)
        off += 4 + 4 * ndim
        nbytes = 4 * int(np.prod(shape))
        if off + nbytes > end:
            raise CheckpointError(f"{path}: payload {name!r} truncated at offset {off}")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
        off += nbytes
    if off != end:
        raise CheckpointError(f"{path}: {end - off} trailing bytes at offset {off}")

    params = {}
    for idx, (wshape, bshape) in _param_shapes(spec).items():
        w = arrays.pop(f"layer{idx}.weight", None)
        b = arrays.pop(f"layer{idx}.bias", None)
        if w is None or b is None or w.shape != wshape or b.shape != bshape:
            raise CheckpointError(f"{path}: parameters of layer {idx} do not match the architecture")
        params[idx] = (Tensor(w, requires_grad=True, dtype=dtype), Tensor(b, requires_grad=True, dtype=dtype))
    return Network(spec, params), manifest["metadata"], arrays
