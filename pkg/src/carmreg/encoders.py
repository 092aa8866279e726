"""Inference-only forward passes of the 2D (X-ray) and 3D (CT) segmentation encoders.

Both encoders are five blocks of ``[3^n conv (pad 1) -> batch-norm -> ReLU]``
units followed by a 3^n max-pool with stride 2 and pad 1, so every spatial
size ``s`` becomes ``ceil(s / 2)`` per block and ``ceil(s / 32)`` overall.
Tensors are channel-first, ``(C, *spatial)``, float32.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeMismatch

BN_EPS = 1e-5
_PARTS = ("conv.weight", "conv.bias", "bn.scale", "bn.shift", "bn.mean", "bn.var")


@dataclass(frozen=True)
class EncoderSpec:
    ndim: int
    channels: tuple[int, ...]
    units: tuple[int, ...]
    in_channels: int = 1

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise ValueError("ndim must be 2 or 3")
        if len(self.channels) != len(self.units) or not self.channels:
            raise ValueError("channels and units need one entry per block")

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Every weight tensor in bundle order."""
        out = []
        cin = self.in_channels
        for b, (cout, n) in enumerate(zip(self.channels, self.units), start=1):
            for u in range(1, n + 1):
                pre = f"block{b}.unit{u}."
                out.append((pre + "conv.weight", (cout, cin) + (3,) * self.ndim))
                out += [(pre + p, (cout,)) for p in _PARTS[1:]]
                cin = cout
        return out

    def output_shape(self, spatial) -> tuple[int, ...]:
        s = tuple(int(v) for v in spatial)
        for _ in self.channels:
            s = tuple((v + 1) // 2 for v in s)
        return (self.out_channels,) + s


@dataclass(frozen=True)
class EncoderSpec2D(EncoderSpec):
    ndim: int = 2
    channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    units: tuple[int, ...] = (3, 3, 3, 3, 3)


@dataclass(frozen=True)
class EncoderSpec3D(EncoderSpec):
    ndim: int = 3
    channels: tuple[int, ...] = (4, 8, 16, 32, 64)
    units: tuple[int, ...] = (2, 3, 3, 3, 3)


class WeightBundle:
    """Ordered named float32 tensors."""

    def __init__(self, tensors):
        self.tensors: dict[str, np.ndarray] = {
            k: np.ascontiguousarray(v, dtype=np.float32) for k, v in dict(tensors).items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def validate(self, spec: EncoderSpec) -> None:
        for name, shape in spec.tensor_shapes():
            if name not in self.tensors:
                raise FormatError(f"weight bundle is missing tensor {name}")
            got = self.tensors[name].shape
            if got != shape:
                raise ShapeMismatch(f"tensor {name} has shape {got}, expected {shape}")
            if name.endswith("bn.var") and np.any(self.tensors[name] < 0):
                raise FormatError(f"tensor {name} has negative variance")


def random_weights(spec: EncoderSpec, seed: int = 0, bias_std: float = 0.0) -> WeightBundle:
    """He-normal kernels with identity batch-norm; biases ~ N(0, bias_std)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE6C]))
    tensors = {}
    for name, shape in spec.tensor_shapes():
        part = name.split(".", 2)[2]
        if part == "conv.weight":
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        elif part == "conv.bias":
            tensors[name] = rng.normal(0.0, bias_std, shape) if bias_std > 0 else np.zeros(shape)
        elif part in ("bn.scale", "bn.var"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return WeightBundle(tensors)


def save_weights(bundle: WeightBundle, index_path) -> None:
    """JSON index ``[{name, shape, offset}]`` (offset in bytes) + little-endian float32 ``.bin``."""
    index_path = Path(index_path)
    entries, blobs, offset = [], [], 0
    for name, t in bundle.tensors.items():
        data = t.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    index_path.with_suffix(".bin").write_bytes(b"".join(blobs))
    index_path.write_text(json.dumps(entries, indent=1) + "\n", encoding="utf-8")


def load_weights(index_path, spec: EncoderSpec | None = None) -> WeightBundle:
    index_path = Path(index_path)
    try:
        entries = json.loads(index_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{index_path}: invalid JSON ({exc})") from None
    if not isinstance(entries, list):
        raise FormatError(f"{index_path}: index must be a list of tensors")
    blob = index_path.with_suffix(".bin").read_bytes()
    tensors = {}
    for e in entries:
        try:
            name, shape, off = str(e["name"]), tuple(int(s) for s in e["shape"]), int(e["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{index_path}: bad index entry {e!r} ({exc})") from None
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + nbytes > len(blob):
            raise FormatError(f"{index_path}: tensor {name} runs past the end of the data file")
        if name in tensors:
            raise FormatError(f"{index_path}: duplicate tensor {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
    bundle = WeightBundle(tensors)
    if spec is not None:
        bundle.validate(spec)
    return bundle


def conv3n(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 (or 3x3x3) convolution, channel-first, as a sum of shifted matmuls."""
    cin = x.shape[0]
    spatial = x.shape[1:]
    nd = len(spatial)
    cout = weight.shape[0]
    if weight.shape != (cout, cin) + (3,) * nd:
        raise ShapeMismatch(f"kernel {weight.shape} does not fit input with {cin} channels")
    xp = np.pad(x, [(0, 0)] + [(1, 1)] * nd)
    out = np.zeros((cout, int(np.prod(spatial))), dtype=np.float32)
    for taps in itertools.product(range(3), repeat=nd):
        window = xp[(slice(None),) + tuple(slice(t, t + s) for t, s in zip(taps, spatial))]
        w = np.ascontiguousarray(weight[(slice(None), slice(None)) + taps])
        out += w @ window.reshape(cin, -1)
    out += bias[:, None]
    return out.reshape((cout,) + spatial)


def batchnorm(x: np.ndarray, scale, shift, mean, var) -> np.ndarray:
    k = (scale / np.sqrt(var.astype(np.float64) + BN_EPS)).astype(np.float32)
    shape = (-1,) + (1,) * (x.ndim - 1)
    return (x - mean.reshape(shape)) * k.reshape(shape) + shift.reshape(shape)


def maxpool3n(x: np.ndarray) -> np.ndarray:
    """Window 3, stride 2, pad 1 (padding never wins): ``s -> ceil(s / 2)``."""
    spatial = x.shape[1:]
    nd = len(spatial)
    outs = [(s + 1) // 2 for s in spatial]
    xp = np.pad(x, [(0, 0)] + [(1, 1)] * nd, constant_values=-np.inf)
    result = None
    for taps in itertools.product(range(3), repeat=nd):
        win = xp[(slice(None),) + tuple(slice(t, t + 2 * o - 1, 2) for t, o in zip(taps, outs))]
        result = win.copy() if result is None else np.maximum(result, win, out=result)
    return result


def unit_forward(x: np.ndarray, bundle: WeightBundle, prefix: str) -> np.ndarray:
    y = conv3n(x, bundle[prefix + "conv.weight"], bundle[prefix + "conv.bias"])
    y = batchnorm(y, bundle[prefix + "bn.scale"], bundle[prefix + "bn.shift"],
                  bundle[prefix + "bn.mean"], bundle[prefix + "bn.var"])
    return np.maximum(y, 0.0, out=y)


def _forward(spec: EncoderSpec, weights, x: np.ndarray) -> np.ndarray:
    bundle = weights if isinstance(weights, WeightBundle) else random_weights(spec, int(weights))
    bundle.validate(spec)
    for b, n in enumerate(spec.units, start=1):
        for u in range(1, n + 1):
            x = unit_forward(x, bundle, f"block{b}.unit{u}.")
        x = maxpool3n(x)
    return x


def _as_channel_first(data, nd: int) -> np.ndarray:
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == nd + 1 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.ndim != nd or 0 in a.shape:
        raise ShapeMismatch(f"expected a single-channel {nd}D input, got shape {np.shape(data)}")
    return np.ascontiguousarray(a[None])


def forward_2d(spec: EncoderSpec, weights, image) -> np.ndarray:
    """``H x W`` (or ``H x W x 1``) image -> ``(512, ceil(H/32), ceil(W/32))``.

    ``weights`` is a :class:`WeightBundle` or an integer seed for :func:`random_weights`.
    """
    if spec.ndim != 2:
        raise ShapeMismatch("forward_2d needs a 2D encoder spec")
    return _forward(spec, weights, _as_channel_first(image, 2))


def forward_3d(spec: EncoderSpec, weights, volume) -> np.ndarray:
    """``H x W x D`` (or ``H x W x D x 1``) volume -> ``(64, ceil(H/32), ceil(W/32), ceil(D/32))``."""
    if spec.ndim != 3:
        raise ShapeMismatch("forward_3d needs a 3D encoder spec")
    return _forward(spec, weights, _as_channel_first(volume, 3))
