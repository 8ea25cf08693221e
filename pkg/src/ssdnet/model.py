"""Convolutional encoder-decoder with skip connections used as the image prior.

The network maps an image to a same-shaped reconstruction. Each encoder level
downsamples with a stride-2 convolution followed by a stride-1 refinement; the
decoder upsamples with nearest-neighbor x2 and concatenates a 1x1-conv skip
branch taken from the corresponding encoder level's input. Instance
normalization follows every convolution except the sigmoid head.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tape, Tensor

CHECKPOINT_MAGIC = b"SSDN"
CHECKPOINT_VERSION = 1


@dataclass
class DipConfig:
    depth: int = 5
    channels: list[int] = field(default_factory=lambda: [4, 8, 16, 32, 32])
    skip_channels: list[int] = field(default_factory=lambda: [4, 4, 4, 4, 4])
    kernel_size: int = 3
    activation_slope: float = 0.1

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if len(self.channels) != self.depth or len(self.skip_channels) != self.depth:
            raise ValueError(
                f"channels/skip_channels must have {self.depth} entries, "
                f"got {len(self.channels)}/{len(self.skip_channels)}"
            )
        if self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.skip_channels):
            raise ValueError("all channel counts must be >= 1")
        if not 0.0 <= self.activation_slope < 1.0:
            raise ValueError(f"activation_slope must be in [0, 1), got {self.activation_slope}")


class ModelParams:
    """Ordered registry of named weight tensors with gradient slots."""

    def __init__(self, config: DipConfig, in_channels: int):
        self.config = config
        self.in_channels = in_channels
        self.epochs_trained = 0
        self._tensors: dict[str, Tensor] = {}

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"parameter {name!r} registered twice")
        t = Tensor(data, requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def items(self):
        return self._tensors.items()

    def tensors(self) -> dict[str, Tensor]:
        return self._tensors

    @property
    def num_scalars(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._tensors.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        """Write the SSDN checkpoint: magic, version u32, count u32, then per
        tensor (name length u32, name bytes, rank u32, extents u32..., raw f64
        little-endian data)."""
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(self._tensors)))
            for name, t in self._tensors.items():
                nb = name.encode()
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", t.ndim))
                f.write(struct.pack(f"<{t.ndim}I", *t.shape))
                f.write(t.data.astype("<f8").tobytes())

    def load(self, path) -> None:
        """Load tensor values from an SSDN checkpoint into this registry;
        names and shapes must match exactly."""
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"bad checkpoint magic {magic!r}")
            version, count = struct.unpack("<II", f.read(8))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            if count != len(self._tensors):
                raise ValueError(f"checkpoint has {count} tensors, model expects {len(self._tensors)}")
            for _ in range(count):
                (nlen,) = struct.unpack("<I", f.read(4))
                name = f.read(nlen).decode()
                (rank,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
                data = np.frombuffer(f.read(8 * int(np.prod(shape))), dtype="<f8").reshape(shape)
                if name not in self._tensors:
                    raise ValueError(f"checkpoint tensor {name!r} unknown to this model")
                t = self._tensors[name]
                if t.shape != shape:
                    raise ValueError(f"shape mismatch for {name!r}: {t.shape} vs {shape}")
                t.data = np.ascontiguousarray(data)


def _uniform_kernel(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    fan_in = cin * k * k
    fan_out = cout * k * k
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(cout, cin, k, k))


def build(config: DipConfig, seed: int, in_channels: int = 1) -> ModelParams:
    """Initialize all weights; identical seeds give bit-identical parameters."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = ModelParams(config, in_channels)
    k = config.kernel_size
    feat_ch = [in_channels] + config.channels[:-1]

    def conv_block(prefix: str, cout: int, cin: int, ksize: int) -> None:
        params.register(f"{prefix}.w", _uniform_kernel(rng, cout, cin, ksize))
        params.register(f"{prefix}.gain", np.ones(cout))
        params.register(f"{prefix}.shift", np.zeros(cout))

    for i in range(config.depth):
        cin = feat_ch[i]
        c = config.channels[i]
        conv_block(f"enc{i}.down", c, cin, k)
        conv_block(f"enc{i}.mid", c, c, k)
        conv_block(f"skip{i}", config.skip_channels[i], cin, 1)
    up_next = config.channels[-1]
    for i in reversed(range(config.depth)):
        c = config.channels[i]
        conv_block(f"dec{i}.wide", c, config.skip_channels[i] + up_next, k)
        conv_block(f"dec{i}.mix", c, c, 1)
        up_next = c
    params.register("head.w", _uniform_kernel(rng, in_channels, config.channels[0], 1))
    params.register("head.b", np.zeros(in_channels))
    return params


def forward(params: ModelParams, image: Tensor, tape: Tape | None = None) -> Tensor:
    """Run the network; output has the input's shape with values in (0, 1).

    Spatial size must be divisible by 2**depth.
    """
    cfg = params.config
    C, H, W = image.shape
    div = 1 << cfg.depth
    if H % div or W % div:
        raise ValueError(f"spatial size {H}x{W} must be divisible by {div} (depth {cfg.depth})")
    if C != params.in_channels:
        raise ValueError(f"model built for {params.in_channels} channels, input has {C}")
    k = cfg.kernel_size
    slope = cfg.activation_slope

    def block(x: Tensor, prefix: str, stride: int, ksize: int) -> Tensor:
        x = ops.conv2d(x, params[f"{prefix}.w"], stride=stride, padding=ksize // 2, tape=tape)
        x = ops.instance_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.shift"], tape=tape)
        return ops.leaky_relu(x, slope, tape=tape)

    feats: list[Tensor] = []
    x = image
    for i in range(cfg.depth):
        feats.append(x)
        x = block(x, f"enc{i}.down", 2, k)
        x = block(x, f"enc{i}.mid", 1, k)
    u = x
    for i in reversed(range(cfg.depth)):
        u = ops.upsample_nearest(u, 2, tape=tape)
        sk = block(feats[i], f"skip{i}", 1, 1)
        u = ops.concat_channels([sk, u], tape=tape)
        u = block(u, f"dec{i}.wide", 1, k)
        u = block(u, f"dec{i}.mix", 1, 1)
    out = ops.conv2d(u, params["head.w"], bias=params["head.b"], tape=tape)
    return ops.sigmoid(out, tape=tape)
