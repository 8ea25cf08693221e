"""Forward-only perceptual feature extractor.

A VGG-style stack of 3x3 convolutions with ReLU activations and 2x2 max pools,
loaded from a flat weight file and never trained. The embedding used by the
perceptual loss is the activation at a tap point inside the stack; with the
standard layout (channels 64,64,128,128,... and pools after the 2nd and 4th
convolutions), tap index 8 on a 3x224x224 input yields a (128,112,112) map.

Weight file layout (little-endian): magic "SSDW", version u32, layer count u32,
then per layer out_ch u32, in_ch u32, k u32, raw f64 kernel data
(out*in*k*k), raw f64 bias (out).
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct

import numpy as np

from . import ops
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"SSDW"
WEIGHTS_VERSION = 1

# imagenet per-channel normalization applied before embedding
INPUT_MEAN = np.array([0.485, 0.456, 0.406])
INPUT_STD = np.array([0.229, 0.224, 0.225])

# convolution indices (1-based) followed by a 2x2 max pool
POOL_AFTER_CONV = frozenset({2, 4, 8, 12, 16})

# channel progression of the deterministic fallback generator: 8 conv layers
# ending at 128 output channels, pools after convs 2 and 4
RANDOM_CHANNELS = [64, 64, 128, 128, 128, 128, 128, 128]

DEFAULT_TAP_LAYER = 8
DEFAULT_INPUT_SIZE = 224
PROBE_SEED = 1013904223


class FeatureNetwork:
    """Immutable conv stack; ``modules`` flattens convs, activations and pools.

    ``tap_layer`` indexes the flattened module list (0-based); embedding output
    is the activation after that module.
    """

    def __init__(
        self,
        layers: list[tuple[np.ndarray, np.ndarray]],
        tap_layer: int = DEFAULT_TAP_LAYER,
        input_size: int = DEFAULT_INPUT_SIZE,
    ):
        if not layers:
            raise ValueError("feature network needs at least one conv layer")
        in_ch = 3
        for i, (kernel, bias) in enumerate(layers):
            cout, cin, k, k2 = kernel.shape
            if k != k2:
                raise ValueError(f"layer {i}: kernel must be square, got {k}x{k2}")
            if cin != in_ch:
                raise ValueError(f"layer {i}: expects {cin} input channels, chain provides {in_ch}")
            if bias.shape != (cout,):
                raise ValueError(f"layer {i}: bias shape {bias.shape} != ({cout},)")
            in_ch = cout
        self._layers = [(Tensor(k), Tensor(b)) for k, b in layers]
        self.modules: list[tuple[str, int]] = []  # (kind, conv index or -1)
        for ci in range(len(layers)):
            self.modules.append(("conv", ci))
            self.modules.append(("relu", -1))
            if (ci + 1) in POOL_AFTER_CONV:
                self.modules.append(("pool", -1))
        if not 0 <= tap_layer < len(self.modules):
            raise ValueError(f"tap_layer {tap_layer} outside module range [0, {len(self.modules)})")
        self.tap_layer = tap_layer
        self.input_size = input_size

    @property
    def num_layers(self) -> int:
        return len(self._layers)

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        return [(k.shape[0], k.shape[1], k.shape[2]) for k, _ in self._layers]

    def kernel(self, i: int) -> Tensor:
        return self._layers[i][0]

    def _run(self, x: Tensor, tape: Tape | None) -> Tensor:
        for mi, (kind, ci) in enumerate(self.modules):
            if kind == "conv":
                kernel, bias = self._layers[ci]
                pad = kernel.shape[2] // 2
                x = ops.conv2d(x, kernel, bias=bias, padding=pad, tape=tape)
            elif kind == "relu":
                x = ops.leaky_relu(x, 0.0, tape=tape)
            else:
                x = ops.maxpool2d(x, 2, tape=tape)
            if mi == self.tap_layer:
                return x
        raise AssertionError("tap_layer was validated; unreachable")


def embed(net: FeatureNetwork, patch: Tensor, tape: Tape | None = None) -> Tensor:
    """Map an image patch in [0, 1] to its perceptual embedding.

    Accepts 1- or 3-channel input of any spatial size; grayscale is replicated
    to RGB and the patch is bilinearly resized to the network's input size and
    normalized before the conv stack. Differentiable w.r.t. the patch.
    """
    C = patch.shape[0]
    if C == 1:
        patch = ops.repeat_channels(patch, 3, tape=tape)
    elif C != 3:
        raise ValueError(f"embed expects 1 or 3 channels, got {C}")
    if patch.shape[1] != net.input_size or patch.shape[2] != net.input_size:
        patch = ops.bilinear_resize(patch, net.input_size, net.input_size, tape=tape)
    x = ops.channel_affine(patch, 1.0 / INPUT_STD, -INPUT_MEAN / INPUT_STD, tape=tape)
    return net._run(x, tape)


def inner_product(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum of elementwise products over all embedding entries."""
    if a.shape != b.shape:
        raise ValueError(f"embedding shape mismatch {a.shape} vs {b.shape}")
    return ops.dot(a, b, tape=tape)


def save_weights(path, layers: list[tuple[np.ndarray, np.ndarray]]) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(layers)))
        for kernel, bias in layers:
            cout, cin, k, _ = kernel.shape
            f.write(struct.pack("<III", cout, cin, k))
            f.write(np.ascontiguousarray(kernel, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(bias, dtype="<f8").tobytes())


def load_weights(
    path,
    tap_layer: int = DEFAULT_TAP_LAYER,
    input_size: int = DEFAULT_INPUT_SIZE,
) -> FeatureNetwork:
    """Read an SSDW file into an immutable FeatureNetwork; logs the file digest."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"bad weight-file magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weight-file version {version}")
    off = 12
    layers = []
    for i in range(count):
        if off + 12 > len(blob):
            raise ValueError(f"truncated weight file at layer {i}")
        cout, cin, k = struct.unpack_from("<III", blob, off)
        off += 12
        ksize = cout * cin * k * k * 8
        if off + ksize + cout * 8 > len(blob):
            raise ValueError(f"truncated weight file at layer {i}")
        kernel = np.frombuffer(blob, dtype="<f8", count=cout * cin * k * k, offset=off).reshape(
            cout, cin, k, k
        )
        off += ksize
        bias = np.frombuffer(blob, dtype="<f8", count=cout, offset=off)
        off += cout * 8
        layers.append((kernel.copy(), bias.copy()))
    net = FeatureNetwork(layers, tap_layer=tap_layer, input_size=input_size)
    log.info("loaded feature weights %s (%d layers, sha256=%s)",
             path, count, hashlib.sha256(blob).hexdigest()[:16])
    return net


def random_feature_layers(
    seed: int, channels: list[int] | None = None, kernel_size: int = 3
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic semi-orthogonal conv weights so the pipeline runs with no
    external download; rows are orthonormal scaled by sqrt(2) (relu gain)."""
    channels = channels or RANDOM_CHANNELS
    rng = np.random.default_rng(seed)
    layers = []
    cin = 3
    for cout in channels:
        fan_in = cin * kernel_size * kernel_size
        g = rng.standard_normal((fan_in, cout))
        q, r = np.linalg.qr(g)
        # fix signs so the factorization is unique and seed-stable
        q = q * np.sign(np.diag(r))
        kernel = np.sqrt(2.0) * q.T.reshape(cout, cin, kernel_size, kernel_size)
        layers.append((kernel, np.zeros(cout)))
        cin = cout
    return layers


def activation_checksum(net: FeatureNetwork, probe_seed: int = PROBE_SEED) -> str:
    """Digest of the tap activation for a fixed random probe image."""
    rng = np.random.default_rng(probe_seed)
    probe = Tensor(rng.random((3, net.input_size, net.input_size)))
    out = embed(net, probe)
    return hashlib.sha256(out.data.tobytes()).hexdigest()


def export_random_weights(path, seed: int, channels: list[int] | None = None,
                          input_size: int = DEFAULT_INPUT_SIZE) -> str:
    """Write a deterministic SSDW file plus a sidecar metadata json recording
    the tap activation checksum; returns the checksum."""
    layers = random_feature_layers(seed, channels)
    save_weights(path, layers)
    net = FeatureNetwork(layers, input_size=input_size)
    digest = activation_checksum(net)
    meta = {
        "seed": seed,
        "layers": [list(s) for s in net.layer_shapes()],
        "tap_layer": net.tap_layer,
        "input_size": input_size,
        "probe_seed": PROBE_SEED,
        "tap_checksum": digest,
    }
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return digest
