"""Layers and network builders.

Networks are ``Module`` trees; every parameter gets a dotted name
(``layer0.weight``, ``down1.bias``, ...) used by the checkpoint format.
Builders are deterministic: the same seed reproduces bit-identical
initial parameters.
"""
from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor, concat, conv2d, conv_transpose2d

INIT_STD = 0.02


def seeded_rng(seed: int, tag: str = "") -> np.random.Generator:
    """Independent generator for (seed, tag); stable across runs."""
    if tag:
        return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(tag.encode()))))
    return np.random.default_rng(np.random.SeedSequence(seed))


class Module:
    """Base class with automatic parameter/buffer/submodule registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            if value.requires_grad:
                self._params[name] = value
            else:
                self._buffers[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k, v in self._params.items():
            out[prefix + k] = v
        for k, child in self._children.items():
            out.update(child.named_parameters(prefix + k + "."))
        return out

    def named_state(self, prefix: str = "") -> dict[str, Tensor]:
        """Parameters plus buffers; the unit of checkpointing."""
        out = {}
        for k, v in self._params.items():
            out[prefix + k] = v
        for k, v in self._buffers.items():
            out[prefix + k] = v
        for k, child in self._children.items():
            out.update(child.named_state(prefix + k + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def requires_grad_(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def load_state(self, state: dict[str, np.ndarray], prefix: str = ""):
        """Copy arrays into existing parameters/buffers by dotted name."""
        own = self.named_state(prefix)
        for name, tensor in own.items():
            if name not in state:
                raise KeyError(f"missing state entry {name!r}")
            arr = state[name]
            if tuple(arr.shape) != tensor.shape:
                raise ValueError(f"state entry {name!r} has shape {arr.shape}, expected {tensor.shape}")
            tensor.data = arr.astype(tensor.data.dtype, copy=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, bias=True, *,
                 rng=None, dtype=np.float32, zero_init=False):
        super().__init__()
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = (rng.normal(0.0, INIT_STD, size=(cout, cin, k, k))).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.pad = pad

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, bias=True, *,
                 rng=None, dtype=np.float32):
        super().__init__()
        w = (rng.normal(0.0, INIT_STD, size=(cin, cout, k, k))).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.pad = pad

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class InstanceNorm2d(Module):
    """Per-sample, per-channel normalization over H,W (no affine, no running stats)."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps

    def forward(self, x):
        mu = x.mean(axes=(2, 3), keepdims=True)
        centered = x - mu
        var = centered.square().mean(axes=(2, 3), keepdims=True)
        return centered / (var + self.eps).sqrt()


class LeakyReLU(Module):
    def forward(self, x):
        return x.leaky_relu()


class ReLU(Module):
    def forward(self, x):
        return x.relu()


class Tanh(Module):
    def forward(self, x):
        return x.tanh()


class Sequential(Module):
    """Chain of layers; children are named layer0, layer1, ..."""

    def __init__(self, *layers):
        super().__init__()
        self.layer_count = len(layers)
        for i, layer in enumerate(layers):
            setattr(self, f"layer{i}", layer)

    def layers(self):
        return [getattr(self, f"layer{i}") for i in range(self.layer_count)]

    def forward(self, x):
        for layer in self.layers():
            x = layer(x)
        return x


class ResidualBlock(Module):
    def __init__(self, channels, *, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, pad=1, rng=rng, dtype=dtype)
        self.norm1 = InstanceNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, pad=1, rng=rng, dtype=dtype)
        self.norm2 = InstanceNorm2d(channels)

    def forward(self, x):
        h = self.norm1(self.conv1(x)).relu()
        h = self.norm2(self.conv2(h))
        return x + h


def build_patchgan(in_channels: int, *, seed: int = 0, dtype=np.float32) -> Sequential:
    """Patch discriminator: C64-C128-C256-C512-1, 4x4 kernels.

    Strides 2,2,2,1,1 and pad 1 give each output unit a 70x70 receptive
    field; the output is a score map, never pooled to a scalar.
    """
    if in_channels < 1:
        raise ValueError("in_channels must be >= 1")
    rng = seeded_rng(seed, "patchgan")
    chans = [in_channels, 64, 128, 256, 512]
    strides = [2, 2, 2, 1]
    layers = []
    for i in range(4):
        layers.append(Conv2d(chans[i], chans[i + 1], 4, stride=strides[i], pad=1,
                             rng=rng, dtype=dtype))
        if i > 0:
            layers.append(InstanceNorm2d(chans[i + 1]))
        layers.append(LeakyReLU())
    layers.append(Conv2d(512, 1, 4, stride=1, pad=1, rng=rng, dtype=dtype))
    return Sequential(*layers)


class RegNet(Module):
    """Displacement-field network: concatenated slice pair in, 2-channel field out.

    Encoder/decoder with skip connections; the final projection is
    zero-initialized so the predicted field is identically zero at the
    start of training (warp starts as the identity).
    """

    def __init__(self, levels: int, base: int = 16, *, seed: int = 0, dtype=np.float32):
        super().__init__()
        if levels < 1:
            raise ValueError("levels must be >= 1")
        rng = seeded_rng(seed, "regnet")
        self.levels = levels
        self.stem = Conv2d(2, base, 3, pad=1, rng=rng, dtype=dtype)
        downs, ups, fuses = [], [], []
        c = base
        enc_channels = [base]
        for _ in range(levels):
            downs.append(Conv2d(c, c * 2, 3, stride=2, pad=1, rng=rng, dtype=dtype))
            c *= 2
            enc_channels.append(c)
        for i in range(levels):
            skip_c = enc_channels[levels - 1 - i]
            ups.append(ConvTranspose2d(c, skip_c, 4, stride=2, pad=1, rng=rng, dtype=dtype))
            fuses.append(Conv2d(skip_c * 2, skip_c, 3, pad=1, rng=rng, dtype=dtype))
            c = skip_c
        for i, m in enumerate(downs):
            setattr(self, f"down{i}", m)
        for i, m in enumerate(ups):
            setattr(self, f"up{i}", m)
        for i, m in enumerate(fuses):
            setattr(self, f"fuse{i}", m)
        self.head = Conv2d(base, 2, 3, pad=1, rng=rng, dtype=dtype, zero_init=True)

    def forward(self, pair: Tensor) -> Tensor:
        if pair.shape[1] != 2:
            raise ValueError(f"regnet expects a 2-channel slice pair, got {pair.shape[1]} channels")
        feats = [self.stem(pair).leaky_relu()]
        h = feats[0]
        for i in range(self.levels):
            h = getattr(self, f"down{i}")(h).leaky_relu()
            feats.append(h)
        for i in range(self.levels):
            h = getattr(self, f"up{i}")(h).leaky_relu()
            skip = feats[self.levels - 1 - i]
            h = getattr(self, f"fuse{i}")(concat([h, skip], axis=1)).leaky_relu()
        return self.head(h)


def build_regnet(levels: int, *, base: int = 16, seed: int = 0, dtype=np.float32) -> RegNet:
    return RegNet(levels, base, seed=seed, dtype=dtype)


def build_baseline_generator(in_channels: int, *, base: int = 64, seed: int = 0,
                             dtype=np.float32) -> Sequential:
    """Encoder(2 stride-2 convs) - 2 residual blocks - decoder(2 transposed convs), tanh."""
    if in_channels < 1:
        raise ValueError("in_channels must be >= 1")
    rng = seeded_rng(seed, "generator")
    return Sequential(
        Conv2d(in_channels, base, 4, stride=2, pad=1, rng=rng, dtype=dtype),
        InstanceNorm2d(base),
        ReLU(),
        Conv2d(base, base * 2, 4, stride=2, pad=1, rng=rng, dtype=dtype),
        InstanceNorm2d(base * 2),
        ReLU(),
        ResidualBlock(base * 2, rng=rng, dtype=dtype),
        ResidualBlock(base * 2, rng=rng, dtype=dtype),
        ConvTranspose2d(base * 2, base, 4, stride=2, pad=1, rng=rng, dtype=dtype),
        InstanceNorm2d(base),
        ReLU(),
        ConvTranspose2d(base, in_channels, 4, stride=2, pad=1, rng=rng, dtype=dtype),
        Tanh(),
    )
