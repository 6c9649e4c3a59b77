"""Invertible generators through a shared latent space.

A ``FlowModel`` is squeeze -> [actnorm -> channel-reverse -> affine
coupling] x blocks.  Every sub-transform has an exact algebraic inverse,
so cross-domain translation (forward through one model, inverse through
the other) is cycle-consistent by construction, with no cycle loss.

Log-determinant accounting: actnorm contributes H*W*sum(log|scale|),
coupling contributes sum(s) over the rescaled half, channel reversal
contributes 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Module, seeded_rng
from .tensor import Tensor, concat, flip

SQUEEZE = 2


def squeeze2x2(x: Tensor) -> Tensor:
    """Space-to-depth: (B,C,H,W) -> (B,4C,H/2,W/2)."""
    b, c, h, w = x.shape
    if h % SQUEEZE or w % SQUEEZE:
        raise ValueError(f"spatial dims must be divisible by {SQUEEZE}, got {h}x{w}")
    out = x.reshape(b, c, h // 2, 2, w // 2, 2)
    out = out.transpose((0, 1, 3, 5, 2, 4))
    return out.reshape(b, c * 4, h // 2, w // 2)


def unsqueeze2x2(x: Tensor) -> Tensor:
    """Depth-to-space inverse of ``squeeze2x2``."""
    b, c, h, w = x.shape
    if c % 4:
        raise ValueError(f"channel count must be divisible by 4, got {c}")
    out = x.reshape(b, c // 4, 2, 2, h, w)
    out = out.transpose((0, 1, 4, 2, 5, 3))
    return out.reshape(b, c // 4, h * 2, w * 2)


class ActNorm(Module):
    """Per-channel affine y = (x + shift) * scale, data-initialized.

    The first forward sets shift/scale so that batch has zero mean and
    unit variance per channel; afterwards both are ordinary trainable
    parameters.  ``initialized`` is persisted so a loaded checkpoint
    never re-initializes.
    """

    def __init__(self, channels: int, dtype=np.float32, identity_init: bool = False):
        super().__init__()
        self.channels = channels
        self.scale = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.initialized = Tensor(np.array([1.0 if identity_init else 0.0], dtype=dtype))

    def _maybe_init(self, x: Tensor):
        if self.initialized.data[0] != 0.0:
            return
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        std = x.data.std(axis=(0, 2, 3), keepdims=True)
        self.shift.data = (-mean).astype(x.data.dtype)
        self.scale.data = (1.0 / (std + 1e-6)).astype(x.data.dtype)
        self.initialized.data = np.array([1.0], dtype=x.data.dtype)

    def forward(self, x: Tensor):
        self._maybe_init(x)
        _, _, h, w = x.shape
        y = (x + self.shift) * self.scale
        logdet = self.scale.abs().log().sum() * float(h * w)
        return y, logdet

    def inverse(self, y: Tensor):
        _, _, h, w = y.shape
        x = y / self.scale - self.shift
        logdet = self.scale.abs().log().sum() * float(-h * w)
        return x, logdet


class ChannelReverse(Module):
    """Fixed channel-order reversal; exactly invertible, zero log-det."""

    def forward(self, x: Tensor):
        return flip(x, 1)

    def inverse(self, y: Tensor):
        return flip(y, 1)


class IdentityPermute(Module):
    """No-op permutation slot (first block; reversals between couplings do the mixing)."""

    def forward(self, x: Tensor):
        return x

    def inverse(self, y: Tensor):
        return y


class AffineCoupling(Module):
    """y1 = x1;  y2 = x2 * exp(s(x1)) + t(x1), with bounded s.

    s is squashed through s_max*tanh(./s_max) so exp never overflows in
    early adversarial training.  The subnet's last conv is zero-initialized,
    making the coupling start as the identity.
    """

    def __init__(self, channels: int, hidden: int = 32, s_max: float = 2.0, *,
                 rng, dtype=np.float32):
        super().__init__()
        if channels < 2:
            raise ValueError("coupling needs at least 2 channels to split")
        self.c1 = channels // 2
        self.c2 = channels - self.c1
        self.s_max = s_max
        self.net = _coupling_net(self.c1, self.c2, hidden, rng=rng, dtype=dtype)

    def _scale_shift(self, x1: Tensor):
        h = self.net(x1)
        s_raw = h[:, : self.c2]
        t = h[:, self.c2:]
        s = (s_raw / self.s_max).tanh() * self.s_max
        return s, t

    def forward(self, x: Tensor):
        x1 = x[:, : self.c1]
        x2 = x[:, self.c1:]
        s, t = self._scale_shift(x1)
        y2 = x2 * s.exp() + t
        logdet = s.sum(axes=(1, 2, 3))
        return concat([x1, y2], axis=1), logdet

    def inverse(self, y: Tensor):
        y1 = y[:, : self.c1]
        y2 = y[:, self.c1:]
        s, t = self._scale_shift(y1)
        x2 = (y2 - t) * (-s).exp()
        logdet = -s.sum(axes=(1, 2, 3))
        return concat([y1, x2], axis=1), logdet


class _CouplingNet(Module):
    def __init__(self, cin, cout, hidden, *, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(cin, hidden, 3, pad=1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, hidden, 3, pad=1, rng=rng, dtype=dtype)
        self.conv3 = Conv2d(hidden, cout, 3, pad=1, rng=rng, dtype=dtype, zero_init=True)

    def forward(self, x):
        h = self.conv1(x).relu()
        h = self.conv2(h).relu()
        return self.conv3(h)


def _coupling_net(c1, c2, hidden, *, rng, dtype):
    return _CouplingNet(c1, 2 * c2, hidden, rng=rng, dtype=dtype)


@dataclass
class LatentCode:
    """Latent tensor plus accumulated per-sample log|det dz/dx| (shape (B,))."""

    z: Tensor
    logdet: Tensor


class FlowBlock(Module):
    def __init__(self, channels, hidden, *, rng, dtype, identity_init=False,
                 reverse: bool = True):
        super().__init__()
        self.actnorm = ActNorm(channels, dtype=dtype, identity_init=identity_init)
        self.permute = ChannelReverse() if reverse else IdentityPermute()
        self.coupling = AffineCoupling(channels, hidden, rng=rng, dtype=dtype)

    def forward(self, x):
        x, ld1 = self.actnorm(x)
        x = self.permute(x)
        x, ld2 = self.coupling(x)
        return x, ld1 + ld2

    def inverse(self, y):
        y, ld2 = self.coupling.inverse(y)
        y = self.permute.inverse(y)
        y, ld1 = self.actnorm.inverse(y)
        return y, ld1 + ld2


class FlowModel(Module):
    """Composed invertible transform with log-det bookkeeping.

    Single resolution level (scale_count 1): one 2x2 squeeze at the
    input, then ``block_count`` actnorm/permute/coupling blocks on the
    squeezed channels.
    """

    def __init__(self, in_channels: int = 1, block_count: int = 3, hidden: int = 32, *,
                 seed: int = 0, dtype=np.float32, identity_init: bool = False):
        super().__init__()
        rng = seeded_rng(seed, "flow")
        self.squeeze_factor = SQUEEZE
        self.scale_count = 1
        self.block_count = block_count
        self.in_channels = in_channels
        channels = in_channels * SQUEEZE * SQUEEZE
        # the first block skips the reversal: with the default odd depth the
        # remaining reversals pair-cancel, keeping the identity-initialized
        # model equal to a bare squeeze while still alternating which half
        # each coupling transforms
        for i in range(block_count):
            setattr(self, f"block{i}",
                    FlowBlock(channels, hidden, rng=rng, dtype=dtype,
                              identity_init=identity_init, reverse=(i > 0)))

    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(self.block_count)]

    def forward(self, x: Tensor) -> LatentCode:
        b = x.shape[0]
        z = squeeze2x2(x)
        logdet = Tensor(np.zeros(b, dtype=x.data.dtype))
        for block in self.blocks():
            z, ld = block(z)
            logdet = logdet + ld
        return LatentCode(z=z, logdet=logdet)

    def inverse(self, z: Tensor, with_logdet: bool = False):
        expected_c = self.in_channels * 4
        if z.ndim != 4 or z.shape[1] != expected_c:
            raise ValueError(
                f"latent shape {z.shape} does not match flow with {expected_c} squeezed channels")
        b = z.shape[0]
        logdet = Tensor(np.zeros(b, dtype=z.data.dtype))
        for block in reversed(self.blocks()):
            z, ld = block.inverse(z)
            logdet = logdet + ld
        x = unsqueeze2x2(z)
        if with_logdet:
            return x, logdet
        return x


def forward_flow(model: FlowModel, x: Tensor) -> LatentCode:
    return model.forward(x)


def inverse_flow(model: FlowModel, z: Tensor) -> Tensor:
    return model.inverse(z)


def translate(g_src: FlowModel, g_dst: FlowModel, x: Tensor) -> Tensor:
    """Map x across domains through the shared latent space."""
    return g_dst.inverse(g_src.forward(x).z)


def translate_direct(model: FlowModel, x: Tensor, reverse: bool = False) -> Tensor:
    """Single-model direct mapping (no shared latent): forward or inverse."""
    if reverse:
        return model.inverse(squeeze2x2(x))
    return unsqueeze2x2(model.forward(x).z)


def nll_from_code(code: LatentCode) -> Tensor:
    """Gaussian negative log-likelihood from a latent code, batch-averaged."""
    z = code.z
    d = z.shape[1] * z.shape[2] * z.shape[3]
    quad = z.square().sum(axes=(1, 2, 3)) * 0.5
    const = 0.5 * d * math.log(2.0 * math.pi)
    return (quad + const - code.logdet).mean()


def mle_nll(model: FlowModel, x: Tensor) -> Tensor:
    """NLL(x) = 0.5*sum(z^2) + 0.5*D*log(2*pi) - logdet, averaged over batch."""
    return nll_from_code(model.forward(x))
