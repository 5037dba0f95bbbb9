"""Connected auto-encoders (shared encoder, RGB decoder, X-ray decoder) and the
seven-layer single-network baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .layers import BNState, avg_pool2, batch_norm, clamp01, conv2d, relu, upsample2
from .tensor import TRAIN_DTYPE, Tensor, concat, split

WIDTH = 128
BASELINE_WIDTH = 64
BASELINE_DEPTH = 7
DOWNSAMPLE = 8


@dataclass
class ConvBlock:
    """3x3 conv followed by batch norm (if ``bn`` is set)."""

    kernels: Tensor
    bias: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    bn: BNState | None = None

    def parameters(self) -> list[Tensor]:
        ps = [self.kernels, self.bias]
        if self.bn is not None:
            ps += [self.gamma, self.beta]
        return ps

    def conv_bn(self, x: Tensor, train: bool) -> Tensor:
        y = conv2d(x, self.kernels, self.bias, stride=1, padding=1)
        if self.bn is not None:
            y = batch_norm(y, self.gamma, self.beta, self.bn, train=train)
        return y


@dataclass
class EncoderWeights:
    blocks: list[ConvBlock]


@dataclass
class DecoderWeights:
    blocks: list[ConvBlock]

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].kernels.shape[0]


@dataclass
class BaselineWeights:
    blocks: list[ConvBlock]

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def array_slots(self) -> Iterator[tuple[str, object, str]]:
        yield from _block_slots("F", self.blocks)


@dataclass
class ModelWeights:
    encoder: EncoderWeights
    dec_rgb: DecoderWeights
    dec_xray: DecoderWeights

    @property
    def width(self) -> int:
        return self.encoder.blocks[0].kernels.shape[0]

    def parameters(self) -> list[Tensor]:
        return [p for b in self._all_blocks() for p in b.parameters()]

    def _all_blocks(self) -> list[ConvBlock]:
        return self.encoder.blocks + self.dec_rgb.blocks + self.dec_xray.blocks

    def array_slots(self) -> Iterator[tuple[str, object, str]]:
        yield from _block_slots("Er", self.encoder.blocks)
        yield from _block_slots("Dr", self.dec_rgb.blocks)
        yield from _block_slots("Dx", self.dec_xray.blocks)


def _block_slots(prefix, blocks):
    """Yield ``(name, owner, attribute)`` for every parameter and BN statistic;
    ``getattr(owner, attribute)`` is the stored array."""
    for i, b in enumerate(blocks):
        yield f"{prefix}.{i}.kernels", b.kernels, "data"
        yield f"{prefix}.{i}.bias", b.bias, "data"
        if b.bn is not None:
            yield f"{prefix}.{i}.gamma", b.gamma, "data"
            yield f"{prefix}.{i}.beta", b.beta, "data"
            yield f"{prefix}.{i}.running_mean", b.bn, "running_mean"
            yield f"{prefix}.{i}.running_var", b.bn, "running_var"


def _block(rng: np.random.Generator, cin: int, cout: int, bn: bool, dtype) -> ConvBlock:
    fan_in = cin * 9
    k = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3)).astype(dtype)
    blk = ConvBlock(Tensor(k, requires_grad=True), Tensor(np.zeros(cout, dtype), requires_grad=True))
    if bn:
        blk.gamma = Tensor(np.ones(cout, dtype), requires_grad=True)
        blk.beta = Tensor(np.zeros(cout, dtype), requires_grad=True)
        blk.bn = BNState.fresh(cout, dtype)
    return blk


def init_weights(seed: int, width: int = WIDTH, dtype=TRAIN_DTYPE) -> ModelWeights:
    """He-initialized kernels, zero biases, unit BN scale, zero BN shift."""
    rng = np.random.default_rng(seed)
    enc = EncoderWeights([_block(rng, c, width, True, dtype) for c in (3, width, width)])
    dec_r = DecoderWeights([_block(rng, width, c, True, dtype) for c in (width, width, 3)])
    dec_x = DecoderWeights([_block(rng, width, c, True, dtype) for c in (width, width, 1)])
    return ModelWeights(enc, dec_r, dec_x)


def init_baseline(seed: int, width: int = BASELINE_WIDTH, depth: int = BASELINE_DEPTH,
                  dtype=TRAIN_DTYPE) -> BaselineWeights:
    rng = np.random.default_rng(seed)
    chans = [3] + [width] * (depth - 1) + [1]
    return BaselineWeights([_block(rng, a, b, False, dtype) for a, b in zip(chans[:-1], chans[1:])])


def _check_patch(r: Tensor, channels: int) -> None:
    if r.data.ndim != 4 or r.shape[1] != channels:
        raise ValueError(f"expected [B,{channels},H,W] input, got shape {r.shape}")
    h, w = r.shape[2:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ValueError(f"spatial dims must be divisible by {DOWNSAMPLE}, got {h}x{w}")


def encode(r: Tensor, w: EncoderWeights, train: bool = True) -> Tensor:
    """[B,3,H,W] -> [B,width,H/8,W/8]: (conv, BN, ReLU, 2x2 average pool) three times."""
    _check_patch(r, 3)
    h = r
    for blk in w.blocks:
        h = avg_pool2(relu(blk.conv_bn(h, train)))
    return h


def _decode(f: Tensor, w: DecoderWeights, train: bool) -> Tensor:
    width = w.blocks[0].kernels.shape[1]
    if f.data.ndim != 4 or f.shape[1] != width:
        raise ValueError(f"expected feature map [B,{width},h,w], got {f.shape}")
    h = f
    for blk in w.blocks:
        h = upsample2(relu(blk.conv_bn(h, train)))
    return clamp01(h)


def decode_rgb(f: Tensor, w: DecoderWeights, train: bool = True) -> Tensor:
    return _decode(f, w, train)


def decode_xray(f: Tensor, w: DecoderWeights, train: bool = True) -> Tensor:
    return _decode(f, w, train)


GRAPH_KEYS = ("r1_hat", "r2_hat", "x1_hat", "x2_hat", "x_hat", "x_bar", "f1", "f2", "f")


def forward_graph(r1: Tensor, r2: Tensor, weights: ModelWeights, train: bool = True,
                  joint: bool = False) -> dict[str, Tensor]:
    """Run the connected auto-encoder graph on one batch of side-1/side-2 RGB patches.

    By default every network application is a separate call with its own
    batch statistics. With ``joint`` each shared network is instead called
    once on the stacked batch of everything it processes (``[r1; r2]`` for the
    encoder, ``[f1; f2]`` for the RGB decoder, ``[f1; f2; f1 + f2]`` for the
    X-ray decoder).
    """
    if r1.shape != r2.shape:
        raise ValueError(f"r1 and r2 must have the same shape, got {r1.shape} and {r2.shape}")
    if joint:
        f1, f2 = split(encode(concat([r1, r2]), weights.encoder, train), 2)
        f = f1 + f2
        r1_hat, r2_hat = split(decode_rgb(concat([f1, f2]), weights.dec_rgb, train), 2)
        x1_hat, x2_hat, x_hat = split(decode_xray(concat([f1, f2, f]), weights.dec_xray, train), 3)
    else:
        f1, f2 = encode(r1, weights.encoder, train), encode(r2, weights.encoder, train)
        f = f1 + f2
        r1_hat, r2_hat = decode_rgb(f1, weights.dec_rgb, train), decode_rgb(f2, weights.dec_rgb, train)
        x1_hat, x2_hat = decode_xray(f1, weights.dec_xray, train), decode_xray(f2, weights.dec_xray, train)
        x_hat = decode_xray(f, weights.dec_xray, train)
    x_bar = x1_hat + x2_hat
    return dict(r1_hat=r1_hat, r2_hat=r2_hat, x1_hat=x1_hat, x2_hat=x2_hat, x_hat=x_hat,
                x_bar=x_bar, f1=f1, f2=f2, f=f)


def baseline_net(r: Tensor, w: BaselineWeights) -> Tensor:
    h = r
    for i, blk in enumerate(w.blocks):
        h = blk.conv_bn(h, train=False)
        if i < len(w.blocks) - 1:
            h = relu(h)
    return h


def baseline_forward(r1: Tensor, r2: Tensor, w: BaselineWeights) -> dict[str, Tensor]:
    """Apply the single mapping network to both sides."""
    if r1.shape != r2.shape:
        raise ValueError(f"r1 and r2 must have the same shape, got {r1.shape} and {r2.shape}")
    if r1.data.ndim != 4 or r1.shape[1] != 3:
        raise ValueError(f"expected [B,3,H,W] input, got shape {r1.shape}")
    x1_hat, x2_hat = split(baseline_net(concat([r1, r2]), w), 2)
    return dict(x1_hat=x1_hat, x2_hat=x2_hat, x_bar=x1_hat + x2_hat)
