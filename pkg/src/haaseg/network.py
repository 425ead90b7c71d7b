"""Encoder-decoder segmentation network built on hybrid axial attention.

A small convolutional stem (stride-2 after the first block) brings the
input down to the attention resolution, a stack of gated hybrid axial
blocks models long-range context there, and five decoder layers with
bilinear upsampling, projected residuals, and encoder skips restore full
resolution before a 3x3 conv + sigmoid head emits the probability map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attention import HybridAxialBlock, mac_count
from .encoding import EncodingStrategy
from .tensor import (
    ShapeError,
    Tensor,
    add,
    bilinear_upsample,
    channel_norm,
    conv2d,
    relu,
    sigmoid,
)


@dataclass
class NetConfig:
    """Architecture hyperparameters; every field has a usable default."""

    in_channels: int = 1
    stem_channels: Tuple[int, ...] = (16, 32, 64)
    encoder_channels: Tuple[int, ...] = (64, 64, 64, 64)
    decoder_channels: Tuple[int, ...] = (64, 64, 32, 32, 16)
    image_size: int = 32
    position_encoding: str = "LPE+APE"
    k_clip: int = 8
    seed: int = 0

    def __post_init__(self):
        self.stem_channels = tuple(int(c) for c in self.stem_channels)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if len(self.decoder_channels) != 5:
            raise ValueError(
                f"decoder needs exactly 5 layers, got {len(self.decoder_channels)}"
            )
        if not self.stem_channels or not self.encoder_channels:
            raise ValueError("stem_channels and encoder_channels must be non-empty")
        if any(c != self.stem_channels[-1] for c in self.encoder_channels):
            raise ValueError(
                "encoder_channels must all equal the last stem width "
                f"({self.stem_channels[-1]}), got {self.encoder_channels}"
            )
        down = 2 ** (len(self.stem_channels) - 1)
        if self.image_size % down != 0 or self.image_size // down < 2:
            raise ValueError(
                f"image_size {self.image_size} incompatible with {down}x stem downsampling"
            )
        self.strategy  # validates the encoding name

    @property
    def strategy(self) -> EncodingStrategy:
        return EncodingStrategy.from_name(self.position_encoding)

    @property
    def stem_strides(self) -> Tuple[int, ...]:
        return (1,) + (2,) * (len(self.stem_channels) - 1)

    @property
    def attention_size(self) -> int:
        return self.image_size // 2 ** (len(self.stem_channels) - 1)

    @property
    def upsample_factors(self) -> Tuple[int, ...]:
        n_up = len(self.stem_channels) - 1
        if n_up > 5:
            raise ValueError("stem downsamples more than five decoder layers can undo")
        factors = [1] * 5
        for slot in (1, 3, 0, 2, 4)[:n_up]:
            factors[slot] = 2
        return tuple(factors)


def _he_tensor(
    rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, gain: float = 1.0
) -> Tensor:
    scale = gain * (2.0 / fan_in) ** 0.5
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


@dataclass
class ConvBlock:
    """Conv -> per-channel norm -> relu, the stem building unit.

    Stride-1 blocks use 3x3/pad-1 kernels; stride-2 blocks use 4x4/pad-1,
    the exact-tiling downsampler for even extents (3x3/stride-2/pad-1
    would leave a fractional output extent). The conv carries no bias:
    the norm's mean subtraction would cancel it exactly, and beta already
    provides the shift.
    """

    kernel: Tensor
    gamma: Tensor
    beta: Tensor
    stride: int
    padding: int

    @classmethod
    def build(cls, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        if stride not in (1, 2):
            raise ValueError(f"conv blocks support stride 1 or 2, got {stride}")
        k = 3 if stride == 1 else 4
        return cls(
            kernel=_he_tensor(rng, (c_out, c_in, k, k), c_in * k * k),
            gamma=Tensor(np.ones(c_out), requires_grad=True),
            beta=Tensor(np.zeros(c_out), requires_grad=True),
            stride=stride,
            padding=1,
        )

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.kernel, stride=self.stride, padding=self.padding)
        return relu(channel_norm(y, self.gamma, self.beta))

    def named_parameters(self):
        return [
            ("kernel", self.kernel),
            ("gamma", self.gamma),
            ("beta", self.beta),
        ]


def conv_block_forward(x: Tensor, block: ConvBlock) -> Tensor:
    return block.forward(x)


@dataclass
class DecoderLayer:
    """ReLU(upsample(conv3x3(f))) + upsample(proj(f)) + proj(skip)."""

    conv_kernel: Tensor
    conv_bias: Tensor
    res_kernel: Tensor
    res_bias: Tensor
    skip_kernel: Tensor
    skip_bias: Tensor
    factor: int

    @classmethod
    def build(cls, c_in: int, c_out: int, c_skip: int, factor: int, rng: np.random.Generator):
        # three summands feed each output, so each is scaled to a third of
        # the variance; otherwise five stacked layers inflate activations
        # enough to saturate the sigmoid head at initialization
        gain = 3.0 ** -0.5
        return cls(
            conv_kernel=_he_tensor(rng, (c_out, c_in, 3, 3), c_in * 9, gain),
            conv_bias=Tensor(np.zeros(c_out), requires_grad=True),
            res_kernel=_he_tensor(rng, (c_out, c_in, 1, 1), c_in, gain),
            res_bias=Tensor(np.zeros(c_out), requires_grad=True),
            skip_kernel=_he_tensor(rng, (c_out, c_skip, 1, 1), c_skip, gain),
            skip_bias=Tensor(np.zeros(c_out), requires_grad=True),
            factor=factor,
        )

    def forward(self, f: Tensor, skip: Tensor) -> Tensor:
        y = relu(bilinear_upsample(conv2d(f, self.conv_kernel, self.conv_bias, padding=1), self.factor))
        res = bilinear_upsample(conv2d(f, self.res_kernel, self.res_bias), self.factor)
        fused = add(y, res)
        sk = conv2d(skip, self.skip_kernel, self.skip_bias)
        if sk.shape != fused.shape:
            raise AssertionError(f"skip {sk.shape} does not match decoder output {fused.shape}")
        return add(fused, sk)

    def named_parameters(self):
        return [
            ("conv.kernel", self.conv_kernel),
            ("conv.bias", self.conv_bias),
            ("res.kernel", self.res_kernel),
            ("res.bias", self.res_bias),
            ("skip.kernel", self.skip_kernel),
            ("skip.bias", self.skip_bias),
        ]


def decoder_layer_forward(f: Tensor, skip: Tensor, layer: DecoderLayer) -> Tensor:
    return layer.forward(f, skip)


@dataclass
class ParamReport:
    total_params: int
    per_module_params: Dict[str, int]
    total_macs_per_forward: int


class HAANet:
    """The assembled segmentation network for one-channel square images."""

    def __init__(self, config: NetConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c_prev = config.in_channels
        self.stem: List[ConvBlock] = []
        for c_out, stride in zip(config.stem_channels, config.stem_strides):
            self.stem.append(ConvBlock.build(c_prev, c_out, stride, rng))
            c_prev = c_out
        r = config.attention_size
        self.encoder: List[HybridAxialBlock] = [
            HybridAxialBlock.build(
                c_prev, r, r, config.strategy, rng, k_clip=config.k_clip, pool_stride=1
            )
            for _ in config.encoder_channels
        ]
        # resolutions available as skip sources
        stem_res = {}
        res = config.image_size
        for i, stride in enumerate(config.stem_strides):
            res //= stride
            stem_res.setdefault(res, i)  # earliest stem block at each resolution
        self._skip_sources: List[Tuple[str, int]] = []
        enc_pool = list(range(len(self.encoder) - 1))  # all but the decoder input
        self.decoder: List[DecoderLayer] = []
        c_in = c_prev
        out_res = r
        for i, (c_out, factor) in enumerate(
            zip(config.decoder_channels, config.upsample_factors)
        ):
            out_res *= factor
            if out_res == r and enc_pool:
                src = ("enc", enc_pool.pop())
                c_skip = c_prev
            elif out_res in stem_res:
                src = ("stem", stem_res[out_res])
                c_skip = config.stem_channels[stem_res[out_res]]
            else:
                raise ValueError(
                    f"no encoder feature at resolution {out_res} for decoder layer {i}"
                )
            self._skip_sources.append(src)
            self.decoder.append(DecoderLayer.build(c_in, c_out, c_skip, factor, rng))
            c_in = c_out
        if out_res != config.image_size:
            raise ValueError(
                f"decoder ends at resolution {out_res}, expected {config.image_size}"
            )
        self.head_kernel = _he_tensor(rng, (1, c_in, 3, 3), c_in * 9, gain=0.25)
        self.head_bias = Tensor(np.zeros(1), requires_grad=True)

    def forward_logits(self, image: Tensor) -> Tensor:
        """Pre-sigmoid segmentation scores; shape matches the input."""
        S = self.config.image_size
        want = (self.config.in_channels, S, S)
        if image.shape != want:
            raise ShapeError(f"expected input of shape {want}, got {image.shape}")
        feats = {"stem": [], "enc": []}
        x = image
        for block in self.stem:
            x = block.forward(x)
            feats["stem"].append(x)
        for block in self.encoder:
            x = block.forward(x)
            feats["enc"].append(x)
        for layer, (kind, idx) in zip(self.decoder, self._skip_sources):
            x = layer.forward(x, feats[kind][idx])
        return conv2d(x, self.head_kernel, self.head_bias, padding=1)

    def forward(self, image: Tensor) -> Tensor:
        return sigmoid(self.forward_logits(image))

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for i, block in enumerate(self.stem):
            out.extend((f"stem.{i}.{n}", t) for n, t in block.named_parameters())
        for i, block in enumerate(self.encoder):
            out.extend((f"enc.{i}.{n}", t) for n, t in block.named_parameters())
        for i, layer in enumerate(self.decoder):
            out.extend((f"dec.{i}.{n}", t) for n, t in layer.named_parameters())
        out.append(("head.kernel", self.head_kernel))
        out.append(("head.bias", self.head_bias))
        return out

    def state_items(self) -> List[Tuple[str, np.ndarray]]:
        return [(n, t.data) for n, t in self.named_parameters()]

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ValueError(
                "checkpoint does not match this architecture "
                f"(missing: {missing[:4]}, unexpected: {extra[:4]})"
            )
        for name, t in params.items():
            if state[name].shape != t.data.shape:
                raise ValueError(
                    f"checkpoint tensor {name} has shape {state[name].shape}, "
                    f"expected {t.data.shape}"
                )
            t.data[...] = state[name]


def count_params(net: HAANet) -> ParamReport:
    """Exact parameter totals by enumerating learnable tensors."""
    per_module: Dict[str, int] = {}
    total = 0
    for name, t in net.named_parameters():
        parts = name.split(".")
        module = ".".join(parts[:2]) if parts[0] in ("stem", "enc", "dec") else parts[0]
        per_module[module] = per_module.get(module, 0) + t.size
        total += t.size
    return ParamReport(total, per_module, count_macs(net, net.config.image_size))


def _conv_macs(c_out: int, c_in: int, k: int, out_hw: Tuple[int, int]) -> int:
    return c_out * c_in * k * k * out_hw[0] * out_hw[1]


def count_macs(net: HAANet, image_size: Optional[int] = None) -> int:
    """Multiply-accumulates of one forward pass.

    Convolutions and 1x1 projections use c_out*c_in*k^2*H'*W'; each
    attention stage counts its q/k/v projections plus twice the
    similarity-logit closed form (logits and the value-weighted sum);
    norms count 3 ops per element, gates 1, pooling k^2 per output
    element, bilinear passes 2 per produced element.
    """
    cfg = net.config
    S = cfg.image_size if image_size is None else image_size
    total = 0
    res = S
    c_prev = cfg.in_channels
    for block, c_out in zip(net.stem, cfg.stem_channels):
        res //= block.stride
        k = block.kernel.shape[-1]
        total += _conv_macs(c_out, c_prev, k, (res, res)) + 3 * c_out * res * res
        c_prev = c_out
    d = c_prev
    for block in net.encoder:
        h = w = res
        counts = mac_count(h, w, d)
        # height stage: projections, logits + value mix, norm, pool x2, gate
        total += 3 * d * d * h * w + 2 * counts.height_axis_macs
        total += 3 * d * h * w + 2 * 9 * d * h * w + d * h * w
        h2, w2 = h // block.pool_stride, w // block.pool_stride
        counts2 = mac_count(h2, w2, d)
        total += 3 * d * d * h2 * w2 + 2 * counts2.width_axis_macs
        total += 3 * d * h2 * w2 + 2 * 9 * d * h2 * w2 + d * h2 * w2
        res = h2
    c_in = d
    for layer, c_out in zip(net.decoder, cfg.decoder_channels):
        total += _conv_macs(c_out, c_in, 3, (res, res))
        total += _conv_macs(c_out, c_in, 1, (res, res))
        up = res * layer.factor
        if layer.factor > 1:
            total += 2 * 2 * c_out * up * up  # two separable lerp passes, main + residual
        total += _conv_macs(c_out, layer.skip_kernel.shape[1], 1, (up, up))
        res = up
        c_in = c_out
    total += _conv_macs(1, cfg.decoder_channels[-1], 3, (S, S))
    return total
