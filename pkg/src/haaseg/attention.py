"""Full, axial, and gated hybrid axial attention over [C, H, W] maps.

Full self-attention over all H*W positions is kept as a reference; the
working layers factorize it into independent 1D attentions along the
height then width axes, each optionally augmented with the position
encodings of :mod:`haaseg.encoding`. The hybrid block wraps both axial
passes with per-channel normalization, 3x3 average-pool smoothing, and
learnable scalar gates against a pooled residual.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .encoding import (
    EncodingStrategy,
    LearnableTable,
    RelativeBiasParams,
    SinusoidalTable,
    attend_sequences,
    build_sinusoidal,
    new_learnable_table,
    new_relative_bias,
)
from .tensor import (
    Tensor,
    add,
    avg_pool2d,
    channel_norm,
    einsum,
    expand,
    mul,
    permute,
    reshape,
    softmax_lastdim,
)

DEFAULT_K_CLIP = 8
POOL_KERNEL = 3


@dataclass
class AttentionParams:
    """Query/key/value projection matrices, applied 1x1 over channels."""

    wq: Tensor
    wk: Tensor
    wv: Tensor

    @property
    def d_in(self) -> int:
        return self.wq.shape[1]

    @property
    def d_out(self) -> int:
        return self.wq.shape[0]


def new_attention_params(d_in: int, d_out: int, rng: np.random.Generator) -> AttentionParams:
    std = d_in ** -0.5
    make = lambda: Tensor(rng.normal(scale=std, size=(d_out, d_in)), requires_grad=True)
    return AttentionParams(make(), make(), make())


@dataclass
class AxisEncoding:
    """Position state for one attended axis of one attention layer."""

    strategy: EncodingStrategy
    length: int
    dim: int
    sinusoidal: Optional[SinusoidalTable] = None
    learnable: Optional[LearnableTable] = None
    relative: Optional[RelativeBiasParams] = None

    @classmethod
    def build(
        cls,
        strategy: EncodingStrategy,
        length: int,
        dim: int,
        k_clip: int,
        rng: np.random.Generator,
    ) -> "AxisEncoding":
        enc = cls(strategy, length, dim)
        if strategy.uses_sinusoidal:
            enc.sinusoidal = build_sinusoidal(length, dim)
        if strategy.uses_learnable:
            enc.learnable = new_learnable_table(length, dim, rng)
        if strategy.relative_mode is not None:
            enc.relative = new_relative_bias(strategy, k_clip, dim, rng)
        return enc

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        if self.learnable is not None:
            out.append(("lpe", self.learnable.table))
        if self.relative is not None:
            out.extend(self.relative.tables())
        return out


def _add_axis_tables(x: Tensor, enc: AxisEncoding) -> Tensor:
    """Add the encoding's absolute tables to every height slice of x [C,L,W]."""
    C, L, W = x.shape
    out = x
    for table in (
        enc.learnable.table if enc.learnable is not None else None,
        enc.sinusoidal.table if enc.sinusoidal is not None else None,
    ):
        if table is None:
            continue
        t3 = reshape(permute(table, (1, 0)), (C, L, 1))
        out = add(out, expand(t3, (C, L, W)))
    return out


def _height_axial(x: Tensor, params: AttentionParams, enc: AxisEncoding) -> Tensor:
    xh = _add_axis_tables(x, enc)
    q = einsum("oc,chw->who", params.wq, xh)
    k = einsum("oc,chw->who", params.wk, xh)
    v = einsum("oc,chw->who", params.wv, xh)
    out = attend_sequences(q, k, v, enc.relative, enc.strategy.relative_mode)
    return permute(out, (2, 1, 0))


def axial_attention(
    x: Tensor,
    axis: str,
    params: AttentionParams,
    enc: AxisEncoding,
) -> Tensor:
    """1D self-attention along one spatial axis of x [C,H,W].

    Every slice perpendicular to the chosen axis is an independent
    sequence; the encoding state augments those sequences before and
    inside the attention according to its strategy.
    """
    if axis == "height":
        return _height_axial(x, params, enc)
    if axis == "width":
        xt = permute(x, (0, 2, 1))
        yt = _height_axial(xt, params, enc)
        return permute(yt, (0, 2, 1))
    raise ValueError(f"axis must be 'height' or 'width', got {axis!r}")


def full_self_attention(x: Tensor, params: AttentionParams) -> Tensor:
    """Reference attention over all H*W positions jointly."""
    C, H, W = x.shape
    xf = reshape(x, (C, H * W))
    q = einsum("oc,cn->no", params.wq, xf)
    k = einsum("oc,cn->no", params.wk, xf)
    v = einsum("oc,cn->no", params.wv, xf)
    logits = einsum("nd,md->nm", q, k)
    weights = softmax_lastdim(logits)
    out = einsum("nm,md->nd", weights, v)
    return reshape(permute(out, (1, 0)), (params.d_out, H, W))


@dataclass
class HybridAxialBlock:
    """Gated height-then-width axial attention with pooled residuals.

    Each stage computes gamma * pool(norm(attention(x))) + pool(x); with
    both gates at zero the block is exactly the double-pooled residual.
    ``pool_stride`` 1 smooths with a 3x3 stride-1 window; 2 downsamples
    the first stage (both branches) with a 2x2 stride-2 window, which
    tiles even extents exactly.
    """

    channels: int
    height: int
    width: int
    strategy: EncodingStrategy
    k_clip: int
    pool_stride: int
    h_params: AttentionParams
    w_params: AttentionParams
    h_enc: AxisEncoding
    w_enc: AxisEncoding
    h_gamma: Tensor
    h_beta: Tensor
    w_gamma: Tensor
    w_beta: Tensor
    gamma1: Tensor
    gamma2: Tensor

    @classmethod
    def build(
        cls,
        channels: int,
        height: int,
        width: int,
        strategy: EncodingStrategy,
        rng: np.random.Generator,
        k_clip: int = DEFAULT_K_CLIP,
        pool_stride: int = 1,
        gate_init: float = 1.0,
    ) -> "HybridAxialBlock":
        # width attention runs after the first pooling stage
        w1 = width // pool_stride
        return cls(
            channels=channels,
            height=height,
            width=width,
            strategy=strategy,
            k_clip=k_clip,
            pool_stride=pool_stride,
            h_params=new_attention_params(channels, channels, rng),
            w_params=new_attention_params(channels, channels, rng),
            h_enc=AxisEncoding.build(strategy, height, channels, k_clip, rng),
            w_enc=AxisEncoding.build(strategy, w1, channels, k_clip, rng),
            h_gamma=Tensor(np.ones(channels), requires_grad=True),
            h_beta=Tensor(np.zeros(channels), requires_grad=True),
            w_gamma=Tensor(np.ones(channels), requires_grad=True),
            w_beta=Tensor(np.zeros(channels), requires_grad=True),
            gamma1=Tensor(np.asarray(gate_init), requires_grad=True),
            gamma2=Tensor(np.asarray(gate_init), requires_grad=True),
        )

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = [
            ("h.wq", self.h_params.wq),
            ("h.wk", self.h_params.wk),
            ("h.wv", self.h_params.wv),
            ("w.wq", self.w_params.wq),
            ("w.wk", self.w_params.wk),
            ("w.wv", self.w_params.wv),
            ("h.norm.gamma", self.h_gamma),
            ("h.norm.beta", self.h_beta),
            ("w.norm.gamma", self.w_gamma),
            ("w.norm.beta", self.w_beta),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
        ]
        out.extend((f"h.enc.{n}", t) for n, t in self.h_enc.named_parameters())
        out.extend((f"w.enc.{n}", t) for n, t in self.w_enc.named_parameters())
        return out

    def _stage1_pool(self, t: Tensor) -> Tensor:
        if self.pool_stride == 1:
            return avg_pool2d(t, POOL_KERNEL, stride=1, padding=1)
        return avg_pool2d(t, self.pool_stride, stride=self.pool_stride, padding=0)

    def forward(self, f_c: Tensor) -> Tensor:
        if f_c.shape != (self.channels, self.height, self.width):
            raise AssertionError(
                f"hybrid block built for {(self.channels, self.height, self.width)}, "
                f"got input {f_c.shape}"
            )
        ha = axial_attention(f_c, "height", self.h_params, self.h_enc)
        ha = channel_norm(ha, self.h_gamma, self.h_beta)
        ha = self._stage1_pool(ha)
        res_h = self._stage1_pool(f_c)
        f_h = add(_gate(self.gamma1, ha), res_h)

        wa = axial_attention(f_h, "width", self.w_params, self.w_enc)
        wa = channel_norm(wa, self.w_gamma, self.w_beta)
        wa = avg_pool2d(wa, POOL_KERNEL, stride=1, padding=1)
        res_w = avg_pool2d(f_h, POOL_KERNEL, stride=1, padding=1)
        return add(_gate(self.gamma2, wa), res_w)

    @property
    def out_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height // self.pool_stride, self.width // self.pool_stride)


def _gate(gamma: Tensor, x: Tensor) -> Tensor:
    g3 = expand(reshape(gamma, (1, 1, 1)), x.shape)
    return mul(g3, x)


@dataclass
class MacCount:
    """Similarity-logit multiply-accumulate counts for one attention layout."""

    full_attention_macs: int
    height_axis_macs: int
    width_axis_macs: int

    @property
    def axial_total(self) -> int:
        return self.height_axis_macs + self.width_axis_macs


def mac_count(H: int, W: int, d: int) -> MacCount:
    """Closed-form logit MACs: full (HW)^2 d, axial H^2 W d + H W^2 d."""
    if H < 1 or W < 1 or d < 1:
        raise ValueError(f"mac_count needs positive dims, got H={H}, W={W}, d={d}")
    return MacCount(
        full_attention_macs=(H * W) ** 2 * d,
        height_axis_macs=H * H * W * d,
        width_axis_macs=H * W * W * d,
    )
