"""Position information strategies for axial attention.

Covers the seven variants studied here: no encoding, fixed sinusoidal
tables (APE), learnable tables (LPE), relative distance biases (RPE),
and their pairwise combinations, including the learnable+sinusoidal sum
used by the hybrid blocks. Tables are one-dimensional: they describe
positions along a single attended axis and are added to every slice of
that axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    einsum,
    softmax_lastdim,
    take_rows,
)

LEARNABLE_TABLE_STD = 0.02


class EncodingStrategy(Enum):
    """The seven position-encoding variants selectable via config."""

    NONE = "None"
    LPE = "LPE"
    APE = "APE"
    RPE = "RPE"
    APE_RPE = "APE+RPE"
    LPE_RPE = "LPE+RPE"
    LPE_APE = "LPE+APE"

    @classmethod
    def from_name(cls, name: str) -> "EncodingStrategy":
        for member in cls:
            if member.value == name:
                return member
        valid = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown position encoding {name!r}; valid values: {valid}")

    @property
    def uses_sinusoidal(self) -> bool:
        return self in (EncodingStrategy.APE, EncodingStrategy.APE_RPE, EncodingStrategy.LPE_APE)

    @property
    def uses_learnable(self) -> bool:
        return self in (EncodingStrategy.LPE, EncodingStrategy.LPE_RPE, EncodingStrategy.LPE_APE)

    @property
    def relative_mode(self) -> Optional[str]:
        """None, or how relative biases enter: 'standalone' keys/values
        biases, 'combined' query/key/value bias terms on top of an
        absolute table."""
        if self is EncodingStrategy.RPE:
            return "standalone"
        if self in (EncodingStrategy.APE_RPE, EncodingStrategy.LPE_RPE):
            return "combined"
        return None


@dataclass
class SinusoidalTable:
    """Fixed sin/cos position table of shape [L, d], d even."""

    table: Tensor
    length: int
    dim: int


@dataclass
class LearnableTable:
    """Trainable position table of shape [L, d]."""

    table: Tensor
    length: int
    dim: int


@dataclass
class RelativeBiasParams:
    """Trainable relative-position tables indexed by clipped distance.

    Each table has shape [2*k_clip + 1, d]. ``key_bias``/``value_bias``
    serve the standalone relative form; ``q_bias``/``k_bias``/``v_bias``
    serve the combined absolute+relative form. Only the tables a strategy
    actually uses are allocated.
    """

    k_clip: int
    key_bias: Optional[Tensor] = None
    value_bias: Optional[Tensor] = None
    q_bias: Optional[Tensor] = None
    k_bias: Optional[Tensor] = None
    v_bias: Optional[Tensor] = None

    def tables(self):
        named = [
            ("key_bias", self.key_bias),
            ("value_bias", self.value_bias),
            ("q_bias", self.q_bias),
            ("k_bias", self.k_bias),
            ("v_bias", self.v_bias),
        ]
        return [(n, t) for n, t in named if t is not None]


def build_sinusoidal(length: int, dim: int) -> SinusoidalTable:
    """Sin/cos table: entry (i, 2t) = sin(i / 10000^(2t/d)), (i, 2t+1) the cosine."""
    if dim % 2 != 0:
        raise ValueError(f"sinusoidal table needs an even dim, got {dim}")
    if length < 1:
        raise ValueError(f"sinusoidal table needs length >= 1, got {length}")
    pos = np.arange(length)[:, None]
    t2 = np.arange(0, dim, 2)
    angles = pos / np.power(10000.0, t2 / dim)[None, :]
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return SinusoidalTable(Tensor(table), length, dim)


def new_learnable_table(length: int, dim: int, rng: np.random.Generator) -> LearnableTable:
    data = rng.normal(scale=LEARNABLE_TABLE_STD, size=(length, dim))
    return LearnableTable(Tensor(data, requires_grad=True), length, dim)


def new_relative_bias(
    strategy: EncodingStrategy, k_clip: int, dim: int, rng: np.random.Generator
) -> RelativeBiasParams:
    if k_clip < 0:
        raise ValueError(f"k_clip must be >= 0, got {k_clip}")
    rows = 2 * k_clip + 1

    def tbl():
        return Tensor(rng.normal(scale=LEARNABLE_TABLE_STD, size=(rows, dim)), requires_grad=True)

    mode = strategy.relative_mode
    if mode == "standalone":
        return RelativeBiasParams(k_clip, key_bias=tbl(), value_bias=tbl())
    if mode == "combined":
        return RelativeBiasParams(k_clip, q_bias=tbl(), k_bias=tbl(), v_bias=tbl())
    raise ValueError(f"strategy {strategy.value} carries no relative biases")


def clip_distance(x: int, k: int) -> int:
    """max(-k, min(k, x))"""
    return max(-k, min(k, x))


def relative_index_matrix(length: int, k_clip: int) -> np.ndarray:
    """[L, L] lookup indices: entry (i, j) = clip(j - i, k_clip) + k_clip."""
    rel = np.arange(length)[None, :] - np.arange(length)[:, None]
    return np.clip(rel, -k_clip, k_clip) + k_clip


def apply_absolute(x: Tensor, table: Tensor) -> Tensor:
    """Add an absolute position table to a [L, d] sequence."""
    if x.shape != table.shape:
        raise ShapeError(
            f"sequence length {x.shape[0]} vs table length {table.shape[0]} "
            f"(shapes {x.shape} and {table.shape})"
        )
    return add(x, table)


def apply_adpe(f: Tensor, pl: LearnableTable, ps: SinusoidalTable) -> Tensor:
    """Adaptive position embedding: f + learnable table + sinusoidal table."""
    return add(apply_absolute(f, pl.table), ps.table)


def attend_sequences(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    rel: Optional[RelativeBiasParams] = None,
    mode: Optional[str] = None,
) -> Tensor:
    """Batched 1D attention over [B, L, d] sequences.

    mode None: plain content attention.
    mode 'standalone': logits q_i . (k_j + key_bias[d(i,j)]), values get
    value_bias[d(i,j)].
    mode 'combined': logits q_i.k_j + q_i.q_bias[d] + k_j.k_bias[d], values
    get v_bias[d].
    """
    L = q.shape[1]
    logits = einsum("bld,bmd->blm", q, k)
    idx = None
    if mode is not None:
        idx = relative_index_matrix(L, rel.k_clip)
    if mode == "standalone":
        pk = take_rows(rel.key_bias, idx)
        logits = add(logits, einsum("bld,lmd->blm", q, pk))
    elif mode == "combined":
        rq = take_rows(rel.q_bias, idx)
        rk = take_rows(rel.k_bias, idx)
        logits = add(logits, einsum("bld,lmd->blm", q, rq))
        logits = add(logits, einsum("bmd,lmd->blm", k, rk))
    weights = softmax_lastdim(logits)
    out = einsum("blm,bmd->bld", weights, v)
    if mode == "standalone":
        out = add(out, einsum("blm,lmd->bld", weights, take_rows(rel.value_bias, idx)))
    elif mode == "combined":
        out = add(out, einsum("blm,lmd->bld", weights, take_rows(rel.v_bias, idx)))
    return out


def rpe_attention_1d(q: Tensor, k: Tensor, v: Tensor, params: RelativeBiasParams) -> Tensor:
    """Relative-bias attention on already-projected [L, d] sequences."""
    b = lambda t: t.reshape(1, *t.shape)
    out = attend_sequences(b(q), b(k), b(v), params, "standalone")
    return out.reshape(*q.shape)


def combined_ape_rpe_attention_1d(
    x: Tensor,
    abs_table: Tensor,
    params: RelativeBiasParams,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
) -> Tensor:
    """Absolute+relative attention on a raw [L, d_in] sequence.

    The absolute table is added to the inputs first; the relative bias
    terms then enter the logits via the queries and keys and the values
    via their own table.
    """
    xh = apply_absolute(x, abs_table)
    q = einsum("od,ld->lo", wq, xh)
    k = einsum("od,ld->lo", wk, xh)
    v = einsum("od,ld->lo", wv, xh)
    b = lambda t: t.reshape(1, *t.shape)
    out = attend_sequences(b(q), b(k), b(v), params, "combined")
    return out.reshape(*q.shape)
