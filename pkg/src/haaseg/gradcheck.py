"""Finite-difference verification of every backward path in the stack.

Each component check compares analytic gradients against central
differences on small random inputs over several seeds. Inputs are
resampled when a relu/clamp argument sits too close to its kink, since
differencing is only meaningful where the function is smooth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import tensor as T
from .attention import AxisEncoding, HybridAxialBlock, new_attention_params, axial_attention
from .encoding import EncodingStrategy
from .network import HAANet, NetConfig
from .tensor import Tensor, finite_diff_check, watch_kinks

TOLERANCE = 1e-4
# differencing flips a relu only if its input sits within eps * slope of
# zero; 10x the probe eps leaves margin without rejecting most samples
KINK_MARGIN = 1e-4
SEEDS = (0, 1, 2)


@dataclass
class ComponentResult:
    name: str
    max_rel_err: float
    passed: bool


def toy_net_config(image_size: int = 16) -> NetConfig:
    """A deliberately tiny network so per-coordinate differencing stays fast."""
    return NetConfig(
        in_channels=1,
        stem_channels=(2, 4),
        encoder_channels=(4,),
        decoder_channels=(4, 4, 2, 2, 2),
        image_size=image_size,
        position_encoding="LPE+APE",
        k_clip=2,
        seed=0,
    )


def _checked(f: Callable[[Tensor], Tensor], make_x: Callable[[int], Tensor]) -> float:
    """Run finite_diff_check at a kink-free point, resampling if needed."""
    worst = 0.0
    for seed in SEEDS:
        for attempt in range(20):
            x = make_x(seed * 100 + attempt)
            with watch_kinks() as log:
                f(x)
            if log and min(log) < KINK_MARGIN:
                continue
            worst = max(worst, finite_diff_check(f, x))
            break
        else:
            raise RuntimeError("could not find a kink-free sample in 20 attempts")
    return worst


def _rand(shape, seed, scale=1.0):
    return Tensor(np.random.default_rng(seed).normal(size=shape) * scale, requires_grad=True)


def _weighted(seed, shape):
    return Tensor(np.random.default_rng(seed + 999).normal(size=shape))


def check_ops() -> List[ComponentResult]:
    results = []

    def run(name, fn, shape):
        err = _checked(fn, lambda s: _rand(shape, s))
        results.append(ComponentResult(f"op.{name}", err, err < TOLERANCE))

    w = Tensor(np.random.default_rng(7).normal(size=(3, 2)))
    run("matmul", lambda t: T.tsum(T.mul(T.matmul(t, w), T.matmul(t, w))), (4, 3))
    run("softmax_lastdim", lambda t: T.tsum(T.mul(T.softmax_lastdim(t), _weighted(1, (3, 5)))), (3, 5))
    k = Tensor(np.random.default_rng(8).normal(size=(2, 2, 3, 3)))
    b = Tensor(np.random.default_rng(9).normal(size=(2,)))
    run(
        "conv2d",
        lambda t: T.tsum(T.mul(T.conv2d(t, k, b, stride=1, padding=1), _weighted(2, (2, 5, 5)))),
        (2, 5, 5),
    )
    run(
        "avg_pool2d",
        lambda t: T.tsum(T.mul(T.avg_pool2d(t, 3, 2, 1), _weighted(3, (2, 3, 3)))),
        (2, 5, 5),
    )
    run(
        "bilinear_upsample",
        lambda t: T.tsum(T.mul(T.bilinear_upsample(t, 2), _weighted(4, (2, 6, 8)))),
        (2, 3, 4),
    )
    gamma = Tensor(np.array([1.2, 0.7]))
    beta = Tensor(np.array([0.1, -0.3]))
    run(
        "channel_norm",
        lambda t: T.tsum(T.mul(T.channel_norm(t, gamma, beta), _weighted(5, (2, 4, 4)))),
        (2, 4, 4),
    )
    run("relu", lambda t: T.tsum(T.mul(T.relu(t), _weighted(6, (4, 4)))), (4, 4))
    run("sigmoid", lambda t: T.tsum(T.mul(T.sigmoid(t), _weighted(7, (4, 4)))), (4, 4))
    run("add", lambda t: T.tsum(T.mul(T.add(t, t), _weighted(8, (3, 3)))), (3, 3))
    run(
        "permute",
        lambda t: T.tsum(T.mul(T.permute(t, (2, 0, 1)), _weighted(9, (4, 2, 3)))),
        (2, 3, 4),
    )
    return results


def check_encodings() -> List[ComponentResult]:
    results = []
    for strategy in EncodingStrategy:
        rng = np.random.default_rng(11)
        params = new_attention_params(4, 4, rng)
        enc = AxisEncoding.build(strategy, 4, 4, 2, rng)
        wsum = _weighted(10, (4, 4, 3))

        def f(t):
            return T.tsum(T.mul(axial_attention(t, "height", params, enc), wsum))

        err = _checked(f, lambda s: _rand((4, 4, 3), s))
        results.append(
            ComponentResult(f"encoding.{strategy.value}", err, err < TOLERANCE)
        )
    return results


def check_hybrid_block() -> List[ComponentResult]:
    rng = np.random.default_rng(12)
    block = HybridAxialBlock.build(2, 4, 4, EncodingStrategy.LPE_APE, rng, k_clip=2)
    wsum = _weighted(11, (2, 4, 4))
    err = _checked(
        lambda t: T.tsum(T.mul(block.forward(t), wsum)), lambda s: _rand((2, 4, 4), s)
    )
    return [ComponentResult("hybrid_block", err, err < TOLERANCE)]


def check_full_net(config: Optional[NetConfig] = None) -> List[ComponentResult]:
    """End-to-end check: input gradient plus every parameter tensor."""
    from dataclasses import replace

    config = config or toy_net_config()
    S = config.image_size
    results = []
    for seed in SEEDS:
        net = HAANet(replace(config, seed=seed))
        wsum = _weighted(20 + seed, (1, S, S))

        def loss_from_input(t):
            return T.tsum(T.mul(net.forward(t), wsum))

        err = _checked(loss_from_input, lambda s: _rand((1, S, S), s, scale=0.5))
        results.append(ComponentResult(f"net.input.seed{seed}", err, err < TOLERANCE))
    # parameter gradients, all tensors, at one kink-free input
    net = HAANet(config)
    for attempt in range(20):
        x = Tensor(np.random.default_rng(31 + attempt).normal(size=(1, S, S)) * 0.5)
        with watch_kinks() as log:
            net.forward(x)
        if not log or min(log) >= KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not find a kink-free input in 20 attempts")
    wsum = _weighted(32, (1, S, S))
    worst = 0.0
    for name, p in net.named_parameters():
        err = finite_diff_check(lambda t: T.tsum(T.mul(net.forward(x), wsum)), p)
        worst = max(worst, err)
    results.append(ComponentResult("net.parameters", worst, worst < TOLERANCE))
    return results


def run_all(config: Optional[NetConfig] = None) -> List[ComponentResult]:
    results = []
    results.extend(check_ops())
    results.extend(check_encodings())
    results.extend(check_hybrid_block())
    results.extend(check_full_net(config))
    return results
