"""Finite-difference verification of every layer and of the whole network.

Each case draws a fresh random instance per seed, in float64. Outputs are
contracted with a fixed random tensor before the checker's sum so that a
backward rule cannot pass by getting only the sum of its gradient right.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .autodiff import Tensor, grad_check
from .model import ModelConfig, init_params, predict_mask

TOLERANCE = 1e-4
# Narrow steps lose the tiniest network gradients to roundoff; kink crossings
# are handled by the checker shrinking the step.
UNIT_EPS = 1e-4
NETWORK_EPS = 1e-4


@dataclass
class CaseResult:
    name: str
    max_error: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _t(arr, grad=True) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + margin)


def _distinct(rng, shape):
    """Values with gaps of 0.01 so that no max-pool window has a near tie."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005).reshape(shape)


def _projected(fn: Callable[..., Tensor], weights: np.ndarray) -> Callable[..., Tensor]:
    w = Tensor(weights)
    return lambda *xs: ops.mul(fn(*xs), w)


def _conv_case(k: int, stride: int = 1, padding: str = "same"):
    def build(rng):
        x = _t(rng.normal(size=(6, 6, 2)))
        w = _t(rng.normal(size=(k, k, 2, 3)))
        b = _t(rng.normal(size=3))
        fn = lambda x, w, b: ops.conv2d(x, ops.ConvParams(w, b, stride, padding))  # noqa: E731
        out_shape = fn(x, w, b).shape
        return _projected(fn, rng.normal(size=out_shape)), [x, w, b], UNIT_EPS

    return build


def _unary(op, sample):
    def build(rng):
        x = _t(sample(rng))
        return _projected(op, rng.normal(size=op(x).shape)), [x], UNIT_EPS

    return build


def _binary(op, sample_a, sample_b):
    def build(rng):
        a, b = _t(sample_a(rng)), _t(sample_b(rng))
        return _projected(op, rng.normal(size=op(a, b).shape)), [a, b], UNIT_EPS

    return build


def _bce_case(rng):
    pred = _t(rng.uniform(0.05, 0.95, size=(5, 5)))
    target = (rng.random((5, 5)) > 0.5).astype(np.float64)
    return (lambda p: ops.bce_loss(p, target)), [pred], UNIT_EPS


def _sigmoid_bce_case(rng):
    logits = _t(rng.normal(scale=2.0, size=(5, 5)))
    target = (rng.random((5, 5)) > 0.5).astype(np.float64)
    return (lambda x: ops.bce_loss(ops.sigmoid(x), target)), [logits], UNIT_EPS


def _end_to_end(fusion_mode: str):
    def build(rng):
        config = ModelConfig.tiny(fusion_mode=fusion_mode)
        params = init_params(config, int(rng.integers(1 << 31)))
        for p in params:
            p.requires_grad = False
            if p.name.endswith(".bias"):
                p.data[...] = rng.normal(scale=0.1, size=p.shape)
        query = _t(rng.random((config.query_size, config.query_size, 3)))
        target = _t(rng.random((config.target_size, config.target_size, 3)))
        head = params["seg.head.weight"]
        head.requires_grad = True
        mask = (rng.random((config.target_size, config.target_size)) > 0.7).astype(np.float64)

        def fn(q, t, h):
            return ops.bce_loss(predict_mask(q, t, params, config), mask)

        return fn, [query, target, head], NETWORK_EPS

    return build


CASES: dict[str, Callable] = {
    "conv2d_1x1": _conv_case(1),
    "conv2d_2x2_same": _conv_case(2),
    "conv2d_3x3_same": _conv_case(3),
    "conv2d_3x3_valid": _conv_case(3, padding="valid"),
    "conv2d_3x3_stride2": _conv_case(3, stride=2),
    "maxpool2x2": _unary(ops.maxpool2x2, lambda r: _distinct(r, (6, 6, 3))),
    "maxpool2x2_batched": _unary(ops.maxpool2x2, lambda r: _distinct(r, (2, 4, 4, 2))),
    "upsample_nearest2x": _unary(ops.upsample_nearest2x, lambda r: r.normal(size=(3, 3, 2))),
    "tile_spatial": _unary(lambda v: ops.tile_spatial(v, 4, 5), lambda r: r.normal(size=(1, 1, 3))),
    "concat_channels": _binary(ops.concat_channels, lambda r: r.normal(size=(3, 4, 2)), lambda r: r.normal(size=(3, 4, 3))),
    "relu": _unary(ops.relu, lambda r: _away_from_zero(r, (4, 4, 2))),
    "sigmoid": _unary(ops.sigmoid, lambda r: r.normal(scale=2.0, size=(4, 4, 2))),
    "tanh": _unary(ops.tanh, lambda r: r.normal(size=(4, 4, 2))),
    "add": _binary(ops.add, lambda r: r.normal(size=(3, 3)), lambda r: r.normal(size=(3, 3))),
    "mul": _binary(ops.mul, lambda r: r.normal(size=(3, 3)), lambda r: r.normal(size=(3, 3))),
    "mean": _unary(ops.mean, lambda r: r.normal(size=(3, 4))),
    "reshape": _unary(lambda x: ops.reshape(x, (4, 3)), lambda r: r.normal(size=(2, 6))),
    "cosine_map": _binary(ops.cosine_map, lambda r: r.normal(size=(4, 4, 3)), lambda r: r.normal(size=(1, 1, 3))),
    "scale_channels": _binary(ops.scale_channels, lambda r: r.normal(size=(3, 3, 4)), lambda r: r.normal(size=(3, 3, 1))),
    "bce_loss": _bce_case,
    "sigmoid_bce": _sigmoid_bce_case,
    "end_to_end_multi_scale": _end_to_end("multi_scale"),
}

EXTRA_CASES: dict[str, Callable] = {
    "end_to_end_bottleneck_only": _end_to_end("bottleneck_only"),
    "end_to_end_cosine_tanh": _end_to_end("cosine_tanh"),
}


def run_case(name: str, seeds: int = 10) -> CaseResult:
    build = CASES.get(name) or EXTRA_CASES[name]
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
        fn, inputs, eps = build(rng)
        worst = max(worst, grad_check(fn, inputs, eps))
    return CaseResult(name, worst, seeds)


def run_suite(seeds: int = 10, names=None) -> list[CaseResult]:
    return [run_case(n, seeds) for n in (names or CASES)]


def format_table(results: list[CaseResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op'.ljust(width)}  seeds  max_rel_error  status"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {r.seeds:5d}  {r.max_error:13.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
