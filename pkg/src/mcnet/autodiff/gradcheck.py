"""Central finite-difference verification of operation adjoints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward

STEP = 1e-5
TOLERANCE = 1e-4
# relative error uses max(|analytic|, |numeric|, FLOOR) as denominator so
# entries whose true gradient is ~0 are judged on absolute error
FLOOR = 1e-3


@dataclass
class CheckCase:
    name: str
    fn: Callable[..., Tensor]
    make_inputs: Callable[[np.random.Generator], Sequence[np.ndarray]]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def numeric_grads(fn, arrays: Sequence[np.ndarray], weights: np.ndarray, h: float = STEP) -> list[np.ndarray]:
    def scalar(arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * weights).sum())

    out = []
    for k, base in enumerate(arrays):
        grad = np.zeros_like(base)
        flat = grad.reshape(-1)
        for i in range(base.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].reshape(-1)[i] += h
            minus[k].reshape(-1)[i] -= h
            flat[i] = (scalar(plus) - scalar(minus)) / (2 * h)
        out.append(grad)
    return out


def analytic_grads(fn, arrays: Sequence[np.ndarray], weights: np.ndarray) -> list[np.ndarray]:
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*inputs)
        loss = ops.sum(ops.mul(out, Tensor(weights)))
    grads = backward(loss, tape, wrt=inputs)
    return [grads[t] for t in inputs]


def check(case: CheckCase, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in case.make_inputs(rng)]
    out_shape = case.fn(*[Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape)
    ana = analytic_grads(case.fn, arrays, weights)
    num = numeric_grads(case.fn, arrays, weights)
    worst = 0.0
    for a, n in zip(ana, num):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
        worst = max(worst, float((np.abs(a - n) / denom).max(initial=0.0)))
    return CheckResult(case.name, worst, worst < TOLERANCE)


def _grid(rng, b, h, w):
    # keep samples off integer pixel positions and inside the clamp range
    return rng.uniform(-0.95, 0.95, size=(b, h, w, 2))


def _cases() -> dict[str, list[CheckCase]]:
    def n(shape):
        return lambda r: [r.standard_normal(shape)]

    def pos(shape):
        return lambda r: [r.uniform(0.5, 2.0, shape)]

    def signed(shape):
        return lambda r: [_away_from_zero(r, shape)]

    reg: dict[str, list[CheckCase]] = {}

    def add(op, fn, *makers):
        reg[op] = [CheckCase(f"{op}[{i}]", fn, m) for i, m in enumerate(makers)]

    add("add", lambda a, b: ops.add(a, b),
        lambda r: [r.standard_normal((3,)), r.standard_normal((3,))],
        lambda r: [r.standard_normal((2, 3)), r.standard_normal((1, 3))],
        lambda r: [r.standard_normal((2, 1, 4)), r.standard_normal((3, 1))])
    add("sub", lambda a, b: ops.sub(a, b),
        lambda r: [r.standard_normal((4,)), r.standard_normal((4,))],
        lambda r: [r.standard_normal((2, 3)), r.standard_normal((3,))],
        lambda r: [r.standard_normal((2, 2, 2)), r.standard_normal((2, 1, 2))])
    add("mul", lambda a, b: ops.mul(a, b),
        lambda r: [r.standard_normal((5,)), r.standard_normal((5,))],
        lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 1))],
        lambda r: [r.standard_normal((2, 3, 2)), r.standard_normal((3, 2))])
    add("div", lambda a, b: ops.div(a, b),
        lambda r: [r.standard_normal((4,)), r.uniform(0.5, 2.0, (4,))],
        lambda r: [r.standard_normal((2, 3)), r.uniform(0.5, 2.0, (1, 3))],
        lambda r: [r.standard_normal((3, 2, 2)), r.uniform(0.5, 2.0, (2,))])
    add("exp", ops.exp, n((4,)), n((2, 3)), n((2, 2, 3)))
    add("log", ops.log, pos((4,)), pos((2, 3)), pos((2, 2, 2)))
    add("sqrt", ops.sqrt, pos((4,)), pos((2, 3)), pos((2, 2, 2)))
    add("square", ops.square, n((4,)), n((2, 3)), n((2, 2, 2)))
    add("sin", ops.sin, n((4,)), n((2, 3)), n((2, 2, 2)))
    add("cos", ops.cos, n((4,)), n((2, 3)), n((2, 2, 2)))
    add("abs", ops.abs, signed((4,)), signed((2, 3)), signed((2, 2, 2)))
    add("relu", ops.relu, signed((4,)), signed((2, 3)), signed((2, 2, 2)))
    add("sigmoid", ops.sigmoid, n((4,)), n((2, 3)), lambda r: [3 * r.standard_normal((2, 2, 2))])
    add("sum", lambda a: ops.sum(a, axis=1), n((2, 3)), n((2, 3, 4)), n((3, 1, 2)))
    add("mean", lambda a: ops.mean(a, axis=(0, -1)), n((2, 3)), n((2, 3, 4)), n((3, 1, 2)))
    add("reshape", lambda a: ops.reshape(a, (-1,)), n((2, 3)), n((2, 3, 4)), n((1, 5)))
    add("transpose", lambda a: ops.transpose(a), n((2, 3)), n((2, 3, 4)), n((1, 5)))
    add("index", lambda a: ops.index(a, (slice(None), 0)), n((2, 3)), n((2, 3, 4)), n((3, 2)))
    add("concat", lambda a, b: ops.concat([a, b], axis=1),
        lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 1))],
        lambda r: [r.standard_normal((1, 2, 2)), r.standard_normal((1, 3, 2))],
        lambda r: [r.standard_normal((2, 1, 2, 2)), r.standard_normal((2, 2, 2, 2))])

    def split_join(a):
        first, second = ops.split(a, [1, a.shape[1] - 1], axis=1)
        return ops.concat([ops.mul(first, 2.0), ops.square(second)], axis=1)

    add("split", split_join, n((2, 3)), n((1, 4, 2)), n((2, 2, 2, 2)))
    add("matmul", lambda a, b: ops.matmul(a, b),
        lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))],
        lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))],
        lambda r: [r.standard_normal((2, 2, 3)), r.standard_normal((2, 3, 2))])
    add("softmax", lambda a: ops.softmax(a, axis=-1), n((4,)), n((3, 5)), lambda r: [r.standard_normal((2, 3, 4))])
    add("softmax_axis1", lambda a: ops.softmax(a, axis=1), n((3, 5)), n((2, 3, 4)), n((2, 4, 2, 2)))
    add("global_avg_pool", ops.global_avg_pool, n((1, 2, 3, 3)), n((2, 3, 2, 4)), n((2, 1, 1, 1)))
    add("avg_pool2", ops.avg_pool2, n((1, 1, 2, 2)), n((2, 3, 4, 4)), n((1, 2, 2, 6)))
    add("upsample_nearest2", ops.upsample_nearest2, n((1, 1, 2, 2)), n((2, 3, 3, 2)), n((1, 2, 1, 1)))
    add("l1", lambda a, b: ops.l1(a, b),
        lambda r: [r.standard_normal((4,)), r.standard_normal((4,)) + 3.0],
        lambda r: [r.standard_normal((2, 3)) + 3.0, r.standard_normal((2, 3)) - 3.0],
        lambda r: [r.standard_normal((2, 2, 2)), r.standard_normal((2, 2, 2)) + 3.0])
    add("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
        lambda r: [r.standard_normal((2, 3, 5, 5)), r.standard_normal((2, 3, 3, 3)), r.standard_normal(2)],
        lambda r: [r.standard_normal((1, 2, 4, 3)), r.standard_normal((3, 2, 1, 1)), r.standard_normal(3)],
        lambda r: [r.standard_normal((1, 1, 6, 6)), r.standard_normal((2, 1, 3, 3)), r.standard_normal(2)])
    add("conv2d_wide_input", lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
        lambda r: [r.standard_normal((2, 4, 4, 5)), r.standard_normal((4, 4, 3, 3)), r.standard_normal(4)],
        lambda r: [r.standard_normal((1, 5, 3, 3)), r.standard_normal((2, 5, 3, 3)), r.standard_normal(2)],
        lambda r: [r.standard_normal((2, 3, 6, 4)), r.standard_normal((1, 3, 5, 5)), r.standard_normal(1)])
    add("conv2d_strided", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
        lambda r: [r.standard_normal((1, 2, 5, 5)), r.standard_normal((2, 2, 3, 3)), r.standard_normal(2)],
        lambda r: [r.standard_normal((2, 1, 6, 4)), r.standard_normal((1, 1, 3, 3)), r.standard_normal(1)],
        lambda r: [r.standard_normal((1, 1, 7, 7)), r.standard_normal((2, 1, 5, 5)), r.standard_normal(2)])
    add("conv2d_per_sample", lambda x, w: ops.conv2d(x, w, padding=1),
        lambda r: [r.standard_normal((2, 2, 4, 4)), r.standard_normal((2, 3, 2, 3, 3))],
        lambda r: [r.standard_normal((1, 3, 3, 3)), r.standard_normal((1, 2, 3, 3, 3))],
        lambda r: [r.standard_normal((3, 1, 4, 5)), r.standard_normal((3, 1, 1, 3, 3))])
    add("grid_sample_bilinear", ops.grid_sample_bilinear,
        lambda r: [r.standard_normal((1, 1, 3, 3)), _grid(r, 1, 2, 2)],
        lambda r: [r.standard_normal((2, 2, 4, 5)), _grid(r, 2, 3, 3)],
        lambda r: [r.standard_normal((1, 3, 5, 4)), _grid(r, 1, 4, 2)])
    add("grid_sample_clamped", ops.grid_sample_bilinear,
        lambda r: [r.standard_normal((1, 1, 3, 3)), r.uniform(1.1, 1.5, (1, 2, 2, 2))],
        lambda r: [r.standard_normal((1, 2, 4, 4)), r.uniform(-1.5, -1.1, (1, 2, 3, 2))],
        lambda r: [r.standard_normal((2, 1, 3, 4)), np.concatenate(
            [r.uniform(1.1, 1.5, (2, 2, 2, 1)), r.uniform(-0.9, 0.9, (2, 2, 2, 1))], axis=-1)])
    add("resize_bilinear", lambda x: ops.resize_bilinear(x, 3, 5), n((1, 1, 2, 2)), n((2, 2, 4, 4)), n((1, 3, 5, 3)))
    return reg


REGISTRY: dict[str, list[CheckCase]] = _cases()


def run(names: Sequence[str] | None = None, seed: int = 0,
        registry: dict[str, list[CheckCase]] | None = None) -> list[CheckResult]:
    registry = REGISTRY if registry is None else registry
    names = list(registry) if names is None else list(names)
    unknown = [nm for nm in names if nm not in registry]
    if unknown:
        raise KeyError(f"unknown operation(s): {', '.join(unknown)}")
    results = []
    for nm in names:
        for case in registry[nm]:
            results.append(check(case, seed=seed))
    return results
