"""Finite-difference gradient suite over every differentiable op and a tiny
end-to-end attentive model, all in float64."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .model import Model, ModelConfig, joint_loss
from .numerics import Tensor

# debug alias -> engine op name
CORRUPT_ALIASES = {"msa": "softmax_rows", "attention": "softmax_rows", "ln": "layer_norm",
                   "conv": "conv2d", "pool": "max_pool2d"}


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _t(rng, *shape, positive=False):
    a = rng.normal(size=shape)
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a, requires_grad=True)


def _pool_input(rng, shape):
    # well separated values keep the argmax away from ties under perturbation
    vals = rng.permutation(int(np.prod(shape))).astype(np.float64) * 0.1
    return Tensor(vals.reshape(shape), requires_grad=True)


def _relu_input(rng, shape):
    a = rng.normal(size=shape)
    a = np.where(np.abs(a) < 0.05, 0.1, a)  # stay clear of the kink
    return Tensor(a, requires_grad=True)


def tiny_config() -> ModelConfig:
    return ModelConfig(variant="AttMultiROI", crop_size=8, widths=(2, 3), d_model=4, heads=2,
                       layers=1, mlp_hidden=8, reg_hidden=2)


def _tiny_model_case(rng):
    model = Model.create(tiny_config(), seed=1, dtype=np.float64)
    for name, p in model.params.items():  # non-trivial positions and biases
        if name.endswith(("E_pos", ".bias", ".beta")):
            p.data = rng.normal(0, 0.1, size=p.shape)
    x = rng.normal(size=(2, 15, 8, 8))
    target = rng.normal(size=2)
    names = sorted(model.params)

    def f(*ps):
        for n, p in zip(names, ps):
            model.params[n] = p
        g, loc = model.forward(x)
        return joint_loss(g, loc, target, 1.0)

    return f, [model.params[n] for n in names]


def cases(seed: int = 0) -> list[tuple[str, Callable, list[Tensor]]]:
    rng = np.random.default_rng(seed)
    out = [
        ("add", nx.add, [_t(rng, 3, 4), _t(rng, 4)]),
        ("mul", nx.mul, [_t(rng, 3, 4), _t(rng, 3, 1)]),
        ("neg", nx.neg, [_t(rng, 5)]),
        ("power", lambda a: nx.power(a, 1.5), [_t(rng, 6, positive=True)]),
        ("div", lambda a: a / 4.0, [_t(rng, 2, 3)]),
        ("relu", nx.relu, [_relu_input(rng, (4, 5))]),
        ("gelu", nx.gelu, [_t(rng, 4, 5)]),
        ("reshape", lambda a: nx.reshape(a, (6, 2)), [_t(rng, 3, 4)]),
        ("transpose", lambda a: nx.transpose(a, (1, 0, 2)), [_t(rng, 2, 3, 4)]),
        ("getitem", lambda a: nx.getitem(a, (slice(None), [0, 2, 2])), [_t(rng, 3, 4)]),
        ("concat", lambda a, b: nx.concat([a, b], axis=1), [_t(rng, 2, 3), _t(rng, 2, 2)]),
        ("sum", lambda a: nx.tsum(a, axis=0), [_t(rng, 3, 4)]),
        ("mean", lambda a: nx.tmean(a, axis=(-2, -1)), [_t(rng, 2, 3, 4)]),
        ("mean_rows", nx.mean_rows, [_t(rng, 2, 5, 3)]),
        ("mse", lambda a: nx.mse(a, np.arange(4.0)), [_t(rng, 4)]),
        ("matmul", nx.matmul, [_t(rng, 2, 3, 4), _t(rng, 4, 5)]),
        ("linear", nx.linear, [_t(rng, 3, 4), _t(rng, 4, 2), _t(rng, 2)]),
        ("softmax_rows", nx.softmax_rows, [_t(rng, 3, 5)]),
        ("layer_norm", nx.layer_norm, [_t(rng, 3, 6), _t(rng, 6), _t(rng, 6)]),
        ("conv2d", lambda x, w, b: nx.conv2d(x, w, b, pad=1),
         [_t(rng, 2, 2, 5, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)]),
        ("conv2d_stride", lambda x, w: nx.conv2d(x, w, stride=2),
         [_t(rng, 2, 5, 5), _t(rng, 2, 2, 3, 3)]),
        ("max_pool2d", nx.max_pool2d, [_pool_input(rng, (2, 4, 6))]),
        ("global_avg_pool", nx.global_avg_pool, [_t(rng, 2, 3, 4, 4)]),
    ]
    f, ps = _tiny_model_case(rng)
    out.append(("tiny_AttMultiROI", f, ps))
    return out


def run_suite(corrupt: str | None = None, tol: float = 1e-4, seed: int = 0) -> list[SuiteResult]:
    """Run every case; ``corrupt`` names an op (or alias) whose backward is scaled."""
    results = []
    op = CORRUPT_ALIASES.get(corrupt, corrupt) if corrupt else None
    for name, f, xs in cases(seed):
        if op:
            with nx.corrupt_backward(op):
                rep = nx.gradcheck(f, xs, tol=tol)
        else:
            rep = nx.gradcheck(f, xs, tol=tol)
        results.append(SuiteResult(name, rep.max_rel_error, tol, rep.n_checked))
    return results


def format_results(results: list[SuiteResult]) -> str:
    lines = ["op,max_rel_error,tol,n_checked,status"]
    for r in results:
        lines.append(f"{r.name},{r.max_rel_error:.3e},{r.tol:g},{r.n_checked},"
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


def timed_suite(**kw) -> tuple[list[SuiteResult], float]:
    t0 = time.perf_counter()
    res = run_suite(**kw)
    return res, time.perf_counter() - t0
