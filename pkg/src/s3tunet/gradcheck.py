"""Finite-difference gradient suite over the registered ops and blocks.

Each case builds a tiny instance and returns a zero-argument forward
function plus the named tensors to probe. The scalar probed is
sum(out * R) for a fixed random R; analytic gradients come from the tape
and are compared element-wise with central differences:

    |analytic - fd| / (|fd| + 1e-8) < tol
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .blocks import D2BRConv, DWFConv, LKA, ScalableReLU
from .metrics import bce_dice_loss
from .model import ModelConfig, build
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Linear, Module
from .rmsvit import RMSViT, RmSvitConfig
from .s2mlp import S2MLPLink, SplitAttention, spatial_shift_ss1, spatial_shift_ss2, split_attention
from .tensor import Tape, Tensor

STEP = 1e-4
TOL = 1e-4
DENOM_FLOOR = 1e-8


@dataclass
class GradcheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    seconds: float
    tol: float = TOL
    worst: str = ""
    kinks: int = 0
    unresolved: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.n_checked > 0 and self.max_rel_err < self.tol)


@dataclass
class CheckStats:
    max_rel_err: float = 0.0
    checked: int = 0
    kinks: int = 0
    unresolved: int = 0
    worst: str = ""
    resolution: float = 0.0


def check(forward: Callable[[], Tensor], targets, seed: int = 0, max_entries: int | None = None,
          step: float = STEP, tol: float = TOL) -> CheckStats:
    """Max relative error between tape gradients and central differences.

    ``targets`` is a sequence of (name, Tensor) perturbed in place. With
    ``max_entries`` each tensor is probed at that many random positions.
    A probe whose +-step interval flips a relu / clip / maxpool branch
    straddles a kink, where a central difference is no derivative estimate;
    such probes are skipped and replaced by another position.

    Summing the probed scalar carries a rounding error of at most
    eps * sum|out * R|, so a central difference cannot certify a relative
    match at ``tol`` for gradients below eps * sum|out * R| / (2 step tol).
    Entries where both the analytic and the difference value fall under
    that resolution, and that miss ``tol``, are counted as unresolved.
    """
    rng = np.random.default_rng(seed)
    with Tape() as tape, ops.record_branches() as center:
        out = forward()
    weight = rng.standard_normal(out.shape)
    with tape:
        loss = ops.sum(ops.mul(out, weight))
    grads = tape.backward(loss)
    stats = CheckStats()
    stats.resolution = np.finfo(np.float64).eps * float(np.abs(out.data * weight).sum()) / (2 * step * tol)

    def probe():
        with ops.record_branches() as branches:
            value = float(np.sum(forward().data * weight))
        same = len(branches) == len(center) and all(
            np.array_equal(a, b) for a, b in zip(branches, center))
        return value, same

    for name, t in targets:
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        analytic = analytic.reshape(-1)
        flat = t.data.reshape(-1)
        want = flat.size if max_entries is None else min(max_entries, flat.size)
        done = 0
        for i in rng.permutation(flat.size):
            if done == want:
                break
            orig = flat[i]
            flat[i] = orig + step
            up, up_ok = probe()
            flat[i] = orig - step
            down, down_ok = probe()
            flat[i] = orig
            if not (up_ok and down_ok):
                stats.kinks += 1
                continue
            done += 1
            fd = (up - down) / (2 * step)
            err = abs(analytic[i] - fd) / (abs(fd) + DENOM_FLOOR)
            if err >= tol and max(abs(fd), abs(analytic[i])) < stats.resolution:
                stats.unresolved += 1
                continue
            stats.checked += 1
            if err > stats.max_rel_err:
                where = tuple(int(j) for j in np.unravel_index(i, t.shape))
                stats.max_rel_err, stats.worst = err, f"{name}{where}"
    return stats


# ---------------------------------------------------------------- cases

def _input(rng, shape, away_from_zero: float = 0.0) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < away_from_zero, np.sign(x + 1e-300) * away_from_zero + x, x)
    return Tensor(x, requires_grad=True)


def _jitter(module: Module, rng, scale: float = 0.1) -> Module:
    """Move parameters off their structured init (zero bias, unit gain)."""
    for _, p in module.named_parameters():
        p.data += scale * rng.standard_normal(p.shape)
        if p.min_value is not None:
            np.maximum(p.data, 0.5, out=p.data)
    return module


def _with_input(module: Module, x: Tensor, *args):
    return (lambda: module(x, *args)), [("x", x)] + list(module.named_parameters())


def _case_conv2d(rng):
    layer = _jitter(Conv2d(2, 3, 3, rng), rng)
    x = _input(rng, (2, 2, 5, 5))
    return (lambda: layer(x)), [("x", x)] + list(layer.named_parameters())


def _case_conv2d_strided(rng):
    x, w, b = _input(rng, (1, 2, 6, 6)), _input(rng, (4, 1, 3, 3)), _input(rng, (4,))
    return (lambda: ops.conv2d(x, w, b, stride=2, pad=1, groups=2)), [("x", x), ("w", w), ("b", b)]


def _case_conv2d_depthwise_dilated(rng):
    layer = _jitter(Conv2d(3, 3, 3, rng, dilation=2, groups=3), rng)
    x = _input(rng, (2, 3, 6, 6))
    return (lambda: layer(x)), [("x", x)] + list(layer.named_parameters())


def _case_conv_transpose2d(rng):
    layer = _jitter(ConvTranspose2d(3, 2, rng), rng)
    x = _input(rng, (2, 3, 3, 3))
    return (lambda: layer(x)), [("x", x)] + list(layer.named_parameters())


def _case_matmul(rng):
    a, b = _input(rng, (2, 3, 4)), _input(rng, (4, 5))
    return (lambda: ops.matmul(a, b)), [("a", a), ("b", b)]


def _case_linear(rng):
    layer = _jitter(Linear(4, 3, rng), rng)
    x = _input(rng, (2, 3, 4))
    return (lambda: layer(x)), [("x", x)] + list(layer.named_parameters())


def _case_batchnorm(rng):
    layer = _jitter(BatchNorm2d(3), rng)
    x = _input(rng, (4, 3, 2, 2))
    return (lambda: layer(x)), [("x", x)] + list(layer.named_parameters())


def _case_batchnorm_eval(rng):
    layer = _jitter(BatchNorm2d(3), rng).eval()
    layer.buffers["running_mean"][:] = rng.standard_normal(3)
    layer.buffers["running_var"][:] = rng.uniform(0.5, 2.0, 3)
    x = _input(rng, (2, 3, 3, 3))
    return (lambda: layer(x)), [("x", x)] + list(layer.named_parameters())


def _case_layernorm(rng):
    layer = _jitter(LayerNorm(6), rng)
    x = _input(rng, (2, 4, 6))
    return (lambda: layer(x)), [("x", x)] + list(layer.named_parameters())


def _case_softmax_masked(rng):
    x = _input(rng, (3, 5))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    return (lambda: ops.softmax(x, axis=-1, mask=mask)), [("x", x)]


def _case_gelu(rng):
    x = _input(rng, (4, 8))
    return (lambda: ops.gelu(x)), [("x", x)]


def _case_sigmoid(rng):
    x = _input(rng, (4, 8))
    return (lambda: ops.sigmoid(ops.mul(x, 3.0))), [("x", x)]


def _case_maxpool(rng):
    # distinct values so no ties fall inside the finite-difference step
    x = Tensor(rng.permutation(64).reshape(1, 1, 8, 8) * 0.1 + rng.uniform(0, 0.01, (1, 1, 8, 8)),
               requires_grad=True)
    return (lambda: ops.maxpool2d(x)), [("x", x)]


def _case_lka(rng):
    layer = _jitter(LKA(2, rng), rng)
    x = _input(rng, (2, 2, 5, 5))
    return (lambda: layer(x)), [("x", x)] + list(layer.named_parameters())


def _case_scalable_relu(rng):
    layer = _jitter(ScalableReLU(3), rng)
    x = _input(rng, (2, 3, 3, 3), away_from_zero=1e-2)
    return (lambda: layer(x)), [("x", x)] + list(layer.named_parameters())


def _case_dwf(rng):
    block = _jitter(DWFConv(2, 3, rng), rng)
    x = _input(rng, (2, 2, 5, 5))
    return _with_input(block, x)


def _case_d2br_eval(rng):
    block = _jitter(D2BRConv(2, 3, rng, block_size=3), rng).eval()
    x = _input(rng, (2, 2, 5, 5))
    return _with_input(block, x)


def _rmsvit_case(n_iter):
    def case(rng):
        block = _jitter(RMSViT(4, RmSvitConfig(grid=(2, 2), n_iter=n_iter, heads=2), rng), rng)
        x = _input(rng, (2, 4, 4, 6))
        return _with_input(block, x)
    return case


def _case_ss1(rng):
    x = _input(rng, (2, 4, 3, 8))
    return (lambda: spatial_shift_ss1(x)), [("x", x)]


def _case_ss2(rng):
    x = _input(rng, (2, 3, 4, 8))
    return (lambda: spatial_shift_ss2(x)), [("x", x)]


def _case_split_attention(rng):
    weights = _jitter(SplitAttention(4, rng), rng)
    parts = [_input(rng, (2, 5, 4)) for _ in range(3)]
    return ((lambda: split_attention(parts, weights)),
            [(f"part{i}", p) for i, p in enumerate(parts)] + list(weights.named_parameters()))


def _case_s2mlp_link(rng):
    block = _jitter(S2MLPLink(4, rng), rng)
    x = _input(rng, (2, 4, 3, 3))
    return _with_input(block, x)


def _case_bce_dice(rng):
    p = Tensor(rng.uniform(0.05, 0.95, (2, 1, 3, 3)), requires_grad=True)
    g = (rng.random((2, 1, 3, 3)) < 0.5).astype(np.float64)
    return (lambda: bce_dice_loss(p, g)), [("p", p)]


def tiny_model_config() -> ModelConfig:
    return ModelConfig(base_channels=2, input_size=(32, 32),
                       rm_svit=RmSvitConfig(grid=(2, 2), heads=4),
                       dropblock={"block_size": 3, "drop_prob": 0.1})


def _case_model(rng):
    model = _jitter(build(tiny_model_config(), rng), rng).eval()
    x = _input(rng, (2, 1, 32, 32))
    return _with_input(model, x)


@dataclass
class Case:
    build: Callable
    max_entries: int | None = None


REGISTRY: dict[str, Case] = {
    "conv2d": Case(_case_conv2d),
    "conv2d_strided_grouped": Case(_case_conv2d_strided),
    "conv2d_depthwise_dilated": Case(_case_conv2d_depthwise_dilated),
    "conv_transpose2d": Case(_case_conv_transpose2d),
    "matmul": Case(_case_matmul),
    "linear": Case(_case_linear),
    "batchnorm2d": Case(_case_batchnorm),
    "batchnorm2d_eval": Case(_case_batchnorm_eval),
    "layernorm": Case(_case_layernorm),
    "softmax_masked": Case(_case_softmax_masked),
    "gelu": Case(_case_gelu),
    "sigmoid": Case(_case_sigmoid),
    "maxpool2d": Case(_case_maxpool),
    "lka": Case(_case_lka),
    "scalable_relu": Case(_case_scalable_relu),
    "dwf_conv": Case(_case_dwf, max_entries=12),
    "d2br_conv_eval": Case(_case_d2br_eval, max_entries=12),
    "rmsvit_iter0": Case(_rmsvit_case(0), max_entries=16),
    "rmsvit_iter1": Case(_rmsvit_case(1), max_entries=16),
    "rmsvit_iter2": Case(_rmsvit_case(2), max_entries=16),
    "ss1": Case(_case_ss1),
    "ss2": Case(_case_ss2),
    "split_attention": Case(_case_split_attention),
    "s2mlp_link": Case(_case_s2mlp_link, max_entries=16),
    "model": Case(_case_model, max_entries=3),
    "bce_dice_loss": Case(_case_bce_dice),
}


def run_case(name: str, case: Case, seed: int = 0) -> GradcheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    forward, targets = case.build(rng)
    st = check(forward, targets, seed=seed, max_entries=case.max_entries)
    return GradcheckResult(name, st.max_rel_err, st.checked, time.perf_counter() - start,
                           worst=st.worst, kinks=st.kinks, unresolved=st.unresolved)


def run_gradcheck(scope: str = "all", seed: int = 0, registry: dict[str, Case] | None = None,
                  report: Callable[[str], None] | None = print) -> list[GradcheckResult]:
    """Run every registered case (or just ``scope``) and print a pass/fail table."""
    registry = REGISTRY if registry is None else registry
    if scope == "all":
        names = list(registry)
    elif scope in registry:
        names = [scope]
    else:
        raise KeyError(f"unknown gradcheck scope {scope!r}; choose from: all, {', '.join(registry)}")
    results = []
    if report:
        report(f"{'block':<26} {'max rel err':>12} {'checked':>8} {'kinks':>6} {'tiny':>5} "
               f"{'secs':>6}  status")
    for name in names:
        r = run_case(name, registry[name], seed)
        results.append(r)
        if report:
            report(f"{name:<26} {r.max_rel_err:12.3e} {r.n_checked:8d} {r.kinks:6d} {r.unresolved:5d} "
                   f"{r.seconds:6.2f}  "
                   f"{'PASS' if r.passed else 'FAIL ' + r.worst}")
    return results
