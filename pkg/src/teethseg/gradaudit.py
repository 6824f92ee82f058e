"""Gradient audit: central-difference checks over every primitive, block and a tiny model.

Each case returns probes ``(label, f, x)``: ``f`` maps one input (others held
fixed) to a scalar through a fixed random projection, so every output entry
contributes to the checked gradient.

Some gradients are identically zero by construction (a conv bias feeding a
train-mode batch norm, the key bias under softmax's shift invariance). The
relative error of pure roundoff against the 1e-8 floor is meaningless there,
so those probes are listed in ``ZERO_PROBES`` and must instead have an
analytic gradient of exactly zero up to rounding and a numerical one below
``ZERO_ATOL``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import blocks
from .autodiff import RunningStats, Tensor, grad_check, numerical_gradient, ops
from .autodiff.gradcheck import analytic_gradient
from .losses import squared_dice_loss, total_loss
from .model import ModelConfig, build_model, forward

BLOCK_TOL = 1e-4
MODEL_TOL = 1e-3
MAX_ENTRIES = 24
ZERO_ATOL = 1e-7
ZERO_PROBES = ("double_conv/s.conv1.b", "double_conv/s.conv2.b", "decoder_stage/d.conv1.b", "decoder_stage/d.conv2.b", "swin_block/w.qkv.b[k]")

Probe = tuple[str, Callable[[Tensor], Tensor], np.ndarray]


@dataclass
class AuditResult:
    name: str
    worst: float
    tolerance: float
    probes: int
    seconds: float
    zero_ok: bool = True

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tolerance and self.zero_ok)


def _projected(out_fn, shape_rng: np.random.Generator):
    """Wrap ``out_fn`` as ``sum(out_fn(x) * R)`` with R drawn once on first use."""
    cache = {}

    def f(x):
        out = out_fn(x)
        if "r" not in cache:
            cache["r"] = shape_rng.normal(size=out.shape)
        return ops.sum(ops.mul(out, cache["r"]))

    return f


def _with_input(i: int, fixed: list, op):
    """Function of input ``i`` of ``op(*fixed)``."""

    def out(x):
        args = list(fixed)
        args[i] = x
        return op(*args)

    return out


def _multi(name_op, inputs: dict[str, np.ndarray], op, rng) -> list[Probe]:
    names = list(inputs)
    fixed = [inputs[n] for n in names]
    return [(f"{name_op}/{n}", _projected(_with_input(i, fixed, op), rng), inputs[n]) for i, n in enumerate(names)]


def _params_probes(name, p: dict, x: np.ndarray, run, rng) -> list[Probe]:
    """Probe the input and every parameter of a block ``run(x, params)``."""
    probes = [(f"{name}/x", _projected(lambda t: run(t, p), rng), x)]
    for key in p:
        if key.endswith("qkv.b"):
            probes += _qkv_bias_probes(name, key, p, x, run, rng)
            continue

        def out(t, key=key):
            q = dict(p)
            q[key] = t
            return run(x, q)

        probes.append((f"{name}/{key}", _projected(out, rng), p[key]))
    return probes


def _qkv_bias_probes(name, key, p: dict, x, run, rng) -> list[Probe]:
    """The fused q/k/v bias, one probe per third."""
    full = p[key]
    c = full.size // 3
    probes = []
    for j, part in enumerate("qkv"):

        def out(t, j=j):
            pieces = [full[:c], full[c : 2 * c], full[2 * c :]]
            pieces[j] = t
            q = dict(p)
            q[key] = ops.concat(pieces, axis=0)
            return run(x, q)

        probes.append((f"{name}/{key}[{part}]", _projected(out, rng), full[j * c : (j + 1) * c]))
    return probes


def _case_conv2d(rng):
    x = rng.normal(size=(2, 3, 7, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    return _multi("conv2d", {"x": x, "w": w, "b": b}, lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1), rng) + _multi(
        "conv2d_s1", {"x": x, "w": w, "b": b}, lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=1), rng
    )


def _case_conv_transpose2d(rng):
    x = rng.normal(size=(2, 3, 3, 4))
    w = rng.normal(size=(3, 2, 2, 2))
    b = rng.normal(size=2)
    return _multi("conv_transpose2d", {"x": x, "w": w, "b": b}, ops.conv_transpose2d, rng)


def _case_pool(rng):
    x = rng.normal(size=(2, 3, 6, 8))
    return [
        ("max_pool2d/x", _projected(ops.max_pool2d, rng), x),
        ("avg_pool2d/x", _projected(ops.avg_pool2d, rng), x),
        ("global_avg_pool/x", _projected(ops.global_avg_pool, rng), x),
    ]


def _case_batch_norm(rng):
    x = rng.normal(size=(3, 4, 3, 5)) * 2 + 1
    g = rng.normal(size=4)
    b = rng.normal(size=4)
    return _multi("batch_norm", {"x": x, "gamma": g, "beta": b}, lambda x, g, b: ops.batch_norm(x, g, b, mode="train"), rng) + _multi(
        "batch_norm_eval",
        {"x": x, "gamma": g, "beta": b},
        lambda x, g, b: ops.batch_norm(x, g, b, mode="eval", running=RunningStats(np.full(4, 0.3), np.full(4, 1.7))),
        rng,
    )


def _case_layer_norm(rng):
    x = rng.normal(size=(3, 5, 8)) * 1.5
    return _multi("layer_norm", {"x": x, "gamma": rng.normal(size=8), "beta": rng.normal(size=8)}, ops.layer_norm, rng)


def _case_attention(rng):
    q, k, v = (rng.normal(size=(3, 4, 8)) for _ in range(3))
    return _multi("attention", {"q": q, "k": k, "v": v}, lambda q, k, v: ops.attention(q, k, v, heads=2), rng)


def _case_elementwise(rng):
    x = rng.normal(size=(3, 5))
    y = rng.uniform(0.5, 2.0, size=(3, 5)) * rng.choice([-1, 1], size=(3, 5))
    w = rng.normal(size=(5, 4))
    return (
        [
            ("relu/x", _projected(ops.relu, rng), x),
            ("sigmoid/x", _projected(ops.sigmoid, rng), x),
            ("softmax/x", _projected(lambda t: ops.softmax(t, axis=-1), rng), x),
            ("mean/x", _projected(lambda t: ops.mean(t, axis=0), rng), x),
            ("transpose/x", _projected(lambda t: ops.transpose(t, (1, 0)), rng), x),
            ("chunk/x", _projected(lambda t: ops.mul(*ops.chunk(ops.concat([t, t * 2.0], axis=1), 2, axis=1)), rng), x),
            ("dropout/x", _projected(lambda t: ops.dropout(t, 0.3, np.random.default_rng(5), "train"), rng), x),
        ]
        + _multi("div", {"a": x, "b": y}, ops.div, rng)
        + _multi("mul", {"a": x, "b": y[:1]}, ops.mul, rng)
        + _multi("linear", {"x": x, "w": w, "b": rng.normal(size=4)}, ops.linear, rng)
    )


def _case_windows(rng):
    x = rng.normal(size=(2, 3, 4, 6))

    def pair(t):
        tok = ops.window_partition(t, 2, 1)
        return ops.window_merge(ops.mul(tok, tok), t.shape, 2, 1)

    return [
        ("window_partition/x", _projected(lambda t: ops.window_partition(t, 2, 1), rng), x),
        ("window_pair/x", _projected(pair, rng), x),
    ]


def _case_double_conv(rng):
    p = blocks.init_double_conv(rng, "s", 2, 3)
    x = rng.normal(size=(2, 2, 4, 4))
    return _params_probes("double_conv", p, x, lambda t, q: blocks.double_conv(t, q, {}, "s", "train"), rng)


def _case_decoder_stage(rng):
    p = blocks.init_decoder_stage(rng, "d", 4, 2, 2)
    x = rng.normal(size=(2, 4, 2, 2))
    skip = rng.normal(size=(2, 2, 4, 4))
    probes = _params_probes("decoder_stage", p, x, lambda t, q: blocks.decoder_stage(t, skip, q, {}, "d", "train"), rng)
    probes.append(("decoder_stage/skip", _projected(lambda s: blocks.decoder_stage(x, s, p, {}, "d", "train"), rng), skip))
    return probes


def _case_swin_block(rng):
    c = 8
    p = blocks.init_swin_block(rng, "w", c)
    # non-trivial norm affines so their gradients are exercised
    for k in ("ln1", "ln2"):
        p[f"w.{k}.gamma"] = 1 + 0.3 * rng.normal(size=c)
        p[f"w.{k}.beta"] = 0.3 * rng.normal(size=c)
    x = rng.normal(size=(1, c, 4, 4))
    return _params_probes("swin_block", p, x, lambda t, q: blocks.swin_block(t, q, "w", 2, 2, shift=1), rng)


def _case_tab_block(rng):
    p = blocks.init_tab_block(rng, "t", 8)
    x = rng.normal(size=(2, 8, 4, 4))
    return _params_probes("tab_block", p, x, lambda t, q: blocks.tab_block(t, q, "t"), rng)


def _case_seg_head(rng):
    p = blocks.init_seg_head(rng, "h", 4, 5)
    x = rng.normal(size=(2, 4, 3, 3))
    return _params_probes("seg_head", p, x, lambda t, q: blocks.seg_head(t, q, "h", 5), rng)


def _case_dice(rng):
    logits = rng.normal(size=(2, 4, 3, 3))
    y_p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    y_t = np.eye(4)[rng.integers(0, 4, size=(2, 3, 3))].transpose(0, 3, 1, 2)
    return [
        ("squared_dice_loss/y_p", lambda t: squared_dice_loss(t, y_t), y_p),
        ("squared_dice_loss/softmax", lambda t: squared_dice_loss(ops.softmax(t, axis=1), y_t), logits),
    ]


def _case_tiny_model(rng):
    cfg = ModelConfig(depth=2, base_width=4, num_classes=5, height=8, width=8, dropout_p=0.1, swin_window=2)
    net = build_model(cfg, int(rng.integers(2**31)))
    x = rng.uniform(0, 1, size=(2, 1, 8, 8))
    y = np.eye(5)[rng.integers(0, 5, size=(2, 8, 8))].transpose(0, 3, 1, 2)
    drop_seed = int(rng.integers(2**31))

    def loss(inp, params):
        return total_loss(forward(net, inp, "train", np.random.default_rng(drop_seed), params), y)

    probes = [("tiny_model/x", lambda t: loss(t, net.params), x)]
    for key in sorted(net.params):
        if key.endswith(".w") or key.endswith(".gamma"):

            def f(t, key=key):
                q = dict(net.params)
                q[key] = t
                return loss(x, q)

            probes.append((f"tiny_model/{key}", f, net.params[key]))
    return probes


CASES: dict[str, tuple[Callable, float]] = {
    "conv2d": (_case_conv2d, BLOCK_TOL),
    "conv_transpose2d": (_case_conv_transpose2d, BLOCK_TOL),
    "pool": (_case_pool, BLOCK_TOL),
    "batch_norm": (_case_batch_norm, BLOCK_TOL),
    "layer_norm": (_case_layer_norm, BLOCK_TOL),
    "attention": (_case_attention, BLOCK_TOL),
    "elementwise": (_case_elementwise, BLOCK_TOL),
    "window_pair": (_case_windows, BLOCK_TOL),
    "double_conv": (_case_double_conv, BLOCK_TOL),
    "decoder_stage": (_case_decoder_stage, BLOCK_TOL),
    "swin_block": (_case_swin_block, BLOCK_TOL),
    "tab_block": (_case_tab_block, BLOCK_TOL),
    "seg_head": (_case_seg_head, BLOCK_TOL),
    "squared_dice_loss": (_case_dice, BLOCK_TOL),
    "tiny_model": (_case_tiny_model, MODEL_TOL),
}


def run_case(name: str, seed: int = 0, max_entries: int = MAX_ENTRIES) -> AuditResult:
    build, tol = CASES[name]
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    t0 = time.perf_counter()
    probes = build(rng)
    worst, zero_ok = 0.0, True
    for label, f, x in probes:
        if label in ZERO_PROBES:
            a = analytic_gradient(f, x)
            n = numerical_gradient(f, x)
            zero_ok &= bool(np.abs(a).max() <= 1e-12 * max(1.0, np.abs(x).max()) and np.abs(n).max() < ZERO_ATOL)
            continue
        worst = max(worst, grad_check(f, x, max_entries=max_entries, rng=rng))
    return AuditResult(name, worst, tol, len(probes), time.perf_counter() - t0, zero_ok)


def run_audit(seed: int = 0, names=None) -> list[AuditResult]:
    return [run_case(n, seed) for n in (names or CASES)]
