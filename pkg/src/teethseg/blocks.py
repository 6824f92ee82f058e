"""Composite network blocks: encoder/decoder stages, Swin block, Teeth Attention Block, head.

Blocks are pure functions of ``(input, params)``. Parameters live in a flat
mapping keyed by dotted path (``"enc1.conv2.w"``); each block reads the keys
under its own prefix. The ``init_*`` helpers produce those entries.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import RunningStats, Tensor, as_tensor, ops

Params = Mapping[str, "Tensor | np.ndarray"]
Stats = Mapping[str, RunningStats]

MLP_RATIO = 4
CAB_REDUCTION = 4


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_conv(rng, prefix: str, cin: int, cout: int, k: int = 3) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w": he_uniform(rng, (cout, cin, k, k), cin * k * k),
        f"{prefix}.b": np.zeros(cout),
    }


def init_conv_transpose(rng, prefix: str, cin: int, cout: int) -> dict[str, np.ndarray]:
    # every output pixel of a 2x2/stride-2 transposed conv sees exactly cin taps
    return {
        f"{prefix}.w": he_uniform(rng, (cin, cout, 2, 2), cin),
        f"{prefix}.b": np.zeros(cout),
    }


def init_linear(rng, prefix: str, fin: int, fout: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.w": he_uniform(rng, (fin, fout), fin), f"{prefix}.b": np.zeros(fout)}


def init_norm(prefix: str, c: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.gamma": np.ones(c), f"{prefix}.beta": np.zeros(c)}


def init_double_conv(rng, prefix: str, cin: int, cout: int) -> dict[str, np.ndarray]:
    p = {}
    p.update(init_conv(rng, f"{prefix}.conv1", cin, cout))
    p.update(init_norm(f"{prefix}.bn1", cout))
    p.update(init_conv(rng, f"{prefix}.conv2", cout, cout))
    p.update(init_norm(f"{prefix}.bn2", cout))
    return p


def init_decoder_stage(rng, prefix: str, cin: int, skip_c: int, cout: int) -> dict[str, np.ndarray]:
    p = init_conv_transpose(rng, f"{prefix}.up", cin, cout)
    p.update(init_double_conv(rng, prefix, cout + skip_c, cout))
    return p


def init_swin_block(rng, prefix: str, c: int) -> dict[str, np.ndarray]:
    p = {}
    p.update(init_norm(f"{prefix}.ln1", c))
    p.update(init_linear(rng, f"{prefix}.qkv", c, 3 * c))
    p.update(init_linear(rng, f"{prefix}.proj", c, c))
    p.update(init_norm(f"{prefix}.ln2", c))
    p.update(init_linear(rng, f"{prefix}.mlp1", c, MLP_RATIO * c))
    p.update(init_linear(rng, f"{prefix}.mlp2", MLP_RATIO * c, c))
    return p


def init_tab_block(rng, prefix: str, c: int) -> dict[str, np.ndarray]:
    hidden = max(1, c // CAB_REDUCTION)
    p = {}
    p.update(init_conv(rng, f"{prefix}.spatial1", c, hidden))
    p.update(init_conv(rng, f"{prefix}.spatial2", hidden, 1))
    p.update(init_linear(rng, f"{prefix}.cab1", c, hidden))
    p.update(init_linear(rng, f"{prefix}.cab2", hidden, c))
    return p


def init_seg_head(rng, prefix: str, cin: int, num_classes: int) -> dict[str, np.ndarray]:
    return init_conv(rng, prefix, cin, num_classes, k=1)


def norm_names(params: Mapping[str, object]) -> list[str]:
    """Prefixes of every batch-norm layer (those that carry running statistics)."""
    return sorted(k[: -len(".gamma")] for k in params if k.endswith(".gamma") and ".bn" in k)


# ---------------------------------------------------------------------------
# forward


def _conv_bn_relu(x, p: Params, stats: Stats, prefix: str, conv: str, bn: str, mode: str):
    h = ops.conv2d(x, p[f"{prefix}.{conv}.w"], p[f"{prefix}.{conv}.b"], stride=1, pad=1)
    h = ops.batch_norm(h, p[f"{prefix}.{bn}.gamma"], p[f"{prefix}.{bn}.beta"], mode=mode, running=stats.get(f"{prefix}.{bn}"))
    return ops.relu(h)


def double_conv(x, p: Params, stats: Stats, prefix: str, mode: str = "train") -> Tensor:
    """[conv3x3 -> BN -> ReLU] x 2."""
    h = _conv_bn_relu(x, p, stats, prefix, "conv1", "bn1", mode)
    return _conv_bn_relu(h, p, stats, prefix, "conv2", "bn2", mode)


def encoder_stage(
    x,
    p: Params,
    stats: Stats,
    prefix: str,
    dropout_p: float = 0.0,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Return ``(features, pooled)`` for one encoder level."""
    x = as_tensor(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"{prefix}: encoder input extents {x.shape[2:]} are not divisible by 2")
    features = ops.dropout(double_conv(x, p, stats, prefix, mode), dropout_p, rng, mode)
    return features, ops.max_pool2d(features)


def decoder_stage(x, gated_skip, p: Params, stats: Stats, prefix: str, mode: str = "train") -> Tensor:
    """Upsample ``x`` x2, concatenate the (gated) skip along channels, then double conv."""
    up = ops.conv_transpose2d(x, p[f"{prefix}.up.w"], p[f"{prefix}.up.b"])
    gated_skip = as_tensor(gated_skip)
    if up.shape[2:] != gated_skip.shape[2:] or up.shape[0] != gated_skip.shape[0]:
        raise ValueError(f"{prefix}: upsampled {up.shape} does not match skip {gated_skip.shape}")
    return double_conv(ops.concat([up, gated_skip], axis=1), p, stats, prefix, mode)


def swin_block(x, p: Params, prefix: str, win: int, heads: int, shift: int = 0) -> Tensor:
    """Windowed multi-head self-attention + MLP, both residual, on an NCHW map."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % win or w % win:
        raise ValueError(f"{prefix}: extents {(h, w)} are not divisible by window {win}")
    if heads < 1 or c % heads:
        raise ValueError(f"{prefix}: {c} channels are not divisible by {heads} heads")

    tokens = ops.window_partition(x, win, shift)
    t = ops.layer_norm(tokens, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
    qkv = ops.linear(t, p[f"{prefix}.qkv.w"], p[f"{prefix}.qkv.b"])
    q, k, v = ops.chunk(qkv, 3, axis=-1)
    attn = ops.linear(ops.attention(q, k, v, heads), p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"])
    y = ops.add(tokens, attn)

    m = ops.layer_norm(y, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
    m = ops.relu(ops.linear(m, p[f"{prefix}.mlp1.w"], p[f"{prefix}.mlp1.b"]))
    m = ops.linear(m, p[f"{prefix}.mlp2.w"], p[f"{prefix}.mlp2.b"])
    z = ops.add(y, m)
    return ops.window_merge(z, x.shape, win, shift)


def swin_pair(x, p: Params, prefix: str, win: int, heads: int) -> Tensor:
    """Unshifted block followed by a block shifted by half a window."""
    h = swin_block(x, p, f"{prefix}.0", win, heads, 0)
    return swin_block(h, p, f"{prefix}.1", win, heads, win // 2)


def tab_block(skip, p: Params, prefix: str) -> Tensor:
    """Gate encoder features by a spatial saliency map and a channel-attention vector."""
    skip = as_tensor(skip)
    n, c, _, _ = skip.shape
    s = ops.relu(ops.conv2d(skip, p[f"{prefix}.spatial1.w"], p[f"{prefix}.spatial1.b"], 1, 1))
    spatial = ops.sigmoid(ops.conv2d(s, p[f"{prefix}.spatial2.w"], p[f"{prefix}.spatial2.b"], 1, 1))

    pooled = ops.global_avg_pool(skip)
    ch = ops.relu(ops.linear(pooled, p[f"{prefix}.cab1.w"], p[f"{prefix}.cab1.b"]))
    channel = ops.sigmoid(ops.linear(ch, p[f"{prefix}.cab2.w"], p[f"{prefix}.cab2.b"]))
    channel = ops.reshape(channel, (n, c, 1, 1))
    return ops.mul(ops.mul(skip, spatial), channel)


def seg_head(x, p: Params, prefix: str, num_classes: int) -> Tensor:
    """1x1 conv to class logits, then softmax over channels."""
    if num_classes < 2:
        raise ValueError(f"{prefix}: need at least 2 classes, got {num_classes}")
    w = as_tensor(p[f"{prefix}.w"])
    if w.shape[0] != num_classes:
        raise ValueError(f"{prefix}: head weight {w.shape} does not produce {num_classes} classes")
    return ops.softmax(ops.conv2d(x, w, p[f"{prefix}.b"]), axis=1)
