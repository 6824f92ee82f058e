"""Configurable M-Net-like encoder/decoder covering the ablation variations.

Level ``i`` of a depth-``D`` network works at resolution ``H/2**i`` with
``base_width * 2**i`` channels. Levels ``0..D-2`` are encoder stages with a
skip connection each; level ``D-1`` is the bottleneck (plain double conv, plus
a shifted Swin pair when enabled). Deep supervision adds one auxiliary head
per level ``1..D-1`` (right leg) and feeds the average-pooled input image into
every stage below level 0 (left leg).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import blocks
from .autodiff import RunningStats, Tensor, as_tensor, ops

IN_CHANNELS = 1


@dataclass
class ModelConfig:
    depth: int = 4
    base_width: int = 8
    num_classes: int = 33
    use_deep_supervision: bool = True
    use_swin: bool = True
    use_tab: bool = True
    swin_window: int = 2
    dropout_p: float = 0.1
    height: int = 64
    width: int = 128

    def width_at(self, level: int) -> int:
        return self.base_width * 2**level

    @property
    def swin_heads(self) -> int:
        return max(1, self.width_at(self.depth - 1) // 4)

    def problems(self) -> list[str]:
        """Every violated constraint, as human-readable strings."""
        errs = []
        if self.depth < 2:
            errs.append(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 1:
            errs.append(f"base_width must be >= 1, got {self.base_width}")
        if self.num_classes < 2:
            errs.append(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_p < 1.0:
            errs.append(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.height < 1 or self.width < 1:
            errs.append(f"input extents must be positive, got {self.height}x{self.width}")
        if errs:
            return errs
        f = 2**self.depth
        if self.height % f or self.width % f:
            errs.append(f"input extents {self.height}x{self.width} must be divisible by 2**depth = {f}")
        if self.use_swin:
            bh, bw = self.height >> (self.depth - 1), self.width >> (self.depth - 1)
            if self.swin_window < 1 or bh % self.swin_window or bw % self.swin_window:
                errs.append(f"bottleneck extents {bh}x{bw} must be divisible by swin_window = {self.swin_window}")
            c = self.width_at(self.depth - 1)
            if c % self.swin_heads:
                errs.append(f"bottleneck channels {c} must be divisible by swin heads {self.swin_heads}")
        return errs

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ValueError("invalid model config: " + "; ".join(errs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# Component toggles (deep supervision, Swin, TAB) of each ablation row.
VARIATIONS: dict[str, tuple[bool, bool, bool]] = {
    "VARIATION A": (False, False, False),
    "VARIATION B": (True, False, False),
    "VARIATION C": (False, True, False),
    "VARIATION D": (False, False, True),
    "PROPOSED": (True, True, True),
}


def variation_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    ds, swin, tab = VARIATIONS[name]
    cfg = copy.copy(base or ModelConfig())
    cfg.use_deep_supervision, cfg.use_swin, cfg.use_tab = ds, swin, tab
    return cfg


@dataclass(frozen=True)
class Architecture:
    encoder_stages: int
    decoder_stages: int
    swin_blocks: int
    tab_blocks: int
    aux_heads: int
    left_leg_inputs: int

    def components(self) -> dict[str, bool]:
        """Presence of each ablation component, in table column order."""
        return {
            "U-NET": self.encoder_stages > 0 and self.decoder_stages > 0,
            "DEEP SUPERVISION": self.aux_heads > 0,
            "SWIN TRANSFORMER": self.swin_blocks > 0,
            "TAB": self.tab_blocks > 0,
        }


@dataclass
class ModelOutputs:
    main: Tensor
    aux: list[Tensor] = field(default_factory=list)


@dataclass
class Network:
    config: ModelConfig
    params: dict[str, np.ndarray]
    stats: dict[str, RunningStats]

    @property
    def architecture(self) -> Architecture:
        return describe(self.config, self.params)

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def clone(self) -> Network:
        return Network(
            copy.copy(self.config),
            {k: v.copy() for k, v in self.params.items()},
            {k: RunningStats(s.mean.copy(), s.var.copy(), s.momentum) for k, s in self.stats.items()},
        )


def describe(config: ModelConfig, params) -> Architecture:
    d = config.depth
    return Architecture(
        encoder_stages=sum(1 for i in range(d - 1) if f"enc{i}.conv1.w" in params),
        decoder_stages=sum(1 for i in range(d - 1) if f"dec{i}.up.w" in params),
        swin_blocks=sum(1 for i in range(2) if f"swin.{i}.qkv.w" in params),
        tab_blocks=sum(1 for i in range(d - 1) if f"tab{i}.spatial1.w" in params),
        aux_heads=sum(1 for i in range(1, d) if f"aux{i}.w" in params),
        left_leg_inputs=(d - 1) if config.use_deep_supervision else 0,
    )


def build_model(config: ModelConfig, seed: int) -> Network:
    """He-uniform weights, zero biases, unit/zero norm affines; deterministic in (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.depth
    leg = IN_CHANNELS if config.use_deep_supervision else 0
    w = config.width_at
    p: dict[str, np.ndarray] = {}

    for i in range(d - 1):
        cin = IN_CHANNELS if i == 0 else w(i - 1) + leg
        p.update(blocks.init_double_conv(rng, f"enc{i}", cin, w(i)))
    p.update(blocks.init_double_conv(rng, "mid", w(d - 2) + leg, w(d - 1)))
    if config.use_swin:
        for j in range(2):
            p.update(blocks.init_swin_block(rng, f"swin.{j}", w(d - 1)))
    if config.use_tab:
        for i in range(d - 1):
            p.update(blocks.init_tab_block(rng, f"tab{i}", w(i)))
    for i in reversed(range(d - 1)):
        p.update(blocks.init_decoder_stage(rng, f"dec{i}", w(i + 1), w(i), w(i)))
    p.update(blocks.init_seg_head(rng, "head", w(0), config.num_classes))
    if config.use_deep_supervision:
        for i in range(1, d):
            p.update(blocks.init_seg_head(rng, f"aux{i}", w(i), config.num_classes))

    stats = {name: RunningStats.fresh(p[f"{name}.gamma"].size) for name in blocks.norm_names(p)}
    return Network(config, p, stats)


def forward(
    net: Network,
    x,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    params=None,
) -> ModelOutputs:
    """Run the network on an (N, 1, H, W) batch.

    ``params`` overrides ``net.params`` (pass tape-tracked tensors to train);
    train mode updates ``net.stats`` in place.
    """
    cfg = net.config
    x = as_tensor(x)
    expected = (IN_CHANNELS, cfg.height, cfg.width)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"input {x.shape} does not match configured (N, {expected[0]}, {expected[1]}, {expected[2]})")
    p = net.params if params is None else params
    st = net.stats
    d = cfg.depth

    pyramid = [x]
    if cfg.use_deep_supervision:
        for _ in range(d - 1):
            pyramid.append(ops.avg_pool2d(pyramid[-1]))

    skips = []
    h = x
    for i in range(d - 1):
        if i > 0 and cfg.use_deep_supervision:
            h = ops.concat([h, pyramid[i]], axis=1)
        feat, h = blocks.encoder_stage(h, p, st, f"enc{i}", cfg.dropout_p, mode, rng)
        skips.append(feat)

    if cfg.use_deep_supervision:
        h = ops.concat([h, pyramid[d - 1]], axis=1)
    h = blocks.double_conv(h, p, st, "mid", mode)
    if cfg.use_swin:
        h = blocks.swin_pair(h, p, "swin", cfg.swin_window, cfg.swin_heads)

    level_out = {d - 1: h}
    for i in reversed(range(d - 1)):
        skip = blocks.tab_block(skips[i], p, f"tab{i}") if cfg.use_tab else skips[i]
        h = blocks.decoder_stage(h, skip, p, st, f"dec{i}", mode)
        level_out[i] = h

    main = blocks.seg_head(h, p, "head", cfg.num_classes)
    aux = []
    if cfg.use_deep_supervision:
        aux = [blocks.seg_head(level_out[i], p, f"aux{i}", cfg.num_classes) for i in range(1, d)]
    return ModelOutputs(main, aux)
