"""Stage 2: self-conditioned progressive SR generator, HR discriminator,
and the stage's losses.

Each generator level doubles resolution (nearest x2 then conv blocks). Every
block re-reads the network input, resized to the level's resolution, and uses
it to modulate normalized activations multiplicatively; there is no additive
shift term anywhere in the block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import (Variable, abs_, add, mul, reduce_mean, reduce_sum,
                       rsqrt, square, sub, tanh)
from .errors import ShapeError
from .imageops import leaky_relu, relu, resize
from .params import ParamStore, add_conv, conv


@dataclass(frozen=True)
class SRNetConfig:
    base_width: int = 16       # width of the x2 level; halves per further level
    blocks_per_level: int = 2  # equal per level: the balanced-backbone contract
    final_scale: int = 4       # power of two; 2 means a single never-growing level
    fade_steps: int = 0        # 0 = hard switch at grow
    dtype: str = "float32"

    def __post_init__(self):
        if self.final_scale not in (2, 4, 8):
            raise ShapeError(f"final_scale must be 2, 4 or 8, got {self.final_scale}")

    @property
    def max_levels(self) -> int:
        return int(math.log2(self.final_scale))

    def level_width(self, level: int) -> int:
        return max(self.base_width >> (level - 1), 4)


@dataclass
class ProgressiveState:
    active_levels: int
    grow_steps: list[int]
    final_scale: int
    fade_steps: int = 0
    fade_start: int | None = None  # iteration of the last grow, while fading

    @property
    def scale(self) -> int:
        return 2 ** self.active_levels

    def fade_alpha(self, iteration: int) -> float:
        if self.fade_start is None or self.fade_steps <= 0:
            return 1.0
        alpha = (iteration - self.fade_start) / self.fade_steps
        return min(max(alpha, 0.0), 1.0)


@dataclass(frozen=True)
class SelfCondBlock:
    """One conv + multiplicative self-conditioned normalization."""

    name: str
    in_ch: int
    width: int
    eps: float = 1e-5


def _add_block_params(store: ParamStore, block: SelfCondBlock, rng) -> None:
    add_conv(store, f"{block.name}.main", block.in_ch, block.width, rng=rng)
    add_conv(store, f"{block.name}.cond0", 3, block.width, rng=rng)
    add_conv(store, f"{block.name}.cond1", block.width, block.width, rng=rng)


def condition_gamma(store: ParamStore, block: SelfCondBlock, cond_img: Variable) -> Variable:
    """Spatially varying multiplier predicted from the condition image."""
    return conv(store, f"{block.name}.cond1",
                leaky_relu(conv(store, f"{block.name}.cond0", cond_img)))


def self_cond_norm(f: Variable, cond_img: Variable, store: ParamStore,
                   block: SelfCondBlock) -> Variable:
    """Normalize per (sample, channel) over space, then scale by gamma.

    sigma puts eps inside the square root, so a spatially constant input
    normalizes to exactly zero.
    """
    if cond_img.shape[2:] != f.shape[2:]:
        raise ShapeError(f"condition image dims {cond_img.shape[2:]} != "
                         f"feature dims {f.shape[2:]}")
    mu = reduce_mean(f, axes=(2, 3))
    centered = sub(f, mu)
    var = reduce_mean(square(centered), axes=(2, 3))
    f_bar = mul(centered, rsqrt(add(var, block.eps)))
    return mul(f_bar, condition_gamma(store, block, cond_img))


def apply_block(store: ParamStore, block: SelfCondBlock, x: Variable,
                cond_img: Variable) -> Variable:
    h = conv(store, f"{block.name}.main", x)
    return leaky_relu(self_cond_norm(h, cond_img, store, block))


class SRGenerator:
    """Progressive upsampler; one x2 level per active_levels."""

    def __init__(self, cfg: SRNetConfig, rng: np.random.Generator,
                 active_levels: int = 1):
        if active_levels < 1 or active_levels > cfg.max_levels:
            raise ShapeError(f"active_levels {active_levels} outside 1..{cfg.max_levels}")
        self.cfg = cfg
        self.params = ParamStore(dtype=cfg.dtype)
        self.blocks: dict[int, list[SelfCondBlock]] = {}
        self.active_levels = 0
        add_conv(self.params, "stem", 3, cfg.level_width(1), rng=rng)
        for _ in range(active_levels):
            self._append_level(rng)

    def _append_level(self, rng) -> None:
        level = self.active_levels + 1
        cfg = self.cfg
        width = cfg.level_width(level)
        in_ch = cfg.level_width(level - 1) if level > 1 else cfg.level_width(1)
        blocks = []
        for b in range(cfg.blocks_per_level):
            block = SelfCondBlock(f"l{level}.b{b}", in_ch if b == 0 else width, width)
            _add_block_params(self.params, block, rng)
            blocks.append(block)
        add_conv(self.params, f"l{level}.to_rgb", width, 3, kernel=1, rng=rng, gain=1.0)
        self.blocks[level] = blocks
        self.active_levels = level

    def grow(self, rng: np.random.Generator) -> None:
        """Append one fresh x2 level; existing parameters stay untouched.

        With a hard switch the outgrown to_rgb head leaves the forward graph,
        so it is frozen immediately; during a fade the trainer freezes it via
        finish_fade once the blend reaches the new head alone.
        """
        if self.active_levels >= self.cfg.max_levels:
            raise ShapeError(f"cannot grow past final scale x{self.cfg.final_scale}")
        prev = self.active_levels
        self._append_level(rng)
        if self.cfg.fade_steps <= 0:
            self.params[f"l{prev}.to_rgb.w"].trainable = False
            self.params[f"l{prev}.to_rgb.b"].trainable = False

    def finish_fade(self) -> None:
        prev = self.active_levels - 1
        if prev >= 1:
            self.params[f"l{prev}.to_rgb.w"].trainable = False
            self.params[f"l{prev}.to_rgb.b"].trainable = False

    def forward(self, lr_img: Variable, fade_alpha: float = 1.0) -> Variable:
        if self.active_levels < 1:
            raise ShapeError("no active levels")
        if lr_img.shape[1] != 3:
            raise ShapeError(f"expected 3-channel input, got {lr_img.shape[1]}")
        h, w = lr_img.shape[2], lr_img.shape[3]
        x = leaky_relu(conv(self.params, "stem", lr_img))
        prev_feat = None
        for level in range(1, self.active_levels + 1):
            hw = (h * 2 ** level, w * 2 ** level)
            prev_feat = x
            x = resize(x, hw, kind="nearest")
            cond = resize(lr_img, hw, kind="bilinear")
            for block in self.blocks[level]:
                x = apply_block(self.params, block, x, cond)
        rgb = tanh(conv(self.params, f"l{self.active_levels}.to_rgb", x))
        if fade_alpha < 1.0 and self.active_levels > 1:
            prev_level = self.active_levels - 1
            prev_rgb = tanh(conv(self.params, f"l{prev_level}.to_rgb", prev_feat))
            prev_up = resize(prev_rgb, rgb.shape[2:], kind="nearest")
            rgb = add(mul(prev_up, 1.0 - fade_alpha), mul(rgb, fade_alpha))
        return rgb


class HRDiscriminator:
    """Stride-2 conv stack mirroring the generator's level widths; grows by
    prepending a from_rgb + downsampling conv at the new resolution (hard
    switch, no fade: its graph stays within the double-backprop op subset)."""

    def __init__(self, cfg: SRNetConfig, rng: np.random.Generator,
                 active_levels: int = 1):
        self.cfg = cfg
        self.params = ParamStore(dtype=cfg.dtype)
        self.active_levels = 0
        base = 2 * cfg.base_width
        add_conv(self.params, "head0", base, base, rng=rng)
        add_conv(self.params, "head1", base, 1, rng=rng, gain=1.0)
        for _ in range(active_levels):
            self._append_level(rng)

    def _down_out(self, level: int) -> int:
        return self.cfg.level_width(level - 1) if level > 1 else 2 * self.cfg.base_width

    def _append_level(self, rng) -> None:
        level = self.active_levels + 1
        width = self.cfg.level_width(level)
        add_conv(self.params, f"from_rgb{level}", 3, width, kernel=1, rng=rng)
        add_conv(self.params, f"down{level}", width, self._down_out(level), rng=rng)
        if level > 1:
            self.params[f"from_rgb{level - 1}.w"].trainable = False
            self.params[f"from_rgb{level - 1}.b"].trainable = False
        self.active_levels = level

    def grow(self, rng: np.random.Generator) -> None:
        if self.active_levels >= self.cfg.max_levels:
            raise ShapeError(f"cannot grow past final scale x{self.cfg.final_scale}")
        self._append_level(rng)

    def forward(self, img: Variable) -> Variable:
        p = self.params
        x = leaky_relu(conv(p, f"from_rgb{self.active_levels}", img))
        for level in range(self.active_levels, 0, -1):
            x = leaky_relu(conv(p, f"down{level}", x, stride=2))
        x = leaky_relu(conv(p, "head0", x))
        return conv(p, "head1", x)


# ---------------------------------------------------------------------------
# losses


def loss_adv_hr(d, real_hr: Variable, fake_hr: Variable):
    """Hinge pair on raw scores: margins at +-1 for the discriminator,
    plain negated score for the generator."""
    s_real = d.forward(real_hr.detach())
    s_fake_det = d.forward(fake_hr.detach())
    d_loss = add(reduce_mean(relu(sub(1.0, s_real))),
                 reduce_mean(relu(add(1.0, s_fake_det))))
    g_loss = mul(reduce_mean(d.forward(fake_hr)), -1.0)
    return d_loss, g_loss


def loss_rec(real_hr: Variable, gen_hr: Variable) -> Variable:
    if real_hr.shape != gen_hr.shape:
        raise ShapeError(f"reconstruction shape mismatch: {real_hr.shape} vs {gen_hr.shape}")
    return reduce_mean(abs_(sub(real_hr, gen_hr)))


def loss_rec_cycle(sr_out: Variable, clean_lr: Variable) -> Variable:
    """L1 between the bicubic downsample of the SR output and the LR input;
    the downsample stays inside the differentiation graph."""
    sh, sw = sr_out.shape[2], sr_out.shape[3]
    lh, lw = clean_lr.shape[2], clean_lr.shape[3]
    ratio_h, ratio_w = sh / lh, sw / lw
    ratio = int(ratio_h)
    if ratio_h != ratio_w or ratio_h != ratio or ratio < 1 or (ratio & (ratio - 1)):
        raise ShapeError(f"cycle ratio {sh}x{sw} -> {lh}x{lw} must be a power-of-two factor")
    down = resize(sr_out, (lh, lw), kind="bicubic")
    return reduce_mean(abs_(sub(down, clean_lr)))


def loss_r1(d, real_hr: Variable, r: float = 10.0) -> Variable:
    """(r/2) * E ||grad_x D(x)||^2 on real samples via double backprop."""
    if ad.active_tape() is None:
        raise ShapeError("loss_r1 requires an active tape")
    x = Variable(real_hr.data, requires_grad=True)
    score_sum = reduce_sum(d.forward(x))
    gx = ad.backward(score_sum, [x], create_graph=True)[x]
    per_sample = reduce_sum(square(gx), axes=(1, 2, 3))
    return mul(reduce_mean(per_sample, axes=(0,)), r / 2.0)


def stage2_total(adv: Variable, rec: Variable, r1: Variable,
                 lambda_rec: float = 150.0, lambda_r1: float = 3.0) -> Variable:
    return add(add(adv, mul(rec, lambda_rec)), mul(r1, lambda_r1))


# ---------------------------------------------------------------------------
# condition-branch inspection


def dump_condition_features(net: SRGenerator, lr_img: Variable, level: int) -> list[np.ndarray]:
    """Per-channel min-max normalized gamma maps of the level's first block,
    as uint8 grayscale images."""
    if level < 1 or level > net.active_levels:
        raise ShapeError(f"level {level} not active (1..{net.active_levels})")
    h, w = lr_img.shape[2], lr_img.shape[3]
    cond = resize(lr_img, (h * 2 ** level, w * 2 ** level), kind="bilinear")
    gamma = condition_gamma(net.params, net.blocks[level][0], cond).data
    maps = []
    for ch in range(gamma.shape[1]):
        g = gamma[0, ch].astype(np.float64)
        lo, hi = float(g.min()), float(g.max())
        if hi > lo:
            out = np.round((g - lo) / (hi - lo) * 255.0)
        else:
            out = np.zeros_like(g)
        maps.append(out.astype(np.uint8))
    return maps
