"""Stage 1: flow-field degradation generator, LR discriminator, and losses.

The generator predicts an intermediate RGB image plus a bounded per-pixel
displacement field; the degraded output is the intermediate warped by that
field. The flow head is zero-initialized so training starts from the identity
degradation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Variable, abs_, add, crop, log, mul, reduce_mean, reduce_sum, sigmoid, sub, tanh
from .errors import ShapeError
from .imageops import grid_sample, leaky_relu, resize
from .params import ParamStore, add_conv, conv


@dataclass(frozen=True)
class DegradeNetConfig:
    base_width: int = 32
    max_disp: float = 2.0  # pixel bound on |dx|, |dy|
    dtype: str = "float32"


@dataclass
class FlowField:
    offsets: Variable  # (n, 2, h, w), pixel units; channel 0 = dx, 1 = dy
    max_disp: float

    def __post_init__(self):
        if self.offsets.shape[1] != 2:
            raise ShapeError(f"flow field needs 2 channels, got {self.offsets.shape}")
        bound = float(np.max(np.abs(self.offsets.data), initial=0.0))
        if bound > self.max_disp + 1e-6:
            raise ShapeError(f"flow magnitude {bound} exceeds max_disp {self.max_disp}")


@dataclass
class DegradationOutput:
    intermediate: Variable  # generator's direct RGB output
    flow: FlowField
    degraded: Variable      # grid_sample(intermediate, flow)


class DegradeGenerator:
    """Two-level encoder/decoder with twin image+flow heads."""

    def __init__(self, cfg: DegradeNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.base_width
        p = ParamStore(dtype=cfg.dtype)
        add_conv(p, "enc0", 3, w, rng=rng)
        add_conv(p, "enc1", w, 2 * w, rng=rng)
        add_conv(p, "enc2", 2 * w, 4 * w, rng=rng)
        add_conv(p, "dec1", 4 * w, 2 * w, rng=rng)
        add_conv(p, "dec0", 2 * w, w, rng=rng)
        add_conv(p, "img_head", w, 3, rng=rng, gain=1.0)
        add_conv(p, "flow_head", w, 2, rng=rng, gain=1.0, zero_init=True)
        self.params = p

    def forward(self, clean_lr: Variable) -> DegradationOutput:
        if clean_lr.shape[1] != 3:
            raise ShapeError(f"expected 3-channel input, got {clean_lr.shape[1]} channels")
        h, w = clean_lr.shape[2], clean_lr.shape[3]
        if h % 4 or w % 4:
            raise ShapeError(f"input dims ({h}, {w}) must be divisible by 4")
        p = self.params
        h0 = leaky_relu(conv(p, "enc0", clean_lr))
        h1 = leaky_relu(conv(p, "enc1", h0, stride=2))
        h2 = leaky_relu(conv(p, "enc2", h1, stride=2))
        u1 = leaky_relu(conv(p, "dec1", resize(h2, (h // 2, w // 2), kind="nearest")))
        u0 = leaky_relu(conv(p, "dec0", resize(u1, (h, w), kind="nearest")))
        intermediate = tanh(conv(p, "img_head", u0))
        flow_var = mul(tanh(conv(p, "flow_head", u0)), self.cfg.max_disp)
        degraded = grid_sample(intermediate, flow_var)
        return DegradationOutput(intermediate, FlowField(flow_var, self.cfg.max_disp), degraded)


class LRDiscriminator:
    """Patch discriminator on LR images; raw logits out."""

    def __init__(self, cfg: DegradeNetConfig, rng: np.random.Generator):
        w = cfg.base_width
        p = ParamStore(dtype=cfg.dtype)
        add_conv(p, "d0", 3, w, rng=rng)
        add_conv(p, "d1", w, 2 * w, rng=rng)
        add_conv(p, "d2", 2 * w, 4 * w, rng=rng)
        add_conv(p, "head", 4 * w, 1, rng=rng, gain=1.0)
        self.params = p

    def forward(self, img: Variable) -> Variable:
        p = self.params
        h = leaky_relu(conv(p, "d0", img))
        h = leaky_relu(conv(p, "d1", h, stride=2))
        h = leaky_relu(conv(p, "d2", h, stride=2))
        return conv(p, "head", h)


def loss_adv_lr(d, real_lr: Variable, fake_lr: Variable):
    """Vanilla GAN pair on sigmoid probabilities with clamped logs.

    d_loss sees the fake detached; g_loss is the non-saturating form and
    carries gradient through fake_lr into its generator.
    """
    p_real = sigmoid(d.forward(real_lr.detach()))
    p_fake_det = sigmoid(d.forward(fake_lr.detach()))
    d_loss = add(mul(reduce_mean(log(p_real)), -1.0),
                 mul(reduce_mean(log(sub(1.0, p_fake_det))), -1.0))
    p_fake = sigmoid(d.forward(fake_lr))
    g_loss = mul(reduce_mean(log(p_fake)), -1.0)
    return d_loss, g_loss


def loss_identity(intermediate: Variable, clean_lr: Variable) -> Variable:
    if intermediate.shape != clean_lr.shape:
        raise ShapeError(f"identity loss shape mismatch: "
                         f"{intermediate.shape} vs {clean_lr.shape}")
    return reduce_mean(abs_(sub(intermediate, clean_lr)))


def loss_smooth(flow: FlowField) -> Variable:
    """Total variation of the flow: one mean over every valid forward
    difference (both axes, both channels)."""
    o = flow.offsets
    n, c, h, w = o.shape
    terms = []
    count = 0
    if w > 1:
        dx = sub(crop(o, 0, h, 1, w), crop(o, 0, h, 0, w - 1))
        terms.append(reduce_sum(abs_(dx)))
        count += n * c * h * (w - 1)
    if h > 1:
        dy = sub(crop(o, 1, h, 0, w), crop(o, 0, h - 1, 0, w))
        terms.append(reduce_sum(abs_(dy)))
        count += n * c * (h - 1) * w
    if not terms:
        return Variable(np.zeros((1, 1, 1, 1), dtype=o.dtype))
    total = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
    return mul(total, 1.0 / count)


def stage1_total(adv: Variable, idt: Variable, smooth: Variable,
                 lambda_idt: float = 10.0, lambda_s: float = 1.0) -> Variable:
    return add(add(adv, mul(idt, lambda_idt)), mul(smooth, lambda_s))


def perturb_flow(out: DegradationOutput, noise_std: float, seed: int) -> np.ndarray:
    """Re-warp the intermediate with Gaussian-jittered flow (clamped to the
    displacement bound). Deterministic per seed; returns a plain array."""
    if noise_std < 0:
        raise ShapeError(f"noise_std must be >= 0, got {noise_std}")
    flow = out.flow.offsets.data
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_std, size=flow.shape).astype(flow.dtype)
    jittered = np.clip(flow + noise, -out.flow.max_disp, out.flow.max_disp)
    warped = grid_sample(Variable(out.intermediate.data), Variable(jittered))
    return warped.data
