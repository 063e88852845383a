"""Optimization loops for both stages.

Adam runs on the stored (unit-normal) weights; the equalized per-parameter
scale lives in the forward pass, so its factor reaches Adam through the
gradients. Both stages alternate discriminator/generator steps 1:1 and are
fully deterministic given (seed, config, corpus).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable, add, mul
from .checkpoint import Checkpoint, expect_meta, save_checkpoint
from .data import DatasetIndex, endless_batches, hflip_augment
from .degradation import (DegradeGenerator, DegradeNetConfig, LRDiscriminator,
                          loss_adv_lr, loss_identity, loss_smooth, stage1_total)
from .errors import ConfigError, NumericalError, TrainingError
from .imageops import resize
from .params import ParamStore
from .srnet import (HRDiscriminator, ProgressiveState, SRGenerator, SRNetConfig,
                    loss_adv_hr, loss_r1, loss_rec, loss_rec_cycle)

STAGES = ("degrade", "sr", "sr_unpaired")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update on every trainable parameter."""
    t = state.t + 1
    for name, p in store.items():
        if not p.trainable:
            continue
        if name not in grads:
            raise TrainingError(f"missing gradient for trainable parameter '{name}'")
        w = p.var.data
        g = np.asarray(grads[name], dtype=w.dtype)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * np.square(g)
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.var.data = w - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.t = t


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    total_iters: int
    batch: int = 4
    seed: int = 0
    lr: float = 0.003
    lr_decay: str = "none"  # none | linear_last_half
    grow_steps: tuple[int, ...] = ()
    final_scale: int = 4
    scale_factor: int = 4   # clean-LR synthesis / pairing factor
    base_width: int = 16
    degrade_width: int = 32
    max_disp: float = 2.0
    blocks_per_level: int = 2
    fade_steps: int = 0
    lambda_idt: float = 10.0
    lambda_s: float = 1.0
    lambda_rec: float = 150.0
    lambda_r1: float = 3.0
    r1_gamma: float = 10.0
    r1_interval: int = 1
    checkpoint_every: int = 0  # 0 = final only
    log_every: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got '{self.stage}'")
        if self.total_iters < 1:
            raise ConfigError("total_iters must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        steps = tuple(self.grow_steps)
        if list(steps) != sorted(set(steps)):
            raise ConfigError(f"grow_steps must be strictly increasing, got {steps}")
        if steps and steps[-1] >= self.total_iters:
            raise ConfigError("grow_steps must lie strictly before total_iters")
        if self.r1_interval < 1:
            raise ConfigError("r1_interval must be >= 1")
        if self.lr_decay not in ("none", "linear_last_half"):
            raise ConfigError(f"unknown lr_decay '{self.lr_decay}'")
        object.__setattr__(self, "grow_steps", steps)


def config_from_meta(meta_config: dict) -> TrainConfig:
    cfg = dict(meta_config)
    cfg["grow_steps"] = tuple(cfg.get("grow_steps", ()))
    return TrainConfig(**cfg)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    if cfg.lr_decay == "none":
        return cfg.lr
    start = cfg.total_iters // 2
    if iteration <= start:
        return cfg.lr
    return cfg.lr * (cfg.total_iters - iteration) / (cfg.total_iters - start)


class LossLog:
    """Append-only TSV: iter<TAB>name<TAB>value."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh: IO[str] = open(path, "w", encoding="utf-8")

    def log(self, iteration: int, name: str, value: float) -> None:
        self._fh.write(f"{iteration}\t{name}\t{value:.10e}\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


def _apply_grads(store: ParamStore, loss: Variable, state: AdamState, lr: float) -> None:
    trainable = store.trainable()
    grad_map = ad.backward(loss, [p.var for p in trainable])
    named = {p.name: grad_map[p.var].data for p in trainable}
    adam_step(store, named, state, lr)


def _pack_tensors(stores: dict[str, ParamStore],
                  adams: dict[str, AdamState]) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for prefix, store in stores.items():
        for name, p in store.items():
            tensors[f"{prefix}/{name}"] = p.var.data
    for prefix, state in adams.items():
        for name, arr in state.m.items():
            tensors[f"adam_{prefix}/m/{name}"] = arr
        for name, arr in state.v.items():
            tensors[f"adam_{prefix}/v/{name}"] = arr
    return tensors


def _unpack_store(ckpt: Checkpoint, prefix: str, store: ParamStore) -> None:
    sub = {name[len(prefix) + 1:]: arr for name, arr in ckpt.tensors.items()
           if name.startswith(prefix + "/")}
    store.load_arrays(sub)
    for name in ckpt.meta.get("frozen", {}).get(prefix, []):
        store[name].trainable = False


def _unpack_adam(ckpt: Checkpoint, prefix: str) -> AdamState:
    state = AdamState(t=ckpt.meta.get(f"adam_{prefix}_t", 0))
    head = f"adam_{prefix}/"
    for name, arr in ckpt.tensors.items():
        if name.startswith(head + "m/"):
            state.m[name[len(head) + 2:]] = arr.copy()
        elif name.startswith(head + "v/"):
            state.v[name[len(head) + 2:]] = arr.copy()
    return state


def _frozen_names(store: ParamStore) -> list[str]:
    return [name for name, p in store.items() if not p.trainable]


def _save_run_checkpoint(path: Path, cfg: TrainConfig, iteration: int,
                         stores: dict[str, ParamStore], adams: dict[str, AdamState],
                         extra_meta: Optional[dict] = None) -> Path:
    meta = {
        "stage": "degrade" if cfg.stage == "degrade" else "sr",
        "iteration": iteration,
        "config": asdict(cfg),
        "frozen": {prefix: _frozen_names(store) for prefix, store in stores.items()},
    }
    for prefix, state in adams.items():
        meta[f"adam_{prefix}_t"] = state.t
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, meta, _pack_tensors(stores, adams))
    return path


def _clean_lr_batch(hr: np.ndarray, factor: int, dtype) -> np.ndarray:
    h, w = hr.shape[2], hr.shape[3]
    lr = resize(Variable(hr.astype(dtype, copy=False)),
                (h // factor, w // factor), kind="bicubic").data
    return np.clip(lr, -1.0, 1.0)


# ---------------------------------------------------------------------------
# stage 1


def run_stage1(cfg: TrainConfig, index: DatasetIndex, out_dir: Path) -> Path:
    """Adversarial degradation training on unpaired (real LR, HR) corpora."""
    if cfg.stage != "degrade":
        raise ConfigError(f"run_stage1 needs stage 'degrade', got '{cfg.stage}'")
    out_dir = Path(out_dir)
    dtype = np.dtype(cfg.dtype)
    net_cfg = DegradeNetConfig(cfg.degrade_width, cfg.max_disp, cfg.dtype)
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    gen = DegradeGenerator(net_cfg, init_rng)
    disc = LRDiscriminator(net_cfg, init_rng)
    adam_g, adam_d = AdamState(), AdamState()
    stream = endless_batches(index, cfg.batch, cfg.seed)
    log = LossLog(out_dir / "loss.tsv")
    stores = {"g": gen.params, "d": disc.params}
    adams = {"g": adam_g, "d": adam_d}
    it = 0
    try:
        for it in range(1, cfg.total_iters + 1):
            step_lr = lr_at(cfg, it)
            batch = hflip_augment(next(stream), cfg.seed, it, paired=False)
            clean = _clean_lr_batch(batch.hr, cfg.scale_factor, dtype)
            real_lr = batch.lr.astype(dtype, copy=False)

            fake = gen.forward(Variable(clean)).degraded.data
            with Tape():
                d_loss, _ = loss_adv_lr(disc, Variable(real_lr), Variable(fake))
                _apply_grads(disc.params, d_loss, adam_d, step_lr)

            with Tape():
                out = gen.forward(Variable(clean))
                _, g_adv = loss_adv_lr(disc, Variable(real_lr), out.degraded)
                idt = loss_identity(out.intermediate, Variable(clean))
                smooth = loss_smooth(out.flow)
                total = stage1_total(g_adv, idt, smooth, cfg.lambda_idt, cfg.lambda_s)
                _apply_grads(gen.params, total, adam_g, step_lr)

            if it % cfg.log_every == 0:
                for name, value in (("d_adv", d_loss.item()), ("g_adv", g_adv.item()),
                                    ("idt", idt.item()), ("smooth", smooth.item()),
                                    ("g_total", total.item()), ("lr", step_lr)):
                    log.log(it, name, value)
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                _save_run_checkpoint(out_dir / "checkpoints" / f"iter{it:07d}.sfsr",
                                     cfg, it, stores, adams)
    except NumericalError as e:
        log.close()
        raise NumericalError(f"stage-1 training aborted at iteration {it}: {e}") from e
    log.close()
    return _save_run_checkpoint(out_dir / "checkpoints" / "final.sfsr",
                                cfg, cfg.total_iters, stores, adams)


def load_stage1_generator(ckpt: Checkpoint) -> DegradeGenerator:
    expect_meta(ckpt.meta, stage="degrade")
    cfg = config_from_meta(ckpt.meta["config"])
    net_cfg = DegradeNetConfig(cfg.degrade_width, cfg.max_disp, cfg.dtype)
    gen = DegradeGenerator(net_cfg, np.random.default_rng(0))
    _unpack_store(ckpt, "g", gen.params)
    return gen


# ---------------------------------------------------------------------------
# stage 2


def run_stage2(cfg: TrainConfig, index: DatasetIndex, out_dir: Path) -> Path:
    """Progressive SR training; paired mode reconstructs against HR, unpaired
    mode closes the cycle through a bicubic downsample of the SR output."""
    if cfg.stage not in ("sr", "sr_unpaired"):
        raise ConfigError(f"run_stage2 needs stage 'sr' or 'sr_unpaired', got '{cfg.stage}'")
    paired = cfg.stage == "sr"
    out_dir = Path(out_dir)
    dtype = np.dtype(cfg.dtype)
    net_cfg = SRNetConfig(cfg.base_width, cfg.blocks_per_level, cfg.final_scale,
                          cfg.fade_steps, cfg.dtype)
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    gen = SRGenerator(net_cfg, init_rng)
    disc = HRDiscriminator(net_cfg, init_rng)
    grow_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    state = ProgressiveState(1, list(cfg.grow_steps), cfg.final_scale, cfg.fade_steps)
    adam_g, adam_d = AdamState(), AdamState()
    stream = endless_batches(index, cfg.batch, cfg.seed)
    log = LossLog(out_dir / "loss.tsv")
    stores = {"g": gen.params, "d": disc.params}
    adams = {"g": adam_g, "d": adam_d}
    grow_at = set(cfg.grow_steps)
    sr_meta = lambda: {"final_scale": cfg.final_scale, "active_levels": gen.active_levels}
    it = 0
    try:
        for it in range(1, cfg.total_iters + 1):
            if it in grow_at:
                gen.grow(grow_rng)
                disc.grow(grow_rng)
                state.active_levels += 1
                state.fade_start = it if cfg.fade_steps > 0 else None
            alpha = state.fade_alpha(it)
            if state.fade_start is not None and alpha >= 1.0:
                gen.finish_fade()
                state.fade_start = None

            batch = hflip_augment(next(stream), cfg.seed, it, paired=paired)
            lr_in = batch.lr.astype(dtype, copy=False)
            hr = batch.hr.astype(dtype, copy=False)
            target_hw = (lr_in.shape[2] * state.scale, lr_in.shape[3] * state.scale)
            if hr.shape[2:] != target_hw:
                hr = np.clip(resize(Variable(hr), target_hw, kind="bicubic").data, -1, 1)

            fake = gen.forward(Variable(lr_in), alpha).data
            with Tape():
                d_adv, _ = loss_adv_hr(disc, Variable(hr), Variable(fake))
                if it % cfg.r1_interval == 0:
                    r1 = loss_r1(disc, Variable(hr), cfg.r1_gamma)
                    d_total = add(d_adv, mul(r1, cfg.lambda_r1))
                else:
                    r1 = None
                    d_total = d_adv
                _apply_grads(disc.params, d_total, adam_d, cfg.lr)

            with Tape():
                sr_out = gen.forward(Variable(lr_in), alpha)
                _, g_adv = loss_adv_hr(disc, Variable(hr), sr_out)
                rec = (loss_rec(Variable(hr), sr_out) if paired
                       else loss_rec_cycle(sr_out, Variable(lr_in)))
                g_total = add(g_adv, mul(rec, cfg.lambda_rec))
                _apply_grads(gen.params, g_total, adam_g, cfg.lr)

            if it % cfg.log_every == 0:
                rows = [("d_adv", d_adv.item()), ("g_adv", g_adv.item()),
                        ("rec", rec.item()), ("g_total", g_total.item()),
                        ("scale", float(state.scale))]
                if r1 is not None:
                    rows.append(("r1", r1.item()))
                for name, value in rows:
                    log.log(it, name, value)
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                _save_run_checkpoint(out_dir / "checkpoints" / f"iter{it:07d}.sfsr",
                                     cfg, it, stores, adams, sr_meta())
    except NumericalError as e:
        log.close()
        raise NumericalError(f"stage-2 training aborted at iteration {it}: {e}") from e
    log.close()
    return _save_run_checkpoint(out_dir / "checkpoints" / "final.sfsr",
                                cfg, cfg.total_iters, stores, adams, sr_meta())


def load_sr_generator(ckpt: Checkpoint) -> SRGenerator:
    expect_meta(ckpt.meta, stage="sr")
    cfg = config_from_meta(ckpt.meta["config"])
    net_cfg = SRNetConfig(cfg.base_width, cfg.blocks_per_level, cfg.final_scale,
                          cfg.fade_steps, cfg.dtype)
    gen = SRGenerator(net_cfg, np.random.default_rng(0),
                      active_levels=ckpt.meta["active_levels"])
    _unpack_store(ckpt, "g", gen.params)
    return gen
