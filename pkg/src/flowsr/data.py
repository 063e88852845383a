"""Corpus ingestion and the procedural desk-scale face corpus.

Images are 8-bit RGB PNGs on disk and (1, 3, h, w) float arrays in [-1, 1]
in memory. Index construction is order-stable (lexicographic by relative
path) and batching is fully seed-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .autodiff import Variable
from .errors import DataError
from .imageops import grid_sample, resize


# ---------------------------------------------------------------------------
# pixel representation


def from_uint8(u8: np.ndarray) -> np.ndarray:
    """(h, w, 3) uint8 -> (1, 3, h, w) float32 in [-1, 1]."""
    x = u8.astype(np.float32) / 127.5 - 1.0
    return x.transpose(2, 0, 1)[None]


def to_uint8(x: np.ndarray) -> np.ndarray:
    """(1, 3, h, w) or (3, h, w) in [-1, 1] -> (h, w, 3) uint8."""
    if x.ndim == 4:
        x = x[0]
    u8 = np.clip(np.round((x + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return u8.transpose(1, 2, 0)


def to_unit_range(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 1]."""
    return (x + 1.0) / 2.0


def from_unit_range(x: np.ndarray) -> np.ndarray:
    """[0, 1] -> [-1, 1]."""
    return x * 2.0 - 1.0


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_png(path: Path, u8_hwc: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8_hwc, mode="RGB").save(path, format="PNG")


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # (1, 3, h, w) in [-1, 1]
    source_dims: tuple[int, int]


def load_record(path: Path, rel_id: str) -> ImageRecord:
    u8 = read_png(path)
    return ImageRecord(rel_id, from_uint8(u8), (u8.shape[0], u8.shape[1]))


# ---------------------------------------------------------------------------
# dataset index


@dataclass
class DatasetIndex:
    mode: str  # paired_synthetic | unpaired | pseudo_paired
    hr_records: list[ImageRecord]
    lr_records: list[ImageRecord] = field(default_factory=list)
    scale_factor: int = 4


def _list_pngs(d: Path) -> list[Path]:
    if not d.is_dir():
        raise DataError(f"corpus directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DataError(f"no PNG files in corpus directory: {d}")
    return files


def synth_clean_lr(hr: ImageRecord, factor: int) -> ImageRecord:
    """Bicubic-downsample an HR record by an integer factor."""
    if factor not in (2, 4, 8):
        raise DataError(f"downsample factor must be 2, 4 or 8, got {factor}")
    h, w = hr.pixels.shape[2], hr.pixels.shape[3]
    if h % factor or w % factor:
        raise DataError(f"HR dims ({h}, {w}) not divisible by factor {factor}")
    lr = resize(Variable(hr.pixels), (h // factor, w // factor), kind="bicubic").data
    return ImageRecord(hr.id, np.clip(lr, -1.0, 1.0), (h, w))


def build_index(hr_dir: Path, lr_dir: Optional[Path], mode: str,
                scale_factor: int = 4) -> DatasetIndex:
    if mode not in ("paired_synthetic", "unpaired", "pseudo_paired"):
        raise DataError(f"unknown dataset mode '{mode}'")
    hr = [load_record(p, p.name) for p in _list_pngs(Path(hr_dir))]
    lr: list[ImageRecord] = []
    if mode == "paired_synthetic":
        lr = [synth_clean_lr(r, scale_factor) for r in hr]
    else:
        if lr_dir is None:
            raise DataError(f"mode '{mode}' requires an LR directory")
        lr = [load_record(p, p.name) for p in _list_pngs(Path(lr_dir))]
        if mode == "pseudo_paired":
            hr_ids = [r.id for r in hr]
            lr_ids = [r.id for r in lr]
            if hr_ids != lr_ids:
                raise DataError("pseudo_paired mode needs identical HR/LR file names; "
                                f"first mismatch near {set(hr_ids) ^ set(lr_ids)}")
    return DatasetIndex(mode, hr, lr, scale_factor)


# ---------------------------------------------------------------------------
# batching


@dataclass
class PairBatch:
    lr: np.ndarray            # (b, 3, h, w)
    hr: Optional[np.ndarray]  # aligned in paired modes, independent otherwise
    lr_ids: list[str]
    hr_ids: list[str]


def _stack(records: list[ImageRecord], order: np.ndarray) -> tuple[np.ndarray, list[str]]:
    picked = [records[i] for i in order]
    return np.concatenate([r.pixels for r in picked], axis=0), [r.id for r in picked]


def _perm(n: int, seed: int, epoch: int, stream: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, stream]))
    return rng.permutation(n)


def batch_iter(index: DatasetIndex, batch: int, seed: int, epoch: int) -> Iterator[PairBatch]:
    """One epoch of batches; the last partial batch is dropped.

    Unpaired mode draws the LR and HR sides from independent permutations.
    """
    if batch < 1:
        raise DataError(f"batch size must be >= 1, got {batch}")
    if not index.hr_records:
        raise DataError("empty dataset index")
    paired = index.mode in ("paired_synthetic", "pseudo_paired")
    if paired:
        order = _perm(len(index.hr_records), seed, epoch, 0)
        for start in range(0, len(order) - batch + 1, batch):
            sel = order[start:start + batch]
            lr, lr_ids = _stack(index.lr_records, sel)
            hr, hr_ids = _stack(index.hr_records, sel)
            yield PairBatch(lr, hr, lr_ids, hr_ids)
    else:
        if not index.lr_records:
            raise DataError("unpaired mode with no LR records")
        lo = _perm(len(index.lr_records), seed, epoch, 1)
        ho = _perm(len(index.hr_records), seed, epoch, 2)
        steps = min(len(lo), len(ho)) // batch
        for k in range(steps):
            lr, lr_ids = _stack(index.lr_records, lo[k * batch:(k + 1) * batch])
            hr, hr_ids = _stack(index.hr_records, ho[k * batch:(k + 1) * batch])
            yield PairBatch(lr, hr, lr_ids, hr_ids)


def endless_batches(index: DatasetIndex, batch: int, seed: int) -> Iterator[PairBatch]:
    """Cycle batch_iter over epochs forever (epoch index feeds the shuffle)."""
    epoch = 0
    while True:
        produced = False
        for b in batch_iter(index, batch, seed, epoch):
            produced = True
            yield b
        if not produced:
            raise DataError(f"dataset too small for batch size {batch}")
        epoch += 1


def _flip_flags(seed: int, iteration: int, count: int, stream: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, iteration, stream, 7]))
    return rng.random(count) < 0.5


def hflip_augment(batch: PairBatch, seed: int, iteration: int,
                  paired: bool = True) -> PairBatch:
    """Flip each sample horizontally with probability 1/2, deterministically
    per (seed, iteration, sample index); paired samples flip jointly."""
    flags = _flip_flags(seed, iteration, batch.lr.shape[0], 0)
    lr = batch.lr.copy()
    lr[flags] = lr[flags, :, :, ::-1]
    hr = None
    if batch.hr is not None:
        hr_flags = flags if paired else _flip_flags(seed, iteration, batch.hr.shape[0], 1)
        hr = batch.hr.copy()
        hr[hr_flags] = hr[hr_flags, :, :, ::-1]
    return PairBatch(lr, hr, batch.lr_ids, batch.hr_ids)


# ---------------------------------------------------------------------------
# procedural face corpus


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_face(rng: np.random.Generator, size: int) -> np.ndarray:
    """Face-like test image: ellipse head, eyes, mouth, random hue and pose.
    Rendered 4x supersampled then box-averaged; returns (3, size, size) in [0, 1]."""
    ss = 4
    s = size * ss
    yy, xx = np.meshgrid(np.arange(s, dtype=np.float64),
                         np.arange(s, dtype=np.float64), indexing="ij")
    img = np.empty((3, s, s))
    top = rng.uniform(0.25, 0.8, size=3)
    bottom = np.clip(top + rng.uniform(-0.25, 0.25, size=3), 0.05, 0.95)
    grad = (yy / (s - 1))[None]
    img[:] = top[:, None, None] * (1 - grad) + bottom[:, None, None] * grad

    cy = s * (0.5 + rng.uniform(-0.06, 0.06))
    cx = s * (0.5 + rng.uniform(-0.06, 0.06))
    ry = s * rng.uniform(0.30, 0.40)
    rx = s * rng.uniform(0.24, 0.33)
    skin = np.array([rng.uniform(0.65, 0.95), rng.uniform(0.5, 0.75),
                     rng.uniform(0.4, 0.65)])
    head = _ellipse(yy, xx, cy, cx, ry, rx)
    img[:, head] = skin[:, None]

    hair = _ellipse(yy, xx, cy - 0.55 * ry, cx, 0.55 * ry, 1.05 * rx) & (yy < cy - 0.3 * ry)
    hair_color = rng.uniform(0.05, 0.4, size=3)
    img[:, hair] = hair_color[:, None]

    eye_dy = ry * rng.uniform(0.15, 0.3)
    eye_dx = rx * rng.uniform(0.35, 0.5)
    eye_r = rx * rng.uniform(0.10, 0.16)
    eye_color = rng.uniform(0.0, 0.25, size=3)
    for side in (-1.0, 1.0):
        white = _ellipse(yy, xx, cy - eye_dy, cx + side * eye_dx, eye_r, 1.3 * eye_r)
        img[:, white] = 0.92
        pupil = _ellipse(yy, xx, cy - eye_dy, cx + side * eye_dx, 0.55 * eye_r, 0.55 * eye_r)
        img[:, pupil] = eye_color[:, None]

    mouth = _ellipse(yy, xx, cy + 0.45 * ry, cx, 0.12 * ry, rx * rng.uniform(0.3, 0.5))
    mouth_color = np.array([rng.uniform(0.5, 0.8), rng.uniform(0.1, 0.3),
                            rng.uniform(0.15, 0.35)])
    img[:, mouth] = mouth_color[:, None]

    img = img.reshape(3, size, ss, size, ss).mean(axis=(2, 4))
    return np.clip(img, 0.0, 1.0)


def _smooth_random_flow(rng, n, h, w, amplitude):
    raw = rng.normal(0.0, 1.0, size=(n, 2, h, w))
    # cheap separable 5-tap binomial smoothing, edge-clamped
    kernel = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    for axis in (2, 3):
        padded = np.concatenate([np.take(raw, [0, 0], axis=axis), raw,
                                 np.take(raw, [-1, -1], axis=axis)], axis=axis)
        raw = sum(kernel[i] * np.take(padded, range(i, i + raw.shape[axis]), axis=axis)
                  for i in range(5))
    peak = np.max(np.abs(raw), initial=1e-9)
    return (raw / peak * amplitude).astype(np.float32)


def degrade_to_real_lr(hr01: np.ndarray, lr_size: int, rng: np.random.Generator) -> np.ndarray:
    """Synthetic 'camera-domain' LR: bicubic down, small random warp, blur,
    sensor-ish noise. Returns (3, lr_size, lr_size) in [0, 1]."""
    x = from_unit_range(hr01)[None]
    lr = resize(Variable(x.astype(np.float32)), (lr_size, lr_size), kind="bicubic").data
    flow = _smooth_random_flow(rng, 1, lr_size, lr_size, amplitude=rng.uniform(0.3, 0.9))
    warped = grid_sample(Variable(lr), Variable(flow)).data
    k = np.array([0.25, 0.5, 0.25])
    for axis in (2, 3):
        padded = np.concatenate([np.take(warped, [0], axis=axis), warped,
                                 np.take(warped, [-1], axis=axis)], axis=axis)
        warped = sum(k[i] * np.take(padded, range(i, i + lr_size), axis=axis)
                     for i in range(3))
    noisy = warped + rng.normal(0.0, 0.02, size=warped.shape)
    return np.clip(to_unit_range(noisy[0]), 0.0, 1.0)


def write_procedural_corpus(root: Path, count: int = 16, hr_size: int = 64,
                            lr_factor: int = 4, seed: int = 0) -> dict[str, Path]:
    """Write hr/, lr/ (noisy domain) and clean_lr/ (bicubic) PNG sets."""
    root = Path(root)
    dirs = {name: root / name for name in ("hr", "lr", "clean_lr")}
    rng = np.random.default_rng(seed)
    lr_size = hr_size // lr_factor
    for i in range(count):
        face01 = generate_face(rng, hr_size)
        name = f"{i:04d}.png"
        write_png(dirs["hr"] / name, to_uint8(from_unit_range(face01)))
        real_lr01 = degrade_to_real_lr(face01, lr_size, rng)
        write_png(dirs["lr"] / name, to_uint8(from_unit_range(real_lr01)))
        hr_rec = ImageRecord(name, from_unit_range(face01)[None].astype(np.float32),
                             (hr_size, hr_size))
        clean = synth_clean_lr(hr_rec, lr_factor)
        write_png(dirs["clean_lr"] / name, to_uint8(clean.pixels))
    return dirs
