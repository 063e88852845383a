"""Differentiable image-domain operators.

conv2d is built from three bilinear primitives (forward, input-adjoint,
weight-adjoint) that express each other's backward rules, which is what makes
double backprop through a conv stack possible. resize and grid_sample are
first-order only by contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Op, Variable, apply_op, mul, reduce_sum
from .errors import ShapeError


@dataclass(frozen=True)
class ConvSpec:
    """Declarative conv layer shape. pad is same-preserving for stride 1."""

    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise ShapeError(f"conv kernel must be odd and positive, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ShapeError(f"conv stride must be 1 or 2, got {self.stride}")

    @property
    def pad(self) -> int:
        return self.kernel // 2


@dataclass(frozen=True)
class SamplingKernelConfig:
    """Warp sampling kernel. Only parameter-free bilinear with edge clamping
    is supported; the config exists so other kernels have a declared home."""

    kind: str = "bilinear"
    border: str = "clamp_to_edge"

    def __post_init__(self):
        if self.kind != "bilinear":
            raise ShapeError(f"unsupported sampling kernel '{self.kind}'")
        if self.border != "clamp_to_edge":
            raise ShapeError(f"unsupported border policy '{self.border}'")


# ---------------------------------------------------------------------------
# convolution


def _conv_out_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv output dims ({oh}, {ow}) must be positive")
    return oh, ow


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    oh, ow = _conv_out_hw(h, w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * k * k, oh * ow), oh, ow


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    cols = cols.reshape(n, c, k, k, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def _conv_forward(x, w, stride, pad):
    oc, ic, k, _ = w.shape
    cols, oh, ow = _im2col(x, k, stride, pad)
    y = np.matmul(w.reshape(oc, ic * k * k), cols)
    return y.reshape(x.shape[0], oc, oh, ow)


def _conv_input_grad(gy, w, x_hw, stride, pad):
    oc, ic, k, _ = w.shape
    n = gy.shape[0]
    oh, ow = gy.shape[2], gy.shape[3]
    gcols = np.matmul(w.reshape(oc, ic * k * k).T, gy.reshape(n, oc, oh * ow))
    return _col2im(gcols, (n, ic) + tuple(x_hw), k, stride, pad, oh, ow)


def _conv_weight_grad(x, gy, k, stride, pad):
    n, ic = x.shape[0], x.shape[1]
    oc = gy.shape[1]
    cols, oh, ow = _im2col(x, k, stride, pad)
    gw = np.einsum("nol,nkl->ok", gy.reshape(n, oc, oh * ow), cols)
    return gw.reshape(oc, ic, k, k)


def _check_conv_shapes(x, w):
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 != 1:
        raise ShapeError(f"conv weight must be square odd-kernel, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv channel mismatch: input {x.shape[1]}, weight expects {w.shape[1]}")


class _Conv2d(Op):
    name = "conv2d"
    graph_ok = True

    def __init__(self, with_bias: bool):
        self.with_bias = with_bias

    def forward(self, ctx, x, w, *rest, stride):
        _check_conv_shapes(x, w)
        ctx["x_hw"] = x.shape[2:]
        y = _conv_forward(x, w, stride, w.shape[2] // 2)
        if self.with_bias:
            b = rest[0]
            if b.shape != (1, w.shape[0], 1, 1):
                raise ShapeError(f"conv bias shape {b.shape} != (1, {w.shape[0]}, 1, 1)")
            y = y + b
        return y

    def backward(self, node, g):
        x, w = node.inputs[0], node.inputs[1]
        stride = node.ctx["stride"]
        gx = (conv2d_input_grad(g, w, x_hw=node.ctx["x_hw"], stride=stride)
              if x.requires_grad else None)
        gw = (conv2d_weight_grad(x, g, kernel=w.shape[2], stride=stride)
              if w.requires_grad else None)
        if not self.with_bias:
            return gx, gw
        b = node.inputs[2]
        gb = reduce_sum(g, axes=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb


class _ConvInputGrad(Op):
    """Adjoint of conv2d in its image argument; bilinear in (gy, w)."""

    name = "conv2d_input_grad"
    graph_ok = True

    def forward(self, ctx, gy, w, *, x_hw, stride):
        return _conv_input_grad(gy, w, x_hw, stride, w.shape[2] // 2)

    def backward(self, node, g):
        gy, w = node.inputs
        stride = node.ctx["stride"]
        d_gy = conv2d(g, w, stride=stride) if gy.requires_grad else None
        d_w = (conv2d_weight_grad(g, gy, kernel=w.shape[2], stride=stride)
               if w.requires_grad else None)
        return d_gy, d_w


class _ConvWeightGrad(Op):
    """Adjoint of conv2d in its weight argument; bilinear in (x, gy)."""

    name = "conv2d_weight_grad"
    graph_ok = True

    def forward(self, ctx, x, gy, *, kernel, stride):
        ctx["x_hw"] = x.shape[2:]
        return _conv_weight_grad(x, gy, kernel, stride, kernel // 2)

    def backward(self, node, g):
        x, gy = node.inputs
        stride = node.ctx["stride"]
        d_x = (conv2d_input_grad(gy, g, x_hw=node.ctx["x_hw"], stride=stride)
               if x.requires_grad else None)
        d_gy = conv2d(x, g, stride=stride) if gy.requires_grad else None
        return d_x, d_gy


_CONV = _Conv2d(with_bias=True)
_CONV_NB = _Conv2d(with_bias=False)
_CONV_DX = _ConvInputGrad()
_CONV_DW = _ConvWeightGrad()


def conv2d(x, w, b=None, stride: int = 1) -> Variable:
    """Cross-correlation with same-preserving padding (k//2) plus bias."""
    if b is None:
        return apply_op(_CONV_NB, x, w, stride=stride)
    return apply_op(_CONV, x, w, b, stride=stride)


def conv2d_input_grad(gy, w, x_hw, stride: int = 1) -> Variable:
    return apply_op(_CONV_DX, gy, w, x_hw=tuple(x_hw), stride=stride)


def conv2d_weight_grad(x, gy, kernel: int, stride: int = 1) -> Variable:
    return apply_op(_CONV_DW, x, gy, kernel=kernel, stride=stride)


# ---------------------------------------------------------------------------
# activations


class _LeakyRelu(Op):
    """max(x, slope*x); the derivative mask is treated as a constant, so the
    second derivative is zero everywhere (piecewise-linear convention)."""

    name = "leaky_relu"
    graph_ok = True

    def forward(self, ctx, x, *, slope):
        ctx["mask"] = np.where(x > 0, np.asarray(1.0, x.dtype), np.asarray(slope, x.dtype))
        return np.maximum(x, x * np.asarray(slope, x.dtype))

    def backward(self, node, g):
        return (mul(g, Variable(node.ctx["mask"])),)


_LEAKY = _LeakyRelu()


def leaky_relu(x, slope: float = 0.2) -> Variable:
    return apply_op(_LEAKY, x, slope=slope)


def relu(x) -> Variable:
    return apply_op(_LEAKY, x, slope=0.0)


# ---------------------------------------------------------------------------
# resampling

_KEYS_A = -0.5  # Keys bicubic constant


def _keys_kernel(t: float) -> float:
    a = _KEYS_A
    t = abs(t)
    if t <= 1.0:
        return (a + 2.0) * t ** 3 - (a + 3.0) * t ** 2 + 1.0
    if t < 2.0:
        return a * (t ** 3 - 5.0 * t ** 2 + 8.0 * t - 4.0)
    return 0.0


@lru_cache(maxsize=256)
def _resize_matrix(n_in: int, n_out: int, kind: str) -> np.ndarray:
    """Row-stochastic (n_out, n_in) resampling matrix with half-pixel centers
    and clamp-to-edge borders (out-of-range taps fold onto the edge sample)."""
    W = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out

    def put(row, j, wgt):
        W[row, min(max(j, 0), n_in - 1)] += wgt

    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        if kind == "nearest":
            put(i, int(np.floor(src + 0.5)), 1.0)
        elif kind == "bilinear":
            j0 = int(np.floor(src))
            t = src - j0
            put(i, j0, 1.0 - t)
            put(i, j0 + 1, t)
        elif kind == "bicubic":
            j0 = int(np.floor(src))
            t = src - j0
            for m in (-1, 0, 1, 2):
                put(i, j0 + m, _keys_kernel(m - t))
        else:
            raise ShapeError(f"unknown resize kind '{kind}'")
    W.flags.writeable = False
    return W


class _Resize(Op):
    name = "resize"

    def forward(self, ctx, x, *, out_hw, kind):
        oh, ow = out_hw
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"resize target dims must be positive, got {out_hw}")
        wr = _resize_matrix(x.shape[2], oh, kind).astype(x.dtype)
        wc = _resize_matrix(x.shape[3], ow, kind).astype(x.dtype)
        ctx["wr"], ctx["wc"] = wr, wc
        return np.matmul(np.matmul(wr, x), wc.T)

    def backward(self, node, g):
        wr, wc = node.ctx["wr"], node.ctx["wc"]
        return (Variable(np.matmul(np.matmul(wr.T, g.data), wc)),)


_RESIZE = _Resize()


def resize(x, out_hw: tuple[int, int], kind: str = "bilinear") -> Variable:
    """Separable resample to (h, w); kinds: nearest, bilinear, bicubic."""
    return apply_op(_RESIZE, x, out_hw=tuple(int(v) for v in out_hw), kind=kind)


# ---------------------------------------------------------------------------
# flow-field warp


def _gather(flat: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # flat (n, c, HW), idx (n, HW) -> (n, c, HW)
    return np.take_along_axis(flat, idx[:, None, :], axis=2)


class _GridSample(Op):
    """Backward warp: output (x, y) reads the source at (x - dx, y - dy) with
    bilinear weights and edge clamping. First-order differentiable in both
    the image and the flow."""

    name = "grid_sample"

    def forward(self, ctx, img, flow):
        n, c, h, w = img.shape
        if flow.shape != (n, 2, h, w):
            raise ShapeError(f"flow shape {flow.shape} != ({n}, 2, {h}, {w})")
        gx, gy_ = np.meshgrid(np.arange(w, dtype=img.dtype),
                              np.arange(h, dtype=img.dtype))
        xs = gx[None] - flow[:, 0]
        ys = gy_[None] - flow[:, 1]
        in_x = (xs > 0) & (xs < w - 1)  # clamp derivative support
        in_y = (ys > 0) & (ys < h - 1)
        xs = np.clip(xs, 0, w - 1)
        ys = np.clip(ys, 0, h - 1)
        x0 = np.clip(np.floor(xs), 0, max(w - 2, 0)).astype(np.int64)
        y0 = np.clip(np.floor(ys), 0, max(h - 2, 0)).astype(np.int64)
        tx = (xs - x0).astype(img.dtype)
        ty = (ys - y0).astype(img.dtype)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)

        hw = h * w
        flat = img.reshape(n, c, hw)
        idx = {
            "00": (y0 * w + x0).reshape(n, hw),
            "10": (y0 * w + x1).reshape(n, hw),
            "01": (y1 * w + x0).reshape(n, hw),
            "11": (y1 * w + x1).reshape(n, hw),
        }
        txf = tx.reshape(n, 1, hw)
        tyf = ty.reshape(n, 1, hw)
        i00 = _gather(flat, idx["00"])
        i10 = _gather(flat, idx["10"])
        i01 = _gather(flat, idx["01"])
        i11 = _gather(flat, idx["11"])
        # Explicit corner weights: exact (weight 1/0) at integer sample sites,
        # so a zero flow reproduces the input bit-for-bit.
        out = ((1 - txf) * (1 - tyf) * i00 + txf * (1 - tyf) * i10
               + (1 - txf) * tyf * i01 + txf * tyf * i11)

        ctx.update(idx=idx, tx=txf, ty=tyf, in_x=in_x.reshape(n, 1, hw),
                   in_y=in_y.reshape(n, 1, hw), corners=(i00, i10, i01, i11))
        return out.reshape(n, c, h, w)

    def backward(self, node, g):
        img, flow = node.inputs
        n, c, h, w = img.shape
        hw = h * w
        ctx = node.ctx
        idx, tx, ty = ctx["idx"], ctx["tx"], ctx["ty"]
        i00, i10, i01, i11 = ctx["corners"]
        gflat = g.data.reshape(n, c, hw)

        gimg_var = None
        if img.requires_grad:
            w00 = (1 - tx) * (1 - ty)
            w10 = tx * (1 - ty)
            w01 = (1 - tx) * ty
            w11 = tx * ty
            gimg = np.zeros((n * c, hw), dtype=g.dtype)
            rows = np.arange(n * c)[:, None]
            for key, wgt in (("00", w00), ("10", w10), ("01", w01), ("11", w11)):
                cols = np.broadcast_to(idx[key][:, None, :], (n, c, hw)).reshape(n * c, hw)
                np.add.at(gimg, (rows, cols), (gflat * wgt).reshape(n * c, hw))
            gimg_var = Variable(gimg.reshape(n, c, h, w))

        gflow_var = None
        if flow.requires_grad:
            d_xs = (i10 - i00) * (1 - ty) + (i11 - i01) * ty
            d_ys = (i01 - i00) * (1 - tx) + (i11 - i10) * tx
            gxs = np.sum(gflat * d_xs, axis=1, keepdims=True) * ctx["in_x"]
            gys = np.sum(gflat * d_ys, axis=1, keepdims=True) * ctx["in_y"]
            # xs = x - dx, so d/d(dx) = -d/d(xs)
            gflow = np.concatenate([-gxs, -gys], axis=1).reshape(n, 2, h, w)
            gflow_var = Variable(gflow.astype(flow.dtype))

        return gimg_var, gflow_var


_GRID_SAMPLE = _GridSample()


def grid_sample(img, flow, cfg: SamplingKernelConfig = SamplingKernelConfig()) -> Variable:
    """Warp img by the per-pixel displacement field (channel 0 = dx, 1 = dy),
    both in pixel units."""
    _ = cfg  # only bilinear/clamp exists; validated at construction
    return apply_op(_GRID_SAMPLE, img, flow)


# ---------------------------------------------------------------------------
# color


# BT.601 studio-swing luma, the standard SR-evaluation Y transform.
_Y_COEF = np.array([65.481, 128.553, 24.966])


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Y channel of an RGB image batch in [0, 1]: (n, 3, h, w) -> (n, 1, h, w)."""
    img = np.asarray(img)
    if img.ndim != 4 or img.shape[1] != 3:
        raise ShapeError(f"rgb_to_y expects (n, 3, h, w), got {img.shape}")
    coef = _Y_COEF.astype(img.dtype)
    y = (coef[0] * img[:, 0] + coef[1] * img[:, 1] + coef[2] * img[:, 2]) / 255.0
    return (y + np.asarray(16.0 / 255.0, img.dtype))[:, None]
