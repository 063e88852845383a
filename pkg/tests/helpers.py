"""Independent numerical oracles used across the test suite.

Everything here is deliberately scalar/loop-based and shares no code with the
production kernels it checks.
"""

import math

import numpy as np


def rel_err(analytic, reference) -> float:
    """Max elementwise relative error.

    Elements below 0.1% of the reference tensor's scale are measured against
    that scale instead, so finite-difference roundoff on near-zero entries
    does not masquerade as disagreement.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    floor = max(1e-8, 1e-3 * float(np.max(np.abs(reference), initial=0.0)))
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(reference)), floor)
    return float(np.max(np.abs(analytic - reference) / scale))


def finite_diff_grad(f, arrays, wrt, eps=1e-5):
    """Central-difference gradient of scalar f(*arrays) w.r.t. arrays[wrt]."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    base = arrays[wrt]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = base[idx]
        base[idx] = orig + eps
        fp = f(*arrays)
        base[idx] = orig - eps
        fm = f(*arrays)
        base[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def finite_diff_hvp(f, x, direction, eps_outer=1e-4, eps_inner=1e-5):
    """Hessian-vector product of scalar f(x) by double central differences."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    gp = finite_diff_grad(f, [x + eps_outer * d], 0, eps=eps_inner)
    gm = finite_diff_grad(f, [x - eps_outer * d], 0, eps=eps_inner)
    return (gp - gm) / (2.0 * eps_outer)


def brute_force_grid_sample(img, flow):
    """Literal double sum over every source pixel with a bilinear tent kernel;
    sample coordinates clamp to the image rectangle (edge-clamp policy)."""
    img = np.asarray(img, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    n, c, h, w = img.shape
    out = np.zeros_like(img)

    def tent(t):
        return max(0.0, 1.0 - abs(t))

    for b in range(n):
        for y in range(h):
            for x in range(w):
                xs = min(max(x - flow[b, 0, y, x], 0.0), float(w - 1))
                ys = min(max(y - flow[b, 1, y, x], 0.0), float(h - 1))
                for ch in range(c):
                    acc = 0.0
                    for v in range(h):
                        ky = tent(ys - v)
                        if ky == 0.0:
                            continue
                        for u in range(w):
                            kx = tent(xs - u)
                            if kx != 0.0:
                                acc += img[b, ch, v, u] * kx * ky
                    out[b, ch, y, x] = acc
    return out


def _oracle_keys(t):
    a = -0.5
    t = abs(t)
    if t <= 1.0:
        return (a + 2.0) * t ** 3 - (a + 3.0) * t ** 2 + 1.0
    if t < 2.0:
        return a * (t ** 3 - 5.0 * t ** 2 + 8.0 * t - 4.0)
    return 0.0


def _oracle_taps(src, kind):
    if kind == "nearest":
        return [(int(math.floor(src + 0.5)), 1.0)]
    j0 = int(math.floor(src))
    t = src - j0
    if kind == "bilinear":
        return [(j0, 1.0 - t), (j0 + 1, t)]
    if kind == "bicubic":
        return [(j0 + m, _oracle_keys(m - t)) for m in (-1, 0, 1, 2)]
    raise ValueError(kind)


def oracle_resize(img, out_hw, kind):
    """Per-pixel scalar resampler: half-pixel centers, edge-clamped taps."""
    img = np.asarray(img, dtype=np.float64)
    n, c, h, w = img.shape
    oh, ow = out_hw
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    for i in range(oh):
        src_y = (i + 0.5) * h / oh - 0.5
        for j in range(ow):
            src_x = (j + 0.5) * w / ow - 0.5
            for jy, wy in _oracle_taps(src_y, kind):
                for jx, wx in _oracle_taps(src_x, kind):
                    yy = min(max(jy, 0), h - 1)
                    xx = min(max(jx, 0), w - 1)
                    out[:, :, i, j] += img[:, :, yy, xx] * wy * wx
    return out


def scalar_adam(w0, grads, lr, beta1=0.9, beta2=0.99, eps=1e-8):
    """Reference Adam on a single scalar weight, bias-corrected."""
    w, m, v = float(w0), 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        w -= lr * m_hat / (math.sqrt(v_hat) + eps)
    return w


def mean_abs_diff_loop(a, b):
    """Scalar-loop mean absolute difference."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for x, y in zip(a, b):
        total += abs(x - y)
    return total / a.size
