"""Shared test helpers: independent naive-loop oracles and a central
finite-difference gradient checker. The oracles translate the defining
equations directly with scalar loops and stay independent of the library's
vectorized implementations; where bitwise equality is asserted, they
accumulate in the library's documented order (ascending k for matmul,
ascending (channel, kernel row, kernel col) for conv2d)."""

import numpy as np


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            s = a.dtype.type(0)
            for kk in range(k):
                s += a[i, kk] * b[kk, j]
            out[i, j] = s
    return out


def naive_conv2d(x, w, bias=None, stride=1, padding=1, groups=1):
    b, ci, h, wd = x.shape
    co, cig, kh, kw = w.shape
    cog = co // groups
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((b, co, ho, wo), dtype=x.dtype)
    for bb in range(b):
        for o in range(co):
            g = o // cog
            for y in range(ho):
                for xx in range(wo):
                    s = x.dtype.type(0)
                    for c in range(cig):
                        for i in range(kh):
                            for j in range(kw):
                                s += w[o, c, i, j] * xp[bb, g * cig + c,
                                                        y * stride + i, xx * stride + j]
                    if bias is not None:
                        s = s + bias[o]
                    out[bb, o, y, xx] = s
    return out


def nearest_neighbor_upscale(x, r):
    b, c, h, w = x.shape
    out = np.empty((b, c, h * r, w * r), dtype=x.dtype)
    for y in range(h * r):
        for xx in range(w * r):
            out[:, :, y, xx] = x[:, :, y // r, xx // r]
    return out


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of the scalar function ``f()`` with respect
    to the float64 array ``x``, perturbing x in place."""
    assert x.dtype == np.float64, "finite differences are only trustworthy at 64-bit"
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric):
    """Elementwise |a - n| / (max(|a|, |n|) + 1e-3), maximized; the floor
    keeps finite-difference noise on zero gradients from dominating."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / (np.maximum(np.abs(a), np.abs(n)) + 1e-3)))


def make_synthetic_pairs(n, hr_size, seed, shapes=6):
    """Seeded synthetic training pairs: a smooth low-frequency field plus a
    few solid rectangles (sharp edges), with LR produced by the package's own
    bicubic 0.5x downscale. Returns [(lr, hr)] float32 CHW in [0, 1]."""
    from asconvsr import tensor
    from asconvsr.metrics import bicubic_resize

    rng = tensor.Rng(seed)
    pairs = []
    for _ in range(n):
        base = rng.uniform(0.1, 0.9, (3, max(2, hr_size // 8), max(2, hr_size // 8)),
                           dtype=np.float64)
        img = bicubic_resize(base, out_h=hr_size, out_w=hr_size)
        for _ in range(shapes):
            y0 = rng.integers(0, hr_size - 4)
            x0 = rng.integers(0, hr_size - 4)
            h = rng.integers(3, max(4, hr_size // 2))
            w = rng.integers(3, max(4, hr_size // 2))
            color = rng.uniform(0.0, 1.0, (3, 1, 1), dtype=np.float64)
            img[:, y0:min(y0 + h, hr_size), x0:min(x0 + w, hr_size)] = color
        img = np.clip(img, 0.0, 1.0)
        lr = np.clip(bicubic_resize(img, 0.5), 0.0, 1.0)
        pairs.append((lr.astype(np.float32), img.astype(np.float32)))
    return pairs
