"""Independent brute-force references used to check the fast implementations.

Everything here is deliberately written as plain loops over numpy scalars so
it shares no code path with the package.
"""

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0, dilation=1):
    """Six-loop reference cross-correlation with zero padding."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - (kh - 1) * dilation - 1) // stride + 1
    wo = (wd + 2 * padding - (kw - 1) * dilation - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                iy = yi * stride + ki * dilation - padding
                                ix = xi * stride + kj * dilation - padding
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += x[ni, ci, iy, ix] * w[oi, ci, ki, kj]
                    out[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return out


def max_pool2_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for ni in range(n):
        for ci in range(c):
            for yi in range(h // 2):
                for xi in range(w // 2):
                    out[ni, ci, yi, xi] = max(
                        x[ni, ci, 2 * yi, 2 * xi], x[ni, ci, 2 * yi, 2 * xi + 1],
                        x[ni, ci, 2 * yi + 1, 2 * xi], x[ni, ci, 2 * yi + 1, 2 * xi + 1])
    return out


def matmul_loops(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def dominant_singular_value(w, iterations=5000, seed=0):
    """Top singular value of `w` via straight power iteration on w.T @ w."""
    gram = w.T @ w
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iterations):
        nv = gram @ v
        lam = float(v @ nv)
        norm = np.linalg.norm(nv)
        if norm == 0.0:
            return 0.0
        nv /= norm
        if np.linalg.norm(nv - v) < 1e-14:
            v = nv
            break
        v = nv
    lam = float(v @ gram @ v)
    return float(np.sqrt(max(lam, 0.0)))


def precision_recall_counting(b, g):
    """Set-counting precision/recall with the empty-map conventions."""
    b = np.asarray(b) != 0
    g = np.asarray(g) != 0
    inter = int(np.logical_and(b, g).sum())
    nb = int(b.sum())
    ng = int(g.sum())
    precision = 1.0 if nb == 0 else inter / nb
    recall = 1.0 if ng == 0 else inter / ng
    return precision, recall


def mae_loops(b, g):
    h, w = b.shape
    acc = 0.0
    for i in range(h):
        for j in range(w):
            acc += abs(b[i, j] - g[i, j])
    return acc / (h * w)


def pr_curve_counting(b, g):
    """Per-threshold counting reference for the 256-point PR curve."""
    pairs = []
    for t in range(256):
        bt = b > (t / 255.0)
        pairs.append(precision_recall_counting(bt, g))
    return pairs


def fence_bands_reference(size, spacing, thickness, angle_deg):
    """Direct rasterization of two orthogonal band families (no jitter/shear)."""
    h, w = size
    th = np.deg2rad(angle_deg)
    mask = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            u = np.cos(th) * j + np.sin(th) * i
            v = np.cos(th + np.pi / 2) * j + np.sin(th + np.pi / 2) * i
            if (u % spacing) < thickness or (v % spacing) < thickness:
                mask[i, j] = 1
    return mask


def adam_unrolled(theta, grads, rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """Hand recurrence for scalar Adam over a list of gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        theta = theta - rate * mhat / (np.sqrt(vhat) + eps)
    return theta
