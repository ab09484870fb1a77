"""Independent scalar/loop reference implementations used as test oracles.

Nothing here imports from dgad; every routine is written with plain Python
loops over nested lists or numpy element access.
"""
import math

import numpy as np


def softmax_scalar(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def attention_loop(q, k, v):
    """q [B,N,C], k [B,M,C], v [B,M,Cv] as numpy arrays."""
    B, N, C = q.shape
    M = k.shape[1]
    out = np.zeros((B, N, v.shape[2]))
    for b in range(B):
        for i in range(N):
            logits = [sum(q[b, i, c] * k[b, j, c] for c in range(C)) / math.sqrt(C) for j in range(M)]
            w = softmax_scalar(logits)
            for j in range(M):
                out[b, i] += w[j] * v[b, j]
    return out


def conv_loop(x, kernel, bias, padding, stride=1):
    B, Cin, H, W = x.shape
    Cout, _, k, _ = kernel.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for b in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for c in range(Cin):
                        for di in range(k):
                            for dj in range(k):
                                y = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= y < H and 0 <= xx < W:
                                    acc += x[b, c, y, xx] * kernel[o, c, di, dj]
                    out[b, o, i, j] = acc
    return out


def linear_loop(x, W, b):
    return [sum(x[i] * W[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]


def catmull_rom(d):
    d = abs(d)
    if d <= 1:
        return 1.5 * d ** 3 - 2.5 * d ** 2 + 1
    if d < 2:
        return -0.5 * d ** 3 + 2.5 * d ** 2 - 4 * d + 2
    return 0.0


def resample_1d(values, n_out):
    n_in = len(values)
    out = []
    for i in range(n_out):
        center = (i + 0.5) * n_in / n_out - 0.5
        base = math.floor(center)
        acc = 0.0
        for tap in range(base - 1, base + 3):
            idx = min(max(tap, 0), n_in - 1)
            acc += catmull_rom(center - tap) * values[idx]
        out.append(acc)
    return out


def resample_2d(img, h, w):
    """Separable reference resampler on a 2-D list/array."""
    rows = [resample_1d(list(r), w) for r in np.asarray(img)]
    cols = np.array(rows).T
    return np.array([resample_1d(list(c), h) for c in cols]).T


def adam_scalar(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
    return theta
