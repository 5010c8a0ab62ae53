"""Slow, independent reference implementations used only by the tests.

Nothing here imports the package's numerical code paths; each function is a
direct transcription of the definition with explicit loops.
"""

import math

import numpy as np

IGNORE = 255


def conv2d_loops(x, w, stride=1, padding=0):
    n, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = 0.0
                    for a in range(k):
                        for c in range(k):
                            r = i * stride + a - padding
                            q = j * stride + c - padding
                            if 0 <= r < h and 0 <= q < wd:
                                for ch in range(cin):
                                    acc += x[b, r, q, ch] * w[a, c, ch, o]
                    out[b, i, j, o] = acc
    return out


def cross_entropy_scalar(logits, labels):
    total, count = 0.0, 0
    for idx in np.ndindex(labels.shape):
        y = labels[idx]
        if y == IGNORE:
            continue
        row = [float(v) for v in logits[idx]]
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
        count += 1
    return total / count if count else 0.0


def block_mean(image, f):
    h, w, c = image.shape
    out = np.zeros((h // f, w // f, c))
    for i in range(h // f):
        for j in range(w // f):
            for ch in range(c):
                acc = 0.0
                for a in range(f):
                    for b in range(f):
                        acc += image[i * f + a, j * f + b, ch]
                out[i, j, ch] = acc / (f * f)
    return out


def reflect(i, n):
    if n == 1:
        return 0
    while i < 0 or i >= n:
        if i < 0:
            i = -i
        if i >= n:
            i = 2 * (n - 1) - i
    return i


def crop_padded(image, top, left, size, mode="reflect"):
    h, w, c = image.shape
    out = np.zeros((size, size, c))
    for i in range(size):
        for j in range(size):
            r, q = top + i, left + j
            if mode == "zero":
                if 0 <= r < h and 0 <= q < w:
                    out[i, j] = image[r, q]
            else:
                out[i, j] = image[reflect(r, h), reflect(q, w)]
    return out


def bilinear_resize_loops(img, out_size):
    """Half-pixel-centre bilinear resize of a square (n, n, c) crop."""
    n, _, c = img.shape
    out = np.zeros((out_size, out_size, c))
    scale = n / out_size
    for i in range(out_size):
        for j in range(out_size):
            y = min(max((i + 0.5) * scale - 0.5, 0.0), n - 1)
            x = min(max((j + 0.5) * scale - 0.5, 0.0), n - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, n - 1), min(x0 + 1, n - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = ((1 - dy) * (1 - dx) * img[y0, x0] + (1 - dy) * dx * img[y0, x1]
                         + dy * (1 - dx) * img[y1, x0] + dy * dx * img[y1, x1])
    return out


def patch_oracle(image, center, fov, out_size, mode="reflect"):
    crop = crop_padded(image, center[0] - fov // 2, center[1] - fov // 2, fov, mode)
    return bilinear_resize_loops(crop, out_size)


def iou_sets(pred, truth, k):
    """Per-class IoU via explicit pixel sets (NaN for empty unions)."""
    out = []
    coords = [idx for idx in np.ndindex(truth.shape) if truth[idx] != IGNORE]
    for c in range(k):
        p = {idx for idx in coords if pred[idx] == c}
        t = {idx for idx in coords if truth[idx] == c}
        union = p | t
        out.append(len(p & t) / len(union) if union else float("nan"))
    return np.array(out)


def adam_scalar(grads, lr, b1=0.9, b2=0.999, eps=1e-8, x0=0.0):
    x, m, v = x0, 0.0, 0.0
    xs = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        xs.append(x)
    return xs


def finite_difference(fn, arr, idx, eps=1e-4):
    old = arr[idx]
    arr[idx] = old + eps
    up = fn()
    arr[idx] = old - eps
    down = fn()
    arr[idx] = old
    return (up - down) / (2 * eps)
