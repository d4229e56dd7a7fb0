"""Independent reference implementations used by the tests.

Everything here is written the slow, obvious way in float64 so that it
shares no code path with the library.
"""
import itertools

import numpy as np


def naive_pad(x, top, bottom, left, right, mode="zero"):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + top + bottom, w + left + right), dtype=np.float64)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            si, sj = i - top, j - left
            if mode == "reflect":
                # reflect-101: ... 2 1 | 0 1 2 ... n-1 | n-2 ...
                while si < 0 or si >= h:
                    si = -si if si < 0 else 2 * (h - 1) - si
                while sj < 0 or sj >= w:
                    sj = -sj if sj < 0 else 2 * (w - 1) - sj
            elif not (0 <= si < h and 0 <= sj < w):
                continue
            out[:, :, i, j] = x[:, :, si, sj]
    return out


def naive_conv2d(x, k, b=None, stride=(1, 1), padding=(0, 0, 0, 0), groups=1):
    """Direct seven-loop grouped cross-correlation."""
    x = naive_pad(np.asarray(x, np.float64), *padding)
    k = np.asarray(k, np.float64)
    n, c, h, w = x.shape
    f, cg, kh, kw = k.shape
    sh, sw = stride
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    fg = f // groups
    y = np.zeros((n, f, oh, ow))
    for bi, fi, i, j in itertools.product(range(n), range(f), range(oh), range(ow)):
        g = fi // fg
        acc = 0.0
        for ci in range(cg):
            for u in range(kh):
                for v in range(kw):
                    acc += x[bi, g * cg + ci, i * sh + u, j * sw + v] * k[fi, ci, u, v]
        y[bi, fi, i, j] = acc
    if b is not None:
        y += np.asarray(b, np.float64)[None, :, None, None]
    return y


def se_direct(x, w1, b1, w2, b2):
    """Squeeze z_c = mean over HxW, excitation s = sigmoid(W2 relu(W1 z)), scale x_c * s_c.

    Weights are stored input-major (``z @ w1``), matching the library layout.
    """
    x = np.asarray(x, np.float64)
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for bi in range(n):
        z = np.array([x[bi, ci].sum() / (h * w) for ci in range(c)])
        hidden = np.maximum(0.0, np.asarray(w1, np.float64).T @ z + b1)
        e = np.asarray(w2, np.float64).T @ hidden + b2
        s = 1.0 / (1.0 + np.exp(-e))
        for ci in range(c):
            out[bi, ci] = x[bi, ci] * s[ci]
    return out


def mann_whitney_auc(scores, truths):
    """P(score_pos > score_neg) + 0.5 P(tie), over the full pos x neg comparison grid."""
    s = np.asarray(scores, np.float64)
    t = np.asarray(truths)
    pos, neg = s[t == 1], s[t == 0]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (greater + 0.5 * ties) / (pos.size * neg.size)


def central_difference(f, x, index, h=1e-6):
    """d f / d x[index] by central difference; restores ``x`` afterwards."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def relative_error(a, b, floor=1e-6):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
