"""Brute-force reference implementations used as test oracles.

Everything here is written with explicit Python loops and ``math`` so it
shares no code path with the vectorised package implementation.
"""
import math

import numpy as np


def matmul_loops(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i, j] = acc
    return out


def conv_loops(x, w, b, stride, padding):
    """Cross-correlation of (N, C, H, W) with (O, C, k, k), zero padding."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                yy = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[bi, ic, yy, xx] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = acc
    return out


def bn_batch_loops(x, gamma, beta, eps):
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for ch in range(c):
        vals = [x[a, ch, i, j] for a in range(n) for i in range(h) for j in range(w)]
        mean = math.fsum(vals) / len(vals)
        var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
        for a in range(n):
            for i in range(h):
                for j in range(w):
                    out[a, ch, i, j] = gamma[ch] * (x[a, ch, i, j] - mean) / math.sqrt(var + eps) + beta[ch]
    return out


def relu_loops(x):
    return np.vectorize(lambda v: v if v > 0 else 0.0)(x)


def sigmoid_scalar(v):
    return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))


def sigmoid_loops(x):
    return np.vectorize(sigmoid_scalar)(x)


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


def avgpool_loops(x, oh, ow):
    n, c, h, w = x.shape
    fh, fw = h // oh, w // ow
    out = np.zeros((n, c, oh, ow))
    for a in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[a, ch, i, j] = sum(x[a, ch, i * fh + u, j * fw + v]
                                           for u in range(fh) for v in range(fw)) / (fh * fw)
    return out


def bilinear_pixel(img, oh, ow):
    """Align-corners-false bilinear sampling of a single (H, W) image."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1.0)
        y0 = int(math.floor(sy)); y1 = min(y0 + 1, h - 1); fy = sy - y0
        for j in range(ow):
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1.0)
            x0 = int(math.floor(sx)); x1 = min(x0 + 1, w - 1); fx = sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def spatial_attention_loops(x, w, b):
    """sigmoid(conv3x3([mean_c, max_c])) for (N, C, H, W) input."""
    n, c, h, wd = x.shape
    feat = np.zeros((n, 2, h, wd))
    for a in range(n):
        for i in range(h):
            for j in range(wd):
                vals = [x[a, ch, i, j] for ch in range(c)]
                feat[a, 0, i, j] = sum(vals) / c
                feat[a, 1, i, j] = max(vals)
    return sigmoid_loops(conv_loops(feat, w, b, 1, 1))


def channel_attention_loops(x, w1, w2):
    n, c, h, wd = x.shape
    out = np.zeros((n, c, 1, 1))
    for a in range(n):
        z = [sum(x[a, ch].ravel()) / (h * wd) for ch in range(c)]
        hid = [max(0.0, sum(w1[k, ch] * z[ch] for ch in range(c))) for k in range(w1.shape[0])]
        for ch in range(c):
            out[a, ch, 0, 0] = sigmoid_scalar(sum(w2[ch, k] * hid[k] for k in range(len(hid))))
    return out


def cmwr_loops(f_r, f_d, f_rgbd, emb, mode="on"):
    """Explicit matrix chain for one cmWR unit; ``emb`` maps name -> (weight, bias) of 1x1 convs."""
    n, c, h, w = f_r.shape
    hw = h * w
    outs = [np.zeros_like(f_r), np.zeros_like(f_d), np.zeros_like(f_rgbd)]
    for a in range(n):
        def embed(f, name):
            wt, bs = emb[name]
            e = np.zeros((wt.shape[0], hw))
            for k in range(wt.shape[0]):
                for p in range(hw):
                    e[k, p] = bs[k] + sum(wt[k, ch, 0, 0] * f[a, ch, p // w, p % w] for ch in range(c))
            return e

        th, xi = embed(f_r, "theta"), embed(f_d, "xi")
        ph, ps = embed(f_rgbd, "phi"), embed(f_rgbd, "psi")
        m1 = [softmax_row(list(r)) for r in matmul_loops(th.T, xi)]
        m2 = [softmax_row(list(r)) for r in matmul_loops(ph.T, ps)]
        if mode == "m1_only":
            wts = [softmax_row(r) for r in m1]
        elif mode == "m2_only":
            wts = [softmax_row(r) for r in m2]
        else:
            wts = [softmax_row([m1[i][j] * m2[i][j] for j in range(hw)]) for i in range(hw)]
        for idx, f in enumerate((f_r, f_d, f_rgbd)):
            for ch in range(c):
                for p in range(hw):
                    acc = sum(wts[p][q] * f[a, ch, q // w, q % w] for q in range(hw))
                    res = 0.0 if mode == "no_residual" else f[a, ch, p // w, p % w]
                    outs[idx][a, ch, p // w, p % w] = acc + res
    return tuple(outs)


def bce_loops(s, g):
    s, g = np.asarray(s).ravel(), np.asarray(g).ravel()
    terms = []
    for sv, gv in zip(s, g):
        sv = min(max(sv, 1e-7), 1 - 1e-7)
        terms.append(-(gv * math.log(sv) + (1 - gv) * math.log(1 - sv)))
    return math.fsum(terms) / len(terms)


def pr_counts(s, g):
    """Per-threshold counting: 256 (precision, recall) pairs."""
    s, g = np.asarray(s).ravel(), np.asarray(g).ravel() > 0.5
    q = [int(math.floor(v * 255 + 0.5)) for v in s]
    pos = int(sum(g))
    rows = []
    for t in range(256):
        tp = sum(1 for qi, gi in zip(q, g) if qi >= t and gi)
        fp = sum(1 for qi, gi in zip(q, g) if qi >= t and not gi)
        rows.append((1.0 if tp + fp == 0 else tp / (tp + fp), tp / pos))
    return rows


def s_measure_reference(pred, gt):
    """Straight-line structure measure over nested lists (alpha 0.5)."""
    eps = 2.220446049250313e-16
    rows, cols = len(gt), len(gt[0])
    p = [[float(pred[i][j]) for j in range(cols)] for i in range(rows)]
    g = [[1.0 if gt[i][j] > 0.5 else 0.0 for j in range(cols)] for i in range(rows)]
    flat_p = [v for r in p for v in r]
    flat_g = [v for r in g for v in r]
    y = sum(flat_g) / len(flat_g)
    if y == 0:
        return max(0.0, min(1.0, 1 - sum(flat_p) / len(flat_p)))
    if y == 1:
        return max(0.0, min(1.0, sum(flat_p) / len(flat_p)))

    def obj(vals):
        if not vals:
            return 0.0
        m = sum(vals) / len(vals)
        sd = math.sqrt(sum((v - m) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else 0.0
        return 2 * m / (m * m + 1 + sd + eps)

    fg_vals = [pv for pv, gv in zip(flat_p, flat_g) if gv == 1]
    bg_vals = [1 - pv for pv, gv in zip(flat_p, flat_g) if gv == 0]
    s_o = y * obj(fg_vals) + (1 - y) * obj(bg_vals)

    total = sum(flat_g)
    cx = sum((j + 1) * g[i][j] for i in range(rows) for j in range(cols)) / total
    cy = sum((i + 1) * g[i][j] for i in range(rows) for j in range(cols)) / total
    X, Y = int(math.floor(cx + 0.5)), int(math.floor(cy + 0.5))

    def ssim(r0, r1, c0, c1):
        ps = [p[i][j] for i in range(r0, r1) for j in range(c0, c1)]
        gs = [g[i][j] for i in range(r0, r1) for j in range(c0, c1)]
        n = len(ps)
        if n == 0:
            return 0.0
        mx, my = sum(ps) / n, sum(gs) / n
        if n > 1:
            vx = sum((a - mx) ** 2 for a in ps) / (n - 1)
            vy = sum((b - my) ** 2 for b in gs) / (n - 1)
            cxy = sum((a - mx) * (b - my) for a, b in zip(ps, gs)) / (n - 1)
        else:
            vx = vy = cxy = 0.0
        al = 4 * mx * my * cxy
        be = (mx * mx + my * my) * (vx + vy)
        if al != 0:
            return al / (be + eps)
        return 1.0 if be == 0 else 0.0

    area = rows * cols
    w1 = X * Y / area
    w2 = (cols - X) * Y / area
    w3 = X * (rows - Y) / area
    w4 = 1 - w1 - w2 - w3
    s_r = (w1 * ssim(0, Y, 0, X) + w2 * ssim(0, Y, X, cols)
           + w3 * ssim(Y, rows, 0, X) + w4 * ssim(Y, rows, X, cols))
    return max(0.0, min(1.0, 0.5 * s_o + 0.5 * s_r))


def disk_pixel_count(size, cy, cx, r):
    count = 0
    for i in range(size):
        for j in range(size):
            if (i + 0.5 - cy) ** 2 + (j + 0.5 - cx) ** 2 <= r * r:
                count += 1
    return count
