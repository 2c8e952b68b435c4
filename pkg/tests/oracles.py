"""Deliberately naive reference implementations used as test oracles."""

import math

import numpy as np


def conv2d(x, w, b, pad):
    """Direct 7-loop cross-correlation with zero padding, in float64."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((bsz, cout, oh, ow))
    for n in range(bsz):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                r, s = i + u - pad, j + v - pad
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[n, c, r, s] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def shrink(x, theta):
    return math.copysign(max(abs(x) - theta, 0.0), x)


def scn_forward(expert, y):
    """Sparse-coding expert evaluated with the naive conv and scalar shrinkage."""
    cfg = expert.config
    th = expert.thresholds.value.astype(np.float64)
    f = conv2d(y, expert.feature.weight.value, expert.feature.bias.value, cfg.feature_kernel // 2)
    wf = conv2d(f, expert.code_init.weight.value, None, 0)
    vshrink = np.vectorize(shrink)
    z = vshrink(wf, th.reshape(1, -1, 1, 1))
    for _ in range(1, cfg.lista_stages):
        z = vshrink(wf + conv2d(z, expert.lateral.weight.value, None, 0), th.reshape(1, -1, 1, 1))
    out = conv2d(z, expert.recon.weight.value, expert.recon.bias.value, cfg.recon_kernel // 2)
    return out + y if cfg.residual else out


def mixture_pixelwise(maps, estimates):
    """sum_i W_i(p) * F_i(p), one pixel at a time."""
    n = len(estimates)
    b, _, h, w = estimates[0].shape
    out = np.zeros((b, 1, h, w))
    for s in range(b):
        for r in range(h):
            for c in range(w):
                acc = 0.0
                for i in range(n):
                    acc += float(maps[s, i, r, c]) * float(estimates[i][s, 0, r, c])
                out[s, 0, r, c] = acc
    return out


def quantize_px(v):
    v = min(max(float(v), 0.0), 1.0)
    return math.floor(v * 255.0 + 0.5)


def psnr(a, b):
    total = 0.0
    count = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        d = quantize_px(x) - quantize_px(y)
        total += d * d
        count += 1
    mse = total / count
    return math.inf if mse == 0 else 10.0 * math.log10(255.0 * 255.0 / mse)


def ssim(a, b, size=11, sigma=1.5):
    """Windowed SSIM with an explicit 2-D Gaussian per window position."""
    qa = np.vectorize(quantize_px)(a).astype(np.float64)
    qb = np.vectorize(quantize_px)(b).astype(np.float64)
    ax = np.arange(size) - (size - 1) / 2
    g2 = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    g2 /= g2.sum()
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for i in range(qa.shape[0] - size + 1):
        for j in range(qa.shape[1] - size + 1):
            pa = qa[i : i + size, j : j + size]
            pb = qb[i : i + size, j : j + size]
            ma, mb = (g2 * pa).sum(), (g2 * pb).sum()
            va = (g2 * (pa - ma) ** 2).sum()
            vb = (g2 * (pb - mb) ** 2).sum()
            cov = (g2 * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def cubic(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def resize_1d(values, out_len):
    """Per-output-sample bicubic with kernel stretching on downscale and edge clamping."""
    n = len(values)
    s = out_len / n
    stretch = min(s, 1.0)
    out = []
    for i in range(out_len):
        centre = (i + 0.5) / s - 0.5
        support = 2.0 / stretch
        lo = math.floor(centre - support)
        hi = math.ceil(centre + support)
        num = den = 0.0
        for k in range(lo, hi + 1):
            wgt = cubic((centre - k) * stretch)
            if wgt == 0.0:
                continue
            num += wgt * values[min(max(k, 0), n - 1)]
            den += wgt
        out.append(num / den)
    return out


def bicubic(img, width, height):
    img = np.asarray(img, np.float64)
    rows = np.array([resize_1d(list(r), width) for r in img])
    cols = np.array([resize_1d(list(c), height) for c in rows.T]).T
    return cols


def ycbcr(r, g, b):
    y = 16 + 65.481 * r + 128.553 * g + 24.966 * b
    cb = 128 - 37.797 * r - 74.203 * g + 112.0 * b
    cr = 128 + 112.0 * r - 93.786 * g - 18.214 * b
    return y, cb, cr
