"""Compiled per-pixel compositing loops and their hand-derived adjoints.

Splat arrays arrive already sorted front to back. ``ids``/``offsets`` is a
CSR list of the splats touching each pixel, in depth order.

The footprint is a truncated Gaussian, ``(exp(-q/2) - e_c) / (1 - e_c)``
with ``e_c = exp(-c^2/2)``, which reaches zero continuously on the ``c``-sigma
ellipse, so pixels entering or leaving a splat's box never make the image jump.
"""

import numpy as np
from numba import njit

WEIGHT_CLAMP = 0.999
SIGMA_CUTOFF = 3.0
EDGE = np.exp(-0.5 * SIGMA_CUTOFF ** 2)


@njit(cache=True)
def bin_pixels(x0, x1, y0, y1, H, W):
    counts = np.zeros(H * W + 1, dtype=np.int64)
    n = x0.shape[0]
    for j in range(n):
        for y in range(y0[j], y1[j] + 1):
            for x in range(x0[j], x1[j] + 1):
                counts[y * W + x + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for j in range(n):
        for y in range(y0[j], y1[j] + 1):
            for x in range(x0[j], x1[j] + 1):
                p = y * W + x
                ids[fill[p]] = j
                fill[p] += 1
    return ids, offsets


@njit(cache=True)
def composite_forward(ids, offsets, mean2d, conic, opacity, colors, bg, H, W):
    npix = H * W
    image = np.zeros((npix, 3))
    t_final = np.ones(npix)
    t_pair = np.empty(ids.shape[0])
    for p in range(npix):
        px = p % W
        py = p // W
        T = 1.0
        for k in range(offsets[p], offsets[p + 1]):
            j = ids[k]
            dx = px - mean2d[j, 0]
            dy = py - mean2d[j, 1]
            q = conic[j, 0] * dx * dx + conic[j, 1] * dx * dy + conic[j, 2] * dy * dy
            w = opacity[j] * (np.exp(-0.5 * q) - EDGE) / (1.0 - EDGE)
            if w > WEIGHT_CLAMP:
                w = WEIGHT_CLAMP
            elif w < 0.0:
                w = 0.0
            t_pair[k] = T
            for ch in range(3):
                image[p, ch] += w * T * colors[j, ch]
            T *= 1.0 - w
        t_final[p] = T
        for ch in range(3):
            image[p, ch] += T * bg[ch]
    return image, t_final, t_pair


@njit(cache=True)
def composite_backward(ids, offsets, mean2d, conic, opacity, colors, bg, t_final, t_pair, grad_image, H, W):
    n = mean2d.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_colors = np.zeros((n, 3))
    g_bg = np.zeros(3)
    for p in range(H * W):
        px = p % W
        py = p // W
        # dL/dC dotted with everything composited behind the current splat
        behind = 0.0
        for ch in range(3):
            behind += grad_image[p, ch] * t_final[p] * bg[ch]
            g_bg[ch] += grad_image[p, ch] * t_final[p]
        for k in range(offsets[p + 1] - 1, offsets[p] - 1, -1):
            j = ids[k]
            T = t_pair[k]
            dx = px - mean2d[j, 0]
            dy = py - mean2d[j, 1]
            a = conic[j, 0]
            b = conic[j, 1]
            c = conic[j, 2]
            q = a * dx * dx + b * dx * dy + c * dy * dy
            gauss = np.exp(-0.5 * q)
            foot = (gauss - EDGE) / (1.0 - EDGE)
            raw = opacity[j] * foot
            w = raw
            if w > WEIGHT_CLAMP:
                w = WEIGHT_CLAMP
            elif w < 0.0:
                w = 0.0
            cdot = 0.0
            for ch in range(3):
                cdot += grad_image[p, ch] * colors[j, ch]
                g_colors[j, ch] += w * T * grad_image[p, ch]
            dw = T * cdot - behind / (1.0 - w)
            behind += w * T * cdot
            if raw >= 0.0 and raw <= WEIGHT_CLAMP:
                g_opacity[j] += dw * foot
                dq = -0.5 * opacity[j] * gauss / (1.0 - EDGE) * dw
                g_conic[j, 0] += dq * dx * dx
                g_conic[j, 1] += dq * dx * dy
                g_conic[j, 2] += dq * dy * dy
                g_mean[j, 0] -= dq * (2.0 * a * dx + b * dy)
                g_mean[j, 1] -= dq * (b * dx + 2.0 * c * dy)
    return g_mean, g_conic, g_opacity, g_colors, g_bg
