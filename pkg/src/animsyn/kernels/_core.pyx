# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: capsule rasterizer, separable Gaussian filter, histograms."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, ceil

cnp.import_array()


def rasterize_capsules(caps, colors, double[:, :, ::1] rgb, double[:, :, ::1] normal,
                       int[:, ::1] label):
    cdef double[:, ::1] cp = np.ascontiguousarray(caps, dtype=np.float64)
    cdef double[:, ::1] col = np.ascontiguousarray(colors, dtype=np.float64)
    cdef Py_ssize_t H = label.shape[0], W = label.shape[1]
    cdef Py_ssize_t n, i, j, i_lo, i_hi, j_lo, j_hi
    cdef double x0, y0, x1, y1, r, dx, dy, ll, px, py, u, ox, oy, d2, rr
    for n in range(cp.shape[0]):
        x0 = cp[n, 0]; y0 = cp[n, 1]; x1 = cp[n, 2]; y1 = cp[n, 3]; r = cp[n, 4]
        if r <= 0:
            continue
        i_lo = max(<Py_ssize_t>floor(min(y0, y1) - r), 0)
        i_hi = min(<Py_ssize_t>ceil(max(y0, y1) + r) + 1, H)
        j_lo = max(<Py_ssize_t>floor(min(x0, x1) - r), 0)
        j_hi = min(<Py_ssize_t>ceil(max(x0, x1) + r) + 1, W)
        dx = x1 - x0
        dy = y1 - y0
        ll = dx * dx + dy * dy
        rr = r * r
        for i in range(i_lo, i_hi):
            py = <double>i + 0.5
            for j in range(j_lo, j_hi):
                px = <double>j + 0.5
                if ll > 0.0:
                    u = ((px - x0) * dx + (py - y0) * dy) / ll
                    u = min(max(u, 0.0), 1.0)
                else:
                    u = 0.0
                ox = px - (x0 + u * dx)
                oy = py - (y0 + u * dy)
                d2 = ox * ox + oy * oy
                if d2 <= rr:
                    rgb[i, j, 0] = col[n, 0]
                    rgb[i, j, 1] = col[n, 1]
                    rgb[i, j, 2] = col[n, 2]
                    normal[i, j, 0] = ox / r
                    normal[i, j, 1] = oy / r
                    normal[i, j, 2] = sqrt(max(1.0 - d2 / rr, 0.0))
                    label[i, j] = <int>(n + 1)


def gaussian_filter_valid(img, kernel):
    cdef double[:, ::1] x = np.ascontiguousarray(img, dtype=np.float64)
    cdef double[::1] k = np.ascontiguousarray(kernel, dtype=np.float64)
    cdef Py_ssize_t K = k.shape[0], H = x.shape[0], W = x.shape[1]
    if H < K or W < K:
        raise ValueError(f"image {H}x{W} smaller than window {K}")
    cdef Py_ssize_t Ho = H - K + 1, Wo = W - K + 1, i, j, q
    cdef double acc
    tmp_arr = np.empty((H, Wo))
    out_arr = np.empty((Ho, Wo))
    cdef double[:, ::1] tmp = tmp_arr
    cdef double[:, ::1] out = out_arr
    for i in range(H):
        for j in range(Wo):
            acc = 0.0
            for q in range(K):
                acc = acc + k[q] * x[i, j + q]
            tmp[i, j] = acc
    for i in range(Ho):
        for j in range(Wo):
            acc = 0.0
            for q in range(K):
                acc = acc + k[q] * tmp[i + q, j]
            out[i, j] = acc
    return out_arr


def color_histogram(frames, Py_ssize_t bins):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(frames, dtype=np.float64)
    cdef Py_ssize_t F = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    out_arr = np.zeros((F, C * bins))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t f, i, j, c, b
    cdef double v, inv = 1.0 / <double>(H * W)
    for f in range(F):
        for i in range(H):
            for j in range(W):
                for c in range(C):
                    v = floor(x[f, i, j, c] * bins)
                    if v < 0:
                        b = 0
                    elif v > bins - 1:
                        b = bins - 1
                    else:
                        b = <Py_ssize_t>v
                    out[f, c * bins + b] += 1.0
    for f in range(F):
        for b in range(C * bins):
            out[f, b] = out[f, b] * inv
    return out_arr
