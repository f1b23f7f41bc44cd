"""Pure numpy versions of the compiled kernels.

Arithmetic is ordered exactly like ``_core.pyx`` so both backends agree bit
for bit on the same inputs.
"""
import numpy as np


def rasterize_capsules(caps, colors, rgb, normal, label):
    """Paint capsules (x0, y0, x1, y1, radius) in order, later ones on top.

    Pixel (i, j) has centre (j + 0.5, i + 0.5). Writes the capsule colour into
    ``rgb``, an analytic unit surface normal into ``normal`` and ``index + 1``
    into ``label``. Arrays are modified in place.
    """
    caps = np.ascontiguousarray(caps, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    H, W = label.shape
    for n in range(caps.shape[0]):
        x0, y0, x1, y1, r = caps[n]
        if r <= 0:
            continue
        i_lo = max(int(np.floor(min(y0, y1) - r)), 0)
        i_hi = min(int(np.ceil(max(y0, y1) + r)) + 1, H)
        j_lo = max(int(np.floor(min(x0, x1) - r)), 0)
        j_hi = min(int(np.ceil(max(x0, x1) + r)) + 1, W)
        if i_lo >= i_hi or j_lo >= j_hi:
            continue
        py = np.arange(i_lo, i_hi, dtype=np.float64)[:, None] + 0.5
        px = np.arange(j_lo, j_hi, dtype=np.float64)[None, :] + 0.5
        dx = x1 - x0
        dy = y1 - y0
        ll = dx * dx + dy * dy
        if ll > 0.0:
            u = ((px - x0) * dx + (py - y0) * dy) / ll
            u = np.minimum(np.maximum(u, 0.0), 1.0)
        else:
            u = np.zeros((py.shape[0], px.shape[1]))
        ox = px - (x0 + u * dx)
        oy = py - (y0 + u * dy)
        d2 = ox * ox + oy * oy
        hit = d2 <= r * r
        if not hit.any():
            continue
        nz = np.sqrt(np.maximum(1.0 - d2 / (r * r), 0.0))
        sub_rgb = rgb[i_lo:i_hi, j_lo:j_hi]
        sub_n = normal[i_lo:i_hi, j_lo:j_hi]
        sub_rgb[hit] = colors[n]
        sub_n[..., 0][hit] = (ox / r)[hit]
        sub_n[..., 1][hit] = (oy / r)[hit]
        sub_n[..., 2][hit] = nz[hit]
        label[i_lo:i_hi, j_lo:j_hi][hit] = n + 1


def gaussian_filter_valid(img, kernel):
    """Separable 'valid' correlation of a 2-D image with a 1-D kernel."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    K = kernel.shape[0]
    H, W = img.shape
    if H < K or W < K:
        raise ValueError(f"image {H}x{W} smaller than window {K}")
    Wo = W - K + 1
    Ho = H - K + 1
    tmp = np.zeros((H, Wo))
    for k in range(K):
        tmp += kernel[k] * img[:, k:k + Wo]
    out = np.zeros((Ho, Wo))
    for k in range(K):
        out += kernel[k] * tmp[k:k + Ho, :]
    return out


def color_histogram(frames, bins):
    """Per-frame, per-channel normalized histograms -> (F, 3 * bins)."""
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    F, H, W, C = frames.shape
    idx = np.floor(frames * bins)
    idx = np.clip(idx, 0, bins - 1).astype(np.int64)
    out = np.zeros((F, C * bins))
    for f in range(F):
        for c in range(C):
            out[f, c * bins:(c + 1) * bins] = np.bincount(
                idx[f, :, :, c].ravel(), minlength=bins)
    return out * (1.0 / float(H * W))
