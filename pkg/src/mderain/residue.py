"""Colored rain-free residue images.

Achromatic rain adds the same amount to R, G and B, so the per-pixel
``max - min`` over channels cancels it. The residue replaces the luminance
of the rainy view (``colored_residue``); a residue-guided filter of the
rainy view restores colour fidelity (``guided_filter``); the two are blended
with weight ``mu``.
"""

import numpy as np

from mderain import kernels

# BT.601 full range
_KR, _KG, _KB = 0.299, 0.587, 0.114
_CB_SCALE = 0.564
_CR_SCALE = 0.713


def residue_image(view):
    """Per-pixel max minus min over the colour channels of an ``(H, W, 3)`` view."""
    view = np.asarray(view)
    return view.max(axis=-1) - view.min(axis=-1)


def rgb_to_ycbcr(view):
    view = np.asarray(view, dtype=np.float64)
    r, g, b = view[..., 0], view[..., 1], view[..., 2]
    y = _KR * r + _KG * g + _KB * b
    cb = (b - y) * _CB_SCALE + 0.5
    cr = (r - y) * _CR_SCALE + 0.5
    return y, cb, cr


def ycbcr_to_rgb(y, cb, cr):
    r = y + (cr - 0.5) / _CR_SCALE
    b = y + (cb - 0.5) / _CB_SCALE
    g = (y - _KR * r - _KB * b) / _KG
    return np.stack([r, g, b], axis=-1)


def colored_residue(view):
    """Rainy view with its luminance swapped for the residue image, clamped to [0, 1]."""
    _, cb, cr = rgb_to_ycbcr(view)
    return np.clip(ycbcr_to_rgb(residue_image(view).astype(np.float64), cb, cr), 0.0, 1.0)


def box_mean(img, r):
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    counts = kernels.box_sum(np.ones((h, w, 1)), r)
    out = kernels.box_sum(np.ascontiguousarray(img), r) / counts
    return out[..., 0] if squeeze else out


def guided_filter(src, guide, radius=4, eps=0.01):
    """Local linear guided filter of each channel of ``src`` under a gray ``guide``."""
    src = np.asarray(src, dtype=np.float64)
    guide = np.asarray(guide, dtype=np.float64)
    if src.shape[:2] != guide.shape[:2]:
        raise ValueError(f"guide {guide.shape[:2]} and input {src.shape[:2]} differ in size")
    squeeze = src.ndim == 2
    p = src[..., None] if squeeze else src
    g = guide[..., None]
    mean_g = box_mean(g, radius)
    mean_p = box_mean(p, radius)
    cov_gp = box_mean(g * p, radius) - mean_g * mean_p
    var_g = box_mean(g * g, radius) - mean_g * mean_g
    a = cov_gp / (var_g + eps)
    b = mean_p - a * mean_g
    out = box_mean(a, radius) * g + box_mean(b, radius)
    return out[..., 0] if squeeze else out


def combined_residue(colored, filtered, mu=0.5):
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must lie in [0, 1], got {mu}")
    return mu * np.asarray(colored) + (1.0 - mu) * np.asarray(filtered)


def residue_views(view, mu=0.5, radius=4, eps=0.01):
    """All four products for one view: residue, colored, filtered, combined."""
    res = residue_image(view)
    colored = colored_residue(view)
    filtered = np.clip(guided_filter(view, res, radius, eps), 0.0, 1.0)
    return res, colored, filtered, combined_residue(colored, filtered, mu)


def residue_positive(lf, mu=0.5, radius=4, eps=0.01):
    """Combined colored residue for every view of a ``(..., H, W, 3)`` stack."""
    lf = np.asarray(lf)
    flat = lf.reshape((-1,) + lf.shape[-3:])
    out = np.stack([residue_views(v, mu, radius, eps)[3] for v in flat])
    return out.reshape(lf.shape).astype(lf.dtype)
