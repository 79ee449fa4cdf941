"""Whole-light-field inference with overlap-blended tiling."""

import numpy as np

from mderain.lightfield import sai_to_mpi, window_starts


def _ramp(size, overlap):
    i = np.arange(size)
    return np.minimum(1.0, np.minimum(i + 1, size - i) / (overlap + 1))


def derain_lf(model, lf, tile=None, overlap=16, batch=4):
    """De-rain an ``(A, A, H, W, 3)`` light field; returns views clamped to [0, 1].

    Views larger than ``tile`` (default: the model's ``view_size``) are split
    into ``tile x tile`` windows overlapping by ``overlap`` pixels and blended
    with linear ramps. Smaller views run in one pass.
    """
    lf = np.asarray(lf, dtype=model.dtype)
    tile = tile or model.cfg.view_size
    h, w = lf.shape[2:4]
    if h <= tile and w <= tile:
        return model.derain(sai_to_mpi(lf)[None])[0]

    th, tw = min(tile, h), min(tile, w)
    stride_h, stride_w = max(th - overlap, 1), max(tw - overlap, 1)
    boxes = [(y, x) for y in window_starts(h, th, stride_h) for x in window_starts(w, tw, stride_w)]
    weight = np.outer(_ramp(th, overlap), _ramp(tw, overlap))[None, None, :, :, None]
    acc = np.zeros(lf.shape, dtype=np.float64)
    norm = np.zeros((1, 1, h, w, 1), dtype=np.float64)
    for i in range(0, len(boxes), batch):
        chunk = boxes[i : i + batch]
        mpis = np.stack([sai_to_mpi(lf[:, :, y : y + th, x : x + tw]) for y, x in chunk])
        out = model.derain(mpis)
        for (y, x), b in zip(chunk, out):
            acc[:, :, y : y + th, x : x + tw] += weight * b
            norm[:, :, y : y + th, x : x + tw] += weight
    return (acc / norm).astype(lf.dtype)
