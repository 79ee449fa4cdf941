"""Evaluation metrics on light fields with values in [0, 1]."""

import numpy as np

from mderain import losses
from mderain import tensor as T

PSNR_CAP = 99.0


def psnr(pred, gt, max_val=1.0, cap=PSNR_CAP):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2)
    value = np.inf if mse == 0 else 10.0 * np.log10(max_val**2 / mse)
    return float(value if cap is None else min(value, cap))


def ssim_value(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    with T.no_grad():
        return float(losses.ssim(T.Tensor(pred), T.Tensor(gt)).data)


def per_view_psnr_map(pred, gt, max_val=1.0, cap=PSNR_CAP):
    """PSNR of every view of an ``(A, A, H, W, C)`` pair, plus mean and population std."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    grid = np.array([[psnr(pred[u, v], gt[u, v], max_val, cap) for v in range(pred.shape[1])] for u in range(pred.shape[0])])
    return grid, float(grid.mean()), float(grid.std())


def evaluate(pred, gt):
    """Metric report for one light field."""
    grid, avg, std = per_view_psnr_map(pred, gt)
    return {
        "psnr": psnr(pred, gt),
        "ssim": ssim_value(pred, gt),
        "per_view_psnr": grid.tolist(),
        "per_view_avg": avg,
        "per_view_std": std,
    }
