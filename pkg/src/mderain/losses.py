"""Supervised and unsupervised training objectives.

Light fields enter as ``(..., H, W, 3)`` tensors; every loss flattens the
leading axes into a stack of views.
"""

from dataclasses import dataclass, field

import numpy as np

from mderain import tensor as T
from mderain.tensor import Tensor

CR_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
DENOM_FLOOR = 1e-6
KL_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_ssim: float = 1.0
    lambda_cr: float = 0.1
    lambda_tv: float = 1e-6
    alpha: float = 1.0  # final value of the KL weight ramp
    beta: float = 0.1  # final value of the UCR weight ramp
    mu: float = 0.5
    k: int = 16
    cr_weights: tuple = field(default=CR_WEIGHTS)

    def __post_init__(self):
        self.cr_weights = tuple(float(w) for w in self.cr_weights)
        values = [self.lambda_ssim, self.lambda_cr, self.lambda_tv, self.alpha, self.beta, self.mu, self.k]
        if min(values + list(self.cr_weights)) < 0:
            raise ValueError("loss weights must be non-negative")


def _views(x):
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    h, w, c = x.shape[-3:]
    return T.reshape(x, (-1, h, w, c))


def _const_like(x, ref):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _check_same(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def smooth_l1(pred, target):
    target = _const_like(target, pred)
    _check_same(pred, target)
    d = pred - target
    ad = T.tabs(d)
    return T.where(ad.data < 1.0, 0.5 * d * d, ad - 0.5).mean()


# ---------------------------------------------------------------- SSIM


def gaussian_taps(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_window(size=11, sigma=1.5):
    g = gaussian_taps(size, sigma)
    return np.outer(g, g)


def _per_channel(x):
    m, h, w, c = x.shape
    return T.reshape(T.transpose(x, (0, 3, 1, 2)), (m * c, h, w, 1))


def ssim(x, y, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over valid Gaussian-window positions, channels and views."""
    x = _views(x)
    y = _views(_const_like(y, x))
    _check_same(x, y)
    if min(x.shape[1:3]) < window:
        raise ValueError(f"images of size {x.shape[1:3]} are smaller than the {window}px SSIM window")
    taps = gaussian_taps(window, sigma).astype(x.dtype)
    kern_v = Tensor(taps[:, None, None, None])
    kern_h = Tensor(taps[None, :, None, None])
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    xs, ys = _per_channel(x), _per_channel(y)

    def blur(t):
        # the window is separable: a column pass then a row pass
        return T.conv2d(T.conv2d(t, kern_v), kern_h)

    mu_x, mu_y = blur(xs), blur(ys)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = blur(xs * xs) - mu_xx
    s_yy = blur(ys * ys) - mu_yy
    s_xy = blur(xs * ys) - mu_xy
    num = (2 * mu_xy + c1) * (2 * s_xy + c2)
    den = (mu_xx + mu_yy + c1) * (s_xx + s_yy + c2)
    return (num / den).mean()


def ssim_loss(pred, target):
    return 1.0 - ssim(pred, target)


# ---------------------------------------------------------------- contrastive regularisation


class FeaturePyramid:
    """Frozen, seed-deterministic conv stack with outputs at strides 1, 2, 4, 8, 16.

    Stands in for a pre-trained classification backbone. Weights are
    constants, so gradients flow to the input only.
    """

    def __init__(self, seed=0, channels=(8, 16, 16, 32, 32)):
        rng = np.random.default_rng(seed)
        self.weights = []
        cin = 3
        for cout in channels:
            std = np.sqrt(2.0 / (9 * cin))
            w = rng.normal(0.0, std, size=(3, 3, cin, cout))
            b = rng.normal(0.0, 0.05, size=(cout,))
            self.weights.append((w, b))
            cin = cout

    def __call__(self, img):
        x = _views(img)
        feats = []
        for level, (w, b) in enumerate(self.weights):
            stride = 1 if level == 0 else 2
            wt = Tensor(w.astype(x.dtype))
            bt = Tensor(b.astype(x.dtype))
            x = T.leaky_relu(T.conv2d(x, wt, bt, stride=stride, padding=1), 0.2)
            feats.append(x)
        return feats


def _l1(a, b):
    return T.tabs(a - b).mean()


def contrastive_reg(positive, pred, negative, pyramid, weights=CR_WEIGHTS):
    """Sum_k w_k * L1(M_k(positive), M_k(pred)) / L1(M_k(negative), M_k(pred))."""
    positive = _const_like(positive, pred)
    negative = _const_like(negative, pred)
    _check_same(positive, pred)
    _check_same(negative, pred)
    with T.no_grad():
        f_pos = pyramid(positive)
        f_neg = pyramid(negative)
    f_pred = pyramid(pred)
    total = None
    for w, fp, fb, fn in zip(weights, f_pos, f_pred, f_neg):
        term = w * (_l1(fp, fb) / T.maximum(_l1(fn, fb), DENOM_FLOOR))
        total = term if total is None else total + term
    return total


def ucr(colored_residue, pred, rainy, pyramid, weights=CR_WEIGHTS):
    """Contrastive regularisation with the colored residue as the positive sample."""
    return contrastive_reg(colored_residue, pred, rainy, pyramid, weights)


def tv_loss(img):
    """Mean absolute horizontal plus vertical forward difference, per view."""
    x = _views(img)
    dh = x[:, :, 1:, :] - x[:, :, :-1, :]
    dv = x[:, 1:, :, :] - x[:, :-1, :, :]
    return T.tabs(dh).mean() + T.tabs(dv).mean()


# ---------------------------------------------------------------- memory bank and KL


def pool_latent(feature, per_sample=True):
    """Global average pool of an ``(N, H, W, C)`` feature: ``(N, C)`` or ``(C,)``."""
    axes = (1, 2) if per_sample else (0, 1, 2)
    if isinstance(feature, Tensor):
        return feature.mean(axis=axes)
    return np.asarray(feature).mean(axis=axes)


class MemoryBank:
    """Pooled synthetic rain latents, one entry per synthetic batch and level."""

    def __init__(self, levels=(3, 4)):
        self.levels = tuple(levels)
        self.entries = {lv: np.zeros((0, 0)) for lv in self.levels}
        self.batch_ids = []

    def __len__(self):
        return len(self.batch_ids)

    def refresh(self, latents, batch_ids=None):
        """Replace the whole bank. ``latents`` is a list of ``{level: vector}``."""
        latents = list(latents)
        if not latents:
            raise ValueError("cannot refresh the memory bank with no latents")
        new = {}
        for lv in self.levels:
            vecs = [np.asarray(item[lv], dtype=np.float64).reshape(-1) for item in latents]
            if len({v.size for v in vecs}) != 1:
                raise ValueError(f"level {lv} latents have inconsistent sizes")
            new[lv] = np.stack(vecs)
        self.entries = new
        self.batch_ids = list(batch_ids) if batch_ids is not None else list(range(len(latents)))

    def vectors(self, level):
        return self.entries[level]


def nearest_combine(z_real, bank_vectors, k=16):
    """Softmax(-distance)-weighted mix of the ``k`` bank vectors nearest to ``z_real``."""
    bank_vectors = np.asarray(bank_vectors, dtype=np.float64)
    if bank_vectors.ndim != 2 or bank_vectors.shape[0] == 0:
        raise ValueError("memory bank is empty")
    z = np.asarray(z_real, dtype=np.float64).reshape(-1)
    if z.size != bank_vectors.shape[1]:
        raise ValueError(f"latent size {z.size} does not match bank size {bank_vectors.shape[1]}")
    k = min(int(k), bank_vectors.shape[0])
    dist = np.sqrt(((bank_vectors - z) ** 2).sum(axis=1))
    # sort on (distance, vector bytes) so the choice among ties does not depend on bank order
    keys = [(d, v.tobytes()) for d, v in zip(dist, bank_vectors)]
    idx = sorted(range(len(keys)), key=keys.__getitem__)[:k]
    d = dist[idx]
    alpha = np.exp(-(d - d.min()))
    alpha /= alpha.sum()
    return alpha @ bank_vectors[idx], alpha


def kl_divergence(p_logits, q_logits):
    """Mean over rows of KL(softmax(p) || softmax(q)); ``q`` is floored at 1e-12."""
    q_logits = q_logits if isinstance(q_logits, Tensor) else Tensor(np.asarray(q_logits))
    p_logits = _const_like(p_logits, q_logits)
    _check_same(p_logits, q_logits)
    log_p = T.log_softmax(p_logits, axis=-1)
    log_q = T.maximum(T.log_softmax(q_logits, axis=-1), float(np.log(KL_FLOOR)))
    p = T.exp(log_p)
    per_row = (p * (log_p - log_q)).sum(axis=-1)
    return per_row.mean()


def pseudo_targets(z_real, bank, level, k=16):
    """Nearest-k pseudo ground truth for every row of a pooled real-latent batch."""
    z = z_real.data if isinstance(z_real, Tensor) else np.asarray(z_real)
    z = z.reshape(-1, z.shape[-1])
    return np.stack([nearest_combine(row, bank.vectors(level), k)[0] for row in z])


def multilevel_kl(z_hat, z_real):
    """Sum over levels of KL(softmax(pseudo-GT) || softmax(real latent))."""
    if len(z_hat) != len(z_real):
        raise ValueError("level count mismatch")
    total = None
    for zh, zr in zip(z_hat, z_real):
        zr = zr if isinstance(zr, Tensor) else Tensor(np.asarray(zr))
        zh = np.asarray(zh.data if isinstance(zh, Tensor) else zh, dtype=zr.dtype).reshape(zr.shape)
        term = kl_divergence(zh, zr)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------- totals


def ramp_weights(epoch, stage_epochs, weights):
    """KL/UCR weights for a 0-based stage-2 epoch: linear from 0 to their final values."""
    frac = 1.0 if stage_epochs <= 1 else min(max(epoch / (stage_epochs - 1), 0.0), 1.0)
    return weights.alpha * frac, weights.beta * frac


def supervised_loss(pred, clean, rainy, pyramid, weights):
    parts = {
        "smooth_l1": smooth_l1(pred, clean),
        "ssim": ssim_loss(pred, clean),
        "cr": contrastive_reg(clean, pred, rainy, pyramid, weights.cr_weights),
    }
    total = parts["smooth_l1"] + weights.lambda_ssim * parts["ssim"] + weights.lambda_cr * parts["cr"]
    return total, parts


def unsupervised_loss(pred, rainy, positive, kl, alpha, beta, pyramid, weights):
    parts = {
        "kl": kl,
        "ucr": ucr(positive, pred, rainy, pyramid, weights.cr_weights),
        "tv": tv_loss(pred),
    }
    total = alpha * parts["kl"] + beta * parts["ucr"] + weights.lambda_tv * parts["tv"]
    return total, parts
