"""Finite-difference verification suite over primitives, blocks, model and losses.

Everything runs in float64 at toy sizes: A=3, 16x16 views, C'=8, D=32,
L=1, P=4.
"""

import time

import numpy as np

from mderain import losses
from mderain import tensor as T
from mderain.gradcheck import grad_check
from mderain.lightfield import mpi_to_sai, sai_to_mpi, view_pixel_shuffle, view_pixel_unshuffle
from mderain.model import ESAI, MDB, AttentionUnit, MDeRainNet, ModelConfig

TOY = dict(angular=3, channels=8, units=1, patch=4, embed_dim=32, heads=4, view_size=16)


def toy_config():
    return ModelConfig(**TOY)


def _leaf(rng, *shape, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _params(module, prefix=""):
    module.to(np.float64)
    return {prefix + n: p for n, p in module.named_parameters()}


def _weighted(out, seed):
    """Scalar probe: <out, fixed random weights>, so every output entry matters."""
    w = T.Tensor(np.random.default_rng(seed).standard_normal(out.shape))
    return (out * w).sum()


def primitive_cases(rng):
    x = _leaf(rng, 2, 6, 6, 3)
    w = _leaf(rng, 3, 3, 3, 4)
    b = _leaf(rng, 4)
    g, be = _leaf(rng, 3), _leaf(rng, 3)
    m1, m2 = _leaf(rng, 2, 4, 5), _leaf(rng, 5, 3)
    pos = T.Tensor(rng.uniform(0.5, 2.0, (4, 5)), requires_grad=True)
    y = _leaf(rng, 2, 6, 6, 3)
    lf = _leaf(rng, 1, 3, 3, 4, 4, 2)
    probe = 99

    def wsum(t):
        return _weighted(t, probe)

    return {
        "add": (lambda: wsum(x + y * 0.5), {"x": x, "y": y}),
        "mul": (lambda: wsum(x * y), {"x": x, "y": y}),
        "div": (lambda: wsum(m1[0] / pos), {"m1": m1, "pos": pos}),
        "matmul": (lambda: wsum(m1 @ m2), {"m1": m1, "m2": m2}),
        "relu": (lambda: wsum(T.relu(x)), {"x": x}),
        "leaky_relu": (lambda: wsum(T.leaky_relu(x)), {"x": x}),
        "gelu": (lambda: wsum(T.gelu(x)), {"x": x}),
        "exp_log_sqrt": (lambda: wsum(T.log(pos) + T.sqrt(pos) + T.exp(pos * 0.1)), {"pos": pos}),
        "abs": (lambda: wsum(T.tabs(x)), {"x": x}),
        "softmax": (lambda: wsum(T.softmax(x, axis=-1)), {"x": x}),
        "log_softmax": (lambda: wsum(T.log_softmax(x, axis=1)), {"x": x}),
        "layer_norm": (lambda: wsum(T.layer_norm(x, g, be)), {"x": x, "g": g, "be": be}),
        "concat": (lambda: wsum(T.concat([x, y], axis=-1)), {"x": x, "y": y}),
        "upsample": (lambda: wsum(T.upsample_nearest(x, 3)), {"x": x}),
        "slice_reshape_transpose": (
            lambda: wsum(T.transpose(T.reshape(x[:, 1:5, ::2], (2, 4, 9)), (2, 0, 1))),
            {"x": x},
        ),
        "sum_mean": (lambda: (x * x).sum() + T.mean(x * y, axis=(1, 2)).sum(), {"x": x, "y": y}),
        "conv2d": (lambda: wsum(T.conv2d(x, w, b, stride=1, dilation=1, padding=1)), {"x": x, "w": w, "b": b}),
        "conv2d_dilated": (lambda: wsum(T.conv2d(x, w, b, dilation=2, padding=2)), {"x": x, "w": w, "b": b}),
        "conv2d_strided": (lambda: wsum(T.conv2d(x, w, b, stride=2)), {"x": x, "w": w, "b": b}),
        "lf_transforms": (
            lambda: wsum(
                view_pixel_shuffle(view_pixel_unshuffle(sai_to_mpi(lf), 3, 2) * 2.0, 3, 2)
                + sai_to_mpi(mpi_to_sai(sai_to_mpi(lf), 3))
            ),
            {"lf": lf},
        ),
    }


def block_cases(rng):
    cfg = toy_config()
    a, c = cfg.angular, cfg.channels
    probe = 7
    cases = {}

    mdb = MDB(np.random.default_rng(1), a, c)
    x = _leaf(rng, 1, a * 4, a * 4, c)
    cases["mdb"] = (lambda: _weighted(mdb(x), probe), {"x": x, **_params(mdb)})

    unit = AttentionUnit(np.random.default_rng(2), cfg.embed_dim, cfg.heads, 2 * cfg.embed_dim)
    zs, za = _leaf(rng, 1, 6, cfg.embed_dim), _leaf(rng, 1, 6, cfg.embed_dim)
    ps, pa = _leaf(rng, 6, cfg.embed_dim, scale=0.1), _leaf(rng, 6, cfg.embed_dim, scale=0.1)

    def unit_loss():
        s, an = unit(zs, za, ps, pa)
        return _weighted(s, 8) + _weighted(an, 9)

    cases["attention_unit"] = (unit_loss, {"zs": zs, "za": za, "ps": ps, "pa": pa, **_params(unit)})

    esai = ESAI(np.random.default_rng(3), cfg, 1)
    side = a * cfg.view_size // 2
    fm = _leaf(rng, 1, side, side, c)
    for p in (esai.pos_spatial, esai.pos_angular):
        p.data = rng.standard_normal(p.shape) * 0.1
    cases["esai"] = (lambda: _weighted(esai(fm), probe), {"fm": fm, **_params(esai)})
    return cases


def model_case(rng):
    cfg = toy_config()
    model = MDeRainNet(cfg, seed=5).to(np.float64)
    for esai in model.esai:
        for p in (esai.pos_spatial, esai.pos_angular):
            p.data = rng.standard_normal(p.shape) * 0.1
    a, s = cfg.angular, cfg.view_size
    mpi = T.Tensor(rng.uniform(0, 1, (1, a * s, a * s, 3)), requires_grad=True)
    target = rng.uniform(0, 1, (1, a, a, s, s, 3))

    def loss():
        _, b = model(mpi)
        d = b - target
        return (d * d).mean()

    return {"full_model": (loss, {"input": mpi, **_params(model)})}


def loss_cases(rng):
    shape = (1, 3, 3, 16, 16, 3)
    clean = rng.uniform(0.1, 0.9, shape)
    rainy = np.clip(clean + rng.uniform(0, 0.3, shape), 0, 1)
    positive = rng.uniform(0.1, 0.9, shape)
    pred = T.Tensor(clean + rng.normal(0, 0.05, shape), requires_grad=True)
    big = T.Tensor(clean + rng.normal(0, 2.0, shape), requires_grad=True)
    pyramid = losses.FeaturePyramid(3)
    weights = losses.LossWeights()
    zr3, zr4 = _leaf(rng, 2, 8), _leaf(rng, 2, 8)
    zh3, zh4 = rng.standard_normal((2, 8)), rng.standard_normal((2, 8))
    return {
        "smooth_l1": (lambda: losses.smooth_l1(pred, clean) + losses.smooth_l1(big, clean), {"pred": pred, "big": big}),
        "ssim": (lambda: losses.ssim_loss(pred, clean), {"pred": pred}),
        "cr": (lambda: losses.contrastive_reg(clean, pred, rainy, pyramid), {"pred": pred}),
        "ucr": (lambda: losses.ucr(positive, pred, rainy, pyramid), {"pred": pred}),
        "tv": (lambda: losses.tv_loss(pred), {"pred": pred}),
        "kl": (lambda: losses.multilevel_kl([zh3, zh4], [zr3, zr4]), {"z3": zr3, "z4": zr4}),
        "supervised": (lambda: losses.supervised_loss(pred, clean, rainy, pyramid, weights)[0], {"pred": pred}),
    }


GROUPS = {
    "primitives": primitive_cases,
    "blocks": block_cases,
    "model": model_case,
    "losses": loss_cases,
}


def run_suite(tol=1e-4, groups=None, seed=0, log=None):
    """Run grad checks; returns ``{case: GradCheckReport}``."""
    results = {}
    for group in groups or GROUPS:
        cases = GROUPS[group](np.random.default_rng(seed))
        for name, (fn, inputs) in cases.items():
            start = time.perf_counter()
            entries = 4 if group == "model" else 8
            report = grad_check(fn, inputs, tol=tol, max_entries=entries, seed=seed)
            results[name] = report
            if log is not None:
                log(f"{group:10s} {name:24s} {report}  [{time.perf_counter() - start:.1f}s]")
    return results
