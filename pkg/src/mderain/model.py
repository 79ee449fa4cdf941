"""MDeRainNet: macro-pixel encoder-decoder with spatial-angular attention.

Feature maps are NHWC tensors in canonical MPI layout (see
:mod:`mderain.lightfield`). The network predicts a rain layer ``R`` per view
and returns the de-rained views ``B = I - R``.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from mderain import tensor as T
from mderain.lightfield import LayoutError, mpi_to_sai, view_pixel_shuffle, view_pixel_unshuffle
from mderain.nn import Conv2d, LayerNorm, Linear, Module, Param, uniform_fan_in
from mderain.tensor import Tensor


@dataclass
class ModelConfig:
    angular: int = 5
    channels: int = 32
    units: int = 2
    patch: int = 8
    embed_dim: int = 64
    heads: int = 4
    view_size: int = 64
    mlp_ratio: int = 2
    scales: int = 4

    def __post_init__(self):
        if self.angular < 1:
            raise ValueError("angular must be >= 1")
        if self.channels < 2 or self.channels % 2:
            raise ValueError("channels must be even (the angular branch uses channels/2)")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        if self.units < 1 or self.patch < 1:
            raise ValueError("units and patch must be positive")
        if self.view_size % self.min_view_multiple:
            raise ValueError(f"view_size must be divisible by {self.min_view_multiple}")

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def min_view_multiple(self):
        return 2 ** (self.scales - 1)

    def site_patch(self, scale):
        """Patch side at the attention site of a downsampled scale (1-based).

        ``patch`` when it divides the MPI side at that scale, else the gcd.
        """
        side = self.angular * self.view_size // 2**scale
        return math.gcd(self.patch, side)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _act(x):
    return T.leaky_relu(x, 0.1)


class SFE(Conv2d):
    """3x3 convolution dilated by A: every tap stays inside one view."""

    def __init__(self, rng, angular, cin, cout):
        super().__init__(rng, cin, cout, kernel=3, dilation=angular, padding=angular)


class AFE(Conv2d):
    """A x A convolution with stride A: one output per macro-pixel."""

    def __init__(self, rng, angular, cin, cout):
        super().__init__(rng, cin, cout, kernel=angular, stride=angular)


class MDB(Module):
    """Modified disentangling block."""

    def __init__(self, rng, angular, channels):
        half = channels // 2
        self.angular = angular
        self.afe = AFE(rng, angular, channels, half)
        self.ang_proj = Conv2d(rng, half, half, kernel=1)
        self.spa1 = SFE(rng, angular, channels, channels)
        self.spa2 = SFE(rng, angular, channels, channels)
        self.fuse = Conv2d(rng, channels + half, channels, kernel=1)
        self.res1 = SFE(rng, angular, channels, channels)
        self.res2 = SFE(rng, angular, channels, channels)

    def __call__(self, x):
        ang = T.upsample_nearest(self.ang_proj(_act(self.afe(x))), self.angular)
        spa = self.spa2(_act(self.spa1(x)))
        fused = self.fuse(T.concat([spa, ang], axis=-1))
        fused = self.res2(_act(self.res1(fused))) + fused
        return fused + x


# ---------------------------------------------------------------- tokens


def patch_embed(x, patch, proj):
    """Split an NHWC map into raster-order ``patch x patch`` tokens and project them."""
    n, h, w, c = x.shape
    if h % patch or w % patch:
        raise LayoutError(f"patch {patch} does not divide feature map {h}x{w}")
    gh, gw = h // patch, w // patch
    t = T.reshape(x, (n, gh, patch, gw, patch, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    t = T.reshape(t, (n, gh * gw, patch * patch * c))
    return proj(t) if proj is not None else t


def patch_unembed(tokens, patch, grid, proj):
    """Project tokens back to ``patch*patch*C`` values and place them in raster order."""
    t = proj(tokens) if proj is not None else tokens
    n, count, width = t.shape
    gh, gw = grid
    if count != gh * gw or width % (patch * patch):
        raise LayoutError(f"cannot place {count} tokens of width {width} on grid {grid} with patch {patch}")
    c = width // (patch * patch)
    t = T.reshape(t, (n, gh, gw, patch, patch, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (n, gh * patch, gw * patch, c))


class MultiHeadAttention(Module):
    """Per-head d x d projections of pre-split queries/keys/values, then W_O."""

    def __init__(self, rng, dim, heads):
        d = dim // heads
        self.heads = heads
        self.wq = Param(uniform_fan_in(rng, (heads, d, d), d))
        self.wk = Param(uniform_fan_in(rng, (heads, d, d), d))
        self.wv = Param(uniform_fan_in(rng, (heads, d, d), d))
        self.out = Linear(rng, dim, dim)

    def _split(self, x):
        n, t, dim = x.shape
        return T.transpose(T.reshape(x, (n, t, self.heads, dim // self.heads)), (0, 2, 1, 3))

    def weights(self, q, k):
        """Attention matrix ``(N, heads, Tq, Tk)``; rows sum to one."""
        qh = T.matmul(self._split(q), self.wq)
        kh = T.matmul(self._split(k), self.wk)
        scale = 1.0 / math.sqrt(qh.shape[-1])
        return T.softmax(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))) * scale, axis=-1)

    def __call__(self, q, k, v):
        attn = self.weights(q, k)
        vh = T.matmul(self._split(v), self.wv)
        heads = T.matmul(attn, vh)
        n, _, t, d = heads.shape
        merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (n, t, self.heads * d))
        return self.out(merged)


class MLP(Module):
    def __init__(self, rng, dim, hidden):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class _Branch(Module):
    """One stream of an attention unit: cross-feature then reinforcement attention."""

    def __init__(self, rng, dim, heads, hidden):
        self.cross = MultiHeadAttention(rng, dim, heads)
        self.ln_cross_ffn = LayerNorm(dim)
        self.cross_ffn = MLP(rng, dim, hidden)
        self.ln_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(rng, dim, heads)
        self.ln_self_ffn = LayerNorm(dim)
        self.self_ffn = MLP(rng, dim, hidden)

    def __call__(self, query, key, value, own_norm):
        z1 = self.cross(query, key, value)
        z2 = self.cross_ffn(self.ln_cross_ffn(z1)) + z1
        z3 = z2 + own_norm
        h = self.ln_self(z3)
        z4 = self.self_attn(h, h, h) + z3
        return self.self_ffn(self.ln_self_ffn(z4)) + z4


class AttentionUnit(Module):
    """Spatial and angular branches exchanging queries via cross-attention."""

    def __init__(self, rng, dim, heads, hidden):
        self.ln_spatial = LayerNorm(dim)
        self.ln_angular = LayerNorm(dim)
        self.spatial = _Branch(rng, dim, heads, hidden)
        self.angular = _Branch(rng, dim, heads, hidden)

    def __call__(self, z_s, z_a, pos_s, pos_a):
        n_s = self.ln_spatial(z_s)
        n_a = self.ln_angular(z_a)
        k_s = n_s + pos_s
        k_a = n_a + pos_a
        out_s = self.spatial(k_a, k_s, n_s, n_s)
        out_a = self.angular(k_s, k_a, n_a, n_a)
        return out_s, out_a


class ESAI(Module):
    """Spatial-angular interaction: split, L attention units, deep fusion, skip."""

    def __init__(self, rng, cfg, scale):
        a, c, d = cfg.angular, cfg.channels, cfg.embed_dim
        self.angular = a
        self.patch = cfg.site_patch(scale)
        side = a * cfg.view_size // 2**scale
        self.grid = side // self.patch
        width = self.patch * self.patch * c
        self.sfe = SFE(rng, a, c, c)
        self.afe = AFE(rng, a, c, c)
        self.embed = Linear(rng, width, d)
        self.unembed = Linear(rng, d, width)
        self.pos_spatial = Param(np.zeros((self.grid, self.grid, d), dtype=np.float32))
        self.pos_angular = Param(np.zeros((self.grid, self.grid, d), dtype=np.float32))
        self.units = [AttentionUnit(rng, d, cfg.heads, cfg.mlp_ratio * d) for _ in range(cfg.units)]
        self.df_angular = Conv2d(rng, (cfg.units + 1) * c, c, kernel=1)
        self.df_fuse = SFE(rng, a, (cfg.units + 2) * c, c)

    def _positions(self, pos, gh, gw):
        if (gh, gw) != (self.grid, self.grid):
            rows = ((np.arange(gh) + 0.5) * self.grid / gh).astype(int)
            cols = ((np.arange(gw) + 0.5) * self.grid / gw).astype(int)
            pos = T.getitem(pos, (rows[:, None], cols[None, :]))
        return T.reshape(pos, (gh * gw, pos.shape[-1]))

    def split(self, f_m):
        f_s = self.sfe(f_m)
        f_a = T.upsample_nearest(self.afe(f_m), self.angular)
        return f_s, f_a

    def __call__(self, f_m):
        f_s, f_a = self.split(f_m)
        _, h, w, _ = f_m.shape
        grid = (h // self.patch, w // self.patch)
        z_s = patch_embed(f_s, self.patch, self.embed)
        z_a = patch_embed(f_a, self.patch, self.embed)
        p_s = self._positions(self.pos_spatial, *grid)
        p_a = self._positions(self.pos_angular, *grid)
        u_s, u_a = [f_s], [f_a]
        for unit in self.units:
            z_s, z_a = unit(z_s, z_a, p_s, p_a)
            u_s.append(patch_unembed(z_s, self.patch, grid, self.unembed))
            u_a.append(patch_unembed(z_a, self.patch, grid, self.unembed))
        return self.deep_fusion(T.concat(u_s, axis=-1), T.concat(u_a, axis=-1)) + f_m

    def deep_fusion(self, fc_s, fc_a):
        ft_a = T.relu(self.df_angular(fc_a))
        return T.relu(self.df_fuse(T.concat([fc_s, ft_a], axis=-1)))


class MDeRainNet(Module):
    def __init__(self, cfg=None, seed=0):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        a, c = cfg.angular, cfg.channels
        levels = range(1, cfg.scales)
        self.head = SFE(rng, a, 3, c)
        self.enc0 = MDB(rng, a, c)
        self.down = [Conv2d(rng, 4 * c, c, kernel=1) for _ in levels]
        self.esai = [ESAI(rng, cfg, s) for s in levels]
        self.enc = [MDB(rng, a, c) for _ in levels]
        self.up = [Conv2d(rng, c, 4 * c, kernel=1) for _ in levels]
        self.skip_fuse = [Conv2d(rng, 2 * c, c, kernel=1) for _ in levels]
        self.dec_sfe = [SFE(rng, a, c, c) for _ in levels]
        self.dec = [MDB(rng, a, c) for _ in levels]
        self.tail = SFE(rng, a, c, c)
        self.to_rgb = Conv2d(rng, c, 3, kernel=1)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def _check_input(self, x):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[-1] != 3:
            raise LayoutError(f"expected an (N, A*H, A*W, 3) MPI batch, got {x.shape}")
        _, y, xw, _ = x.shape
        if y % cfg.angular or xw % cfg.angular:
            raise LayoutError(f"MPI {y}x{xw} not divisible by angular size {cfg.angular}")
        h, w = y // cfg.angular, xw // cfg.angular
        m = cfg.min_view_multiple
        if h % m or w % m:
            raise LayoutError(f"view size {h}x{w} must be divisible by {m}")
        for scale, esai in enumerate(self.esai, start=1):
            side_h, side_w = y >> scale, xw >> scale
            if side_h % esai.patch or side_w % esai.patch:
                raise LayoutError(
                    f"view size {h}x{w} gives a {side_h}x{side_w} map at scale {scale}, "
                    f"not divisible by its token patch {esai.patch}"
                )

    def encode(self, mpi):
        """Encoder features, one per scale (full resolution first)."""
        x = mpi if isinstance(mpi, Tensor) else Tensor(np.asarray(mpi, dtype=self.dtype))
        self._check_input(x)
        a = self.cfg.angular
        feats = [self.enc0(self.head(x))]
        for down, esai, mdb in zip(self.down, self.esai, self.enc):
            f = down(view_pixel_unshuffle(feats[-1], a, 2))
            feats.append(mdb(esai(f)))
        return feats

    def decode(self, feats):
        a = self.cfg.angular
        d = feats[-1]
        for i in reversed(range(len(self.up))):
            u = view_pixel_shuffle(self.up[i](d), a, 2)
            f = self.skip_fuse[i](T.concat([u, feats[i]], axis=-1))
            d = self.dec[i](self.dec_sfe[i](f))
        return d

    def rain_layer(self, d):
        """LF reshape stage: refine, rearrange into views, squeeze to RGB."""
        a = self.cfg.angular
        sai = mpi_to_sai(self.tail(d), a)
        n, _, _, h, w, c = sai.shape
        r = self.to_rgb(T.reshape(sai, (n, a * a * h, w, c)))
        return T.reshape(r, (n, a, a, h, w, 3))

    def forward(self, mpi, return_features=False):
        """Return ``(R, B)`` as ``(N, A, A, H, W, 3)`` tensors; ``B`` is unclamped."""
        x = mpi if isinstance(mpi, Tensor) else Tensor(np.asarray(mpi, dtype=self.dtype))
        feats = self.encode(x)
        r = self.rain_layer(self.decode(feats))
        b = mpi_to_sai(x, self.cfg.angular) - r
        if return_features:
            return r, b, feats
        return r, b

    __call__ = forward

    def derain(self, mpi):
        """Inference: de-rained views clamped to [0, 1], as a numpy array."""
        with T.no_grad():
            _, b = self.forward(mpi)
        return np.clip(b.data, 0.0, 1.0)

    def zero_(self):
        for p in self.parameters():
            p.data[...] = 0
        return self
