"""Synthetic rainy light fields and light-field directory I/O.

Scenes are stacks of procedural layers. Every layer is an analytic function
of continuous image coordinates, and view ``(u, v)`` shows it translated by
``d*(u - uc, v - vc)`` for layer disparity ``d``: the view samples it at
``x = w - d*(u - uc)``, ``y = h - d*(v - vc)``. In the horizontal EPI
``lf[:, v*, h*, :]`` (rows ``u``, columns ``w``) a scene point therefore
moves by ``+d`` columns per row.

Rain is rendered once and added identically to every view (zero disparity).
"""

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from mderain.lightfield import extract_epi

VIEW_RE = re.compile(r"^view_u(\d+)_v(\d+)\.png$")


class DataError(ValueError):
    """Raised for missing or inconsistent light-field files."""


@dataclass
class LayerSpec:
    kind: str  # background | disc | rect
    disparity: float
    depth: float
    params: dict = field(default_factory=dict)


@dataclass
class SceneSpec:
    seed: int
    angular: int
    height: int
    width: int
    layers: list

    def __post_init__(self):
        self.layers = [LayerSpec(**l) if isinstance(l, dict) else l for l in self.layers]
        if not self.layers:
            raise ValueError("a scene needs at least one layer")
        for layer in self.layers:
            if not np.isfinite(layer.disparity):
                raise ValueError("layer disparities must be finite")

    @classmethod
    def random(cls, seed, angular=5, height=64, width=64, shapes=3, max_disparity=1.0):
        rng = np.random.default_rng(seed)
        layers = [LayerSpec("background", float(rng.uniform(-0.3, 0.3) * max_disparity), 10.0, _texture(rng))]
        for i in range(shapes):
            kind = "disc" if rng.random() < 0.5 else "rect"
            params = _texture(rng)
            params.update(
                cx=float(rng.uniform(0.1, 0.9) * width),
                cy=float(rng.uniform(0.1, 0.9) * height),
                size=float(rng.uniform(0.1, 0.3) * min(height, width)),
                aspect=float(rng.uniform(0.5, 2.0)),
            )
            depth = float(rng.uniform(1.0, 9.0))
            layers.append(LayerSpec(kind, float(rng.uniform(-1.0, 1.0) * max_disparity), depth, params))
        return cls(seed, angular, height, width, layers)

    def to_dict(self):
        return asdict(self)


def _texture(rng):
    waves = [
        dict(
            fx=float(rng.uniform(-0.5, 0.5)),
            fy=float(rng.uniform(-0.5, 0.5)),
            phase=float(rng.uniform(0, 2 * np.pi)),
            color=rng.uniform(-0.12, 0.12, 3).tolist(),
        )
        for _ in range(3)
    ]
    return dict(
        base=rng.uniform(0.2, 0.8, 3).tolist(),
        grad=rng.uniform(-0.2, 0.2, (2, 3)).tolist(),
        waves=waves,
    )


def _shade(params, x, y, height, width):
    col = np.asarray(params["base"])[None, None, :] + np.zeros(x.shape + (3,))
    grad = np.asarray(params["grad"])
    col = col + (x / width)[..., None] * grad[0] + (y / height)[..., None] * grad[1]
    for wave in params["waves"]:
        s = np.sin(wave["fx"] * x + wave["fy"] * y + wave["phase"])
        col = col + s[..., None] * np.asarray(wave["color"])
    return col


def _alpha(layer, x, y):
    p = layer.params
    if layer.kind == "background":
        return np.ones_like(x)
    dx, dy = x - p["cx"], y - p["cy"]
    if layer.kind == "disc":
        r = np.sqrt((dx / p["aspect"]) ** 2 + dy**2)
        edge = p["size"] - r
    elif layer.kind == "rect":
        edge = np.minimum(p["size"] * p["aspect"] - np.abs(dx), p["size"] - np.abs(dy))
    else:
        raise ValueError(f"unknown layer kind {layer.kind!r}")
    return np.clip(edge + 0.5, 0.0, 1.0)


def gen_scene(spec):
    """Render the clean ``(A, A, H, W, 3)`` light field of a scene, float32 in [0, 1]."""
    a, h, w = spec.angular, spec.height, spec.width
    c = (a - 1) / 2
    hh, ww = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    order = sorted(spec.layers, key=lambda l: -l.depth)
    lf = np.zeros((a, a, h, w, 3))
    for u in range(a):
        for v in range(a):
            img = np.zeros((h, w, 3))
            for layer in order:
                x = ww - layer.disparity * (u - c)
                y = hh - layer.disparity * (v - c)
                alpha = _alpha(layer, x, y)[..., None]
                img = alpha * _shade(layer.params, x, y, h, w) + (1 - alpha) * img
            lf[u, v] = img
    return np.clip(lf, 0.0, 1.0).astype(np.float32)


@dataclass
class RainSpec:
    seed: int
    count: int = 30
    angle: tuple = (-20.0, 20.0)  # degrees from vertical
    length: tuple = (6.0, 20.0)
    width: tuple = (0.6, 1.4)
    intensity: tuple = (0.3, 0.7)
    achromatic: bool = True

    def __post_init__(self):
        for name in ("angle", "length", "width", "intensity"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"rain {name} range is inverted: {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))
        if self.count < 0:
            raise ValueError("streak count must be non-negative")
        if not (0 < self.intensity[0] and self.intensity[1] <= 1):
            raise ValueError("rain intensity must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)


# Rain for "real-style" unlabeled scenes: more slanted, longer, wider and
# fainter streaks than the synthetic training default.
REAL_STYLE_RAIN = {"angle": (10.0, 35.0), "length": (10.0, 28.0), "width": (0.8, 1.8), "intensity": (0.25, 0.6)}


def render_rain(height, width, spec):
    """Rain layer ``(H, W, 3)`` of anti-aliased streaks (2x supersampled)."""
    rng = np.random.default_rng(spec.seed)
    ss = 2
    layer = np.zeros((height * ss, width * ss, 3))
    ys = (np.arange(height * ss) + 0.5) / ss
    xs = (np.arange(width * ss) + 0.5) / ss
    for _ in range(spec.count):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        theta = np.deg2rad(rng.uniform(*spec.angle))
        length = rng.uniform(*spec.length)
        half_w = rng.uniform(*spec.width) / 2
        value = rng.uniform(*spec.intensity)
        tint = np.ones(3) if spec.achromatic else rng.uniform(0.85, 1.15, 3)
        dx, dy = np.sin(theta), np.cos(theta)
        x0, y0 = cx - dx * length / 2, cy - dy * length / 2
        pad = half_w + 1
        xlo, xhi = min(x0, x0 + dx * length) - pad, max(x0, x0 + dx * length) + pad
        ylo, yhi = min(y0, y0 + dy * length) - pad, max(y0, y0 + dy * length) + pad
        ci = np.nonzero((xs >= xlo) & (xs <= xhi))[0]
        ri = np.nonzero((ys >= ylo) & (ys <= yhi))[0]
        if ci.size == 0 or ri.size == 0:
            continue
        px, py = np.meshgrid(xs[ci], ys[ri])
        t = np.clip((px - x0) * dx + (py - y0) * dy, 0, length)
        dist = np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))
        cover = (dist <= half_w)[..., None] * (value * tint)
        block = layer[ri[0] : ri[-1] + 1, ci[0] : ci[-1] + 1]
        np.maximum(block, cover, out=block)
    layer = layer.reshape(height, ss, width, ss, 3).mean(axis=(1, 3))
    return np.clip(layer, 0.0, 1.0)


def gen_rain(clean, spec):
    """Return ``(rain, rainy)`` light fields; rain is identical in every view."""
    a, _, h, w, _ = clean.shape
    rain = render_rain(h, w, spec).astype(np.float32)
    rain_lf = np.broadcast_to(rain, clean.shape).copy()
    rainy = np.clip(clean + rain_lf, 0.0, 1.0).astype(np.float32)
    return rain_lf, rainy


# ---------------------------------------------------------------- files


def save_lf_dir(lf, path, bit_depth=16):
    """Write every view as ``view_u{u}_v{v}.png`` (8- or 16-bit RGB)."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    peak = 255 if bit_depth == 8 else 65535
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    lf = np.asarray(lf)
    for u in range(lf.shape[0]):
        for v in range(lf.shape[1]):
            img = np.round(np.clip(lf[u, v], 0, 1) * peak).astype(dtype)
            if not cv2.imwrite(str(path / f"view_u{u}_v{v}.png"), cv2.cvtColor(img, cv2.COLOR_RGB2BGR)):
                raise DataError(f"failed to write view ({u},{v}) to {path}")


def read_image(path):
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"cannot read image {path}")
    peak = np.iinfo(img.dtype).max
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    elif img.shape[2] == 4:
        img = img[..., :3]
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / peak


def write_image(path, img, bit_depth=8):
    peak, dtype = (255, np.uint8) if bit_depth == 8 else (65535, np.uint16)
    img = np.round(np.clip(np.asarray(img), 0, 1) * peak).astype(dtype)
    if img.ndim == 2:
        ok = cv2.imwrite(str(path), img)
    else:
        ok = cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
    if not ok:
        raise DataError(f"failed to write {path}")


def load_lf_dir(path):
    """Read a directory of ``view_u{u}_v{v}.png`` files into ``(A, A, H, W, 3)`` float32."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    views = {}
    for f in path.iterdir():
        m = VIEW_RE.match(f.name)
        if m:
            views[(int(m.group(1)), int(m.group(2)))] = f
    if not views:
        raise DataError(f"no view_u*_v*.png files in {path}")
    nu = max(u for u, _ in views) + 1
    nv = max(v for _, v in views) + 1
    missing = [(u, v) for u in range(nu) for v in range(nv) if (u, v) not in views]
    if missing:
        raise DataError(f"{path}: missing views {missing}")
    first = read_image(views[(0, 0)])
    lf = np.empty((nu, nv) + first.shape, dtype=np.float32)
    for (u, v), f in views.items():
        img = read_image(f)
        if img.shape != first.shape:
            raise DataError(f"{f}: size {img.shape} differs from {first.shape}")
        lf[u, v] = img
    return lf


def export_epi_png(lf, path, axis="horizontal", fixed_angular=None, fixed_spatial=None):
    """Write an EPI as an 8-bit PNG with one row per angular index."""
    a = lf.shape[0]
    if fixed_angular is None:
        fixed_angular = a // 2
    if fixed_spatial is None:
        fixed_spatial = (lf.shape[2] if axis == "horizontal" else lf.shape[3]) // 2
    epi = extract_epi(lf, axis, fixed_angular, fixed_spatial)
    write_image(path, epi)
    return epi


# ---------------------------------------------------------------- datasets


@dataclass
class Scene:
    scene_id: str
    rainy: np.ndarray
    clean: np.ndarray = None
    rain: np.ndarray = None
    meta: dict = field(default_factory=dict)


def make_scene(index, seed, angular, size, rain_kwargs=None, shapes=3, max_disparity=1.0):
    """Deterministic (scene spec, rain spec) pair for scene ``index`` of a dataset."""
    scene_seed, rain_seed = np.random.SeedSequence([seed, index]).generate_state(2)
    scene = SceneSpec.random(int(scene_seed), angular, size, size, shapes, max_disparity)
    rain = RainSpec(seed=int(rain_seed), **(rain_kwargs or {}))
    return scene, rain


def generate_dataset(root, count, seed, angular=3, size=64, rain_kwargs=None, labeled=True, bit_depth=16):
    """Write ``count`` scenes under ``root/<scene-id>/`` and return their ids."""
    root = Path(root)
    ids = []
    for i in range(count):
        scene_spec, rain_spec = make_scene(i, seed, angular, size, rain_kwargs)
        clean = gen_scene(scene_spec)
        rain, rainy = gen_rain(clean, rain_spec)
        sid = f"scene_{i:04d}"
        out = root / sid
        save_lf_dir(rainy, out / "rainy", bit_depth)
        if labeled:
            save_lf_dir(clean, out / "clean", bit_depth)
            save_lf_dir(rain, out / "rain", bit_depth)
        meta = {
            "scene": scene_spec.to_dict(),
            "rain": rain_spec.to_dict(),
            "geometry": {"angular": angular, "height": size, "width": size},
            "labeled": labeled,
        }
        (out / "scene.json").write_text(json.dumps(meta, indent=2))
        ids.append(sid)
    return ids


def load_dataset(root, require_labels=True):
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    scenes = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if not (d / "rainy").is_dir():
            continue
        meta = json.loads((d / "scene.json").read_text()) if (d / "scene.json").exists() else {}
        clean = load_lf_dir(d / "clean") if (d / "clean").is_dir() else None
        if require_labels and clean is None:
            raise DataError(f"{d}: no clean views")
        scenes.append(Scene(d.name, load_lf_dir(d / "rainy"), clean, None, meta))
    if not scenes:
        raise DataError(f"no scenes under {root}")
    return scenes
