"""Run configuration and the two-stage training loop."""

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from mderain import losses, nn
from mderain import tensor as T
from mderain.data import load_dataset
from mderain.inference import derain_lf
from mderain.lightfield import crop_patches, sai_to_mpi
from mderain.metrics import per_view_psnr_map, psnr
from mderain.model import MDeRainNet, ModelConfig
from mderain.residue import residue_positive

log = logging.getLogger(__name__)

CSV_COLUMNS = ["epoch", "step", "total", "smooth_l1", "ssim", "cr", "kl", "ucr", "tv", "alpha", "beta", "lr"]


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 4e-5
    halve_every: int = 45
    epochs: int = 200
    batch_size: int = 6


@dataclass
class DataConfig:
    train: str = ""
    val: str = ""
    real: str = ""
    patch_size: int = 64
    patch_stride: int = 32


@dataclass
class ResidueConfig:
    radius: int = 4
    eps: float = 0.01


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: losses.LossWeights = field(default_factory=losses.LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    residue: ResidueConfig = field(default_factory=ResidueConfig)
    seed: int = 0
    stage: int = 1
    out: str = "runs/default"
    init: str = ""
    pyramid_seed: int = 1234

    def validate(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not self.data.train:
            raise ConfigError("data.train is required")
        if self.stage == 2 and not (self.init and self.data.real):
            raise ConfigError("stage 2 needs `init` (a stage-1 checkpoint) and `data.real`")
        if self.model.view_size != self.data.patch_size:
            raise ConfigError(
                f"model.view_size ({self.model.view_size}) must equal data.patch_size ({self.data.patch_size})"
            )
        if self.optim.batch_size < 1 or self.optim.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        return self

    def to_dict(self):
        return asdict(self)


_SECTIONS = {
    "model": ModelConfig,
    "loss": losses.LossWeights,
    "optim": OptimConfig,
    "data": DataConfig,
    "residue": ResidueConfig,
}


def config_from_dict(d):
    kwargs = {}
    for key, value in d.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            unknown = set(value) - set(cls.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
            try:
                kwargs[key] = cls(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{key}]: {exc}") from exc
        elif key in RunConfig.__dataclass_fields__:
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = RunConfig(**kwargs)
    if "MDRN_SEED" in os.environ:
        try:
            cfg.seed = int(os.environ["MDRN_SEED"])
        except ValueError as exc:
            raise ConfigError(f"MDRN_SEED must be an integer: {exc}") from exc
    return cfg


def load_config(path):
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(raw)
    base = path.parent
    for name in ("train", "val", "real"):
        value = getattr(cfg.data, name)
        if value and not Path(value).is_absolute():
            setattr(cfg.data, name, str(base / value))
    for name in ("out", "init"):
        value = getattr(cfg, name)
        if value and not Path(value).is_absolute():
            setattr(cfg, name, str(base / value))
    return cfg


# ---------------------------------------------------------------- checkpoints


def save_model(path, model, optimizer=None, meta=None):
    arrays = dict(model.state_dict())
    meta = dict(meta or {})
    if optimizer is not None:
        state = optimizer.state()
        meta["adam_t"] = state.pop("t")
        arrays.update(state)
    nn.save_checkpoint(path, model.cfg.to_dict(), arrays, meta)


def load_model(path):
    """Rebuild a model from a checkpoint; returns ``(model, arrays, meta)``."""
    config, arrays, meta = nn.load_checkpoint(path)
    model = MDeRainNet(ModelConfig.from_dict(config))
    own = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    model.load_state_dict(own)
    return model, arrays, meta


# ---------------------------------------------------------------- data


def patch_samples(scenes, size, stride, labeled=True):
    rainy, clean = [], []
    for sc in scenes:
        rainy.extend(crop_patches(sc.rainy, size, stride))
        if labeled:
            clean.extend(crop_patches(sc.clean, size, stride))
    rainy = np.stack(rainy).astype(np.float32)
    clean = np.stack(clean).astype(np.float32) if labeled else None
    return rainy, clean


def batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class Trainer:
    def __init__(self, cfg, resume=None):
        self.cfg = cfg.validate()
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.pyramid = losses.FeaturePyramid(cfg.pyramid_seed)
        self.start_epoch = 0
        if resume:
            self.model, arrays, meta = load_model(resume)
            self.optimizer = nn.Adam(self.model.parameters(), lr=cfg.optim.lr)
            self.optimizer.load_state({"t": meta.get("adam_t", 0), **{k: v for k, v in arrays.items() if k.startswith("adam.")}})
            self.start_epoch = int(meta["epoch"]) + 1
        else:
            if cfg.stage == 2:
                self.model, _, _ = load_model(cfg.init)
            else:
                self.model = MDeRainNet(cfg.model, seed=cfg.seed)
            self.optimizer = nn.Adam(self.model.parameters(), lr=cfg.optim.lr)
        if self.model.cfg.to_dict() != cfg.model.to_dict():
            log.warning("checkpoint model config differs from run config; using the checkpoint's")
        d = cfg.data
        self.syn_rainy, self.syn_clean = patch_samples(load_dataset(d.train), d.patch_size, d.patch_stride)
        if cfg.stage == 2:
            real = load_dataset(d.real, require_labels=False)
            self.real_rainy, _ = patch_samples(real, d.patch_size, d.patch_stride, labeled=False)
            r = cfg.residue
            self.real_positive = np.stack(
                [residue_positive(p, cfg.loss.mu, r.radius, r.eps) for p in self.real_rainy]
            ).astype(np.float32)
        self.csv_path = self.out / f"loss_stage{cfg.stage}.csv"

    # -------------------------------------------------------------- steps

    def _mpi(self, lf_batch):
        return T.Tensor(sai_to_mpi(lf_batch).astype(self.model.dtype))

    def refresh_bank(self, syn_batches):
        bank = losses.MemoryBank(levels=(3, 4))
        latents = []
        with T.no_grad():
            for idx in syn_batches:
                feats = self.model.encode(self._mpi(self.syn_rainy[idx]))
                latents.append({3: losses.pool_latent(feats[2].data, False), 4: losses.pool_latent(feats[3].data, False)})
        bank.refresh(latents)
        return bank

    def _supervised(self, idx):
        rainy = self.syn_rainy[idx]
        _, b = self.model(self._mpi(rainy))
        return losses.supervised_loss(b, self.syn_clean[idx], rainy, self.pyramid, self.cfg.loss)

    def _unsupervised(self, idx, bank, alpha, beta):
        rainy = self.real_rainy[idx]
        _, b, feats = self.model(self._mpi(rainy), return_features=True)
        z_real = [losses.pool_latent(feats[2]), losses.pool_latent(feats[3])]
        z_hat = [losses.pseudo_targets(z, bank, lv, self.cfg.loss.k) for z, lv in zip(z_real, (3, 4))]
        kl = losses.multilevel_kl(z_hat, z_real)
        return losses.unsupervised_loss(b, rainy, self.real_positive[idx], kl, alpha, beta, self.pyramid, self.cfg.loss)

    @staticmethod
    def _backward(loss, parts, epoch, step):
        """Backpropagate ``loss``; returns plain floats so no graph outlives the call."""
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
        T.backward(loss)
        return value, {k: float(v.data) for k, v in parts.items()}

    def train(self):
        cfg = self.cfg
        epochs = cfg.optim.epochs
        mode = "a" if self.start_epoch else "w"
        history = []
        with open(self.csv_path, mode, newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            if mode == "w":
                writer.writeheader()
            for epoch in range(self.start_epoch, epochs):
                lr = nn.step_lr(cfg.optim.lr, epoch, cfg.optim.halve_every)
                self.optimizer.lr = lr
                rng = np.random.default_rng([cfg.seed, cfg.stage, epoch])
                syn_batches = batches(len(self.syn_rainy), cfg.optim.batch_size, rng)
                if cfg.stage == 2:
                    alpha, beta = losses.ramp_weights(epoch, epochs, cfg.loss)
                    bank = self.refresh_bank(syn_batches)
                    real_order = rng.permutation(len(self.real_rainy))
                else:
                    alpha = beta = None
                for step, idx in enumerate(syn_batches):
                    self.optimizer.zero_grad()
                    # each part is backpropagated on its own so only one graph is alive at a time;
                    # gradients accumulate, so the update equals that of the summed loss
                    value, parts = self._backward(*self._supervised(idx), epoch, step)
                    if cfg.stage == 2:
                        b = min(cfg.optim.batch_size, len(real_order))
                        pos = (step * b) % len(real_order)
                        ridx = np.take(real_order, range(pos, pos + b), mode="wrap")
                        uvalue, uparts = self._backward(*self._unsupervised(ridx, bank, alpha, beta), epoch, step)
                        value += uvalue
                        parts.update(uparts)
                    self.optimizer.step()
                    row = {"epoch": epoch, "step": step, "total": f"{value:.9g}", "lr": f"{lr:.9g}"}
                    for k, v in parts.items():
                        row[k] = f"{v:.9g}"
                    if alpha is not None:
                        row["alpha"] = f"{alpha:.9g}"
                        row["beta"] = f"{beta:.9g}"
                    writer.writerow(row)
                    history.append(row)
                fh.flush()
                meta = {"epoch": epoch, "stage": cfg.stage, "seed": cfg.seed}
                save_model(self.out / f"epoch_{epoch:03d}.mdrn", self.model, self.optimizer, meta)
                save_model(self.out / "last.mdrn", self.model, self.optimizer, meta)
                log.info("stage %d epoch %d done, last loss %.5f", cfg.stage, epoch, value)
        return history


def evaluate_model(model, scenes):
    """Mean PSNR of de-rained output and of the rainy input, plus per-view stds."""
    out = {"psnr": [], "input_psnr": [], "view_std": [], "input_view_std": []}
    for sc in scenes:
        pred = derain_lf(model, sc.rainy)
        out["psnr"].append(psnr(pred, sc.clean))
        out["input_psnr"].append(psnr(sc.rainy, sc.clean))
        out["view_std"].append(per_view_psnr_map(pred, sc.clean)[2])
        out["input_view_std"].append(per_view_psnr_map(sc.rainy, sc.clean)[2])
    return {k: float(np.mean(v)) for k, v in out.items()}
