"""Unpaired mask <-> H&E translation training and synthetic dataset export.

Four networks: G maps mask renders to H&E, S maps H&E back to masks, and
D_N / D_M are spectrally normalized patch discriminators on each domain.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses as L
from .imaging import render_to_tensor, rgb_to_tensor, tensor_to_rgb, write_gray8, write_labels, write_rgb
from .manifest import DatasetManifest, ManifestRecord
from .mask_synth import SamplerParams, ShapeDictionary, render_mask_image, sample_mask
from .nn_blocks import NetworkSpec, build_patch_discriminator, build_resnet_generator

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class SynthTrainConfig:
    epochs: int = 300
    lr: float = 2e-4
    lr_decay_start_epoch: int = 150
    batch_size: int = 1
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weights: L.LossWeights = field(default_factory=lambda: L.LossWeights(gp_enabled=False))
    seed: int = 0
    disc_loss_halved: bool = True
    image_channels: int = 3
    mask_channels: int = 1
    gen_width: int = 64
    n_resblocks: int = 9
    disc_width: int = 64
    n_power_iters: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if not 0 <= self.lr_decay_start_epoch < self.epochs:
            raise ValueError("lr_decay_start_epoch must lie in [0, epochs)")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(cfg, epoch: int) -> float:
    """Constant rate until the decay start, then linear decay to zero at ``cfg.epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.lr_decay_start_epoch:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (cfg.epochs - cfg.lr_decay_start_epoch)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def set_requires_grad(nets, flag: bool) -> None:
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


@dataclass
class StepReport:
    losses: dict[str, float]
    tensors: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)


def _check_finite(losses: dict[str, torch.Tensor], where: str) -> None:
    bad = {k: float(v.detach()) for k, v in losses.items() if not torch.isfinite(v).all()}
    if bad:
        snapshot = {k: float(v.detach()) for k, v in losses.items()}
        raise NonFiniteLossError(f"non-finite loss in {where}: {sorted(bad)}", snapshot)


class CycleGAN:
    """Holds G, S, D_N, D_M and their Adam optimizers."""

    def __init__(self, cfg: SynthTrainConfig):
        self.cfg = cfg
        s = cfg.seed
        self.G_spec = NetworkSpec("resnet_generator", cfg.mask_channels, cfg.image_channels, cfg.gen_width, cfg.n_resblocks)
        self.S_spec = NetworkSpec("resnet_generator", cfg.image_channels, cfg.mask_channels, cfg.gen_width, cfg.n_resblocks)
        self.DN_spec = NetworkSpec("patch_discriminator", cfg.image_channels, 1, cfg.disc_width, spectral_norm=True)
        self.DM_spec = NetworkSpec("patch_discriminator", cfg.mask_channels, 1, cfg.disc_width, spectral_norm=True)
        self.G = build_resnet_generator(self.G_spec, seed=s)
        self.S = build_resnet_generator(self.S_spec, seed=s + 1)
        self.D_N = build_patch_discriminator(self.DN_spec, seed=s + 2)
        self.D_M = build_patch_discriminator(self.DM_spec, seed=s + 3)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_gen = torch.optim.Adam(itertools.chain(self.G.parameters(), self.S.parameters()), lr=cfg.lr, betas=betas)
        self.opt_dn = torch.optim.Adam(self.D_N.parameters(), lr=cfg.lr, betas=betas)
        self.opt_dm = torch.optim.Adam(self.D_M.parameters(), lr=cfg.lr, betas=betas)

    @property
    def nets(self):
        return {"G": self.G, "S": self.S, "D_N": self.D_N, "D_M": self.D_M}

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_gen, self.opt_dn, self.opt_dm):
            set_lr(opt, lr)

    def train(self, mode: bool = True) -> None:
        for net in self.nets.values():
            net.train(mode)


def train_step_synth(model: CycleGAN, m: torch.Tensor, n: torch.Tensor, step_seed: int = 0, keep_tensors: bool = False) -> StepReport:
    """One alternating update: G and S jointly, then D_N, then D_M."""
    cfg, w = model.cfg, model.cfg.weights
    G, S, D_N, D_M = model.G, model.S, model.D_N, model.D_M
    if m.shape[-2:] != n.shape[-2:]:
        raise ValueError("mask and image batches must share spatial size")

    set_requires_grad([D_N, D_M], False)
    fake_n = G(m)
    fake_m = S(n)
    rec_m = S(fake_n)
    rec_n = G(fake_m)
    score_fake_n = D_N(fake_n)
    score_fake_m = D_M(fake_m)
    gen = {
        "gen_adv_n": L.gan_loss_generator(score_fake_n),
        "gen_adv_m": L.gan_loss_generator(score_fake_m),
        "cycle": L.cycle_loss(m, n, rec_m, rec_n, w),
    }
    gen["gen_total"] = gen["gen_adv_n"] + gen["gen_adv_m"] + gen["cycle"]
    _check_finite(gen, "generator step")
    model.opt_gen.zero_grad(set_to_none=True)
    gen["gen_total"].backward()
    model.opt_gen.step()
    set_requires_grad([D_N, D_M], True)

    factor = 0.5 if cfg.disc_loss_halved else 1.0
    fake_n_d, fake_m_d = fake_n.detach(), fake_m.detach()

    score_real_n, score_fake_n_d = D_N(n), D_N(fake_n_d)
    disc_n = L.gan_loss_discriminator(score_real_n, score_fake_n_d)
    if w.gp_enabled:
        disc_n = disc_n + w.gp_weight * L.gradient_penalty(lambda _, x: D_N(x), (n, n), (fake_n_d, fake_n_d), step_seed)
    d_losses = {"disc_n": factor * disc_n}
    _check_finite(d_losses, "D_N step")
    model.opt_dn.zero_grad(set_to_none=True)
    d_losses["disc_n"].backward()
    model.opt_dn.step()

    score_real_m, score_fake_m_d = D_M(m), D_M(fake_m_d)
    disc_m = L.gan_loss_discriminator(score_real_m, score_fake_m_d)
    if w.gp_enabled:
        disc_m = disc_m + w.gp_weight * L.gradient_penalty(lambda _, x: D_M(x), (m, m), (fake_m_d, fake_m_d), step_seed + 1)
    d_losses["disc_m"] = factor * disc_m
    _check_finite(d_losses, "D_M step")
    model.opt_dm.zero_grad(set_to_none=True)
    d_losses["disc_m"].backward()
    model.opt_dm.step()

    report = {k: float(v.detach()) for k, v in {**gen, **d_losses}.items()}
    report["cycle_n"] = float((rec_n - n).abs().mean().detach())
    report["cycle_m"] = float((rec_m - m).abs().mean().detach())
    tensors = {}
    if keep_tensors:
        tensors = {
            "m": m, "n": n, "fake_n": fake_n.detach(), "fake_m": fake_m.detach(),
            "rec_m": rec_m.detach(), "rec_n": rec_n.detach(),
            "score_fake_n": score_fake_n.detach(), "score_fake_m": score_fake_m.detach(),
            "score_real_n": score_real_n.detach(), "score_fake_n_d": score_fake_n_d.detach(),
            "score_real_m": score_real_m.detach(), "score_fake_m_d": score_fake_m_d.detach(),
        }
    return StepReport(report, tensors)


def train_cyclegan(
    model: CycleGAN,
    real_images: Sequence[np.ndarray],
    mask_source: Callable[[int], np.ndarray],
    epochs: int | None = None,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> list[dict]:
    """Train on unpaired data: each step pairs one real patch with one freshly
    sampled mask render; both orders are reshuffled every epoch from the seed."""
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    history = []
    model.train(True)
    step = 0
    for epoch in range(epochs):
        model.set_lr(lr_schedule(cfg, min(epoch, cfg.epochs)))
        order = rng.permutation(len(real_images))
        mask_seeds = rng.integers(0, 2**31 - 1, size=len(real_images))
        sums: dict[str, float] = {}
        for idx, ms in zip(order, mask_seeds):
            n = rgb_to_tensor(real_images[idx])
            m = render_to_tensor(mask_source(int(ms)))
            rep = train_step_synth(model, m, n, step_seed=cfg.seed * 1_000_003 + step)
            step += 1
            for k, v in rep.losses.items():
                sums[k] = sums.get(k, 0.0) + v
        means = {k: v / max(len(real_images), 1) for k, v in sums.items()}
        history.append(means)
        if on_epoch is not None:
            on_epoch(epoch, means)
        logger.info("synth epoch %d: %s", epoch, means)
    return history


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def pair_seeds(seed: int, count: int) -> list[int]:
    if count == 0:
        return []
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


@torch.no_grad()
def generate_synthetic_dataset(
    G: torch.nn.Module | None,
    dictionary: ShapeDictionary,
    count: int,
    seed: int,
    out: str | Path,
    params: SamplerParams | None = None,
    overwrite: bool = False,
    organ: str = "synthetic",
    created_at: str | None = None,
    colorize: Callable[[np.ndarray, int], np.ndarray] | None = None,
) -> DatasetManifest:
    """Sample ``count`` masks, translate their renders with G and write the pairs.

    Layout under ``out``: ``images/`` (8-bit RGB), ``labels/`` (16-bit
    instance maps), ``renders/`` (8-bit mask renders) and ``manifest.json``.
    With ``G=None`` the renders are turned into images by
    ``colorize(render, seed)`` instead (a stand-in for a trained generator).
    """
    if G is None and colorize is None:
        raise ValueError("need a generator G or a colorize function")
    out = Path(out)
    params = params or SamplerParams()
    manifest_path = out / "manifest.json"
    if not overwrite and (manifest_path.exists() or (out / "images").exists()):
        raise FileExistsError(f"{out} already holds a synthetic dataset; pass overwrite=True")
    was_training = G.training if G is not None else False
    if G is not None:
        G.eval()
    spec = getattr(G, "spec", None)
    chash = config_hash({
        "sampler": params.to_dict(),
        "seed": seed,
        "count": count,
        "generator": spec.to_dict() if spec is not None else getattr(colorize, "__name__", "colorize"),
        "dictionary_entries": len(dictionary),
    })
    records = []
    for i, s in enumerate(pair_seeds(seed, count)):
        pair = sample_mask(dictionary, params, s)
        render = render_mask_image(pair)
        if G is not None:
            rgb = tensor_to_rgb(G(render_to_tensor(render)))
        else:
            rgb = np.asarray(colorize(render, s), dtype=np.uint8)
        name = f"synth_{i:06d}.png"
        img_p, lab_p, ren_p = out / "images" / name, out / "labels" / name, out / "renders" / name
        write_rgb(img_p, rgb)
        write_labels(lab_p, pair.instances)
        write_gray8(ren_p, render[..., 0])
        records.append(ManifestRecord(str(img_p), str(lab_p), organ, "synthetic", "train", "synthetic", s, str(ren_p)))
    if G is not None:
        G.train(was_training)
    kwargs = {"created_at": created_at} if created_at else {}
    manifest = DatasetManifest(records, chash, **kwargs)
    manifest.save(manifest_path)
    return manifest
