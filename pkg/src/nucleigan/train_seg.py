"""Conditional adversarial segmentation: U-Net S maps H&E to a mask, and a
spectrally normalized patch discriminator D_M judges (image, mask) pairs."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .imaging import render_to_target, rgb_to_tensor
from .metrics import connected_components, remove_small
from .nn_blocks import NetworkSpec, build_patch_discriminator, build_unet_generator
from .stain_norm import InsufficientTissueError, StainBasis, normalize_image
from .train_synth import StepReport, _check_finite, lr_schedule, set_lr, set_requires_grad

logger = logging.getLogger(__name__)


@dataclass
class JitterParams:
    resize_to: int = 286
    crop_to: int = 256
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.crop_to > self.resize_to:
            raise ValueError("crop_to must not exceed resize_to")


@dataclass
class SegTrainConfig:
    epochs: int = 400
    lr: float = 2e-4
    lr_decay_start_epoch: int = 200
    batch_size: int = 1
    jitter: JitterParams = field(default_factory=JitterParams)
    pool_size: int = 64
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adversarial: bool = True
    image_channels: int = 3
    mask_channels: int = 1
    gen_width: int = 64
    n_levels: int = 8
    disc_width: int = 64
    n_power_iters: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.jitter, dict):
            self.jitter = JitterParams(**self.jitter)
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if not 0 <= self.lr_decay_start_epoch < self.epochs:
            raise ValueError("lr_decay_start_epoch must lie in [0, epochs)")

    def to_dict(self) -> dict:
        return asdict(self)


def jitter_pair(img: torch.Tensor, mask: torch.Tensor, cfg: SegTrainConfig | JitterParams, seed: int):
    """Upscale both tensors, then crop them at the same seed-chosen offset.

    The image is resized bilinearly, the mask with nearest-neighbour
    sampling on the same pixel-center grid so the pair stays aligned.
    """
    jp = cfg.jitter if isinstance(cfg, SegTrainConfig) else cfg
    size = (jp.resize_to, jp.resize_to)
    big_img = F.interpolate(img, size=size, mode="bilinear", align_corners=False)
    big_mask = F.interpolate(mask, size=size, mode="nearest-exact")
    rng = np.random.default_rng(seed)
    top, left = (int(v) for v in rng.integers(0, jp.resize_to - jp.crop_to + 1, size=2))
    sl = (..., slice(top, top + jp.crop_to), slice(left, left + jp.crop_to))
    return big_img[sl], big_mask[sl]


class ImagePool:
    """History buffer of generated (image, mask) pairs."""

    def __init__(self, capacity: int = 64, seed: int = 0):
        self.capacity = capacity
        self.buffer: list[tuple[torch.Tensor, torch.Tensor]] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.buffer)

    def query(self, pair):
        return pool_query(self, pair)


def pool_query(pool: ImagePool, pair):
    if pool.capacity <= 0:
        return pair
    pair = (pair[0].detach(), pair[1].detach())
    if len(pool.buffer) < pool.capacity:
        pool.buffer.append(pair)
        return pair
    if pool.rng.random() < 0.5:
        return pair
    idx = int(pool.rng.integers(len(pool.buffer)))
    old = pool.buffer[idx]
    pool.buffer[idx] = pair
    return old


class SegModel:
    def __init__(self, cfg: SegTrainConfig):
        self.cfg = cfg
        self.S_spec = NetworkSpec("unet_generator", cfg.image_channels, cfg.mask_channels, cfg.gen_width, n_levels=cfg.n_levels)
        self.D_spec = NetworkSpec(
            "patch_discriminator", cfg.image_channels + cfg.mask_channels, 1, cfg.disc_width, spectral_norm=True
        )
        self.S = build_unet_generator(self.S_spec, seed=cfg.seed)
        self.D_M = build_patch_discriminator(self.D_spec, seed=cfg.seed + 1)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_s = torch.optim.Adam(self.S.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.D_M.parameters(), lr=cfg.lr, betas=betas)
        self.pool = ImagePool(cfg.pool_size, seed=cfg.seed)

    def discriminate(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.D_M(torch.cat([image, mask], dim=1))

    def set_lr(self, lr: float) -> None:
        set_lr(self.opt_s, lr)
        set_lr(self.opt_d, lr)

    def train(self, mode: bool = True) -> None:
        self.S.train(mode)
        self.D_M.train(mode)


def train_step_seg(model: SegModel, n: torch.Tensor, m: torch.Tensor, step_seed: int = 0, keep_tensors: bool = False) -> StepReport:
    """Update S on adversarial + weighted L1, then D_M on real vs pooled fake pairs."""
    cfg, w = model.cfg, model.cfg.weights
    fake = model.S(n)
    gen: dict[str, torch.Tensor] = {"l1": L.l1_term(fake, m)}
    tensors: dict[str, torch.Tensor] = {}
    if cfg.adversarial:
        set_requires_grad([model.D_M], False)
        score_g = model.discriminate(n, fake)
        gen["gen_adv"] = L.gan_loss_generator(score_g)
        gen["gen_total"] = gen["gen_adv"] + w.l1_weight * gen["l1"]
        tensors["score_g"] = score_g.detach()
    else:
        gen["gen_total"] = w.l1_weight * gen["l1"]
    _check_finite(gen, "segmenter step")
    model.opt_s.zero_grad(set_to_none=True)
    gen["gen_total"].backward()
    model.opt_s.step()

    disc: dict[str, torch.Tensor] = {}
    if cfg.adversarial:
        set_requires_grad([model.D_M], True)
        pooled_img, pooled_mask = pool_query(model.pool, (n, fake.detach()))
        real_scores = model.discriminate(n, m)
        fake_scores = model.discriminate(pooled_img, pooled_mask)
        disc["disc_gan"] = L.gan_loss_discriminator(real_scores, fake_scores)
        total = disc["disc_gan"]
        if w.gp_enabled:
            disc["gp"] = L.gradient_penalty(model.discriminate, (n, m), (pooled_img, pooled_mask), step_seed)
            total = total + w.gp_weight * disc["gp"]
        disc["disc_total"] = total
        _check_finite(disc, "discriminator step")
        model.opt_d.zero_grad(set_to_none=True)
        total.backward()
        model.opt_d.step()
        tensors.update(real_scores=real_scores.detach(), fake_scores=fake_scores.detach(),
                       pooled_img=pooled_img, pooled_mask=pooled_mask)

    report = {k: float(v.detach()) for k, v in {**gen, **disc}.items()}
    if keep_tensors:
        tensors.update(n=n, m=m, fake=fake.detach())
    else:
        tensors = {}
    return StepReport(report, tensors)


def train_segmenter(
    model: SegModel,
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    epochs: int | None = None,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> list[dict]:
    """Train on (uint8 RGB, uint8 mask render) pairs; returns per-epoch loss means."""
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed + 7)
    model.train(True)
    history = []
    step = 0
    for epoch in range(epochs):
        model.set_lr(lr_schedule(cfg, min(epoch, cfg.epochs)))
        sums: dict[str, float] = {}
        for idx in rng.permutation(len(pairs)):
            rgb, render = pairs[idx]
            n, m = rgb_to_tensor(rgb), render_to_target(render)
            if cfg.jitter.enabled:
                n, m = jitter_pair(n, m, cfg, seed=int(rng.integers(2**31 - 1)))
            rep = train_step_seg(model, n, m, step_seed=cfg.seed * 1_000_003 + step)
            step += 1
            for k, v in rep.losses.items():
                sums[k] = sums.get(k, 0.0) + v
        means = {k: v / max(len(pairs), 1) for k, v in sums.items()}
        history.append(means)
        if on_epoch is not None:
            on_epoch(epoch, means)
        logger.info("seg epoch %d: %s", epoch, means)
    return history


def tile_origins(length: int, tile: int, overlap: int) -> list[int]:
    if length <= tile:
        return [0]
    stride = tile - overlap
    if stride <= 0:
        raise ValueError("overlap must be smaller than the tile size")
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] + tile < length:
        starts.append(length - tile)
    return starts


def feather_weights(tile: int, overlap: int) -> np.ndarray:
    ramp = np.minimum(np.arange(tile) + 1, np.arange(tile)[::-1] + 1)
    w1 = np.minimum(ramp, overlap + 1) / (overlap + 1)
    return np.outer(w1, w1)


@torch.no_grad()
def segment_image(
    S: torch.nn.Module,
    img: np.ndarray,
    tile: int = 256,
    overlap: int = 32,
    target_basis: StainBasis | None = None,
    min_area: int = 30,
    stain_seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Tile, predict and blend; returns (probability map in [0, 1], instance map).

    Pixels whose blended Tanh output is positive are foreground; 8-connected
    components smaller than ``min_area`` pixels are dropped.
    """
    img = np.asarray(img, dtype=np.uint8)
    if target_basis is not None:
        try:
            img = normalize_image(img, target_basis, seed=stain_seed)
        except InsufficientTissueError:
            logger.warning("too little tissue to stain-normalize; using raw colors")
    H, W = img.shape[:2]
    ph, pw = max(tile - H, 0), max(tile - W, 0)
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    Hp, Wp = img.shape[:2]
    was_training = S.training
    S.eval()
    acc = np.zeros((Hp, Wp), np.float64)
    wsum = np.zeros((Hp, Wp), np.float64)
    fw = feather_weights(tile, overlap)
    for top in tile_origins(Hp, tile, overlap):
        for left in tile_origins(Wp, tile, overlap):
            patch = img[top : top + tile, left : left + tile]
            out = S(rgb_to_tensor(patch))[0, 0].double().numpy()
            acc[top : top + tile, left : left + tile] += fw * out
            wsum[top : top + tile, left : left + tile] += fw
    S.train(was_training)
    blended = (acc / wsum)[:H, :W]
    prob = (blended + 1.0) / 2.0
    instances = remove_small(connected_components(blended > 0, 8), min_area)
    return prob, instances
