"""Adversarial, cycle-consistency, L1 and gradient-penalty objectives.

Discriminator scores are pre-sigmoid logits; BCE uses natural logs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    lambda_n: float = 70.0
    lambda_m: float = 10.0
    l1_weight: float = 100.0
    gp_weight: float = 10.0
    gp_enabled: bool = True

    def __post_init__(self) -> None:
        for name in ("lambda_n", "lambda_m", "l1_weight", "gp_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def gan_loss_discriminator(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    _same_shape(real_scores, fake_scores, "gan_loss_discriminator")
    real = F.binary_cross_entropy_with_logits(real_scores, torch.ones_like(real_scores))
    fake = F.binary_cross_entropy_with_logits(fake_scores, torch.zeros_like(fake_scores))
    return real + fake


def gan_loss_generator(fake_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss, mean BCE against the 'real' label."""
    return F.binary_cross_entropy_with_logits(fake_scores, torch.ones_like(fake_scores))


def cycle_loss(
    m: torch.Tensor,
    n: torch.Tensor,
    m_rec: torch.Tensor,
    n_rec: torch.Tensor,
    w: LossWeights,
) -> torch.Tensor:
    """``w.lambda_n * mean|G(S(n)) - n| + w.lambda_m * mean|S(G(m)) - m|``.

    ``m_rec`` is S(G(m)) and ``n_rec`` is G(S(n)).
    """
    _same_shape(m, m_rec, "cycle_loss (mask cycle)")
    _same_shape(n, n_rec, "cycle_loss (image cycle)")
    return w.lambda_n * (n_rec - n).abs().mean() + w.lambda_m * (m_rec - m).abs().mean()


def l1_term(pred_mask: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    _same_shape(pred_mask, gt_mask, "l1_term")
    return (pred_mask - gt_mask).abs().mean()


def interpolation_weights(batch: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.rand(batch, generator=gen, dtype=dtype)


def gradient_penalty(
    discriminator: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    real_pair: tuple[torch.Tensor, torch.Tensor],
    fake_pair: tuple[torch.Tensor, torch.Tensor],
    seed: int,
    create_graph: bool = True,
) -> torch.Tensor:
    """Two-sided unit-norm penalty on masks interpolated between real and fake.

    ``discriminator(image, mask)`` returns a score map; the image stays at the
    real image while the mask moves along the segment, one uniform draw per
    sample. Returns mean over samples of (|grad mean D| - 1)^2.
    """
    image, real_mask = real_pair
    _, fake_mask = fake_pair
    _same_shape(real_mask, fake_mask, "gradient_penalty")
    b = real_mask.shape[0]
    t = interpolation_weights(b, seed, real_mask.dtype).to(real_mask.device).view(b, *([1] * (real_mask.dim() - 1)))
    x_hat = (t * real_mask.detach() + (1 - t) * fake_mask.detach()).requires_grad_(True)
    scores = discriminator(image, x_hat)
    per_sample = scores.reshape(b, -1).mean(dim=1)
    (grad,) = torch.autograd.grad(per_sample.sum(), x_hat, create_graph=create_graph)
    norms = grad.reshape(b, -1).norm(dim=1)
    return ((norms - 1) ** 2).mean()
