"""Generators, the 70x70 patch discriminator and spectral normalization."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize

INIT_STD = 0.02


@dataclass
class NetworkSpec:
    kind: str  # resnet_generator | unet_generator | patch_discriminator
    in_channels: int = 3
    out_channels: int = 3
    base_width: int = 64
    n_resblocks: int = 9
    n_levels: int = 8
    norm: str = "instance"
    spectral_norm: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("resnet_generator", "unet_generator", "patch_discriminator"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.kind == "resnet_generator" and self.n_resblocks < 1:
            raise ValueError("resnet_generator needs at least one residual block")
        if self.kind == "unet_generator" and self.n_levels < 2:
            raise ValueError("unet_generator needs n_levels >= 2")
        if self.norm not in ("instance", "batch", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.Identity()


def spectral_normalize(
    weight: torch.Tensor, u: torch.Tensor, n_power_iters: int = 1, eps: float = 1e-12
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Divide ``weight`` by a power-iteration estimate of its spectral norm.

    ``weight`` is viewed as (out_features, -1). Returns the normalized weight
    (same shape as the input), the updated left singular vector estimate and
    the estimate sigma = u^T W v. Gradients flow through ``weight`` only.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        v = F.normalize(mat.t() @ u, dim=0, eps=eps)
        for i in range(n_power_iters):
            if i > 0:
                v = F.normalize(mat.t() @ u, dim=0, eps=eps)
            u = F.normalize(mat @ v, dim=0, eps=eps)
    sigma = torch.dot(u, mat @ v).clamp_min(eps)
    return weight / sigma, u, sigma


class SpectralNorm(nn.Module):
    """Parametrization keeping a persistent ``u`` per weight.

    In training mode every forward pass runs ``n_power_iters`` rounds of
    power iteration and stores the new ``u``; in eval mode ``u`` is frozen.
    """

    def __init__(self, weight: torch.Tensor, n_power_iters: int = 1, generator: torch.Generator | None = None):
        super().__init__()
        self.n_power_iters = n_power_iters
        u = torch.randn(weight.shape[0], generator=generator, dtype=weight.dtype)
        self.register_buffer("u", F.normalize(u, dim=0))

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        if self.training:
            w, u, _ = spectral_normalize(weight, self.u, self.n_power_iters)
            self.u.copy_(u)
            return w
        w, _, _ = spectral_normalize(weight, self.u, 0)
        return w


def apply_spectral_norm(module: nn.Module, n_power_iters: int = 1, seed: int = 0) -> nn.Module:
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)) and not parametrize.is_parametrized(m, "weight"):
            parametrize.register_parametrization(m, "weight", SpectralNorm(m.weight, n_power_iters, gen))
    return module


def init_weights(module: nn.Module, std: float = INIT_STD, generator: torch.Generator | None = None) -> None:
    """Gaussian(0, std) conv weights, zero biases, N(1, std) norm scales."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.weight is not None:
            with torch.no_grad():
                m.weight.normal_(1.0, std, generator=generator)
                m.bias.zero_()


class ResnetBlock(nn.Module):
    def __init__(self, dim: int, norm: str):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            _norm(norm, dim),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            _norm(norm, dim),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Stem, two stride-2 downsamplings, residual blocks, two x2 upsamplings."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(spec.in_channels, w, 7),
            _norm(spec.norm, w),
            nn.ReLU(True),
        ]
        for i in range(2):
            c = w * 2**i
            layers += [
                nn.Conv2d(c, 2 * c, 3, stride=2, padding=1, padding_mode="reflect"),
                _norm(spec.norm, 2 * c),
                nn.ReLU(True),
            ]
        layers += [ResnetBlock(4 * w, spec.norm) for _ in range(spec.n_resblocks)]
        for i in range(2):
            c = w * 2 ** (2 - i)
            layers += [
                nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1),
                _norm(spec.norm, c // 2),
                nn.ReLU(True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, spec.out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ValueError(f"input spatial dims must be divisible by 4, got {tuple(x.shape[-2:])}")
        return self.model(x)


class UnetGenerator(nn.Module):
    """Encoder-decoder whose i-th encoder output is concatenated into the
    mirrored decoder stage; a final convolution and Tanh produce the mask."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        L, w = spec.n_levels, spec.base_width
        chans = [w * min(2**i, 8) for i in range(L)]
        self.down = nn.ModuleList()
        for i in range(L):
            cin = spec.in_channels if i == 0 else chans[i - 1]
            layers: list[nn.Module] = []
            if i > 0:
                layers.append(nn.LeakyReLU(0.2))
            layers.append(nn.Conv2d(cin, chans[i], 4, stride=2, padding=1))
            if 0 < i < L - 1:
                layers.append(_norm(spec.norm, chans[i]))
            self.down.append(nn.Sequential(*layers))
        self.up = nn.ModuleList()
        for i in reversed(range(L)):
            cin = chans[i] if i == L - 1 else 2 * chans[i]
            cout = chans[i - 1] if i > 0 else w
            self.up.append(
                nn.Sequential(
                    nn.ReLU(),
                    nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
                    _norm(spec.norm, cout),
                )
            )
        self.head = nn.Sequential(
            nn.ReLU(),
            nn.ReflectionPad2d(1),
            nn.Conv2d(w, spec.out_channels, 3),
            nn.Tanh(),
        )

    def _check(self, x):
        f = 2**self.spec.n_levels
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ValueError(f"input spatial dims must be divisible by {f}, got {tuple(x.shape[-2:])}")

    def encode(self, x) -> list[torch.Tensor]:
        self._check(x)
        feats = []
        for layer in self.down:
            x = layer(x)
            feats.append(x)
        return feats

    def forward(self, x):
        feats = self.encode(x)
        h = feats[-1]
        for j, layer in enumerate(self.up):
            if j > 0:
                h = torch.cat([h, feats[-1 - j]], dim=1)
            h = layer(h)
        return self.head(h)


class PatchDiscriminator(nn.Module):
    """Three stride-2 and two stride-1 4x4 convolutions; each score sees 70x70."""

    kernel_sizes = (4, 4, 4, 4, 4)
    strides = (2, 2, 2, 1, 1)

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        chans = [spec.in_channels, w, 2 * w, 4 * w, 8 * w]
        layers: list[nn.Module] = []
        for i in range(4):
            layers.append(nn.Conv2d(chans[i], chans[i + 1], 4, stride=self.strides[i], padding=1))
            if i > 0:
                layers.append(_norm(spec.norm, chans[i + 1]))
            layers.append(nn.LeakyReLU(0.2))
        layers.append(nn.Conv2d(chans[4], spec.out_channels, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def receptive_field(kernel_sizes, strides) -> int:
    rf = 1
    for k, s in zip(reversed(kernel_sizes), reversed(strides)):
        rf = (rf - 1) * s + k
    return rf


def build_resnet_generator(spec: NetworkSpec, seed: int = 0) -> ResnetGenerator:
    if spec.kind != "resnet_generator":
        raise ValueError("spec.kind must be resnet_generator")
    return _finish(ResnetGenerator(spec), spec, seed)


def build_unet_generator(spec: NetworkSpec, seed: int = 0) -> UnetGenerator:
    if spec.kind != "unet_generator":
        raise ValueError("spec.kind must be unet_generator")
    return _finish(UnetGenerator(spec), spec, seed)


def build_patch_discriminator(spec: NetworkSpec, seed: int = 0) -> PatchDiscriminator:
    if spec.kind != "patch_discriminator":
        raise ValueError("spec.kind must be patch_discriminator")
    return _finish(PatchDiscriminator(spec), spec, seed)


def build_network(spec: NetworkSpec, seed: int = 0) -> nn.Module:
    builders = {
        "resnet_generator": build_resnet_generator,
        "unet_generator": build_unet_generator,
        "patch_discriminator": build_patch_discriminator,
    }
    return builders[spec.kind](spec, seed)


def _finish(net: nn.Module, spec: NetworkSpec, seed: int) -> nn.Module:
    init_weights(net, generator=torch.Generator().manual_seed(seed))
    if spec.spectral_norm:
        apply_spectral_norm(net, seed=seed + 1)
    return net


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
