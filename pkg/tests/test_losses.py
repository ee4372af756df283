import math

import numpy as np
import pytest
import torch

from nucleigan.losses import (
    LossWeights,
    cycle_loss,
    gan_loss_discriminator,
    gan_loss_generator,
    gradient_penalty,
    interpolation_weights,
    l1_term,
)

from oracles import central_difference_grad

H64 = 1e-6
REL = 1e-3


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def check_grad(fn, *arrays, which=0):
    """Analytic gradient of scalar ``fn`` w.r.t. argument ``which`` vs central differences."""
    tens = [torch.tensor(a, dtype=torch.float64, requires_grad=(i == which)) for i, a in enumerate(arrays)]
    out = fn(*tens)
    (g,) = torch.autograd.grad(out, tens[which])

    def f(x):
        args = [torch.tensor(a, dtype=torch.float64) for a in arrays]
        args[which] = torch.tensor(x, dtype=torch.float64)
        return float(fn(*args))

    fd = central_difference_grad(f, arrays[which], H64)
    assert rel_err(g.numpy(), fd) < REL


def softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


class TestGanLosses:
    def test_disc_at_zero(self):
        z = torch.zeros(1, 1, 3, 3)
        assert float(gan_loss_discriminator(z, z)) == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_disc_perfect(self):
        real = torch.full((1, 1, 3, 3), 20.0, dtype=torch.float64)
        assert float(gan_loss_discriminator(real, -real)) < 1e-8

    def test_disc_shape_mismatch(self):
        with pytest.raises(ValueError):
            gan_loss_discriminator(torch.zeros(1, 1, 3, 3), torch.zeros(1, 1, 2, 3))

    def test_disc_against_scalar_oracle(self):
        rng = np.random.default_rng(0)
        r, f = rng.normal(size=(2, 1, 3, 3)) * 3
        want = np.mean([softplus(-x) for x in r.ravel()]) + np.mean([softplus(x) for x in f.ravel()])
        got = float(gan_loss_discriminator(torch.tensor(r), torch.tensor(f)))
        assert got == pytest.approx(want, rel=1e-12)

    def test_disc_monotone_along_ray(self):
        vals = [float(gan_loss_discriminator(torch.full((3, 3), t), torch.full((3, 3), -t))) for t in np.linspace(0, 20, 41)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("which", [0, 1])
    def test_disc_gradient(self, which):
        rng = np.random.default_rng(1)
        check_grad(gan_loss_discriminator, rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), which=which)

    def test_gen_values(self):
        assert float(gan_loss_generator(torch.zeros(3, 3))) == pytest.approx(math.log(2), abs=1e-7)
        assert float(gan_loss_generator(torch.full((3, 3), 20.0, dtype=torch.float64))) < 1e-8

    def test_gen_gradient(self):
        check_grad(gan_loss_generator, np.random.default_rng(2).normal(size=(3, 3)) * 2)

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = (torch.tensor(rng.normal(size=(2, 2)) * 5) for _ in range(2))
            assert float(gan_loss_discriminator(a, b)) >= 0 and float(gan_loss_generator(a)) >= 0


class TestCycle:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.m = torch.tensor(rng.uniform(-1, 1, (1, 1, 4, 4)))
        self.n = torch.tensor(rng.uniform(-1, 1, (1, 3, 4, 4)))
        self.w = LossWeights()

    def test_perfect(self):
        assert float(cycle_loss(self.m, self.n, self.m, self.n, self.w)) == 0.0

    def test_closed_form(self):
        got = float(cycle_loss(self.m, self.n, self.m, self.n + 0.01, self.w))
        assert got == pytest.approx(0.7, abs=1e-9)

    def test_relaxation_ratio(self):
        m = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
        n = torch.zeros_like(m)
        fwd = float(cycle_loss(m, n, m, n + 0.01, self.w))
        bwd = float(cycle_loss(m, n, m + 0.01, n, self.w))
        assert fwd / bwd == pytest.approx(7.0, rel=1e-12)
        assert self.w.lambda_m < self.w.lambda_n

    def test_swap_symmetry(self):
        rng = np.random.default_rng(5)
        a, b, c, d = (torch.tensor(rng.normal(size=(1, 3, 4, 4))) for _ in range(4))
        w1 = LossWeights(lambda_n=3.0, lambda_m=0.5)
        w2 = LossWeights(lambda_n=0.5, lambda_m=3.0)
        assert float(cycle_loss(a, b, c, d, w1)) == pytest.approx(float(cycle_loss(b, a, d, c, w2)), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cycle_loss(self.m, self.n, self.n, self.n, self.w)

    @pytest.mark.parametrize("which", [2, 3])
    def test_gradient(self, which):
        rng = np.random.default_rng(6)
        args = [rng.normal(size=(1, 1, 3, 3)), rng.normal(size=(1, 2, 3, 3)),
                rng.normal(size=(1, 1, 3, 3)), rng.normal(size=(1, 2, 3, 3))]
        check_grad(lambda *t: cycle_loss(*t, self.w), *args, which=which)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_n=-1.0)


class TestL1:
    def test_values(self):
        g = torch.rand(1, 1, 5, 5)
        assert float(l1_term(g, g)) == 0.0
        assert float(l1_term(g.double() + 0.5, g.double())) == pytest.approx(0.5, abs=1e-12)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(7)
        p, g = rng.uniform(-1, 1, (2, 1, 6, 6))
        total = 0.0
        for x, y in zip(p.ravel().tolist(), g.ravel().tolist()):
            total += abs(x - y)
        assert float(l1_term(torch.tensor(p), torch.tensor(g))) == pytest.approx(total / p.size, rel=1e-14)

    def test_gradient(self):
        rng = np.random.default_rng(8)
        check_grad(l1_term, rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))


class _LinearD(torch.nn.Module):
    """Score map linear in the mask; gradient of the mean score has norm |w|."""

    def __init__(self, w):
        super().__init__()
        self.w = torch.nn.Parameter(torch.as_tensor(w))

    def forward(self, image, mask):
        return (mask * self.w).sum(dim=(1, 2, 3)).view(-1, 1, 1, 1) + image.mean()


class _TinyD(torch.nn.Module):
    def __init__(self):
        super().__init__()
        g = torch.Generator().manual_seed(0)
        self.conv = torch.nn.Conv2d(2, 1, 3, padding=1).double()
        with torch.no_grad():
            self.conv.weight.copy_(torch.randn(self.conv.weight.shape, generator=g, dtype=torch.float64))

    def forward(self, image, mask):
        return torch.tanh(self.conv(torch.cat([image, mask], 1))) ** 2


class TestGradientPenalty:
    def setup_method(self):
        rng = np.random.default_rng(9)
        self.img = torch.tensor(rng.normal(size=(2, 1, 4, 4)))
        self.real = torch.tensor(rng.uniform(-1, 1, (2, 1, 4, 4)))
        self.fake = torch.tensor(rng.uniform(-1, 1, (2, 1, 4, 4)))

    def test_unit_linear(self):
        w = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        w[0, 0, 1, 2] = 1.0
        gp = gradient_penalty(_LinearD(w), (self.img, self.real), (self.img, self.fake), seed=0)
        assert float(gp.detach()) == pytest.approx(0.0, abs=1e-12)

    def test_constant(self):
        const = lambda image, mask: torch.zeros(mask.shape[0], 1, 2, 2, dtype=mask.dtype) + 0 * mask.sum()
        gp = gradient_penalty(const, (self.img, self.real), (self.img, self.fake), seed=0)
        assert float(gp.detach()) == 1.0

    def test_against_finite_differences(self):
        D = _TinyD()
        seed = 11
        got = float(gradient_penalty(D, (self.img, self.real), (self.img, self.fake), seed))
        t = interpolation_weights(2, seed, torch.float64).numpy()
        want = []
        for b in range(2):
            x_hat = t[b] * self.real[b : b + 1].numpy() + (1 - t[b]) * self.fake[b : b + 1].numpy()
            img = self.img[b : b + 1]
            f = lambda x: float(D(img, torch.tensor(x)).mean())
            g = central_difference_grad(f, x_hat, H64)
            want.append((np.linalg.norm(g) - 1.0) ** 2)
        assert got == pytest.approx(np.mean(want), rel=1e-3)

    def test_parameter_gradient(self):
        D = _TinyD()
        w0 = D.conv.weight.detach().clone()
        gp = gradient_penalty(D, (self.img, self.real), (self.img, self.fake), seed=3)
        (g,) = torch.autograd.grad(gp, D.conv.weight)

        def f(x):
            with torch.no_grad():
                D.conv.weight.copy_(torch.tensor(x))
            val = float(gradient_penalty(D, (self.img, self.real), (self.img, self.fake), seed=3, create_graph=False))
            return val

        fd = central_difference_grad(f, w0.numpy(), H64)
        with torch.no_grad():
            D.conv.weight.copy_(w0)
        assert rel_err(g.numpy(), fd) < REL

    def test_seeded(self):
        assert torch.equal(interpolation_weights(4, 7), interpolation_weights(4, 7))
        t = interpolation_weights(1000, 1)
        assert float(t.min()) >= 0 and float(t.max()) <= 1
