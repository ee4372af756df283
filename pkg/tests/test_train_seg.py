import numpy as np
import pytest
import torch

from nucleigan import losses as L
from nucleigan.imaging import render_to_target, rgb_to_tensor
from nucleigan.mask_synth import SamplerParams, disk_dictionary, render_mask_image, sample_mask
from nucleigan.metrics import aji
from nucleigan.toy import colorize_render
from nucleigan.train_seg import (
    ImagePool,
    JitterParams,
    SegModel,
    SegTrainConfig,
    feather_weights,
    jitter_pair,
    pool_query,
    segment_image,
    tile_origins,
    train_segmenter,
    train_step_seg,
)
from nucleigan.train_synth import NonFiniteLossError


def tiny_cfg(**kw):
    base = dict(epochs=4, lr_decay_start_epoch=2, gen_width=4, n_levels=4, disc_width=4,
                jitter=JitterParams(72, 64), pool_size=4, seed=0)
    base.update(kw)
    return SegTrainConfig(**base)


DICT = disk_dictionary([5.0, 6.0, 7.0])


def toy_pair(seed, size=64, count=5):
    pair = sample_mask(DICT, SamplerParams(canvas=(size, size), target_count=count), seed)
    render = render_mask_image(pair)
    return colorize_render(render, seed), render, pair.instances


class TestJitter:
    def test_size_and_determinism(self):
        img, mask = torch.rand(1, 3, 256, 256), torch.rand(1, 1, 256, 256)
        a = jitter_pair(img, mask, JitterParams(), seed=4)
        b = jitter_pair(img, mask, JitterParams(), seed=4)
        assert a[0].shape == (1, 3, 256, 256) and a[1].shape == (1, 1, 256, 256)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    @pytest.mark.parametrize("seed", range(5))
    def test_alignment(self, seed):
        rows, cols = torch.meshgrid(torch.arange(256.0), torch.arange(256.0), indexing="ij")
        grid = torch.stack([rows, cols])[None]
        img, mask = jitter_pair(grid, grid.clone(), JitterParams(), seed)
        c = 128
        # bilinear and nearest samples of the same source location differ by < 1 pixel
        assert torch.all((img[0, :, c, c] - mask[0, :, c, c]).abs() <= 0.5 + 1e-4)
        assert torch.all((img - mask).abs().amax(dim=(2, 3)) <= 0.5 + 1e-4)

    def test_binary_mask_stays_binary(self):
        m = render_to_target(toy_pair(0, size=256)[1])
        _, jm = jitter_pair(torch.zeros(1, 3, 256, 256), m, JitterParams(), 1)
        assert set(torch.unique(jm).tolist()) <= {-1.0, 1.0}

    def test_crop_not_larger(self):
        with pytest.raises(ValueError):
            JitterParams(resize_to=200, crop_to=256)


class TestPool:
    def test_fill_phase(self):
        pool = ImagePool(64, seed=0)
        for i in range(64):
            pair = (torch.full((1,), float(i)), torch.full((1,), float(-i)))
            out = pool_query(pool, pair)
            assert float(out[0]) == i and float(out[1]) == -i
        assert len(pool) == 64

    def test_return_fraction(self):
        pool = ImagePool(64, seed=1)
        for i in range(64):
            pool_query(pool, (torch.tensor([-1.0]), torch.tensor([-1.0])))
        own = 0
        for i in range(10_000):
            out = pool_query(pool, (torch.tensor([float(i)]), torch.tensor([0.0])))
            own += float(out[0]) == i
            assert len(pool) <= 64
        assert abs(own / 10_000 - 0.5) <= 0.02

    def test_zero_capacity(self):
        pool = ImagePool(0)
        pair = (torch.ones(1), torch.zeros(1))
        assert pool_query(pool, pair) is pair and len(pool) == 0


class TestStep:
    def batch(self, seed=0):
        img, render, _ = toy_pair(seed)
        return rgb_to_tensor(img), render_to_target(render)

    def test_zero_lr(self):
        model = SegModel(tiny_cfg(lr=0.0))
        before = [p.detach().clone() for p in list(model.S.parameters()) + list(model.D_M.parameters())]
        train_step_seg(model, *self.batch())
        after = list(model.S.parameters()) + list(model.D_M.parameters())
        assert all(torch.equal(a, b) for a, b in zip(before, after))

    def test_discriminator_channels(self):
        model = SegModel(tiny_cfg())
        first = model.D_M.model[0]
        assert first.in_channels == 3 + 1
        n, m = self.batch()
        assert model.discriminate(n, m).shape[1] == 1

    def test_compositional(self):
        model = SegModel(tiny_cfg())
        n, m = self.batch(1)
        rep = train_step_seg(model, n, m, step_seed=3, keep_tensors=True)
        t, w, l = rep.tensors, model.cfg.weights, rep.losses
        assert l["l1"] == float(L.l1_term(t["fake"], m))
        assert l["gen_adv"] == float(L.gan_loss_generator(t["score_g"]))
        assert l["gen_total"] == pytest.approx(l["gen_adv"] + w.l1_weight * l["l1"], rel=1e-6)
        assert l["disc_gan"] == float(L.gan_loss_discriminator(t["real_scores"], t["fake_scores"]))
        assert l["disc_total"] == pytest.approx(l["disc_gan"] + w.gp_weight * l["gp"], rel=1e-6)
        # first query fills the pool, so the pooled fake is the current one
        assert torch.equal(t["pooled_mask"], t["fake"])

    def test_l1_only(self):
        model = SegModel(tiny_cfg(adversarial=False))
        before = [p.detach().clone() for p in model.D_M.parameters()]
        rep = train_step_seg(model, *self.batch())
        assert set(rep.losses) == {"l1", "gen_total"}
        assert all(torch.equal(a, b) for a, b in zip(before, model.D_M.parameters()))

    def test_non_finite(self):
        model = SegModel(tiny_cfg())
        n, m = self.batch()
        with pytest.raises(NonFiniteLossError):
            train_step_seg(model, n, m * float("nan"))

    def test_training_reduces_l1(self):
        pairs = [toy_pair(s)[:2] for s in range(12)]
        model = SegModel(tiny_cfg(epochs=6, lr_decay_start_epoch=5, gen_width=8))
        hist = train_segmenter(model, pairs)
        assert len(hist) == 6
        assert hist[-1]["l1"] < hist[0]["l1"]


class _RenderIdentity(torch.nn.Module):
    def forward(self, x):
        return x[:, :1]


class TestSegment:
    def test_oracle_identity(self):
        pair = sample_mask(DICT, SamplerParams(canvas=(300, 300), target_count=25, clump_fraction=0.0, max_overlap=0.0), 3)
        img = render_mask_image(pair)
        prob, inst = segment_image(_RenderIdentity(), img, tile=128, overlap=32)
        assert prob.shape == (300, 300)
        assert aji(pair.instances, inst) == 1.0

    def test_small_image_padded(self):
        img = render_mask_image(sample_mask(DICT, SamplerParams(canvas=(64, 64), target_count=3, clump_fraction=0.0), 1))[:50, :60]
        prob, inst = segment_image(_RenderIdentity(), img, tile=64, overlap=8, min_area=1)
        assert prob.shape == (50, 60) and inst.shape == (50, 60)
        np.testing.assert_array_equal(inst > 0, img[..., 0] > 127)

    def test_coverage(self):
        starts = tile_origins(1000, 256, 32)
        covered = np.zeros(1000, int)
        for s in starts:
            covered[s : s + 256] += 1
        assert covered.min() >= 1
        assert starts[-1] + 256 == 1000
        assert all(b - a <= 256 - 32 for a, b in zip(starts, starts[1:]))

    def test_feather(self):
        w = feather_weights(64, 8)
        assert w.min() > 0 and w.max() == 1.0
        assert w[32, 32] == 1.0 and w[0, 0] < w[4, 4]

    def test_min_area_filter(self):
        img = np.zeros((64, 64, 3), np.uint8)
        img[5:10, 5:10] = 255  # 25 px, dropped
        img[30:40, 30:40] = 255  # 100 px, kept
        _, inst = segment_image(_RenderIdentity(), img, tile=64, overlap=8)
        assert inst.max() == 1 and inst[35, 35] == 1 and inst[7, 7] == 0

    def test_deterministic(self):
        model = SegModel(tiny_cfg())
        img = toy_pair(2, size=160)[0]
        a = segment_image(model.S, img, tile=64, overlap=16)
        b = segment_image(model.S, img, tile=64, overlap=16)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
