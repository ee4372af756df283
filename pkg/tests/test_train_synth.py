import numpy as np
import pytest
import torch
from skimage.draw import disk

from nucleigan import losses as L
from nucleigan.imaging import read_labels, read_rgb, render_to_tensor, rgb_to_tensor
from nucleigan.manifest import DatasetManifest
from nucleigan.mask_synth import SamplerParams, disk_dictionary, render_mask_image, sample_mask
from nucleigan.nn_blocks import NetworkSpec, build_resnet_generator
from nucleigan.toy import colorize_render
from nucleigan.train_seg import SegTrainConfig
from nucleigan.train_synth import (
    CycleGAN,
    NonFiniteLossError,
    SynthTrainConfig,
    generate_synthetic_dataset,
    lr_schedule,
    pair_seeds,
    train_step_synth,
)


def tiny_cfg(**kw):
    base = dict(epochs=10, lr_decay_start_epoch=5, gen_width=4, n_resblocks=1, disc_width=4, seed=0)
    base.update(kw)
    return SynthTrainConfig(**base)


def toy_batch(seed, size=32):
    """A disk render (mask domain) and an independent colorized disk image."""
    rng = np.random.default_rng(seed)
    def render():
        r = np.zeros((size, size), np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            rad = int(rng.integers(3, 7))
            cy, cx = rng.integers(rad, size - rad, size=2)
            r[disk((cy, cx), rad, shape=r.shape)] = 255
        return r
    m = render_to_tensor(render())
    n = rgb_to_tensor(colorize_render(render(), seed, noise_std=4.0))
    return m, n


class TestSchedule:
    @pytest.mark.parametrize(
        "epochs,decay,epoch,want",
        [(300, 150, 0, 2e-4), (300, 150, 149, 2e-4), (300, 150, 225, 1e-4), (300, 150, 300, 0.0),
         (400, 200, 0, 2e-4), (400, 200, 300, 1e-4), (400, 200, 400, 0.0)],
    )
    def test_values(self, epochs, decay, epoch, want):
        cfg = SynthTrainConfig(epochs=epochs, lr_decay_start_epoch=decay)
        assert lr_schedule(cfg, epoch) == pytest.approx(want, abs=1e-18)

    def test_segmentation_regime(self):
        assert lr_schedule(SegTrainConfig(), 300) == pytest.approx(1e-4, abs=1e-18)

    @pytest.mark.parametrize("epoch", [-1, 301])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            lr_schedule(SynthTrainConfig(), epoch)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SynthTrainConfig(epochs=100, lr_decay_start_epoch=100)

    def test_defaults(self):
        cfg = SynthTrainConfig()
        assert (cfg.epochs, cfg.lr, cfg.lr_decay_start_epoch, cfg.batch_size) == (300, 2e-4, 150, 1)
        assert (cfg.adam_beta1, cfg.adam_beta2) == (0.5, 0.999)
        assert cfg.disc_loss_halved and not cfg.weights.gp_enabled
        assert cfg.weights.lambda_m < cfg.weights.lambda_n


def params_of(model):
    return {f"{name}.{k}": p.detach().clone() for name, net in model.nets.items() for k, p in net.named_parameters()}


class TestStep:
    def test_zero_lr_keeps_weights(self):
        model = CycleGAN(tiny_cfg(lr=0.0))
        before = params_of(model)
        m, n = toy_batch(0)
        train_step_synth(model, m, n)
        after = params_of(model)
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_determinism(self):
        reports = []
        for _ in range(2):
            torch.manual_seed(0)
            model = CycleGAN(tiny_cfg())
            reps = [train_step_synth(model, *toy_batch(i), step_seed=i).losses for i in range(3)]
            reports.append((reps, params_of(model)))
        assert reports[0][0] == reports[1][0]
        assert all(torch.equal(reports[0][1][k], reports[1][1][k]) for k in reports[0][1])

    def test_compositional(self):
        model = CycleGAN(tiny_cfg())
        m, n = toy_batch(1)
        rep = train_step_synth(model, m, n, keep_tensors=True)
        t, w = rep.tensors, model.cfg.weights
        want = {
            "gen_adv_n": L.gan_loss_generator(t["score_fake_n"]),
            "gen_adv_m": L.gan_loss_generator(t["score_fake_m"]),
            "cycle": L.cycle_loss(m, n, t["rec_m"], t["rec_n"], w),
            "disc_n": 0.5 * L.gan_loss_discriminator(t["score_real_n"], t["score_fake_n_d"]),
            "disc_m": 0.5 * L.gan_loss_discriminator(t["score_real_m"], t["score_fake_m_d"]),
        }
        for k, v in want.items():
            assert rep.losses[k] == float(v), k
        assert rep.losses["gen_total"] == pytest.approx(
            rep.losses["gen_adv_n"] + rep.losses["gen_adv_m"] + rep.losses["cycle"], rel=1e-6)

    def test_discriminator_halving(self):
        grads = []
        for halved in (True, False):
            model = CycleGAN(tiny_cfg(disc_loss_halved=halved))
            train_step_synth(model, *toy_batch(2))
            grads.append([p.grad.clone() for net in (model.D_N, model.D_M) for p in net.parameters()])
        for gh, gf in zip(*grads):
            assert torch.equal(gh, 0.5 * gf)

    def test_non_finite_aborts(self):
        model = CycleGAN(tiny_cfg())
        m, n = toy_batch(3)
        with pytest.raises(NonFiniteLossError) as exc:
            train_step_synth(model, m, n * float("nan"))
        assert "cycle" in exc.value.snapshot

    def test_shape_mismatch(self):
        model = CycleGAN(tiny_cfg())
        with pytest.raises(ValueError):
            train_step_synth(model, torch.zeros(1, 1, 32, 32), torch.zeros(1, 3, 64, 64))

    def test_toy_cycle_decreases(self):
        torch.manual_seed(0)
        model = CycleGAN(tiny_cfg(gen_width=8, n_resblocks=2, disc_width=8))
        model.train(True)
        vals = [train_step_synth(model, *toy_batch(100 + i), step_seed=i).losses["cycle_n"] for i in range(200)]
        assert np.mean(vals[-10:]) <= 0.7 * vals[0]


class TestGenerate:
    def setup_method(self):
        self.G = build_resnet_generator(NetworkSpec("resnet_generator", 1, 3, 2, 1))
        self.dict = disk_dictionary([4.0, 5.0, 6.0])
        self.params = SamplerParams(canvas=(64, 64), target_count=4)

    def test_pass_through(self, tmp_path):
        man = generate_synthetic_dataset(self.G, self.dict, 5, 7, tmp_path / "out", self.params,
                                         created_at="2000-01-01T00:00:00Z")
        assert len(man) == 5
        seeds = pair_seeds(7, 5)
        for rec, s in zip(man.records, seeds):
            assert rec.seed == s and rec.source == "synthetic"
            img = read_rgb(rec.image)
            assert img.dtype == np.uint8 and img.shape == (64, 64, 3)
            want = sample_mask(self.dict, self.params, s).instances
            assert read_labels(rec.instance_map).tobytes() == want.astype(np.int32).tobytes()
            assert np.array_equal(read_labels(rec.render), render_mask_image(want)[..., 0])
        loaded = DatasetManifest.load(tmp_path / "out" / "manifest.json")
        assert [r.seed for r in loaded.records] == seeds
        assert loaded.config_hash == man.config_hash
        loaded.validate()

    def test_zero_count(self, tmp_path):
        man = generate_synthetic_dataset(self.G, self.dict, 0, 1, tmp_path / "z", self.params)
        assert len(man) == 0
        assert not any(p.is_file() and p.suffix == ".png" for p in (tmp_path / "z").rglob("*"))

    def test_collision(self, tmp_path):
        generate_synthetic_dataset(self.G, self.dict, 1, 1, tmp_path / "c", self.params)
        with pytest.raises(FileExistsError):
            generate_synthetic_dataset(self.G, self.dict, 1, 1, tmp_path / "c", self.params)
        generate_synthetic_dataset(self.G, self.dict, 1, 1, tmp_path / "c", self.params, overwrite=True)

    def test_deterministic_bytes(self, tmp_path):
        kw = dict(created_at="2000-01-01T00:00:00Z")
        generate_synthetic_dataset(self.G, self.dict, 3, 2, tmp_path / "a", self.params, **kw)
        generate_synthetic_dataset(self.G, self.dict, 3, 2, tmp_path / "b", self.params, **kw)
        for sub in ("images", "labels", "renders"):
            for pa in sorted((tmp_path / "a" / sub).iterdir()):
                assert pa.read_bytes() == (tmp_path / "b" / sub / pa.name).read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    @pytest.mark.slow
    def test_paper_count(self, tmp_path):
        params = SamplerParams(canvas=(64, 64), target_count=3)
        man = generate_synthetic_dataset(self.G, self.dict, 4650, 0, tmp_path / "big", params)
        assert len(man) == 4650
        assert len(list((tmp_path / "big" / "images").iterdir())) == 4650
