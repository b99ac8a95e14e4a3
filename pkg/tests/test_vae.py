import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficqc import nn, vae
from trafficqc.vae import VAE, VaeArch, VaeHyper

TOY = VaeArch(image_size=16, widths=(2, 2, 2, 2), latent_dim=3)


@pytest.fixture(scope="module")
def model():
    return VAE(seed=0).eval()


def test_encoder_shapes(model):
    x = torch.rand(1, 1, 64, 64)
    mu, logvar, feats = model.encode(x)
    assert [tuple(f.shape[1:]) for f in feats] == [(16, 32, 32), (32, 16, 16), (64, 8, 8), (128, 4, 4)]
    assert mu.shape == logvar.shape == (1, 64)
    assert VaeArch().flat_dim == 2048
    assert VaeArch().block_dims() == [16384, 8192, 4096, 2048]


def test_encoder_deterministic_in_eval(model):
    x = torch.rand(2, 1, 64, 64)
    a, b = model.encode(x), model.encode(x)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert all(torch.equal(f, g) for f, g in zip(a[2], b[2]))


def test_same_seed_same_weights():
    a, b = VAE(TOY, seed=3), VAE(TOY, seed=3)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    c = VAE(TOY, seed=4)
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("shape", [(1, 1, 32, 32), (1, 2, 64, 64), (1, 64, 64)])
def test_encoder_rejects_wrong_size(model, shape):
    with pytest.raises(nn.ShapeError):
        model.encode(torch.zeros(shape))


def test_decoder_shape_and_range(model):
    out = model.decode(torch.randn(3, 64) * 5)
    assert out.shape == (3, 1, 64, 64)
    assert torch.all(out > 0) and torch.all(out < 1)
    with pytest.raises(nn.ShapeError):
        model.decode(torch.zeros(3, 32))


def test_decoder_zero_weights():
    m = VAE(seed=1).eval()
    with torch.no_grad():
        for name, p in m.named_parameters():
            if name.startswith("dec") and name.endswith("weight") and p.dim() > 1:
                p.zero_()
        m.dec_blocks[-1].out.bias.fill_(0.3)
    out = m.decode(torch.randn(2, 64))
    torch.testing.assert_close(out, torch.full_like(out, 1 / (1 + math.exp(-0.3))))


def test_arch_rejects_indivisible_size():
    with pytest.raises(ValueError):
        VaeArch(image_size=8, widths=(2, 2, 2, 2))


class TestReparameterize:
    def test_zero_eps(self):
        mu, logvar = torch.randn(2, 4), torch.randn(2, 4)
        assert torch.equal(vae.reparameterize(mu, logvar, eps=torch.zeros(2, 4)), mu)

    def test_unit_variance(self):
        mu, e = torch.randn(2, 4), torch.randn(2, 4)
        assert torch.equal(vae.reparameterize(mu, torch.zeros(2, 4), eps=e), mu + e)

    def test_monte_carlo_variance(self):
        mu = torch.zeros(10_000, 64, dtype=torch.float64)
        logvar = torch.full_like(mu, math.log(4.0))
        z = vae.reparameterize(mu, logvar, generator=torch.Generator().manual_seed(0))
        var = z.var(dim=0)
        assert torch.all(var >= 3.7) and torch.all(var <= 4.3)

    def test_seeded(self):
        mu, logvar = torch.zeros(3, 5), torch.zeros(3, 5)
        a = vae.reparameterize(mu, logvar, generator=torch.Generator().manual_seed(9))
        b = vae.reparameterize(mu, logvar, generator=torch.Generator().manual_seed(9))
        assert torch.equal(a, b)


class TestLoss:
    def test_identity_case(self):
        x = torch.rand(4, 1, 8, 8, dtype=torch.float64)
        z = torch.zeros(4, 6, dtype=torch.float64)
        assert vae.vae_loss(x, x.clone(), z, z).item() == 0.0

    def test_alpha_zero_is_mse(self):
        x, y = torch.rand(2, 1, 4, 4, dtype=torch.float64), torch.rand(2, 1, 4, 4, dtype=torch.float64)
        mu, logvar = torch.randn(2, 3, dtype=torch.float64), torch.randn(2, 3, dtype=torch.float64)
        assert vae.vae_loss(x, y, mu, logvar, alpha=0.0).item() == torch.mean((x - y) ** 2).item()

    @pytest.mark.parametrize("alpha", [1.0, 0.25, 3.0])
    def test_closed_form_kl(self, alpha):
        x = torch.rand(1, 1, 4, 4, dtype=torch.float64)
        mu, logvar = torch.ones(1, 1, dtype=torch.float64), torch.zeros(1, 1, dtype=torch.float64)
        assert abs(vae.vae_loss(x, x, mu, logvar, alpha).item() - 0.5 * alpha) <= 1e-10

    def test_kl_per_dimension(self):
        mu, logvar = torch.ones(5, 64, dtype=torch.float64), torch.zeros(5, 64, dtype=torch.float64)
        assert abs(vae.kl_divergence(mu, logvar).item() - 32.0) <= 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(nn.ShapeError):
            vae.vae_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5), torch.zeros(1, 2), torch.zeros(1, 2))

    def test_kl_grid(self):
        vals = torch.arange(-30, 31, dtype=torch.float64) / 10
        mu, logvar = (g.reshape(-1, 1) for g in torch.meshgrid(vals, vals, indexing="ij"))
        per_item = torch.stack([vae.kl_divergence(m[None], lv[None]) for m, lv in zip(mu, logvar)])
        assert torch.all(per_item >= 0)
        zero = per_item == 0
        assert zero.sum() == 1 and mu[zero].item() == 0 and logvar[zero].item() == 0

    @given(st.floats(-20, 20), st.floats(-20, 20))
    @settings(max_examples=200, deadline=None)
    def test_kl_non_negative(self, m, lv):
        kl = vae.kl_divergence(torch.tensor([[m]], dtype=torch.float64), torch.tensor([[lv]], dtype=torch.float64))
        assert kl.item() >= 0


def test_loss_gradient_toy_model():
    torch.manual_seed(0)
    m = VAE(TOY, seed=0, dtype=torch.float64).train()
    names = [n for n, _ in m.named_parameters()]
    params = [p.detach().clone() for p in m.parameters()]
    x = torch.rand(4, 1, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    eps = torch.randn(4, TOY.latent_dim, dtype=torch.float64, generator=torch.Generator().manual_seed(2))

    def loss_fn(*ps):
        state = dict(zip(names, ps))
        # fresh running stats each call so the forward pass is a pure function of the parameters
        buffers = {n: b.clone() for n, b in m.named_buffers()}
        x_hat, mu, logvar = torch.func.functional_call(m, (state, buffers), (x,), {"eps": eps})
        return vae.vae_loss(x, x_hat, mu, logvar, alpha=1.0)

    err = nn.grad_check(loss_fn, params, h=1e-6)
    assert err <= 1e-4, err


def toy_images(n, seed=0):
    rng = np.random.default_rng(seed)
    xs = np.linspace(0, 1, 16)
    imgs = []
    for _ in range(n):
        cx, cy, w = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3)
        imgs.append(np.exp(-((xs[None, :] - cx) ** 2 + (xs[:, None] - cy) ** 2) / (2 * w * w)))
    return np.array(imgs, dtype=np.float32)


class TestTraining:
    hyper = VaeHyper(alpha=0.01, lr=1e-2, batch_size=16, max_epochs=5, early_stop_patience=5)

    def test_progress_and_best_checkpoint(self):
        res = vae.train_vae(toy_images(200), self.hyper, seed=0, arch=TOY)
        train = [r["loss"] for r in res.history if r["split"] == "train"]
        val = [r["loss"] for r in res.history if r["split"] == "validation"]
        assert len(train) == 5
        assert train[-1] < train[0]
        assert res.best_val_loss == min(val)
        assert val[res.best_epoch - 1] == res.best_val_loss
        assert not res.model.training

    def test_returned_model_reproduces_best_val_loss(self):
        images = toy_images(200)
        res = vae.train_vae(images, self.hyper, seed=0, arch=TOY)
        from trafficqc.datagen import split_indices
        _, va, _ = split_indices(200, 0)
        loss, _ = vae.evaluate_loss(res.model, torch.as_tensor(images[va]).unsqueeze(1), self.hyper.alpha)
        assert loss == pytest.approx(res.best_val_loss, rel=1e-6)

    def test_deterministic(self):
        a = vae.train_vae(toy_images(100), self.hyper, seed=5, arch=TOY)
        b = vae.train_vae(toy_images(100), self.hyper, seed=5, arch=TOY)
        assert a.best_val_loss == b.best_val_loss
        assert a.history == b.history

    @pytest.mark.parametrize("patience,expected_epochs", [(0, 3), (1, 3), (2, 4), (5, 10)])
    def test_early_stopping(self, monkeypatch, patience, expected_epochs):
        seq = iter([3.0, 2.0, 2.5, 2.5, 1.0, 1.5, 1.5, 1.5, 1.5, 1.5, 1.5])
        monkeypatch.setattr(vae, "evaluate_loss", lambda *a, **k: (next(seq), 0.0))
        hyper = VaeHyper(alpha=0.01, lr=1e-3, batch_size=16, max_epochs=10, early_stop_patience=patience)
        res = vae.train_vae(toy_images(20), hyper, arch=TOY)
        epochs = max(r["epoch"] for r in res.history)
        assert epochs == expected_epochs
        assert res.best_val_loss == (2.0 if expected_epochs < 5 else 1.0)

    def test_empty_dataset(self):
        with pytest.raises(vae.TrainingError):
            vae.train_vae(np.zeros((0, 16, 16), dtype=np.float32), self.hyper, arch=TOY)

    def test_non_finite_loss(self):
        imgs = toy_images(20)
        imgs[:] = np.nan
        with pytest.raises(vae.TrainingError, match="non-finite"):
            vae.train_vae(imgs, self.hyper, arch=TOY)

    def test_freeze(self):
        m = vae.freeze(VAE(TOY, seed=0).train())
        assert not m.training
        assert not any(p.requires_grad for p in m.parameters())
