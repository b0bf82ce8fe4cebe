import numpy as np
import pytest

from fedoaed import client, nn
from fedoaed.errors import (
    ConfigurationError,
    DenoiserDivergence,
    DivergenceError,
    InsufficientSnapshots,
)


def scalar_model(w=1.0, b=0.0):
    """Single 1x1 identity layer; flat params are [w, b]."""
    return nn.MlpModel([nn.DenseLayer(np.array([[w]]), np.array([b]), "identity")])


def quadratic_grad(model, bx, by):
    """Gradient of f(w) = 0.5 ||w||^2, i.e. the parameters themselves."""
    return nn.flatten(model)


def identity_ae(param_dim):
    """Hand-set autoencoder computing the identity map.

    Encoder stacks [x; -x] through relu then recombines as
    relu(x) - relu(-x) = x; the decoder mirrors it.
    """
    eye = np.eye(param_dim)
    up = np.vstack([eye, -eye])       # (2p, p)
    down = np.hstack([eye, -eye])     # (p, 2p)
    net = nn.MlpModel(
        [
            nn.DenseLayer(up, np.zeros(2 * param_dim), "relu"),
            nn.DenseLayer(down, np.zeros(param_dim), "identity"),
            nn.DenseLayer(up, np.zeros(2 * param_dim), "relu"),
            nn.DenseLayer(down, np.zeros(param_dim), "identity"),
        ]
    )
    return client.AutoencoderModel(net, param_dim)


def dummy_batches(n=4, dim=1):
    rng = np.random.default_rng(0)
    return rng.normal(size=(n, dim)), rng.integers(0, 1, size=n)


class TestDeviceUpdate:
    def test_one_step_on_quadratic(self):
        feats, labs = dummy_batches()
        g = client.device_update(
            0, scalar_model(w=1.0), feats, labs, client_lr=0.1, k_steps=1,
            batch_size=4, rng=np.random.default_rng(1), grad_fn=quadratic_grad,
        )
        # w' = 1 - 0.1*1 = 0.9, g = (1 - 0.9)/0.1 = 1.0; bias stays 0
        np.testing.assert_allclose(g.values, [1.0, 0.0], atol=1e-12)

    def test_zero_gradient_fixed_point(self):
        feats, labs = dummy_batches()
        zero_grad = lambda m, bx, by: nn.ParamVector(
            np.zeros(2), nn.model_layout(m)
        )
        g = client.device_update(
            0, scalar_model(w=3.0, b=-1.0), feats, labs, client_lr=0.1,
            k_steps=5, batch_size=2, rng=np.random.default_rng(2), grad_fn=zero_grad,
        )
        np.testing.assert_array_equal(g.values, [0.0, 0.0])

    def test_two_steps_on_quadratic(self):
        feats, labs = dummy_batches()
        g = client.device_update(
            0, scalar_model(w=1.0), feats, labs, client_lr=0.1, k_steps=2,
            batch_size=4, rng=np.random.default_rng(3), grad_fn=quadratic_grad,
        )
        # w'' = 0.9 - 0.1*0.9 = 0.81, g = (1 - 0.81)/0.1 = 1.9
        np.testing.assert_allclose(g.values, [1.9, 0.0], atol=1e-12)

    def test_global_model_not_mutated(self):
        rng = np.random.default_rng(4)
        model = nn.build_mlp([3, 4, 2], np.random.default_rng(5))
        before = nn.flatten(model).values.copy()
        feats = rng.normal(size=(10, 3))
        labs = rng.integers(0, 2, size=10)
        client.device_update(
            0, model, feats, labs, client_lr=0.1, k_steps=4, batch_size=4,
            rng=np.random.default_rng(6),
        )
        np.testing.assert_array_equal(nn.flatten(model).values, before)

    def test_divergence_reported_with_client_and_step(self):
        feats, labs = dummy_batches()
        blowup = lambda m, bx, by: nn.ParamVector(
            np.full(2, -1e308), nn.model_layout(m)
        )
        with pytest.raises(DivergenceError) as err:
            client.device_update(
                7, scalar_model(), feats, labs, client_lr=1.0, k_steps=50,
                batch_size=4, rng=np.random.default_rng(7), grad_fn=blowup,
            )
        assert err.value.client_id == 7
        assert "client 7" in str(err.value)


class TestDeviceUpdateProx:
    def test_zero_prox_reduces_to_device_update(self):
        rng = np.random.default_rng(8)
        model = nn.build_mlp([3, 4, 2], np.random.default_rng(9))
        feats = rng.normal(size=(12, 3))
        labs = rng.integers(0, 2, size=12)
        base = client.device_update(
            1, model, feats, labs, client_lr=0.05, k_steps=6, batch_size=5,
            rng=np.random.default_rng(10), momentum=0.9,
        )
        prox = client.device_update_prox(
            1, model, feats, labs, client_lr=0.05, k_steps=6, batch_size=5,
            rng=np.random.default_rng(10), prox_mu=0.0, momentum=0.9,
        )
        np.testing.assert_array_equal(base.values, prox.values)

    def test_fixed_point_with_zero_data_gradient(self):
        feats, labs = dummy_batches()
        zero_grad = lambda m, bx, by: nn.ParamVector(np.zeros(2), nn.model_layout(m))
        g = client.device_update_prox(
            0, scalar_model(w=2.0), feats, labs, client_lr=0.1, k_steps=3,
            batch_size=4, rng=np.random.default_rng(11), prox_mu=0.5, grad_fn=zero_grad,
        )
        np.testing.assert_array_equal(g.values, [0.0, 0.0])

    def test_proximal_term_vanishes_at_first_step(self):
        feats, labs = dummy_batches()
        const_grad = lambda m, bx, by: nn.ParamVector(
            np.array([1.0, 0.0]), nn.model_layout(m)
        )
        g = client.device_update_prox(
            0, scalar_model(w=5.0), feats, labs, client_lr=0.1, k_steps=1,
            batch_size=4, rng=np.random.default_rng(12), prox_mu=0.1, grad_fn=const_grad,
        )
        np.testing.assert_allclose(g.values, [1.0, 0.0], atol=1e-12)

    def test_negative_prox_rejected(self):
        feats, labs = dummy_batches()
        with pytest.raises(ConfigurationError):
            client.device_update_prox(
                0, scalar_model(), feats, labs, client_lr=0.1, k_steps=1,
                batch_size=4, rng=np.random.default_rng(13), prox_mu=-0.1,
            )


class TestSnapshots:
    def run_schedule(self, s, k_steps):
        layout = (("dense0.b", (2,)),)
        buffer = client.SnapshotBuffer(snapshot_step=s, min_snapshots=1)
        w_global = nn.ParamVector(np.array([1.0, 1.0]), layout)
        for k in range(k_steps):
            w_local = nn.ParamVector(np.array([0.9, 1.1]) + 0.01 * k, layout)
            client.collect_snapshot(buffer, w_global, w_local, k)
        return buffer

    def test_every_step_snapshots(self):
        assert len(self.run_schedule(1, 5)) == 5

    def test_stride_two(self):
        assert len(self.run_schedule(2, 5)) == 3

    def test_snapshot_count_is_ceil(self):
        for s in (1, 2, 3, 4):
            for k in (1, 3, 5, 8):
                assert len(self.run_schedule(s, k)) == -(-k // s)

    def test_first_snapshot_value(self):
        buffer = self.run_schedule(1, 1)
        np.testing.assert_allclose(buffer.snapshots[0], [0.1, -0.1], atol=1e-15)


class TestNormalization:
    def test_round_trip(self):
        rng = np.random.default_rng(14)
        x = rng.normal(3.0, 2.0, size=100)
        stats = client.NormalizationStats.from_samples(x)
        back = stats.denormalize(stats.normalize(x))
        assert np.max(np.abs(back - x) / np.maximum(np.abs(x), 1e-12)) < 1e-12

    def test_std_floor(self):
        stats = client.NormalizationStats.from_samples(np.zeros(10))
        assert stats.std == client.STD_FLOOR


class TestTrainAutoencoder:
    def make_buffer(self, snapshots):
        return client.SnapshotBuffer(1, 4, snapshots=list(snapshots))

    def test_insufficient_snapshots_signal(self):
        buf = self.make_buffer(np.ones((2, 8)))
        with pytest.raises(InsufficientSnapshots):
            client.train_autoencoder(buf, client.DenoiserConfig(), np.random.default_rng(15))

    def test_loss_nonincreasing_on_point_mass(self):
        rng = np.random.default_rng(16)
        snap = rng.normal(size=30)
        buf = self.make_buffer(np.tile(snap, (4, 1)))
        cfg0 = client.DenoiserConfig(hidden_dim=16, latent_dim=4, ae_epochs=0)
        cfg = client.DenoiserConfig(hidden_dim=16, latent_dim=4, ae_epochs=10)
        init_ae, stats = client.train_autoencoder(buf, cfg0, np.random.default_rng(17))
        trained_ae, _ = client.train_autoencoder(buf, cfg, np.random.default_rng(17))
        x = stats.normalize(np.tile(snap, (4, 1)))
        loss_init, _ = nn.mse_loss(x, client.autoencoder_forward(init_ae, x))
        loss_trained, _ = nn.mse_loss(x, client.autoencoder_forward(trained_ae, x))
        assert loss_trained <= loss_init

    def test_zero_epochs_keeps_seeded_init(self):
        rng = np.random.default_rng(18)
        buf = self.make_buffer(rng.normal(size=(5, 12)))
        cfg = client.DenoiserConfig(hidden_dim=8, latent_dim=3, ae_epochs=0)
        ae, stats = client.train_autoencoder(buf, cfg, np.random.default_rng(19))
        fresh = client.build_autoencoder(12, cfg, np.random.default_rng(19))
        for a, b in zip(ae.net.layers, fresh.net.layers):
            np.testing.assert_array_equal(a.weights, b.weights)
        samples = np.stack(buf.snapshots)
        assert stats.mean == pytest.approx(float(samples.mean()))

    def test_denoises_noisy_copies_of_a_clean_vector(self):
        rng = np.random.default_rng([20, 99])
        clean = rng.normal(size=200)
        noisy = clean + 0.1 * rng.normal(size=(8, 200))
        buf = self.make_buffer(noisy)
        ae, stats = client.train_autoencoder(
            buf, client.DenoiserConfig(), np.random.default_rng([20, 7])
        )
        recon = stats.denormalize(client.autoencoder_forward(ae, stats.normalize(noisy)))
        err_recon = np.linalg.norm(recon - clean, axis=1).mean()
        err_noise = np.linalg.norm(noisy - clean, axis=1).mean()
        assert err_recon < err_noise

    def test_hidden_clamp_logged(self, caplog):
        cfg = client.DenoiserConfig(hidden_dim=512, latent_dim=2)
        with caplog.at_level("INFO", logger="fedoaed.client"):
            ae = client.build_autoencoder(4, cfg, np.random.default_rng(21))
        assert ae.net.layers[0].out_dim == 16  # clamped to 4 * param_dim
        assert any("clamping" in r.message for r in caplog.records)


class TestAutoencoderForward:
    def test_vector_in_vector_out(self):
        ae = identity_ae(3)
        out = client.autoencoder_forward(ae, np.array([1.0, -2.0, 0.5]))
        assert out.shape == (3,)
        np.testing.assert_allclose(out, [1.0, -2.0, 0.5], atol=1e-15)

    def test_zero_network_maps_to_zero(self):
        net = nn.MlpModel(
            [
                nn.DenseLayer(np.zeros((4, 3)), np.zeros(4), "relu"),
                nn.DenseLayer(np.zeros((2, 4)), np.zeros(2), "identity"),
                nn.DenseLayer(np.zeros((4, 2)), np.zeros(4), "relu"),
                nn.DenseLayer(np.zeros((3, 4)), np.zeros(3), "identity"),
            ]
        )
        ae = client.AutoencoderModel(net, 3)
        out = client.autoencoder_forward(ae, np.array([5.0, 6.0, 7.0]))
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_rows_processed_independently(self):
        rng = np.random.default_rng(22)
        cfg = client.DenoiserConfig(hidden_dim=6, latent_dim=2)
        ae = client.build_autoencoder(5, cfg, np.random.default_rng(23))
        batch = rng.normal(size=(3, 5))
        together = client.autoencoder_forward(ae, batch)
        assert together.shape == (3, 5)
        for i in range(3):
            alone = client.autoencoder_forward(ae, batch[i])
            # same values up to summation order inside the matmul kernel
            np.testing.assert_allclose(together[i], alone, rtol=1e-13, atol=1e-15)


class TestDenoiseAndMix:
    def test_mix_zero_skips_the_autoencoder(self):
        layout = (("dense0.b", (3,)),)
        delta = nn.ParamVector(np.array([1.0, 2.0, 3.0]), layout)
        # passing no usable AE proves it is not invoked at mix 0
        out = client.denoise_and_mix(None, None, delta, 0.0)
        np.testing.assert_array_equal(out.values, delta.values)

    def test_mix_one_returns_reconstruction(self):
        layout = (("dense0.b", (2,)),)
        ae = identity_ae(2)
        # swap the decoder output rows so AE([a, b]) = [b, a]
        ae.net.layers[-1].weights = ae.net.layers[-1].weights[::-1].copy()
        stats = client.NormalizationStats(0.0, 1.0)
        delta = nn.ParamVector(np.array([2.0, 0.0]), layout)
        out = client.denoise_and_mix(ae, stats, delta, 1.0)
        np.testing.assert_allclose(out.values, [0.0, 2.0], atol=1e-15)

    def test_half_mix_arithmetic(self):
        layout = (("dense0.b", (2,)),)
        ae = identity_ae(2)
        ae.net.layers[-1].weights = ae.net.layers[-1].weights[::-1].copy()
        stats = client.NormalizationStats(0.0, 1.0)
        delta = nn.ParamVector(np.array([2.0, 0.0]), layout)
        out = client.denoise_and_mix(ae, stats, delta, 0.5)
        np.testing.assert_allclose(out.values, [1.0, 1.0], atol=1e-15)

    def test_nonfinite_reconstruction_raises_signal(self):
        layout = (("dense0.b", (2,)),)
        ae = identity_ae(2)
        ae.net.layers[-1].weights = ae.net.layers[-1].weights * 1e308
        stats = client.NormalizationStats(0.0, 1.0)
        delta = nn.ParamVector(np.array([1e10, 0.0]), layout)
        with pytest.raises(DenoiserDivergence):
            client.denoise_and_mix(ae, stats, delta, 0.5)

    def test_mixed_coordinates_stay_between_endpoints(self):
        rng = np.random.default_rng(24)
        cfg = client.DenoiserConfig(hidden_dim=12, latent_dim=3)
        ae = client.build_autoencoder(10, cfg, np.random.default_rng(25))
        stats = client.NormalizationStats(0.5, 2.0)
        layout = (("dense0.b", (10,)),)
        for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
            delta_values = rng.normal(size=10)
            recon = stats.denormalize(
                client.autoencoder_forward(ae, stats.normalize(delta_values))
            )
            mixed = client.denoise_and_mix(
                ae, stats, nn.ParamVector(delta_values, layout), lam
            )
            lo = np.minimum(delta_values, recon) - 1e-12
            hi = np.maximum(delta_values, recon) + 1e-12
            assert np.all(mixed.values >= lo) and np.all(mixed.values <= hi)


class TestDeviceUpdateAe:
    def setup_problem(self, seed=26):
        rng = np.random.default_rng(seed)
        model = nn.build_mlp([3, 4, 2], np.random.default_rng(seed + 1))
        feats = rng.normal(size=(20, 3))
        labs = rng.integers(0, 2, size=20)
        return model, feats, labs

    def test_mix_zero_bit_identical_to_plain_update(self):
        model, feats, labs = self.setup_problem()
        cfg = client.DenoiserConfig(mix_lambda=0.0, min_snapshots=2)
        plain = client.device_update(
            2, model, feats, labs, client_lr=0.1, k_steps=5, batch_size=8,
            rng=np.random.default_rng(27), momentum=0.9,
        )
        denoised = client.device_update_ae(
            2, model, feats, labs, client_lr=0.1, k_steps=5, batch_size=8,
            cfg=cfg, rng=np.random.default_rng(27), momentum=0.9,
        )
        np.testing.assert_array_equal(plain.values, denoised.values)

    def test_too_few_snapshots_falls_back(self):
        model, feats, labs = self.setup_problem()
        # ceil(4/2) = 2 snapshots < 8 required
        cfg = client.DenoiserConfig(mix_lambda=0.5, snapshot_step=2, min_snapshots=8)
        plain = client.device_update(
            3, model, feats, labs, client_lr=0.1, k_steps=4, batch_size=8,
            rng=np.random.default_rng(28),
        )
        fallback = client.device_update_ae(
            3, model, feats, labs, client_lr=0.1, k_steps=4, batch_size=8,
            cfg=cfg, rng=np.random.default_rng(28),
        )
        np.testing.assert_array_equal(plain.values, fallback.values)

    def test_identity_ae_with_full_mix_equals_plain_update(self):
        model, feats, labs = self.setup_problem()
        param_dim = nn.flatten(model).size
        cfg = client.DenoiserConfig(mix_lambda=1.0, ae_epochs=0, min_snapshots=2)
        build_identity = lambda p, c, rng: identity_ae(p)
        plain = client.device_update(
            4, model, feats, labs, client_lr=0.1, k_steps=4, batch_size=8,
            rng=np.random.default_rng(29),
        )
        denoised = client.device_update_ae(
            4, model, feats, labs, client_lr=0.1, k_steps=4, batch_size=8,
            cfg=cfg, rng=np.random.default_rng(29), ae_init=build_identity,
        )
        np.testing.assert_allclose(denoised.values, plain.values, rtol=1e-12, atol=1e-12)

    def test_denoiser_divergence_falls_back_to_raw(self):
        model, feats, labs = self.setup_problem()
        param_dim = nn.flatten(model).size

        def explosive(p, c, rng):
            ae = identity_ae(p)
            ae.net.layers[-1].weights = ae.net.layers[-1].weights * 1e300
            return ae

        cfg = client.DenoiserConfig(mix_lambda=0.5, ae_epochs=1, min_snapshots=2)
        plain = client.device_update(
            5, model, feats, labs, client_lr=0.1, k_steps=4, batch_size=8,
            rng=np.random.default_rng(30),
        )
        fallback = client.device_update_ae(
            5, model, feats, labs, client_lr=0.1, k_steps=4, batch_size=8,
            cfg=cfg, rng=np.random.default_rng(30), ae_init=explosive,
        )
        np.testing.assert_array_equal(plain.values, fallback.values)

    def test_active_denoiser_changes_the_update(self):
        model, feats, labs = self.setup_problem()
        cfg = client.DenoiserConfig(
            mix_lambda=0.5, hidden_dim=32, latent_dim=4, ae_epochs=5, min_snapshots=2
        )
        plain = client.device_update(
            6, model, feats, labs, client_lr=0.1, k_steps=4, batch_size=8,
            rng=np.random.default_rng(31),
        )
        denoised = client.device_update_ae(
            6, model, feats, labs, client_lr=0.1, k_steps=4, batch_size=8,
            cfg=cfg, rng=np.random.default_rng(31),
        )
        assert not np.array_equal(plain.values, denoised.values)
