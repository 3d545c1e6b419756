"""Preconditioning algebra, schedule, guidance, sampler, and loss tests."""

import math

import numpy as np
import pytest

from tvp import nn
from tvp.backbone import BackboneConfig, UNet
from tvp.diffusion import (
    EDMDenoiser,
    GuidanceScales,
    SamplerConfig,
    SamplerDivergence,
    SigmaSampler,
    dsm_loss,
    dsm_weight,
    dual_cfg,
    edm_coeffs,
    euler_sample,
    karras_grid,
)

MICRO = BackboneConfig(latent_channels=2, width=4, frames=2, heads=2, cond_width=4,
                       adapter_div=2, sigma_features=8, sigma_dim=8)


class TestEDMCoeffs:
    def test_balanced_sigma_gives_half_skip(self):
        c = edm_coeffs(0.5, 0.5)
        assert abs(c.c_skip - 0.5) < 1e-12

    def test_zero_noise_limit(self):
        c = edm_coeffs(0.0, 0.5)
        assert abs(c.c_skip - 1.0) < 1e-6
        assert abs(c.c_out) < 1e-6
        small = edm_coeffs(1e-8, 0.5)
        assert abs(small.c_skip - 1.0) < 1e-6
        assert abs(small.c_out) < 1e-6

    def test_formula_oracle(self):
        sigma, sd = 1.0, 0.5
        c = edm_coeffs(sigma, sd)
        assert abs(c.c_skip - sd**2 / (sigma**2 + sd**2)) < 1e-15
        assert abs(c.c_out - sigma * sd / math.sqrt(sigma**2 + sd**2)) < 1e-15
        assert abs(c.c_in - 1.0 / math.sqrt(sigma**2 + sd**2)) < 1e-15
        assert abs(c.c_noise - math.log(sigma) / 4.0) < 1e-15

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            edm_coeffs(-0.1)

    def test_finite_for_positive_sigma(self):
        for sigma in (1e-6, 0.1, 1.0, 80.0):
            c = edm_coeffs(sigma)
            assert all(np.isfinite(v) for v in (c.c_skip, c.c_out, c.c_in, c.c_noise))


class TestSigmaSampler:
    def test_strictly_positive(self):
        s = SigmaSampler().sample(np.random.default_rng(0), size=10_000)
        assert np.all(s > 0)

    def test_log_moments(self):
        s = SigmaSampler(p_mean=-1.2, p_std=1.2).sample(np.random.default_rng(1), size=200_000)
        logs = np.log(s)
        assert abs(logs.mean() + 1.2) < 0.02
        assert abs(logs.std() - 1.2) < 0.02


class TestKarrasGrid:
    def test_two_step_endpoints(self):
        g = karras_grid(SamplerConfig(steps=2, sigma_min=0.1, sigma_max=10.0, rho=3.0))
        assert np.allclose(g, [10.0, 0.1, 0.0])

    def test_linear_interpolation_at_rho_one(self):
        g = karras_grid(SamplerConfig(steps=3, sigma_min=1.0, sigma_max=3.0, rho=1.0))
        assert np.allclose(g, [3.0, 2.0, 1.0, 0.0])

    def test_default_formula_oracle(self):
        cfg = SamplerConfig()
        g = karras_grid(cfg)
        for i in range(cfg.steps):
            expected = (
                cfg.sigma_max ** (1 / cfg.rho)
                + i / (cfg.steps - 1) * (cfg.sigma_min ** (1 / cfg.rho) - cfg.sigma_max ** (1 / cfg.rho))
            ) ** cfg.rho
            assert abs(g[i] - expected) < 1e-12
        assert g[-1] == 0.0

    def test_strictly_decreasing_ends_at_zero(self):
        for steps in (1, 2, 5, 25):
            g = karras_grid(SamplerConfig(steps=steps))
            assert np.all(np.diff(g) < 0)
            assert g[-1] == 0.0

    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError):
            karras_grid(SamplerConfig(steps=0))


class TestDualCfg:
    def test_unit_scales_telescope_bit_exact(self):
        rng = np.random.default_rng(0)
        e = [rng.standard_normal((3, 4)).astype(np.float32) for _ in range(3)]
        out = dual_cfg(*e, GuidanceScales(s_v=1.0, s_t=1.0))
        assert np.array_equal(out, e[2])

    def test_zero_scales_bit_exact(self):
        rng = np.random.default_rng(1)
        e = [rng.standard_normal((3, 4)).astype(np.float32) for _ in range(3)]
        out = dual_cfg(*e, GuidanceScales(s_v=0.0, s_t=0.0))
        assert np.array_equal(out, e[0])

    def test_scalar_arithmetic_oracle(self):
        out = dual_cfg(np.array([0.0]), np.array([1.0]), np.array([2.0]),
                       GuidanceScales(s_v=2.0, s_t=3.0))
        assert float(out[0]) == 0.0 + 2.0 * (1.0 - 0.0) + 3.0 * (2.0 - 1.0) == 5.0

    def test_affine_in_each_input(self):
        rng = np.random.default_rng(2)
        scales = GuidanceScales(s_v=1.7, s_t=4.2)
        e = [rng.standard_normal(6) for _ in range(3)]
        d = [rng.standard_normal(6) for _ in range(3)]
        for i in range(3):
            args_base = list(e)
            args_shift = list(e)
            args_shift[i] = e[i] + d[i]
            args_dir = [np.zeros(6)] * 3
            args_dir[i] = d[i]
            lhs = dual_cfg(*args_shift, scales)
            rhs = dual_cfg(*args_base, scales) + dual_cfg(*args_dir, GuidanceScales(scales.s_v, scales.s_t)) - dual_cfg(*[np.zeros(6)] * 3, scales)
            assert np.allclose(lhs, rhs, atol=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(nn.ShapeError):
            dual_cfg(np.zeros(3), np.zeros(4), np.zeros(3), GuidanceScales())


class TestEulerSampler:
    def test_constant_denoiser_one_step_exact(self):
        rng = np.random.default_rng(0)
        target = rng.standard_normal((2, 3)).astype(np.float64)
        noise = rng.standard_normal((2, 3)).astype(np.float64)
        grid = karras_grid(SamplerConfig(steps=1, sigma_min=0.01, sigma_max=5.0))
        out = euler_sample(lambda x, s: target, noise, grid)
        assert np.max(np.abs(out - target)) < 1e-9

    def test_constant_denoiser_fixed_over_many_steps(self):
        rng = np.random.default_rng(1)
        target = rng.standard_normal((2, 3)).astype(np.float64)
        noise = rng.standard_normal((2, 3)).astype(np.float64)
        grid = karras_grid(SamplerConfig(steps=25))
        out = euler_sample(lambda x, s: target, noise, grid)
        assert np.max(np.abs(out - target)) < 1e-9

    def test_gaussian_toy_moment_match(self):
        # analytic posterior-mean denoiser for N(mu, cov) data
        rng = np.random.default_rng(2)
        dim = 3
        mu = np.array([1.0, -2.0, 0.5])
        a = rng.standard_normal((dim, dim)) * 0.6
        cov = a @ a.T + 0.5 * np.eye(dim)

        def denoise(x, sigma):
            gain = cov @ np.linalg.inv(cov + sigma**2 * np.eye(dim))
            return mu + (x - mu) @ gain.T

        grid = karras_grid(SamplerConfig(steps=160))
        samples = np.stack([
            euler_sample(denoise, np.random.default_rng(1000 + i).standard_normal(dim), grid)
            for i in range(1000)
        ])
        mean_err = np.abs(samples.mean(axis=0) - mu) / np.abs(mu)
        assert np.all(mean_err < 0.10)
        sample_cov = np.cov(samples.T)
        rel = np.linalg.norm(sample_cov - cov) / np.linalg.norm(cov)
        assert rel < 0.10

    def test_divergence_reports_step(self):
        grid = karras_grid(SamplerConfig(steps=3))

        def bad(x, s):
            return np.full_like(x, np.nan)

        with pytest.raises(SamplerDivergence, match="step 0"):
            euler_sample(bad, np.zeros(4), grid)

    def test_deterministic(self):
        grid = karras_grid(SamplerConfig(steps=5))
        noise = np.random.default_rng(3).standard_normal(6).astype(np.float32)
        f = lambda x, s: x * 0.5
        assert np.array_equal(euler_sample(f, noise.copy(), grid), euler_sample(f, noise.copy(), grid))


def _micro_denoiser(seed=0, randomize=True):
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    net = UNet(store, MICRO, rng)
    if randomize:
        for p in store:
            if p.value.ndim >= 2 and np.all(p.value == 0.0):
                p.value[...] = (rng.standard_normal(p.value.shape) * 0.1).astype(p.value.dtype)
    return store, net, EDMDenoiser(net, MICRO.latent_channels, sigma_data=0.5)


class TestDenoiser:
    def test_zero_network_returns_skip_scaled(self):
        store, net, den = _micro_denoiser(randomize=False)
        for p in store:
            p.value[...] = 0.0
        # zero layer-norm gains kill every path through the network
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 2, 4, 4)).astype(np.float32)
        sigma = 0.7
        d = den.denoise(x, sigma)
        c_skip = 0.25 / (sigma**2 + 0.25)
        assert np.allclose(d, c_skip * x, atol=1e-5)

    def test_small_sigma_returns_input(self):
        store, net, den = _micro_denoiser()
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 2, 4, 4)).astype(np.float32)
        d = den.denoise(x, 1e-6)
        assert np.allclose(d, x, atol=1e-4)

    def test_score_denoise_consistency_bit_exact(self):
        store, net, den = _micro_denoiser()
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 2, 4, 4)).astype(np.float32)
        cond = rng.standard_normal(x.shape).astype(np.float32)
        kv = rng.standard_normal((2, 2, 3, 4)).astype(np.float32)
        sigma = np.array([0.4, 1.3])
        s = den.score(x, sigma, cond, 1, kv)
        d = den.denoise(x, sigma, cond, 1, kv)
        s2 = (sigma * sigma).astype(x.dtype).reshape(-1, 1, 1, 1, 1)
        assert np.array_equal(x + s2 * s, d)

    def test_score_zero_sigma_rejected(self):
        store, net, den = _micro_denoiser()
        x = np.zeros((1, 2, 2, 4, 4), dtype=np.float32)
        with pytest.raises(ValueError, match="singular"):
            den.score(x, 0.0)

    def test_score_recovers_linear_perturbation(self):
        # D = x + sigma^2 g  =>  score = g
        class Shift:
            def forward(self, inp, cnoise, kv, flags):
                return np.zeros(inp.shape[:2] + (2,) + inp.shape[3:], dtype=inp.dtype)

        den = EDMDenoiser(Shift(), 2, sigma_data=0.5)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 2, 4, 4)).astype(np.float64)
        sigma = 0.9
        score = den.score(x, sigma)
        c_skip = 0.25 / (sigma**2 + 0.25)
        expected = (c_skip - 1.0) * x / sigma**2
        assert np.allclose(score, expected, atol=1e-10)


class TestScoreLearning:
    def test_trained_score_matches_gaussian_closed_form(self):
        # train a tiny unconditional denoiser on diagonal-Gaussian latents;
        # the true score is (mu - x) / (diag + sigma^2)
        rng = np.random.default_rng(0)
        shape = (2, 2, 4, 4)
        mu = (rng.standard_normal(shape) * 0.2).astype(np.float32)
        std = rng.uniform(0.3, 0.7, size=shape).astype(np.float32)

        store = nn.ParamStore()
        net = UNet(store, MICRO, np.random.default_rng(1), with_xattn=False,
                   with_adapters=False)
        den = EDMDenoiser(net, MICRO.latent_channels, sigma_data=0.5)
        opt = nn.Adam(store, lr=2e-3)
        sampler = SigmaSampler()
        batch = 8
        for _ in range(600):
            x0 = mu + std * rng.standard_normal((batch,) + shape).astype(np.float32)
            sigma = sampler.sample(rng, batch)
            noise = rng.standard_normal(x0.shape).astype(np.float32) * sigma[:, None, None, None, None].astype(np.float32)
            dsm_loss(den, x0, sigma, noise, want_grad=True)
            opt.step()
            store.zero_grads()

        sims = []
        for sigma in (0.3, 0.6, 1.0):
            x = mu + rng.standard_normal((4,) + shape).astype(np.float32) * np.sqrt(std**2 + sigma**2)
            learned = den.score(x, np.full(4, sigma))
            true = (mu - x) / (std**2 + sigma**2)
            for b in range(4):
                a, t = learned[b].ravel(), true[b].ravel()
                sims.append(float(a @ t / (np.linalg.norm(a) * np.linalg.norm(t))))
        assert np.mean(sims) > 0.9


class TestDSMLoss:
    def test_scalar_hand_computation(self):
        # x0 = 0, sigma = sigma_data = 0.5, network F = 0: D = 0.5 n, loss = 2 n^2
        class ZeroNet:
            def forward(self, inp, cnoise, kv, flags):
                return np.zeros(inp.shape[:2] + (1,) + inp.shape[3:], dtype=inp.dtype)

        den = EDMDenoiser(ZeroNet(), 1, sigma_data=0.5)
        x0 = np.zeros((1, 1, 1, 1, 1), dtype=np.float64)
        noise = np.full_like(x0, 0.37)
        loss, _ = dsm_loss(den, x0, 0.5, noise, sigma_data=0.5)
        assert abs(loss - 2.0 * 0.37**2) < 1e-12

    def test_perfect_denoiser_zero_loss(self):
        rng = np.random.default_rng(5)
        x0 = rng.standard_normal((1, 2, 2, 4, 4))

        class Perfect:
            def denoise(self, x, sigma, *a, **k):
                return x0

        loss, _ = dsm_loss(Perfect(), x0, 0.8, np.zeros_like(x0) + 0.1)
        assert loss == 0.0

    def test_loss_positive_and_weighted(self):
        store, net, den = _micro_denoiser()
        rng = np.random.default_rng(6)
        x0 = rng.standard_normal((2, 2, 2, 4, 4)).astype(np.float32)
        noise = (rng.standard_normal(x0.shape) * 0.5).astype(np.float32)
        loss, _ = dsm_loss(den, x0, np.array([0.5, 1.0]), noise)
        assert loss > 0.0
        assert np.isfinite(loss)

    def test_weight_formula(self):
        assert abs(dsm_weight(0.5, 0.5) - 8.0) < 1e-12
        sigma, sd = 1.7, 0.5
        assert abs(dsm_weight(sigma, sd) - (sigma**2 + sd**2) / (sigma * sd) ** 2) < 1e-12
