"""Noise-level preconditioning, score-matching loss, sigma schedules,
deterministic Euler sampling, and dual-scale classifier-free guidance.

The denoiser is parameterized as D(x; s) = c_skip x + c_out F(c_in x; c_noise)
and exposed through its score form: score = (D_raw - x) / s^2 and
D = x + s^2 * score, so the score/denoiser consistency identity holds to
the bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import AdapterFlags, assemble_input
from .nn import ShapeError


class SamplerDivergence(RuntimeError):
    """A sampling iterate stopped being finite."""


@dataclass(frozen=True)
class EDMCoeffs:
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def edm_coeffs(sigma: float, sigma_data: float = 0.5) -> EDMCoeffs:
    if sigma < 0:
        raise ValueError(f"noise level must be non-negative, got {sigma}")
    s2 = sigma * sigma
    d2 = sigma_data * sigma_data
    c_noise = float(np.log(sigma) / 4.0) if sigma > 0 else float("-inf")
    return EDMCoeffs(
        c_skip=d2 / (s2 + d2),
        c_out=sigma * sigma_data / np.sqrt(s2 + d2),
        c_in=1.0 / np.sqrt(s2 + d2),
        c_noise=c_noise,
    )


def dsm_weight(sigma, sigma_data: float = 0.5):
    """Loss weight (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


@dataclass(frozen=True)
class SigmaSampler:
    p_mean: float = -1.2
    p_std: float = 1.2

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        return np.exp(rng.normal(self.p_mean, self.p_std, size=size))


@dataclass(frozen=True)
class GuidanceScales:
    s_v: float = 1.0
    s_t: float = 5.0


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")


def karras_grid(cfg: SamplerConfig) -> np.ndarray:
    """Strictly decreasing noise levels [sigma_max ... sigma_min, 0]."""
    cfg.validate()
    n = cfg.steps
    if n == 1:
        return np.array([cfg.sigma_max, 0.0])
    inv = 1.0 / cfg.rho
    ramp = np.arange(n) / (n - 1)
    grid = (cfg.sigma_max**inv + ramp * (cfg.sigma_min**inv - cfg.sigma_max**inv)) ** cfg.rho
    return np.append(grid, 0.0)


def dual_cfg(e_uu: np.ndarray, e_vu: np.ndarray, e_vt: np.ndarray,
             scales: GuidanceScales) -> np.ndarray:
    """Two-scale guidance combination of the three conditioning branches.

    e_uu: no frame condition, no text; e_vu: frames only; e_vt: frames and
    text. Written as a weighted sum so the telescoping end points
    (both scales 1 -> e_vt; both 0 -> e_uu) hold bit-exactly.
    """
    if e_uu.shape != e_vu.shape or e_vu.shape != e_vt.shape:
        raise ShapeError(
            f"guidance branches disagree: {e_uu.shape}, {e_vu.shape}, {e_vt.shape}"
        )
    s_v, s_t = scales.s_v, scales.s_t
    return s_t * e_vt + (s_v - s_t) * e_vu + (1.0 - s_v) * e_uu


def euler_sample(denoise_fn, noise: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Deterministic probability-flow Euler integration from grid[0] to 0.

    `denoise_fn(x, sigma)` returns the (guided) clean estimate. Each step
    moves along d = (x - D) / sigma; the update uses the ratio form
    x + ((s_next - s) / s) (x - D), which lands exactly on D at the final
    step where the ratio is exactly -1.
    """
    x = noise * grid[0]
    for i in range(len(grid) - 1):
        d = denoise_fn(x, float(grid[i]))
        if not np.all(np.isfinite(d)):
            raise SamplerDivergence(
                f"non-finite denoiser output at step {i} (sigma={grid[i]:.4g})"
            )
        ratio = float((grid[i + 1] - grid[i]) / grid[i])  # exactly -1 on the final step
        x = x + ratio * (x - d)
        if not np.all(np.isfinite(x)):
            raise SamplerDivergence(f"non-finite iterate after step {i} (sigma={grid[i]:.4g})")
    return x


class EDMDenoiser:
    """Preconditioning wrapper around the backbone network.

    The network contract is `forward(inp, cnoise, kv, flags) -> F` and
    `backward(dF) -> (d_inp, d_kv)` on batched (B, N, ...) tensors.
    """

    def __init__(self, network, latent_channels: int, sigma_data: float = 0.5):
        self.network = network
        self.latent_channels = latent_channels
        self.sigma_data = sigma_data

    def _assemble(self, x_in: np.ndarray, cond_latents: np.ndarray | None, k: int,
                  v_present: np.ndarray | None) -> np.ndarray:
        b, n = x_in.shape[:2]
        rows = []
        for i in range(b):
            present = v_present[i] if v_present is not None else cond_latents is not None
            if cond_latents is not None and present:
                rows.append(assemble_input(x_in[i], cond_latents[i], k))
            else:
                # fully unconditional frame branch: zero latents and zero mask
                zeros = np.zeros_like(x_in[i])
                mask = np.zeros((n, 1) + x_in.shape[3:], dtype=x_in.dtype)
                rows.append(np.concatenate([x_in[i], zeros, mask], axis=1))
        return np.stack(rows)

    def score(self, x: np.ndarray, sigma, cond_latents=None, k: int = 1, kv=None,
              flags: AdapterFlags | None = None, v_present=None) -> np.ndarray:
        """(D_raw(x; sigma) - x) / sigma^2 for batched x (B, N, c, h, w)."""
        sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
        if np.any(sigma <= 0):
            raise ValueError("score is singular at sigma <= 0")
        s2 = (sigma * sigma).astype(x.dtype)
        d2 = self.sigma_data * self.sigma_data
        c_skip = (d2 / (s2 + d2)).astype(x.dtype)
        c_out = (sigma * self.sigma_data / np.sqrt(s2 + d2)).astype(x.dtype)
        c_in = (1.0 / np.sqrt(s2 + d2)).astype(x.dtype)
        c_noise = (np.log(sigma) / 4.0).astype(x.dtype)
        bshape = (-1, 1, 1, 1, 1)
        x_in = c_in.reshape(bshape) * x
        inp = self._assemble(x_in, cond_latents, k, v_present)
        f = self.network.forward(inp, c_noise, kv, flags)
        self._c_out = c_out
        blend = c_skip.reshape(bshape) * x + c_out.reshape(bshape) * f
        return (blend - x) / s2.reshape(bshape)

    def denoise(self, x: np.ndarray, sigma, cond_latents=None, k: int = 1, kv=None,
                flags: AdapterFlags | None = None, v_present=None) -> np.ndarray:
        """Clean estimate x + sigma^2 * score(x, sigma)."""
        sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
        s2 = (sigma * sigma).astype(x.dtype).reshape(-1, 1, 1, 1, 1)
        return x + s2 * self.score(x, sigma, cond_latents, k, kv, flags, v_present)

    def backward(self, d_out: np.ndarray):
        """Backward through denoise/score w.r.t. the network only.

        `d_out` is the gradient at the denoise output; gradients w.r.t. x
        itself are not needed (x is data plus noise during training).
        Returns d_kv from the cross-attention banks, or None.
        """
        d_f = self._c_out.reshape(-1, 1, 1, 1, 1) * d_out
        _, d_kv = self.network.backward(d_f)
        return d_kv


def dsm_loss(denoiser: EDMDenoiser, x0: np.ndarray, sigma, noise: np.ndarray,
             cond_latents=None, k: int = 1, kv=None, flags=None, v_present=None,
             sigma_data: float = 0.5, want_grad: bool = False):
    """Weighted denoising score-matching loss, mean over all elements.

    With want_grad, runs the backward pass and returns (loss, d_kv).
    """
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    d = denoiser.denoise(x0 + noise, sigma, cond_latents, k, kv, flags, v_present)
    lam = dsm_weight(sigma, sigma_data).astype(x0.dtype).reshape(-1, 1, 1, 1, 1)
    diff = d - x0
    loss = float(np.mean(lam * diff * diff))
    if not want_grad:
        return loss, None
    d_out = (2.0 / diff.size) * lam * diff
    d_kv = denoiser.backward(d_out.astype(x0.dtype))
    return loss, d_kv
