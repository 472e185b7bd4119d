"""DDPM schedule, forward noising, reverse steps and the guided sampler.

Timesteps are 1-based: ``t = 1 .. T`` and ``sched.betas[t - 1]`` is beta_t.
All randomness is supplied by the caller through an explicit
``numpy.random.Generator`` (or pre-drawn noise arrays).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .numerics import DTYPE, Tensor, mse_loss, no_grad


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def schedule_from_betas(betas: Sequence[float]) -> NoiseSchedule:
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 1 or b.size < 1:
        raise ValueError("betas must be a non-empty 1-d sequence")
    if np.any(b <= 0.0) or np.any(b >= 1.0):
        raise ValueError("every beta must lie in (0, 1)")
    alphas = 1.0 - b
    return NoiseSchedule(betas=b, alphas=alphas, alpha_bars=np.cumprod(alphas),
                         sigmas=np.sqrt(b))


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule, held in float64."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, T)
    return schedule_from_betas(betas)


def _coef(x: float) -> np.float32:
    return DTYPE(x)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    sched.check_t(t)
    if x0.shape != eps.shape:
        raise ValueError(f"forward_noise: x0 {x0.shape} and eps {eps.shape} differ")
    ab = sched.alpha_bars[t - 1]
    return _coef(np.sqrt(ab)) * x0 + _coef(np.sqrt(1.0 - ab)) * eps


def estimate_x0(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    sched.check_t(t)
    ab = sched.alpha_bars[t - 1]
    return (x_t - _coef(np.sqrt(1.0 - ab)) * eps_hat) / _coef(np.sqrt(ab))


def ddpm_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule,
              noise: np.ndarray | None, abar_lead: bool = False) -> np.ndarray:
    """One reverse update to x_{t-1}.

    ``abar_lead`` swaps the leading 1/sqrt(alpha_t) for 1/sqrt(abar_t);
    it exists only to compare the two variants and is never the default.
    """
    sched.check_t(t)
    beta = sched.betas[t - 1]
    ab = sched.alpha_bars[t - 1]
    lead = sched.alpha_bars[t - 1] if abar_lead else sched.alphas[t - 1]
    mean = _coef(1.0 / np.sqrt(lead)) * (x_t - _coef(beta / np.sqrt(1.0 - ab)) * eps_hat)
    if noise is None:
        return mean
    return mean + _coef(sched.sigmas[t - 1]) * noise


# ---------------------------------------------------------------- latent codec


@dataclass(frozen=True)
class LatentCodec:
    """Space-to-depth rearrangement standing in for an autoencoder.

    ``encode`` maps ``[N, C, H, W]`` to ``[N, C*f*f, H/f, W/f]``; ``decode``
    is its exact inverse.
    """

    factor: int = 2

    def encode(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        f = self.factor
        if h % f or w % f:
            raise ValueError(f"spatial size {h}x{w} not divisible by {f}")
        y = x.reshape(n, c, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4)
        return np.ascontiguousarray(y.reshape(n, c * f * f, h // f, w // f))

    def decode(self, z: np.ndarray) -> np.ndarray:
        n, cf, h, w = z.shape
        f = self.factor
        if cf % (f * f):
            raise ValueError(f"channel count {cf} not divisible by {f * f}")
        c = cf // (f * f)
        y = z.reshape(n, c, f, f, h, w).transpose(0, 1, 4, 2, 5, 3)
        return np.ascontiguousarray(y.reshape(n, c, h * f, w * f))


def to_signed(img: np.ndarray) -> np.ndarray:
    """[0, 1] pixels to the [-1, 1] range the denoiser works in."""
    return (img * DTYPE(2.0) - DTYPE(1.0)).astype(DTYPE)


def from_signed(x: np.ndarray) -> np.ndarray:
    return np.clip((x + DTYPE(1.0)) * DTYPE(0.5), 0.0, 1.0).astype(DTYPE)


# ---------------------------------------------------------------- loss & sampling


def training_loss(model, x0: np.ndarray, t: np.ndarray | int, text_cond, stack,
                  eps: np.ndarray, sched: NoiseSchedule) -> Tensor:
    """MSE between ``eps`` and the model's prediction at the noised input.

    ``x0`` and ``eps`` are latents ``[N, C, h, w]``; ``t`` is one timestep per
    batch item (or a scalar shared by all).  ``model`` is any callable
    ``model(x_t, t, text_cond, stack) -> Tensor``.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"training_loss: x0 {x0.shape} and eps {eps.shape} differ")
    n = x0.shape[0]
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    x_t = np.empty_like(x0)
    for i in range(n):
        x_t[i] = forward_noise(x0[i], int(ts[i]), eps[i], sched)
    pred = model(x_t, ts, text_cond, stack)
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    return mse_loss(pred, Tensor(eps))


def guided_eps(eps_cond: Callable[[], np.ndarray], eps_uncond: Callable[[], np.ndarray],
               scale: float) -> np.ndarray:
    """eps_u + s (eps_c - eps_u); scale 1 and 0 return one branch untouched."""
    if scale == 1.0:
        return eps_cond()
    if scale == 0.0:
        return eps_uncond()
    ec = eps_cond()
    eu = eps_uncond()
    return eu + DTYPE(scale) * (ec - eu)


def split_seed(seed: int, n: int) -> list[int]:
    """Independent per-chain seeds derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def sample_latent(eps_cond: Callable[[np.ndarray, int], np.ndarray],
                  eps_uncond: Callable[[np.ndarray, int], np.ndarray],
                  shape: tuple[int, ...], sched: NoiseSchedule, guidance_scale: float,
                  rng: np.random.Generator, abar_lead: bool = False,
                  trace: list | None = None) -> np.ndarray:
    """Full reverse chain from x_T ~ N(0, I) down to x_0 (latent space)."""
    if guidance_scale < 0:
        raise ValueError(f"guidance_scale must be >= 0, got {guidance_scale}")
    x = rng.standard_normal(shape).astype(DTYPE)
    for t in range(sched.T, 0, -1):
        eps_hat = guided_eps(lambda: eps_cond(x, t), lambda: eps_uncond(x, t), guidance_scale)
        if trace is not None:
            trace.append(eps_hat)
        noise = rng.standard_normal(shape).astype(DTYPE) if t > 1 else None
        x = ddpm_step(x, t, eps_hat, sched, noise, abar_lead=abar_lead)
    return x


def _stack_latent(stack, codec: LatentCodec) -> np.ndarray:
    return codec.encode(stack.to_array().transpose(2, 0, 1)[None])


def sample(model, text_cond: Sequence[int], stack, sched: NoiseSchedule,
           guidance_scale: float = 1.0, seed: int = 0, codec: LatentCodec = LatentCodec(),
           abar_lead: bool = False, trace: list | None = None) -> np.ndarray:
    """Generate one ``H x W x 3`` image in [0, 1] for a prompt and a stack.

    The unconditional branch uses the null prompt and an all-zero stack,
    matching how conditions are dropped during training.
    """
    cond = _stack_latent(stack, codec)
    uncond = np.zeros_like(cond)
    tokens = [list(text_cond)]
    shape = (1, model.config.latent_channels) + cond.shape[2:]

    def eps_c(x, t):
        return model.denoise(x, t, tokens, cond).data

    def eps_u(x, t):
        return model.denoise(x, t, [[]], uncond).data

    with no_grad():
        z = sample_latent(eps_c, eps_u, shape, sched, guidance_scale,
                          np.random.default_rng(seed), abar_lead, trace)
    return from_signed(codec.decode(z))[0].transpose(1, 2, 0)


def sample_batch(model, items: Sequence[tuple[Sequence[int], object]], sched: NoiseSchedule,
                 guidance_scale: float = 1.0, seed: int = 0,
                 codec: LatentCodec = LatentCodec()) -> list[np.ndarray]:
    """Independent chains, one per (tokens, stack), seeded by :func:`split_seed`."""
    seeds = split_seed(seed, len(items))
    return [sample(model, tok, st, sched, guidance_scale, s, codec)
            for (tok, st), s in zip(items, seeds)]
