"""DDPM core: noise schedule, forward noising, training loss, reverse sampling.

Conventions follow Ho et al. (2020): linear beta schedule, epsilon-prediction
objective, posterior-mean reverse step with sigma_t^2 = beta_t. Timesteps are
1-based: t in [1, T], with arrays indexed t-1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha/alpha-bar tables over T steps, stored in float64."""

    T: int
    beta_start: float
    beta_end: float
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def coeffs(self, t: int, dtype=torch.float32):
        """Return (sqrt(abar_t), sqrt(1-abar_t)) for 1-based t."""
        ab = self.alpha_bars[t - 1]
        return (ab.sqrt().to(dtype), (1.0 - ab).sqrt().to(dtype))


@dataclass(frozen=True)
class DiffusionSample:
    """A noised image x_t together with its timestep and the noise draw."""

    x_t: torch.Tensor
    t: int
    eps: Optional[torch.Tensor] = None


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with running-product alpha_bars (float64)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, "
            f"got ({beta_start}, {beta_end})"
        )
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(
        T=T,
        beta_start=beta_start,
        beta_end=beta_end,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
    )


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= t <= sched.T:
        raise ValueError(f"t={t} out of range [1, {sched.T}]")


def forward_noise(
    x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule
) -> DiffusionSample:
    """Closed-form forward process: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    _check_t(t, sched)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    c0, c1 = sched.coeffs(t, dtype=x0.dtype)
    return DiffusionSample(x_t=c0 * x0 + c1 * eps, t=t, eps=eps)


def forward_noise_batch(
    x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Vectorized forward noising with one timestep per batch element."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if t.ndim != 1 or t.shape[0] != x0.shape[0]:
        raise ValueError(f"t must be (N,) for N={x0.shape[0]}, got {tuple(t.shape)}")
    if not ((t >= 1) & (t <= sched.T)).all():
        raise ValueError(f"t values out of range [1, {sched.T}]")
    ab = sched.alpha_bars[t - 1]
    shape = (-1, *([1] * (x0.ndim - 1)))
    c0 = ab.sqrt().to(x0.dtype).view(shape)
    c1 = (1.0 - ab).sqrt().to(x0.dtype).view(shape)
    return c0 * x0 + c1 * eps


def simple_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    if eps_pred.shape != eps_true.shape:
        raise ValueError(
            f"shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}"
        )
    return ((eps_pred - eps_true) ** 2).mean()


# A denoising model here is any callable (x_t, t, cond) -> eps prediction.
DenoiseFn = Callable[[torch.Tensor, int, object], torch.Tensor]


def reverse_step(
    model: DenoiseFn,
    x_t: torch.Tensor,
    t: int,
    cond,
    sched: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    clip_x0: bool = False,
) -> torch.Tensor:
    """One DDPM posterior-mean step from x_t to x_{t-1}.

    x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) * eps_theta) / sqrt(alpha_t) + sigma_t z
    with sigma_t = sqrt(beta_t) and z suppressed at t=1.

    With clip_x0 the implied x0 estimate is clamped to [-1, 1] before the
    posterior mean (the reference DDPM sampler's clip_denoised behaviour);
    for in-range estimates this is algebraically identical to the formula
    above. It keeps short-trained models from drifting out of the data range
    over a long reverse chain.
    """
    _check_t(t, sched)
    eps = model(x_t, t, cond)
    beta = sched.betas[t - 1].to(x_t.dtype)
    alpha = sched.alphas[t - 1].to(x_t.dtype)
    abar = sched.alpha_bars[t - 1].to(x_t.dtype)
    if clip_x0:
        abar_prev = (
            sched.alpha_bars[t - 2].to(x_t.dtype)
            if t > 1
            else torch.ones((), dtype=x_t.dtype)
        )
        x0_hat = ((x_t - torch.sqrt(1.0 - abar) * eps) / torch.sqrt(abar)).clamp(-1, 1)
        mean = (
            torch.sqrt(abar_prev) * beta / (1.0 - abar) * x0_hat
            + torch.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar) * x_t
        )
    else:
        mean = (x_t - beta / torch.sqrt(1.0 - abar) * eps) / torch.sqrt(alpha)
    if t == 1:
        return mean
    z = torch.empty_like(x_t).normal_(generator=generator)
    return mean + torch.sqrt(beta) * z


def sample(
    model: DenoiseFn,
    cond,
    sched: NoiseSchedule,
    shape,
    generator: Optional[torch.Generator] = None,
    dtype=torch.float32,
    clip_x0: bool = False,
) -> torch.Tensor:
    """Full reverse chain from standard Gaussian noise to an x_0 estimate."""
    x = torch.empty(shape, dtype=dtype).normal_(generator=generator)
    for t in range(sched.T, 0, -1):
        x = reverse_step(model, x, t, cond, sched, generator, clip_x0=clip_x0)
    return x


def decode01(x: torch.Tensor) -> torch.Tensor:
    """Map model-range [-1, 1] output back to [0, 1] with clamping."""
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def encode_pm1(x01: torch.Tensor) -> torch.Tensor:
    """Map a [0, 1] image/mask into the [-1, 1] diffusion range."""
    return x01 * 2.0 - 1.0


def ensemble_predict(
    model: DenoiseFn,
    cond,
    sched: NoiseSchedule,
    shape,
    K: int,
    seed: int,
    threshold: float = 0.5,
    clip_x0: bool = True,
):
    """Fuse K independent reverse-diffusion runs.

    Each run uses its own RNG stream derived from the root seed (stream index
    = run index). Runs are decoded to [0,1] and clamped before averaging.

    Returns (mean_map, binary_mask, variance_map); variance is the per-pixel
    unbiased sample variance (zero for K=1).
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    runs = []
    for k in range(K):
        gen = torch.Generator().manual_seed(_stream_seed(seed, k))
        runs.append(decode01(sample(model, cond, sched, shape, gen, clip_x0=clip_x0)))
    stack = torch.stack(runs, dim=0)
    mean_map = stack.mean(dim=0)
    if K == 1:
        var_map = torch.zeros_like(mean_map)
    else:
        var_map = stack.var(dim=0, unbiased=True)
    binary = (mean_map >= threshold).to(mean_map.dtype)
    return mean_map, binary, var_map


def _stream_seed(root_seed: int, stream: int) -> int:
    # Decorrelate per-run streams from a root seed (SplitMix-style mix).
    x = (root_seed * 0x9E3779B97F4A7C15 + stream + 1) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x ^= x >> 27
    return x & 0x7FFFFFFFFFFFFFFF


def pretrain_generative(
    images: torch.Tensor,
    model: torch.nn.Module,
    sched: NoiseSchedule,
    steps: int,
    lr: float = 2e-4,
    batch_size: int = 6,
    generator: Optional[torch.Generator] = None,
    weight_decay: float = 0.0,
):
    """Unconditional DDPM training of the noise predictor on raw images.

    images: (N, 1, H, W) tensor already mapped to [-1, 1]. Returns the
    per-step loss history; model weights are updated in place.
    """
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("images must be a non-empty (N,1,H,W) tensor")
    gen = generator if generator is not None else torch.Generator().manual_seed(0)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    n = images.shape[0]
    losses = []
    model.train()
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        x0 = images[idx]
        t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=gen)
        eps = torch.empty_like(x0).normal_(generator=gen)
        x_t = forward_noise_batch(x0, t, eps, sched)
        loss = simple_loss(model(x_t, t, None), eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses
