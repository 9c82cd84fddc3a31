"""Discrete noise schedule and the forward diffusion process.

The schedule stores, for T discrete steps, the per-step variances beta_t and
the derived coefficients of the marginal q(z_t | z_0) = N(alpha_t z_0,
sigma_t^2 I):

    alpha_bar_t = prod_{s<=t} (1 - beta_s)
    alpha_t     = sqrt(alpha_bar_t)
    sigma_t     = sqrt(1 - alpha_bar_t)
    lam_t       = log(alpha_t / sigma_t)      # half-logSNR, used by the sampler

Timesteps are 1-indexed everywhere at the interface: t in {1, ..., T}.
Arrays are float64 so alpha^2 + sigma^2 = 1 holds to ~1e-16.
"""

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients for T discrete steps (all arrays length T)."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray

    def _at(self, arr: np.ndarray, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        return arr[t - 1]

    def alpha_at(self, t):
        return self._at(self.alpha, t)

    def sigma_at(self, t):
        return self._at(self.sigma, t)

    def lam_at(self, t):
        return self._at(self.lam, t)

    def coeffs(self, t: torch.Tensor, dtype=torch.float32):
        """(alpha, sigma) for a 1-indexed integer tensor t, shaped [B,1,1,1]."""
        tn = t.detach().cpu().numpy()
        a = torch.as_tensor(self.alpha_at(tn), dtype=dtype).view(-1, 1, 1, 1)
        s = torch.as_tensor(self.sigma_at(tn), dtype=dtype).view(-1, 1, 1, 1)
        return a, s


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                   kind: str = "linear") -> NoiseSchedule:
    """Linear beta schedule, beta spaced from beta_start to beta_end inclusive."""
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind: {kind!r}")
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    lam = np.log(alpha / sigma)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar,
                         alpha=alpha, sigma=sigma, lam=lam)


def forward_noise(z0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor,
                  sched: NoiseSchedule) -> torch.Tensor:
    """z_t = alpha_t * z0 + sigma_t * eps, per sample (t is [B], 1-indexed)."""
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    if t.shape != (z0.shape[0],):
        raise ValueError(f"t must have shape [B]={z0.shape[0]}, got {tuple(t.shape)}")
    a, s = sched.coeffs(t, dtype=z0.dtype)
    return a * z0 + s * eps


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over batch and all elements; the training objective."""
    if eps_hat.shape != eps.shape:
        raise ValueError(
            f"shape mismatch: eps_hat {tuple(eps_hat.shape)} vs eps {tuple(eps.shape)}"
        )
    return torch.mean((eps - eps_hat) ** 2)
