"""Independent reference implementations used to check the package.

Everything here is deliberately written the slow, obvious way (python loops,
closed forms, dense integration) and shares no code with the package beyond
basic numpy/torch tensor types.
"""

import math

import numpy as np
import torch


def alpha_bar_loop(T: int, beta_start: float, beta_end: float) -> list[float]:
    """Cumulative product of (1 - beta) via an explicit loop."""
    betas = [beta_start + (beta_end - beta_start) * i / (T - 1) for i in range(T)]
    out = []
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
        out.append(prod)
    return out


def mse_loop(a: torch.Tensor, b: torch.Tensor) -> float:
    av = a.detach().double().flatten().tolist()
    bv = b.detach().double().flatten().tolist()
    total = 0.0
    for x, y in zip(av, bv):
        total += (x - y) ** 2
    return total / len(av)


def color_stats_loop(x: torch.Tensor):
    """Per-image per-channel (mean, population std) via scalar loops."""
    B, C, H, W = x.shape
    mu = np.zeros((B, C))
    sd = np.zeros((B, C))
    xv = x.detach().double().numpy()
    for b in range(B):
        for c in range(C):
            vals = [xv[b, c, i, j] for i in range(H) for j in range(W)]
            m = sum(vals) / len(vals)
            var = sum((v - m) ** 2 for v in vals) / len(vals)
            mu[b, c] = m
            sd[b, c] = math.sqrt(var)
    return mu, sd


def color_loss_loop(x_gen: torch.Tensor, x_real: torch.Tensor) -> float:
    mu_g, sd_g = color_stats_loop(x_gen)
    mu_r, sd_r = color_stats_loop(x_real)
    B, C = mu_g.shape
    total = 0.0
    for b in range(B):
        for c in range(C):
            total += (mu_g[b, c] - mu_r[b, c]) ** 2 + (sd_g[b, c] - sd_r[b, c]) ** 2
    return total / B


def poly_kernel_scalar(x, y) -> float:
    d = len(x)
    dot = sum(float(a) * float(b) for a, b in zip(x, y))
    return (dot / d + 1.0) ** 3


def mmd2_loop(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased MMD^2 with the degree-3 polynomial kernel, double loops."""
    m, n = len(x), len(y)
    s_xx = 0.0
    for i in range(m):
        for j in range(m):
            if i != j:
                s_xx += poly_kernel_scalar(x[i], x[j])
    s_yy = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                s_yy += poly_kernel_scalar(y[i], y[j])
    s_xy = 0.0
    for i in range(m):
        for j in range(n):
            s_xy += poly_kernel_scalar(x[i], y[j])
    return s_xx / (m * (m - 1)) + s_yy / (n * (n - 1)) - 2.0 * s_xy / (m * n)


def central_difference_grad(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Gradient of scalar-valued f at x by central differences (64-bit x)."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat = x.flatten()
    gflat = grad.flatten()
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


# --- linear-Gaussian toy model -------------------------------------------
# x0 ~ N(m, s^2 I). Under the forward process z_t = a x0 + sig e, the
# Bayes-optimal noise prediction is available in closed form:
#     eps*(z, t) = sig_t (z - a_t m) / (a_t^2 s^2 + sig_t^2)
# which makes the probability-flow solution computable to any accuracy by a
# dense first-order integration.


def linear_gaussian_eps(z: torch.Tensor, t: int, sched, m: float, s: float) -> torch.Tensor:
    a = float(sched.alpha_at(t))
    sig = float(sched.sigma_at(t))
    return sig * (z - a * m) / (a * a * s * s + sig * sig)


def linear_gaussian_xhat(z: torch.Tensor, t: int, sched, m: float, s: float) -> torch.Tensor:
    a = float(sched.alpha_at(t))
    sig = float(sched.sigma_at(t))
    eps = linear_gaussian_eps(z, t, sched, m, s)
    return (z - sig * eps) / a


def first_order_endpoint(sched, m: float, s: float, z_T: torch.Tensor,
                         times=None) -> torch.Tensor:
    """Dense first-order (DPM-Solver++ 1st order) reference integration.

    Steps through `times` (default: every integer T..1), ending with the data
    prediction at the final time, evaluated in float64.
    """
    if times is None:
        times = list(range(sched.T, 0, -1))
    z = z_T.double()
    for t_prev, t_cur in zip(times, times[1:]):
        lam_p = float(sched.lam_at(t_prev))
        lam_c = float(sched.lam_at(t_cur))
        h = lam_c - lam_p
        xhat = linear_gaussian_xhat(z, t_prev, sched, m, s)
        sig_ratio = float(sched.sigma_at(t_cur)) / float(sched.sigma_at(t_prev))
        z = sig_ratio * z - float(sched.alpha_at(t_cur)) * math.expm1(-h) * xhat
    return linear_gaussian_xhat(z, times[-1], sched, m, s)
