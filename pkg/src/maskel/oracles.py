"""Brute-force reference computations used to check the fast paths.

Everything here is deliberately literal: explicit loops, grids and finite
differences, sharing no code with the implementations they check.
"""

import math

import numpy as np
import torch


def psnr_loop(a, b, peak=1.0, cap=100.0):
    h, w = len(a), len(a[0])
    total = 0.0
    for i in range(h):
        for j in range(w):
            d = float(a[i][j]) - float(b[i][j])
            total += d * d
    mse = total / (h * w)
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / mse))


def ssim_loop(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Windowed SSIM evaluated position by position."""
    a = [[float(v) for v in row] for row in a]
    b = [[float(v) for v in row] for row in b]
    h, w = len(a), len(a[0])
    c = (size - 1) / 2
    g = [[math.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * sigma * sigma)) for j in range(size)] for i in range(size)]
    s = sum(sum(row) for row in g)
    g = [[v / s for v in row] for row in g]
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for i0 in range(h - size + 1):
        for j0 in range(w - size + 1):
            mu_a = mu_b = 0.0
            for i in range(size):
                for j in range(size):
                    mu_a += g[i][j] * a[i0 + i][j0 + j]
                    mu_b += g[i][j] * b[i0 + i][j0 + j]
            va = vb = cov = 0.0
            for i in range(size):
                for j in range(size):
                    da = a[i0 + i][j0 + j] - mu_a
                    db = b[i0 + i][j0 + j] - mu_b
                    va += g[i][j] * da * da
                    vb += g[i][j] * db * db
                    cov += g[i][j] * da * db
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def argmin_search(codes, queries):
    """Exhaustive nearest code per query; strict ``<`` keeps the lowest index on ties."""
    codes = np.asarray(codes, dtype=np.float64)
    out = []
    for q in np.asarray(queries, dtype=np.float64):
        best, best_d = 0, None
        for k, c in enumerate(codes):
            d = 0.0
            for u, v in zip(q, c):
                d += (u - v) ** 2
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def codebook_loss_direct(z_e, z_q, beta):
    """Value of ``|z_e - z_q|^2 + beta |z_e - z_q|^2`` averaged over rows."""
    z_e = np.asarray(z_e, dtype=np.float64)
    z_q = np.asarray(z_q, dtype=np.float64)
    total = 0.0
    for e, q in zip(z_e, z_q):
        d = float(np.sum((e - q) ** 2))
        total += d + beta * d
    return total / len(z_e)


def bayes_posterior_grid(x_t, x0, e0, eta_prev, eta_t, kappa, lo=-6.0, hi=6.0, n=200001):
    """Posterior mean/variance of ``x_{t-1}`` given ``x_t`` and ``x0`` by grid integration.

    Prior ``x_{t-1} ~ N(x0 + eta_prev e0, kappa^2 eta_prev)``, likelihood
    ``x_t ~ N(x_{t-1} + (eta_t - eta_prev) e0, kappa^2 (eta_t - eta_prev))``.
    """
    alpha = eta_t - eta_prev
    grid = np.linspace(lo, hi, n)
    log_prior = -((grid - x0 - eta_prev * e0) ** 2) / (2 * kappa ** 2 * eta_prev)
    log_like = -((x_t - grid - alpha * e0) ** 2) / (2 * kappa ** 2 * alpha)
    logp = log_prior + log_like
    p = np.exp(logp - logp.max())
    p /= p.sum()
    mean = float(np.sum(grid * p))
    var = float(np.sum((grid - mean) ** 2 * p))
    return mean, var


def monte_carlo_moments(samples):
    s = np.asarray(samples, dtype=np.float64)
    return float(s.mean()), float(s.var())


def finite_difference_check(loss_fn, params, n=100, h=1e-6, seed=0, floor=1e-10):
    """Compare autograd gradients with central differences on ``n`` random entries.

    ``loss_fn()`` must be deterministic and return a scalar tensor.  Returns
    a list of ``(analytic, numeric, relative_error)`` tuples where the
    relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    out = []
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(bounds, f, side="right"))
            i = int(f - (bounds[k - 1] if k else 0))
            p = params[k].view(-1)
            orig = p[i].item()
            p[i] = orig + h
            up = loss_fn().item()
            p[i] = orig - h
            down = loss_fn().item()
            p[i] = orig
            num = (up - down) / (2 * h)
            ana = grads[k].reshape(-1)[i].item()
            out.append((ana, num, abs(ana - num) / max(abs(ana), abs(num), floor)))
    return out
