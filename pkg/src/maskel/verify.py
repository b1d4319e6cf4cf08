"""Fast invariant suite behind ``maskel verify``.

Each check returns a :class:`Check`; together they take well under a minute
on one CPU core.
"""

import time
from dataclasses import dataclass

import numpy as np
import torch

from . import oracles
from .diffusion import make_linear_schedule, q_sample_marginal, q_sample_step
from .metrics import confusion_from_rows, psnr, ssim
from .resshift import make_shift_schedule, reverse_posterior, shift_forward_marginal, shift_forward_step
from .stage2 import Codebook, quantize


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def moments_agree(samples, mean, var, mean_tol=0.01, var_tol=0.02):
    """Sample moments against closed-form ones.

    The mean tolerance is relative to ``max(|mean|, std)``: near-zero means
    (late diffusion steps) are judged on the distribution's own scale.
    """
    m, v = oracles.monte_carlo_moments(samples)
    ok = abs(m - mean) <= mean_tol * max(abs(mean), np.sqrt(var)) and abs(v - var) <= var_tol * var
    return ok, f"mean {m:.4f}/{mean:.4f} var {v:.4f}/{var:.4f}"


def ddpm_consistency(n=100_000, seed=0, x0=1.0):
    """Compose single steps from ``x0`` and compare with the closed-form marginal."""
    s = make_linear_schedule()
    rng = np.random.default_rng(seed)
    grid = [1, s.T // 4, s.T // 2, s.T]
    x = np.full(n, x0)
    ok, parts = True, []
    for t in range(1, s.T + 1):
        x = q_sample_step(x, t, rng.standard_normal(n), s)
        if t in grid:
            ab = s.alpha_bar[t - 1]
            good, msg = moments_agree(x, np.sqrt(ab) * x0, 1 - ab)
            ok &= good
            parts.append(f"t={t} {msg}")
    return ok, "; ".join(parts)


def resshift_consistency(n=100_000, seed=0, x0=0.3, e0=0.4):
    s = make_shift_schedule()
    rng = np.random.default_rng(seed)
    x = np.full(n, x0)
    ok, parts = True, []
    for t in range(1, s.T + 1):
        x = shift_forward_step(x, np.full(n, e0), t, rng.standard_normal(n), s)
        if t in (1, 4, 8, s.T):
            eta = s.eta[t - 1]
            good, msg = moments_agree(x, x0 + eta * e0, s.kappa ** 2 * eta)
            ok &= good
            parts.append(f"t={t} {msg}")
    # boundary: a full shift (eta_T = 1) lands on y0 in the noise-free case
    full = make_shift_schedule(etaT=1.0)
    xs = np.arange(8) / 8
    ys = 1 - xs
    end = shift_forward_marginal(xs, ys - xs, full.T, np.zeros(8), full)
    exact = bool(np.array_equal(end, ys))
    ok &= exact
    parts.append(f"eta_T=1 lands on y0: {exact}")
    return ok, "; ".join(parts)


def terminal_gaussian(n=100_000, seed=0):
    s = make_linear_schedule()
    rng = np.random.default_rng(seed)
    out = q_sample_marginal(np.full(n, 0.9), s.T, rng.standard_normal(n), s)
    m, sd = float(out.mean()), float(out.std())
    return abs(m) <= 0.02 and 0.98 <= sd <= 1.02, f"mean {m:.4f}, std {sd:.4f}"


def posterior_grid(seed=0):
    s = make_shift_schedule()
    worst = 0.0
    for t in (2, 8, 15):
        mean, var = reverse_posterior(np.array(0.9), np.array(0.2), t, s)
        gm, gv = oracles.bayes_posterior_grid(0.9, 0.2, 0.5, s.eta_prev[t - 1], s.eta[t - 1], s.kappa)
        worst = max(worst, abs(float(mean) - gm), abs(float(var) - gv))
    return worst <= 1e-3, f"max deviation {worst:.2e}"


def metric_oracles(n=100, seed=0):
    rng = np.random.default_rng(seed)
    worst_p = worst_s = 0.0
    for _ in range(n):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        worst_p = max(worst_p, abs(psnr(a, b) - oracles.psnr_loop(a, b)) / abs(oracles.psnr_loop(a, b)))
        ref = oracles.ssim_loop(a, b)
        worst_s = max(worst_s, abs(ssim(a, b) - ref) / abs(ref))
    # 16 pixels off by 0.5 out of 400: MSE is exactly the double nearest 0.01
    z = np.zeros((20, 20))
    off = z.copy()
    off[:4, :4] = 0.5
    spot = psnr(z, off) == 20.0
    same = ssim(rng.random((16, 16)), z[:16, :16]) != 1.0 and all(ssim(a, a) == 1.0 for a in rng.random((5, 16, 16)))
    ok = worst_p <= 1e-6 and worst_s <= 1e-6 and spot and same
    return ok, f"psnr rel {worst_p:.1e}, ssim rel {worst_s:.1e}, spot checks {spot and same}"


def quantizer_oracle(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    mismatches, worst = 0, 0.0
    for k in (2, 8, 32, 64):
        cb = Codebook(k, 8).double()
        with torch.no_grad():
            cb.weight.copy_(torch.from_numpy(rng.standard_normal((k, 8))))
        z = rng.standard_normal((n // 4, 8))
        q = quantize(cb, torch.from_numpy(z), beta=0.25)
        ref = oracles.argmin_search(cb.weight.detach().numpy(), z)
        mismatches += int(np.sum(q.indices.numpy() != ref))
        worst = max(worst, abs(q.loss.item() - oracles.codebook_loss_direct(z, cb.weight.detach().numpy()[ref], 0.25)))
    # tie rule: equidistant query resolves to the lowest index
    cb = Codebook(2, 2).double()
    with torch.no_grad():
        cb.weight.copy_(torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=torch.float64))
    tie = quantize(cb, torch.tensor([[0.5, 0.5]], dtype=torch.float64)).indices.item() == 0
    return mismatches == 0 and worst <= 1e-12 and tie, f"{mismatches} index mismatches, L_q err {worst:.1e}, tie->0 {tie}"


def study_reproduction():
    tallies = [(19, 6, 12, 13)] * 4 + [(19, 6, 13, 12), (18, 7, 13, 12)]
    rows = []
    for r, (tn, fp, fn, tp) in enumerate(tallies):
        for i, rated in enumerate(["real"] * tn + ["generated"] * fp):
            rows.append((f"r{r}", f"real{i}", "real", rated))
        for i, rated in enumerate(["real"] * fn + ["generated"] * tp):
            rows.append((f"r{r}", f"gen{i}", "generated", rated))
    _, avg = confusion_from_rows(rows)
    got = tuple(round(v, 2) for v in avg.as_tuple())
    return got == (18.83, 6.17, 12.33, 12.67), f"average (TN, FP, FN, TP) = {got}"


CHECKS = {
    "ddpm schedule consistency": ddpm_consistency,
    "resshift schedule consistency": resshift_consistency,
    "terminal gaussianity": terminal_gaussian,
    "resshift posterior vs grid Bayes": posterior_grid,
    "metric oracles": metric_oracles,
    "quantizer oracle": quantizer_oracle,
    "rater study average": study_reproduction,
}


def run_all(names=None):
    out = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(Check(name, bool(ok), detail, time.perf_counter() - t0))
    return out
