"""Residual-shifting diffusion super-resolution (64×64 → 256×256).

The chain moves the HR image ``x0`` toward the pre-upsampled LR image ``y0``
by shifting the residual ``e0 = y0 - x0``::

    q(x_t | x_{t-1}, y0) = N(x_{t-1} + alpha_t e0, kappa^2 alpha_t I)
    q(x_t | x0, y0)      = N(x0 + eta_t e0,       kappa^2 eta_t I)

with ``alpha_t = eta_t - eta_{t-1}`` (``eta_0 = 0``).  A network predicts
``x0`` from ``(x_t, y0, t)``; sampling walks the Gaussian posterior

    mean = (eta_{t-1}/eta_t) x_t + (alpha_t/eta_t) x0_hat
    var  = kappa^2 (eta_{t-1}/eta_t) alpha_t

from ``x_T ~ N(y0, kappa^2 eta_T I)``.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .diffusion import _check_shapes, _check_step, _gather
from .errors import CheckpointError, ConfigError, ShapeError, TrainingError
from .layers import UNet, count_parameters
from .training import BatchSampler, StepLogger, TrainConfig, check_finite


@dataclass(frozen=True)
class ShiftSchedule:
    eta: np.ndarray
    kappa: float = 2.0

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float64).reshape(-1)
        if eta.size < 1:
            raise ConfigError("shift schedule needs at least one step")
        if np.any(np.diff(eta) <= 0):
            raise ConfigError("eta must be strictly increasing")
        if eta[0] < 1e-4:
            raise ConfigError(f"eta_1 = {eta[0]} below 1e-4")
        if not 0.99 <= eta[-1] <= 1.0:
            raise ConfigError(f"eta_T = {eta[-1]} outside [0.99, 1]")
        if not self.kappa > 0:
            raise ConfigError("kappa must be positive")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def T(self):
        return self.eta.size

    @property
    def eta_prev(self):
        return np.concatenate([[0.0], self.eta[:-1]])

    @property
    def alpha(self):
        return self.eta - self.eta_prev

    def to_dict(self):
        return {"eta": self.eta.tolist(), "kappa": self.kappa}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["eta"]), d["kappa"])


def make_shift_schedule(T=15, eta1=1e-3, etaT=0.999, kappa=2.0):
    """Geometric ``eta_t = eta1 * (etaT/eta1) ** ((t-1)/(T-1))``."""
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0.0 < eta1 < etaT <= 1.0:
        raise ConfigError(f"need 0 < eta1 < etaT <= 1, got {eta1}, {etaT}")
    if kappa <= 0:
        raise ConfigError("kappa must be positive")
    k = np.arange(T, dtype=np.float64) / (T - 1)
    eta = eta1 * (etaT / eta1) ** k
    eta[-1] = etaT
    return ShiftSchedule(eta, kappa)


def shift_forward_step(x_prev, e0, t, noise, s: ShiftSchedule):
    """``x_prev + alpha_t e0 + kappa sqrt(alpha_t) noise``."""
    _check_step(t, s.T)
    _check_shapes(x_prev, e0)
    _check_shapes(x_prev, noise)
    a = _gather(s.alpha, t, x_prev)
    return x_prev + a * e0 + s.kappa * a ** 0.5 * noise


def shift_forward_marginal(x0, e0, t, noise, s: ShiftSchedule):
    """``x0 + eta_t e0 + kappa sqrt(eta_t) noise``."""
    _check_step(t, s.T)
    _check_shapes(x0, e0)
    _check_shapes(x0, noise)
    eta = _gather(s.eta, t, x0)
    return x0 + eta * e0 + s.kappa * eta ** 0.5 * noise


def reverse_posterior(x_t, x0_hat, t, s: ShiftSchedule):
    """Mean and variance of ``q(x_{t-1} | x_t, x0)`` with ``x0 := x0_hat``."""
    _check_step(t, s.T)
    eta = _gather(s.eta, t, x_t)
    prev = _gather(s.eta_prev, t, x_t)
    alpha = eta - prev
    mean = prev / eta * x_t + alpha / eta * x0_hat
    var = s.kappa ** 2 * prev / eta * alpha
    return mean, var


@dataclass
class ResidualPair:
    """``y0`` is the LR image pre-upsampled to the HR grid; ``e0 = y0 - x0``."""

    y0: np.ndarray
    x0: np.ndarray

    def __post_init__(self):
        self.y0 = np.asarray(self.y0, dtype=np.float64)
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if self.y0.shape != self.x0.shape:
            raise ShapeError(f"y0 shape {self.y0.shape} != x0 shape {self.x0.shape}")

    @property
    def e0(self):
        return self.y0 - self.x0


def upsample(lr, factor):
    """Bicubic pre-upsampling onto the HR grid, clamped to ``[0, 1]``."""
    t = torch.as_tensor(np.asarray(lr, dtype=np.float64))
    squeeze = t.ndim == 2
    if squeeze:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    up = F.interpolate(t, scale_factor=factor, mode="bicubic", align_corners=False).clamp(0.0, 1.0)
    up = up.numpy()
    return up[0, 0] if squeeze else up[:, 0]


def make_residual_pair(lr, hr):
    """Pair an LR image with its HR target; ``hr`` side must be an integer multiple."""
    lr = np.asarray(lr, dtype=np.float64)
    hr = np.asarray(hr, dtype=np.float64)
    if lr.ndim != 2 or hr.ndim != 2 or hr.shape[0] % lr.shape[0] or hr.shape[1] % lr.shape[1]:
        raise ShapeError(f"LR {lr.shape} and HR {hr.shape} are not an integer scale pair")
    fy, fx = hr.shape[0] // lr.shape[0], hr.shape[1] // lr.shape[1]
    if fy != fx:
        raise ShapeError(f"anisotropic scale {fy}x{fx}")
    return ResidualPair(upsample(lr, fy), hr)


class SRNet(nn.Module):
    """Predicts ``x0`` as ``y0`` plus a learned correction from ``(x_t, y0, t)``.

    The output convolution starts at zero, so an untrained network returns
    ``y0``.
    """

    def __init__(self, channels=(16, 32, 64, 64), tdim=None):
        super().__init__()
        self.channels = tuple(channels)
        self.unet = UNet(2, 1, channels, tdim=tdim, zero_out=True)

    def forward(self, x_t, y0, t):
        return y0 + self.unet(torch.cat([x_t, y0], dim=1), t)


@dataclass
class SRConfig(TrainConfig):
    channels: tuple = (16, 32, 64, 64)
    scale: int = 4
    batch_size: int = 4

    def __post_init__(self):
        super().__post_init__()
        self.channels = tuple(self.channels)


@dataclass
class SRModel:
    net: SRNet
    schedule: ShiftSchedule
    scale: int
    step: int = 0
    losses: list = field(default_factory=list)

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype


def sr_loss(net, x0, y0, t, noise, s: ShiftSchedule):
    """MSE between predicted and true ``x0`` (``[-1, 1]`` scale tensors)."""
    x_t = shift_forward_marginal(x0, y0 - x0, t, noise, s)
    return torch.mean((net(x_t, y0, t) - x0) ** 2)


def _stack_pairs(pairs, dtype):
    pairs = list(pairs)
    if not pairs:
        raise TrainingError("no training pairs")
    shape = pairs[0].x0.shape
    for p in pairs:
        if p.x0.shape != shape:
            raise ShapeError(f"mixed pair shapes {shape} and {p.x0.shape}")
    y0 = torch.from_numpy(np.stack([p.y0 for p in pairs])[:, None]).to(dtype)
    x0 = torch.from_numpy(np.stack([p.x0 for p in pairs])[:, None]).to(dtype)
    return y0 * 2 - 1, x0 * 2 - 1


def train_sr(pairs, s: ShiftSchedule, cfg: SRConfig, net=None):
    """Train the ``x0``-predicting SR network on :class:`ResidualPair` items."""
    y0, x0 = _stack_pairs(pairs, cfg.torch_dtype)
    if net is None:
        torch.manual_seed(cfg.seed)
        net = SRNet(cfg.channels).to(cfg.torch_dtype)
    model = SRModel(net, s, cfg.scale)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    batches = BatchSampler(len(x0), cfg.batch_size, cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    logger = StepLogger("sr", cfg)
    try:
        for step in range(1, cfg.steps + 1):
            idx = batches.next()
            t = torch.randint(1, s.T + 1, (len(idx),), generator=gen)
            noise = torch.randn(x0[idx].shape, generator=gen, dtype=x0.dtype)
            loss = sr_loss(net, x0[idx], y0[idx], t, noise, s)
            check_finite(step, {"loss": loss.item()})
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.step = step
            model.losses.append(loss.item())
            logger(step, {"loss": loss.item()})
            if cfg.out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_sr(f"{cfg.out_dir}/sr_step{step}.ckpt", model)
    finally:
        logger.close()
    if cfg.out_dir:
        save_sr(f"{cfg.out_dir}/sr.ckpt", model)
    return model


@torch.no_grad()
def super_resolve(model, lr, s: ShiftSchedule, seed, predict_x0=None, chunk=8):
    """Lift ``lr`` (2-D or ``(N, h, w)``) to the HR grid; output in ``[0, 1]``.

    ``predict_x0(x_t, y0, t)`` overrides the network (tensors on the
    ``[-1, 1]`` scale); used for oracle denoisers.  Images run through the
    chain ``chunk`` at a time, drawing from one generator in order.
    """
    lr = np.asarray(lr, dtype=np.float64)
    single = lr.ndim == 2
    if single:
        lr = lr[None]
    scale = model.scale if model is not None else 4
    if model is not None and s.T != model.schedule.T:
        raise ConfigError("schedule does not match the model's training schedule")
    dtype = model.dtype if model is not None else torch.float64
    if predict_x0 is None:
        predict_x0 = model.net.eval()
    gen = torch.Generator().manual_seed(seed)
    outs = []
    for start in range(0, len(lr), chunk):
        y0 = torch.from_numpy(upsample(lr[start:start + chunk], scale)[:, None]).to(dtype) * 2 - 1
        x = y0 + s.kappa * np.sqrt(s.eta[-1]) * torch.randn(y0.shape, generator=gen, dtype=dtype)
        for t in range(s.T, 0, -1):
            tt = torch.full((len(y0),), t, dtype=torch.long)
            mean, var = reverse_posterior(x, predict_x0(x, y0, tt), t, s)
            if t > 1:
                x = mean + var ** 0.5 * torch.randn(x.shape, generator=gen, dtype=dtype)
            else:
                x = mean
        outs.append(((x[:, 0] + 1) / 2).clamp(0.0, 1.0).double().numpy())
    if model is not None:
        model.net.train()
    out = np.concatenate(outs)
    return out[0] if single else out


def save_sr(path, model: SRModel):
    checkpoint.save_module(path, {"net": model.net}, "sr", meta={
        "channels": list(model.net.channels), "scale": model.scale,
        "schedule": model.schedule.to_dict(), "step": model.step,
        "n_params": count_parameters(model.net), "dtype": str(model.dtype).replace("torch.", ""),
    })


def load_sr(path, dtype=None):
    arrays, header = checkpoint.load_arrays(path, stage="sr")
    meta = header["meta"]
    dtype = dtype or getattr(torch, meta.get("dtype", "float32"))
    net = SRNet(tuple(meta["channels"])).to(dtype)
    try:
        net.load_state_dict(checkpoint.load_state(arrays, "net", dtype))
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match architecture: {exc}") from exc
    return SRModel(net, ShiftSchedule.from_dict(meta["schedule"]), meta["scale"], step=meta["step"])
