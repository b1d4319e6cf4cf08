"""Unconditional denoising diffusion for 64×64 X-ray synthesis.

Forward corruption ``q(x_t | x_{t-1}) = N(sqrt(1-beta_t) x_{t-1}, beta_t I)`` and
its closed-form marginal ``N(sqrt(abar_t) x_0, (1-abar_t) I)``; the reverse
process is learned with an epsilon-predicting U-Net and sampled ancestrally
with ``Sigma = beta_t I``.

Steps are 1-based throughout: ``t`` ranges over ``1..T``.  Images enter and
leave in ``[0, 1]``; the chain runs on ``[-1, 1]``.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import checkpoint
from .errors import CheckpointError, ConfigError, ShapeError, StepOutOfRange
from .layers import UNet, count_parameters
from .training import BatchSampler, StepLogger, TrainConfig, as_image_batch, check_finite


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule ``beta_1..beta_T``; alphas are always derived."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if beta.size < 1:
            raise ConfigError("schedule needs at least one step")
        if not np.all((beta >= 0.0) & (beta < 1.0)):
            raise ConfigError("every beta_t must lie in [0, 1)")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def T(self):
        return self.beta.size

    @property
    def alpha(self):
        return 1.0 - self.beta

    @property
    def alpha_bar(self):
        return np.cumprod(self.alpha)

    def to_dict(self):
        return {"kind": "beta", "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["beta"]))


def make_linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _check_step(t, T):
    tt = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if tt.size == 0 or tt.min() < 1 or tt.max() > T:
        raise StepOutOfRange(f"step {t} outside 1..{T}")


def _gather(values, t, like):
    """Per-step coefficient, broadcastable against ``like``."""
    if isinstance(like, torch.Tensor):
        v = torch.tensor(values, dtype=like.dtype)
        if isinstance(t, torch.Tensor) and t.ndim == 1:
            return v[t - 1].reshape(-1, *([1] * (like.ndim - 1)))
        return v[int(t) - 1]
    return values[np.asarray(t) - 1]


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"noise shape {tuple(b.shape)} != image shape {tuple(a.shape)}")


def q_sample_step(x_prev, t, noise, s: NoiseSchedule):
    """One forward step: ``sqrt(1-beta_t) x_prev + sqrt(beta_t) noise`` (no clamping)."""
    _check_step(t, s.T)
    _check_shapes(x_prev, noise)
    beta = _gather(s.beta, t, x_prev)
    return (1.0 - beta) ** 0.5 * x_prev + beta ** 0.5 * noise


def q_sample_marginal(x0, t, noise, s: NoiseSchedule):
    """Closed-form ``x_t``: ``sqrt(abar_t) x0 + sqrt(1-abar_t) noise``."""
    _check_step(t, s.T)
    _check_shapes(x0, noise)
    ab = _gather(s.alpha_bar, t, x0)
    return ab ** 0.5 * x0 + (1.0 - ab) ** 0.5 * noise


@dataclass
class DenoiserConfig(TrainConfig):
    channels: tuple = (32, 64, 64)
    resolution: int = 64

    def __post_init__(self):
        super().__post_init__()
        self.channels = tuple(self.channels)


@dataclass
class DenoiserModel:
    """Noise-prediction network plus the schedule it was trained with."""

    net: UNet
    schedule: NoiseSchedule
    resolution: int
    channels: tuple
    step: int = 0
    losses: list = field(default_factory=list)

    def __call__(self, x_t, t):
        return self.net(x_t, t)

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype


def build_denoiser(channels=(32, 64, 64), dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    return UNet(1, 1, channels).to(dtype)


def denoiser_loss(net, x0, t, noise, s: NoiseSchedule):
    """Mean squared error between the true and predicted noise at steps ``t``.

    ``x0`` is on the ``[-1, 1]`` scale, ``t`` a ``(B,)`` long tensor.
    """
    x_t = q_sample_marginal(x0, t, noise, s)
    return torch.mean((noise - net(x_t, t)) ** 2)


def train_denoiser(dataset, s: NoiseSchedule, cfg: DenoiserConfig, net=None):
    """Train an epsilon-predictor on ``dataset`` (iterable of ``[0, 1]`` images)."""
    data = as_image_batch(dataset, cfg.torch_dtype)
    if data.shape[-1] != cfg.resolution:
        raise ShapeError(f"dataset resolution {data.shape[-1]} != configured {cfg.resolution}")
    data = data * 2.0 - 1.0
    net = net if net is not None else build_denoiser(cfg.channels, cfg.torch_dtype, cfg.seed)
    model = DenoiserModel(net, s, cfg.resolution, tuple(cfg.channels))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    batches = BatchSampler(len(data), cfg.batch_size, cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    logger = StepLogger("diffusion", cfg)
    try:
        for step in range(1, cfg.steps + 1):
            x0 = data[batches.next()]
            t = torch.randint(1, s.T + 1, (len(x0),), generator=gen)
            noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            loss = denoiser_loss(net, x0, t, noise, s)
            check_finite(step, {"loss": loss.item()})
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.step = step
            model.losses.append(loss.item())
            logger(step, {"loss": loss.item()})
            if cfg.out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_denoiser(f"{cfg.out_dir}/diffusion_step{step}.ckpt", model)
    finally:
        logger.close()
    if cfg.out_dir:
        save_denoiser(f"{cfg.out_dir}/diffusion.ckpt", model)
    return model


@torch.no_grad()
def p_sample(model: DenoiserModel, s: NoiseSchedule, n, seed, return_trajectory=False):
    """Ancestral sampling from ``x_T ~ N(0, I)``; returns ``(n, H, W)`` in ``[0, 1]``."""
    if s.T != model.schedule.T or not np.allclose(s.beta, model.schedule.beta):
        raise ConfigError("sampling schedule does not match the model's training schedule")
    dtype = model.dtype
    gen = torch.Generator().manual_seed(seed)
    r = model.resolution
    x = torch.randn((n, 1, r, r), generator=gen, dtype=dtype)
    beta, alpha, ab = s.beta, s.alpha, s.alpha_bar
    model.net.eval()
    for t in range(s.T, 0, -1):
        tt = torch.full((n,), t, dtype=torch.long)
        eps = model.net(x, tt)
        mean = (x - beta[t - 1] / np.sqrt(1.0 - ab[t - 1]) * eps) / np.sqrt(alpha[t - 1])
        if t > 1:
            x = mean + np.sqrt(beta[t - 1]) * torch.randn(x.shape, generator=gen, dtype=dtype)
        else:
            x = mean
    model.net.train()
    return ((x[:, 0] + 1.0) / 2.0).clamp(0.0, 1.0).double().numpy()


def save_denoiser(path, model: DenoiserModel):
    checkpoint.save_module(path, {"net": model.net}, "diffusion", meta={
        "resolution": model.resolution, "channels": list(model.channels),
        "schedule": model.schedule.to_dict(), "step": model.step,
        "n_params": count_parameters(model.net), "dtype": str(model.dtype).replace("torch.", ""),
    })


def load_denoiser(path, dtype=None):
    arrays, header = checkpoint.load_arrays(path, stage="diffusion")
    meta = header["meta"]
    dtype = dtype or getattr(torch, meta.get("dtype", "float32"))
    net = UNet(1, 1, tuple(meta["channels"])).to(dtype)
    try:
        net.load_state_dict(checkpoint.load_state(arrays, "net", dtype))
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match architecture: {exc}") from exc
    return DenoiserModel(net, NoiseSchedule.from_dict(meta["schedule"]), meta["resolution"],
                         tuple(meta["channels"]), step=meta["step"])


def config_dict(cfg):
    d = asdict(cfg)
    d["channels"] = list(d["channels"])
    return d
