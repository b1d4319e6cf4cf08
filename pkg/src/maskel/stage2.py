"""Stage 2: masking image -> X-ray through a quantized latent space.

Encoder B (same architecture as the frozen stage-1 Encoder A) maps a
masking image to a latent grid ``z_e``; it is pulled toward Encoder A's
latents of the paired X-ray.  Every latent vector is replaced by its nearest
codebook entry and a five-stage upsampling decoder with self-attention turns
the quantized grid into an X-ray.  Training minimises

    total = a1 * (L_rec + L_q) + a2 * L_perc + a3 * mean((V_e - V_hat)^2)
    L_q   = |sg[z_e] - z_q|^2 + beta * |z_e - sg[z_q]|^2

where ``sg`` stops gradients and the decoder receives ``z_q`` through a
straight-through estimator.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .errors import CheckpointError, ConfigError, ShapeError, TrainingError, ValidationError
from .layers import ResBlock, SelfAttention2d, count_parameters, group_norm
from .mae import ViTEncoder, reconstruction_loss
from .training import BatchSampler, StepLogger, TrainConfig, check_finite


def stop_gradient(t):
    return t.detach()


class FrozenStopGradient:
    """Stop-gradient that replays the values recorded at a base point.

    Finite-difference checks need a function whose ordinary derivative equals
    the stop-gradient/straight-through gradient.  In ``record`` mode this
    behaves like :func:`stop_gradient` and remembers each value; in
    ``replay`` mode it returns the remembered constants in call order,
    ignoring its argument.
    """

    def __init__(self):
        self.values = []
        self.mode = "record"
        self._i = 0

    def replay(self):
        self.mode, self._i = "replay", 0
        return self

    def __call__(self, t):
        if self.mode == "record":
            v = t.detach().clone()
            self.values.append(v)
            return v
        v = self.values[self._i]
        self._i += 1
        return v


class Codebook(nn.Module):
    """``K`` learnable ``D``-dimensional codes with usage bookkeeping."""

    def __init__(self, num_codes=512, dim=128):
        super().__init__()
        if num_codes < 2:
            raise ConfigError("codebook needs K >= 2")
        self.weight = nn.Parameter(torch.empty(num_codes, dim).uniform_(-1 / num_codes, 1 / num_codes))
        self.register_buffer("usage", torch.zeros(num_codes, dtype=torch.long))
        self.register_buffer("last_used", torch.zeros(num_codes, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @property
    def num_codes(self):
        return self.weight.shape[0]

    @property
    def dim(self):
        return self.weight.shape[1]


def _exact_nearest(codes, z):
    d = ((z[:, None, :] - codes[None, :, :]) ** 2).sum(-1)
    return torch.argmin(d, dim=1)  # first minimum on ties


def nearest_codes(codes, z, shortlist=8):
    """Index of the Euclidean-nearest code for every row of ``z``; ties -> lowest index.

    Candidates come from the fast ``|z|^2 - 2 z.c + |c|^2`` form; the
    shortlist is then re-ranked with exact differences, so the result equals
    exhaustive search.  Rows whose shortlist might miss a near-tie fall back
    to the exhaustive computation.
    """
    if len(z) == 0:
        return torch.empty(0, dtype=torch.long)
    k = min(shortlist, codes.shape[0])
    if k == codes.shape[0]:
        return _exact_nearest(codes, z)
    zz = (z * z).sum(-1, keepdim=True)
    cc = (codes * codes).sum(-1)
    approx = zz - 2 * z @ codes.T + cc
    vals, cand = torch.topk(approx, k + 1, dim=1, largest=False)
    # rounding bound of the expanded form, with a wide margin
    tol = 64 * torch.finfo(z.dtype).eps * (zz[:, 0] + cc.max() + 1.0)
    cand = torch.sort(cand[:, :k], dim=1).values  # index order makes argmin pick the lowest on ties
    exact = ((z[:, None, :] - codes[cand]) ** 2).sum(-1)
    idx = cand.gather(1, torch.argmin(exact, dim=1, keepdim=True))[:, 0]
    unsure = vals[:, k] - vals[:, 0] <= 2 * tol
    if unsure.any():
        idx[unsure] = _exact_nearest(codes, z[unsure])
    return idx


def codebook_loss(z_e, z_q, beta, sg=stop_gradient):
    """``|sg[z_e]-z_q|^2 + beta |z_e-sg[z_q]|^2``, summed over D, averaged over positions."""
    first = ((sg(z_e) - z_q) ** 2).sum(-1).mean()
    second = ((z_e - sg(z_q)) ** 2).sum(-1).mean()
    return first + beta * second


@dataclass
class Quantized:
    z_q: torch.Tensor  # straight-through output fed downstream
    codes: torch.Tensor  # raw selected codebook rows
    indices: torch.Tensor
    loss: torch.Tensor


def quantize(cb: Codebook, z_e, beta=0.25, sg=stop_gradient):
    """Nearest-code quantization of ``z_e`` (``(..., D)``).

    The returned ``z_q`` equals the selected codes in value while its
    gradient with respect to ``z_e`` is the identity.
    """
    if cb.num_codes == 0:
        raise ConfigError("empty codebook")
    if z_e.shape[-1] != cb.dim:
        raise ShapeError(f"latent dim {z_e.shape[-1]} != code dim {cb.dim}")
    flat = z_e.reshape(-1, cb.dim)
    with torch.no_grad():
        idx = nearest_codes(cb.weight.to(flat.dtype), flat.detach())
    codes = cb.weight.to(z_e.dtype)[idx].reshape(z_e.shape)
    loss = codebook_loss(z_e, codes, beta, sg)
    z_q = z_e + sg(codes - z_e)
    return Quantized(z_q, codes, idx.reshape(z_e.shape[:-1]), loss)


class XrayDecoder(nn.Module):
    """Latent grid -> image through exactly five upsampling stages.

    Stages double the resolution (bilinear interpolation + convolution +
    residual block) until the image size is reached; the remaining stages
    keep the resolution and only refine.  Self-attention runs at the latent
    grid size and at twice that size.
    """

    STAGES = 5

    def __init__(self, dim=128, grid=8, img_size=64, channels=(128, 64, 32, 16, 16)):
        super().__init__()
        n_up = int(round(math.log2(img_size / grid)))
        if grid * 2 ** n_up != img_size or n_up > self.STAGES:
            raise ConfigError(f"cannot reach {img_size} from grid {grid} in {self.STAGES} doubling stages")
        if len(channels) != self.STAGES:
            raise ConfigError(f"need {self.STAGES} stage widths")
        self.dim, self.grid, self.img_size, self.channels = dim, grid, img_size, tuple(channels)
        self.n_up = n_up
        self.inp = nn.Conv2d(dim, channels[0], 3, padding=1)
        self.attn_in = SelfAttention2d(channels[0])
        self.stages = nn.ModuleList()
        self.attn = nn.ModuleList()
        prev = channels[0]
        for i, ch in enumerate(channels):
            self.stages.append(nn.ModuleDict({
                "conv": nn.Conv2d(prev, ch, 3, padding=1),
                "res": ResBlock(ch, ch),
            }))
            at_double_grid = i == 0 and n_up > 0
            self.attn.append(SelfAttention2d(ch) if at_double_grid else nn.Identity())
            prev = ch
        self.out_norm = group_norm(prev)
        self.out = nn.Conv2d(prev, 1, 3, padding=1)

    def arch(self):
        return {"dim": self.dim, "grid": self.grid, "img_size": self.img_size, "channels": list(self.channels)}

    def forward(self, z):
        b, n, d = z.shape
        if n != self.grid * self.grid or d != self.dim:
            raise ShapeError(f"latents {tuple(z.shape)} do not match a {self.grid}x{self.grid}x{self.dim} grid")
        h = z.transpose(1, 2).reshape(b, d, self.grid, self.grid)
        h = self.attn_in(self.inp(h))
        for i, (stage, attn) in enumerate(zip(self.stages, self.attn)):
            if i < self.n_up:
                h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = stage["res"](stage["conv"](h))
            h = attn(h)
        return self.out(F.silu(self.out_norm(h)))


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 0.1
    alpha3: float = 1.0
    beta: float = 0.25

    def __post_init__(self):
        vals = (self.alpha1, self.alpha2, self.alpha3, self.beta)
        if any(v < 0 for v in vals):
            raise ConfigError(f"loss weights must be non-negative, got {vals}")
        if self.alpha1 == self.alpha2 == self.alpha3 == 0:
            raise ConfigError("at least one of alpha1..alpha3 must be positive")


def latent_alignment_loss(ve, vhat):
    """Mean squared difference between two latent grids."""
    if tuple(ve.shape) != tuple(vhat.shape):
        raise ShapeError(f"latent shapes {tuple(ve.shape)} and {tuple(vhat.shape)} differ")
    return torch.mean((ve - vhat) ** 2)


def perceptual_loss(extractor, x, xhat):
    """Sum over tapped blocks of the mean squared activation difference."""
    if extractor is None:
        raise ConfigError("perceptual loss needs the frozen stage-1 encoder")
    if tuple(x.shape) != tuple(xhat.shape):
        raise ShapeError(f"shapes {tuple(x.shape)} and {tuple(xhat.shape)} differ")
    fx = extractor.features(x)
    fy = extractor.features(xhat)
    return sum(torch.mean((a - b) ** 2) for a, b in zip(fx, fy))


def stage2_loss(x, xhat, z_e, z_q, ve, vhat, w: LossWeights, extractor=None, sg=stop_gradient):
    """Weighted objective and its components.

    ``z_q`` are the raw codebook rows selected for ``z_e`` (not the
    straight-through tensor).  Returns ``(total, components)``.
    """
    rec = reconstruction_loss(x, xhat)
    lq = codebook_loss(z_e, z_q, w.beta, sg)
    perc = perceptual_loss(extractor, x, xhat) if w.alpha2 > 0 else torch.zeros((), dtype=x.dtype)
    align = latent_alignment_loss(ve, vhat)
    total = w.alpha1 * (rec + lq) + w.alpha2 * perc + w.alpha3 * align
    return total, {"rec": rec, "quant": lq, "perceptual": perc, "align": align}


class Stage2Model(nn.Module):
    """Encoder B + codebook + decoder; the inference path needs nothing else."""

    def __init__(self, encoder_arch, num_codes=512, decoder_channels=(128, 64, 32, 16, 16), beta=0.25):
        super().__init__()
        self.encoder_b = ViTEncoder(**encoder_arch)
        e = self.encoder_b
        self.codebook = Codebook(num_codes, e.dim)
        self.decoder = XrayDecoder(e.dim, e.grid, e.img_size, decoder_channels)
        self.beta = beta

    def forward(self, mask, sg=stop_gradient):
        z_e = self.encoder_b(mask)
        q = quantize(self.codebook, z_e, self.beta, sg)
        return self.decoder(q.z_q), z_e, q


@dataclass
class Stage2Config(TrainConfig):
    num_codes: int = 512
    alpha1: float = 1.0
    alpha2: float = 0.1
    alpha3: float = 1.0
    beta: float = 0.25
    decoder_channels: tuple = (128, 64, 32, 16, 16)
    warm_start: bool = True
    revive_after: int = 500
    aux_recon: bool = False
    lr: float = 5e-4
    warmup: int = 100

    def __post_init__(self):
        super().__post_init__()
        self.decoder_channels = tuple(self.decoder_channels)
        self.weights  # validates

    @property
    def weights(self):
        return LossWeights(self.alpha1, self.alpha2, self.alpha3, self.beta)


@dataclass
class Stage2Result:
    model: Stage2Model
    losses: dict = field(default_factory=lambda: {k: [] for k in ("total", "rec", "quant", "perceptual", "align")})


def _as_pairs(masks, xrays, dtype):
    masks = np.asarray(masks, dtype=np.float64)
    xrays = np.asarray(xrays, dtype=np.float64)
    if len(masks) == 0:
        raise TrainingError("no training pairs")
    if masks.shape != xrays.shape or masks.ndim != 3:
        raise ShapeError(f"unpaired data: masks {masks.shape} vs xrays {xrays.shape}")
    return (torch.from_numpy(masks[:, None]).to(dtype), torch.from_numpy(xrays[:, None]).to(dtype))


def freeze(module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def build_stage2(enc_a: ViTEncoder, cfg: Stage2Config):
    torch.manual_seed(cfg.seed)
    model = Stage2Model(enc_a.arch(), cfg.num_codes, cfg.decoder_channels, cfg.beta).to(cfg.torch_dtype)
    if cfg.warm_start:
        model.encoder_b.load_state_dict(enc_a.state_dict())
    return model


@torch.no_grad()
def _init_codes(cb: Codebook, z, gen, noise=1e-2):
    pick = torch.randint(0, len(z), (cb.num_codes,), generator=gen)
    cb.weight.copy_(z[pick] + noise * torch.randn(cb.weight.shape, generator=gen, dtype=z.dtype))
    cb.initialized.fill_(True)


@torch.no_grad()
def _revive(cb: Codebook, z, indices, step, after, gen):
    used = torch.unique(indices)
    cb.usage.index_add_(0, used, torch.ones_like(used))
    cb.last_used[used] = step
    dead = torch.nonzero(step - cb.last_used >= after).flatten()
    if len(dead):
        pick = torch.randint(0, len(z), (len(dead),), generator=gen)
        cb.weight[dead] = z[pick]
        cb.last_used[dead] = step
    return len(dead)


def train_stage2(masks, xrays, enc_a: ViTEncoder, cfg: Stage2Config, model=None):
    """Train Encoder B, codebook and decoder against a frozen Encoder A.

    ``masks`` and ``xrays`` are aligned ``(N, H, W)`` arrays in ``[0, 1]``.
    """
    m, x = _as_pairs(masks, xrays, cfg.torch_dtype)
    if m.shape[-1] != enc_a.img_size:
        raise ShapeError(f"data resolution {m.shape[-1]} != encoder input {enc_a.img_size}")
    enc_a = freeze(enc_a.to(cfg.torch_dtype))
    model = model if model is not None else build_stage2(enc_a, cfg)
    w = cfg.weights
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    from .mae import warmup_cosine
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_cosine(cfg.steps, cfg.warmup))
    batches = BatchSampler(len(x), cfg.batch_size, cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    result = Stage2Result(model)
    logger = StepLogger("stage2", cfg)
    try:
        for step in range(1, cfg.steps + 1):
            idx = batches.next()
            mb, xb = m[idx], x[idx]
            with torch.no_grad():
                ve = enc_a(xb)
            z_e = model.encoder_b(mb)
            if not bool(model.codebook.initialized):
                _init_codes(model.codebook, z_e.detach().reshape(-1, z_e.shape[-1]), gen)
            q = quantize(model.codebook, z_e, w.beta)
            xhat = model.decoder(q.z_q)
            total, comps = stage2_loss(xb, xhat, z_e, q.codes, ve, z_e, w, enc_a)
            if cfg.aux_recon:
                qa = quantize(model.codebook, ve, w.beta)
                total = total + w.alpha1 * (reconstruction_loss(xb, model.decoder(qa.z_q)) + qa.loss)
            vals = {"total": total.item(), **{k: v.item() for k, v in comps.items()}}
            check_finite(step, vals)
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            revived = _revive(model.codebook, z_e.detach().reshape(-1, z_e.shape[-1]),
                              q.indices.flatten(), step, cfg.revive_after, gen)
            for k, v in vals.items():
                result.losses[k].append(v)
            logger(step, {**vals, "revived": revived})
            if cfg.out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_stage2(f"{cfg.out_dir}/stage2_step{step}.ckpt", model, cfg)
    finally:
        logger.close()
    if cfg.out_dir:
        save_stage2(f"{cfg.out_dir}/stage2.ckpt", model, cfg)
    return result


@torch.no_grad()
def predict_xray(model: Stage2Model, mask):
    """X-ray prediction in ``[0, 1]`` for a binary mask (2-D or ``(N, H, W)``)."""
    arr = np.asarray(mask, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or not np.all((arr == 0.0) | (arr == 1.0)):
        raise ValidationError("masking image must be binary (values in {0, 1})")
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != model.encoder_b.img_size or arr.shape[-2] != model.encoder_b.img_size:
        raise ShapeError(f"mask shape {arr.shape} does not match model input {model.encoder_b.img_size}")
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    out = []
    for chunk in torch.split(torch.from_numpy(arr[:, None]).to(dtype), 64):
        out.append(model(chunk)[0])
    model.train(was_training)
    pred = torch.cat(out)[:, 0].clamp(0.0, 1.0).double().numpy()
    return pred[0] if single else pred


def save_stage2(path, model: Stage2Model, cfg: Stage2Config):
    meta = {"encoder_arch": model.encoder_b.arch(), "num_codes": model.codebook.num_codes,
            "decoder_channels": list(model.decoder.channels), "beta": model.beta,
            "config": {**asdict(cfg), "decoder_channels": list(cfg.decoder_channels)},
            "n_params": count_parameters(model), "dtype": cfg.dtype}
    checkpoint.save_module(path, {"model": model}, "stage2", meta=meta)


def load_stage2(path, dtype=None):
    arrays, header = checkpoint.load_arrays(path, stage="stage2")
    meta = header["meta"]
    dtype = dtype or getattr(torch, meta.get("dtype", "float32"))
    model = Stage2Model(meta["encoder_arch"], meta["num_codes"], tuple(meta["decoder_channels"]), meta["beta"])
    model = model.to(dtype)
    try:
        model.load_state_dict(checkpoint.load_state(arrays, "model", dtype))
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match architecture: {exc}") from exc
    return model
