"""Stage 1: masked-autoencoder pretraining of the X-ray encoder (Encoder A).

Images are cut into non-overlapping ``p``×``p`` patches, a uniformly random
subset is masked, and only the visible patches (with their positional
encodings attached) pass through the transformer encoder.  A lightweight
decoder re-inserts a shared learned mask token at every hidden position and
predicts every pixel.  The loss is the pixel MSE over the whole image by
default; ``masked_only=True`` restricts it to hidden patches.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .errors import CheckpointError, ConfigError, ShapeError
from .layers import TransformerBlock, count_parameters, sincos_pos_embed
from .training import BatchSampler, StepLogger, TrainConfig, as_image_batch, check_finite


@dataclass
class TokenSequence:
    """Pixel patches of a batch with an optional visible/masked partition.

    ``tokens`` is ``(B, N, p*p)`` in row-major patch order, ``positions`` the
    patch indices ``0..N-1``; ``visible`` and ``masked`` are ``(B, n)`` index
    tensors, disjoint and jointly covering every position.
    """

    tokens: torch.Tensor
    positions: torch.Tensor
    patch: int
    image_shape: tuple
    visible: torch.Tensor | None = None
    masked: torch.Tensor | None = None

    @property
    def num_patches(self):
        return self.tokens.shape[1]


def _as_batch(image):
    x = torch.as_tensor(image)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected (H, W), (B, H, W) or (B, 1, H, W); got {tuple(x.shape)}")
    return x


def patchify(image, p):
    """Split images into row-major ``p``×``p`` patches (lossless)."""
    x = _as_batch(image)
    b, _, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    tokens = x.reshape(b, gh, p, gw, p).permute(0, 1, 3, 2, 4).reshape(b, gh * gw, p * p)
    return TokenSequence(tokens, torch.arange(gh * gw), p, (h, w))


def unpatchify(tokens, p, image_shape):
    """Inverse of :func:`patchify`; returns ``(B, 1, H, W)``."""
    h, w = image_shape
    b = tokens.shape[0]
    gh, gw = h // p, w // p
    if tokens.shape[1:] != (gh * gw, p * p):
        raise ShapeError(f"tokens {tuple(tokens.shape)} do not tile a {h}x{w} image with p={p}")
    return tokens.reshape(b, gh, gw, p, p).permute(0, 1, 3, 2, 4).reshape(b, 1, h, w)


def num_masked(ratio, n):
    """``round(ratio * n)``, halves rounding up, keeping one position visible."""
    return min(int(np.floor(ratio * n + 0.5)), n - 1)


def random_mask(seq: TokenSequence, ratio, seed=None, generator=None):
    """Uniformly choose hidden positions without replacement, per image."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"masking ratio {ratio} outside [0, 1)")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    b, n = seq.tokens.shape[:2]
    k = num_masked(ratio, n)
    order = torch.argsort(torch.rand((b, n), generator=generator), dim=1)
    masked = torch.sort(order[:, :k], dim=1).values
    visible = torch.sort(order[:, k:], dim=1).values
    return TokenSequence(seq.tokens, seq.positions, seq.patch, seq.image_shape, visible, masked)


class ViTEncoder(nn.Module):
    """Patch embedding + fixed 2-D sin/cos positions + transformer blocks.

    Used for both Encoder A (X-rays) and Encoder B (masking images).  The
    output is one ``dim``-vector per input token.
    """

    def __init__(self, img_size=64, patch=8, dim=128, depth=8, heads=4, mlp_ratio=4.0):
        super().__init__()
        if img_size % patch:
            raise ConfigError("img_size must be divisible by patch")
        self.img_size, self.patch, self.dim, self.depth, self.heads = img_size, patch, dim, depth, heads
        self.mlp_ratio = mlp_ratio
        self.grid = img_size // patch
        self.patch_embed = nn.Linear(patch * patch, dim)
        self.register_buffer("pos_embed", sincos_pos_embed(dim, self.grid).float(), persistent=False)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def arch(self):
        return {"img_size": self.img_size, "patch": self.patch, "dim": self.dim,
                "depth": self.depth, "heads": self.heads, "mlp_ratio": self.mlp_ratio}

    @property
    def feature_blocks(self):
        """1-based block indices tapped for perceptual features (2, 4, 6, 8 at depth 8)."""
        return sorted({max(1, round(k * self.depth / 4)) for k in range(1, 5)})

    def embed(self, tokens, positions):
        """Embed pixel patches ``(B, n, p*p)`` located at ``positions`` ``(B, n)``."""
        pos = self.pos_embed.to(tokens.dtype)[positions]
        return self.patch_embed(tokens) + pos

    def forward_tokens(self, tokens, positions, taps=()):
        h = self.embed(tokens, positions)
        feats = []
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if i in taps:
                feats.append(h)
        h = self.norm(h)
        return (h, feats) if taps else h

    def forward(self, images):
        """Latent grid ``(B, N, dim)`` of full images (every patch visible)."""
        seq = patchify(images, self.patch)
        pos = seq.positions.expand(seq.tokens.shape[0], -1)
        return self.forward_tokens(seq.tokens, pos)

    def features(self, images, taps=None):
        seq = patchify(images, self.patch)
        pos = seq.positions.expand(seq.tokens.shape[0], -1)
        return self.forward_tokens(seq.tokens, pos, taps=tuple(taps or self.feature_blocks))[1]


def encode_visible(enc: ViTEncoder, seq: TokenSequence):
    """Encode only the visible tokens; returns ``(B, n_visible, dim)``."""
    if seq.visible is None:
        raise ConfigError("sequence has no visible/masked partition; call random_mask first")
    if seq.visible.shape[1] == 0:
        raise ConfigError("no visible tokens to encode")
    idx = seq.visible
    tokens = torch.gather(seq.tokens, 1, idx[..., None].expand(-1, -1, seq.tokens.shape[-1]))
    return enc.forward_tokens(tokens, idx)


class LightDecoder(nn.Module):
    """Two transformer blocks plus a linear patch projection.

    With ``nonneg`` the projection passes through a leaky ReLU.  X-ray
    intensities are never negative, so empty background is cheapest to fit
    from below and the ``[0, 1]`` clamp at inference then makes it exactly
    zero.  The leak keeps every output position trainable (a plain ReLU can
    silence a pixel position for all patches at once).
    """

    LEAK = 0.01


    def __init__(self, enc_dim=128, dim=128, depth=2, heads=4, patch=8, grid=8, nonneg=True):
        super().__init__()
        self.patch, self.grid, self.nonneg = patch, grid, nonneg
        self.proj_in = nn.Linear(enc_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.register_buffer("pos_embed", sincos_pos_embed(dim, grid).float(), persistent=False)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, patch * patch)

    def forward(self, latents, visible):
        b, nv, _ = latents.shape
        n = self.grid * self.grid
        h = self.proj_in(latents)
        full = self.mask_token.to(h.dtype).expand(b, n, -1).clone()
        full = full.scatter(1, visible[..., None].expand(-1, -1, h.shape[-1]), h)
        full = full + self.pos_embed.to(h.dtype)
        for block in self.blocks:
            full = block(full)
        out = self.head(self.norm(full))
        return F.leaky_relu(out, self.LEAK) if self.nonneg else out


def reconstruct(dec: LightDecoder, latents, visible):
    """Place latents at their positions, mask tokens elsewhere; decode to pixels.

    Returns ``(B, 1, H, W)`` (unclamped).
    """
    n = dec.grid * dec.grid
    if latents.ndim != 3 or visible.ndim != 2 or latents.shape[:2] != visible.shape:
        raise ShapeError(f"{tuple(latents.shape[:2])} latents for {tuple(visible.shape)} positions")
    if visible.numel() and (visible.min() < 0 or visible.max() >= n):
        raise ShapeError(f"positions outside 0..{n - 1}")
    tokens = dec(latents, visible)
    side = dec.grid * dec.patch
    return unpatchify(tokens, dec.patch, (side, side))


def reconstruction_loss(x, xhat, reduction="mean", weight=None):
    """Pixel squared error; ``"sum"`` is the literal double sum, ``"mean"`` its average.

    ``weight`` (broadcastable 0/1 tensor) restricts the sum to selected pixels.
    """
    if tuple(x.shape) != tuple(xhat.shape):
        raise ShapeError(f"shapes {tuple(x.shape)} and {tuple(xhat.shape)} differ")
    sq = (x - xhat) ** 2
    if weight is not None:
        sq = sq * weight
        denom = torch.clamp((weight * torch.ones_like(sq)).sum(), min=1.0)
    else:
        denom = sq.numel()
    total = sq.sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / denom
    raise ConfigError(f"unknown reduction {reduction!r}")


class MAE(nn.Module):
    def __init__(self, img_size=64, patch=8, dim=128, depth=8, heads=4,
                 decoder_dim=128, decoder_depth=2, decoder_heads=4, decoder_nonneg=True):
        super().__init__()
        self.encoder = ViTEncoder(img_size, patch, dim, depth, heads)
        self.decoder = LightDecoder(dim, decoder_dim, decoder_depth, decoder_heads, patch,
                                    img_size // patch, decoder_nonneg)
        self.decoder_arch = {"decoder_dim": decoder_dim, "decoder_depth": decoder_depth,
                             "decoder_heads": decoder_heads, "decoder_nonneg": decoder_nonneg}

    def forward(self, images, ratio, generator):
        seq = random_mask(patchify(images, self.encoder.patch), ratio, generator=generator)
        latents = encode_visible(self.encoder, seq)
        return reconstruct(self.decoder, latents, seq.visible), seq


def mae_loss(model: MAE, images, seq: TokenSequence, masked_only=False, reduction="mean"):
    """Reconstruction loss for a given masking pattern (deterministic in ``seq``)."""
    latents = encode_visible(model.encoder, seq)
    recon = reconstruct(model.decoder, latents, seq.visible)
    weight = None
    if masked_only:
        p = model.encoder.patch
        w = torch.zeros(seq.tokens.shape[:2] + (p * p,), dtype=images.dtype)
        w.scatter_(1, seq.masked[..., None].expand(-1, -1, p * p), 1.0)
        weight = unpatchify(w, p, seq.image_shape)
    return reconstruction_loss(images, recon, reduction, weight)


@dataclass
class MAEConfig(TrainConfig):
    img_size: int = 64
    patch: int = 8
    dim: int = 128
    depth: int = 8
    heads: int = 4
    decoder_dim: int = 128
    decoder_depth: int = 2
    decoder_heads: int = 4
    decoder_nonneg: bool = True
    ratio: float = 0.75
    masked_only: bool = False
    lr: float = 1e-3
    warmup: int = 100
    batch_size: int = 32

    def __post_init__(self):
        super().__post_init__()
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError("ratio must lie in [0, 1)")


def build_mae(cfg: MAEConfig):
    torch.manual_seed(cfg.seed)
    return MAE(cfg.img_size, cfg.patch, cfg.dim, cfg.depth, cfg.heads,
               cfg.decoder_dim, cfg.decoder_depth, cfg.decoder_heads, cfg.decoder_nonneg).to(cfg.torch_dtype)


def warmup_cosine(steps, warmup):
    def f(step):
        if step < warmup:
            return (step + 1) / warmup
        return 0.5 * (1 + np.cos(np.pi * (step - warmup) / max(1, steps - warmup)))
    return f


@dataclass
class Stage1Result:
    model: MAE
    losses: list = field(default_factory=list)
    summed_losses: list = field(default_factory=list)

    @property
    def encoder(self):
        return self.model.encoder


def train_stage1(dataset, cfg: MAEConfig, model=None):
    """Jointly train encoder and light decoder on X-ray images in ``[0, 1]``.

    With ``cfg.out_dir`` set, writes ``mae.ckpt`` (both halves) and
    ``mae_encoder.ckpt`` (the encoder alone, for stage 2).
    """
    data = as_image_batch(dataset, cfg.torch_dtype)
    if data.shape[-1] != cfg.img_size:
        raise ShapeError(f"dataset resolution {data.shape[-1]} != configured {cfg.img_size}")
    model = model if model is not None else build_mae(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_cosine(cfg.steps, cfg.warmup))
    batches = BatchSampler(len(data), cfg.batch_size, cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    result = Stage1Result(model)
    logger = StepLogger("mae", cfg)
    try:
        for step in range(1, cfg.steps + 1):
            x = data[batches.next()]
            seq = random_mask(patchify(x, cfg.patch), cfg.ratio, generator=gen)
            loss = mae_loss(model, x, seq, cfg.masked_only)
            summed = loss.item() * (x.numel() if not cfg.masked_only else 1.0)
            check_finite(step, {"loss": loss.item()})
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            result.losses.append(loss.item())
            result.summed_losses.append(summed)
            logger(step, {"loss": loss.item(), "loss_sum": summed})
            if cfg.out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_mae(f"{cfg.out_dir}/mae_step{step}.ckpt", model, cfg)
    finally:
        logger.close()
    if cfg.out_dir:
        save_mae(f"{cfg.out_dir}/mae.ckpt", model, cfg)
        save_encoder(f"{cfg.out_dir}/mae_encoder.ckpt", model.encoder)
    return result


@torch.no_grad()
def mae_reconstruct(model: MAE, images, ratio=0.0, seed=0):
    """Reconstruct ``(N, H, W)`` images in ``[0, 1]``; ``ratio=0`` shows every patch."""
    dtype = next(model.parameters()).dtype
    x = _as_batch(torch.as_tensor(np.asarray(images), dtype=dtype))
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    out = []
    for chunk in torch.split(x, 64):
        recon, _ = model(chunk, ratio, gen)
        out.append(recon)
    model.train()
    return torch.cat(out)[:, 0].clamp(0, 1).double().numpy()


def save_encoder(path, enc: ViTEncoder, stage="mae_encoder", meta=None):
    dtype = str(next(enc.parameters()).dtype).replace("torch.", "")
    checkpoint.save_module(path, {"encoder": enc}, stage, meta={"arch": enc.arch(), "dtype": dtype, **(meta or {})})


def load_encoder(path, dtype=None, stage="mae_encoder"):
    arrays, header = checkpoint.load_arrays(path)
    if header["stage"] not in (stage, "mae"):
        raise CheckpointError(f"{path}: stage {header['stage']!r} holds no encoder")
    meta = header["meta"]
    arch = meta["arch"] if "arch" in meta else meta["encoder_arch"]
    dtype = dtype or getattr(torch, meta.get("dtype", "float32"))
    enc = ViTEncoder(**arch).to(dtype)
    try:
        enc.load_state_dict(checkpoint.load_state(arrays, "encoder", dtype))
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match architecture: {exc}") from exc
    return enc


def save_mae(path, model: MAE, cfg: MAEConfig):
    checkpoint.save_module(path, {"encoder": model.encoder, "decoder": model.decoder}, "mae", meta={
        "encoder_arch": model.encoder.arch(), "decoder_arch": model.decoder_arch,
        "config": asdict(cfg), "n_params": count_parameters(model), "dtype": cfg.dtype,
    })


def load_mae(path, dtype=None):
    arrays, header = checkpoint.load_arrays(path, stage="mae")
    meta = header["meta"]
    dtype = dtype or getattr(torch, meta.get("dtype", "float32"))
    a = meta["encoder_arch"]
    model = MAE(a["img_size"], a["patch"], a["dim"], a["depth"], a["heads"], **meta["decoder_arch"]).to(dtype)
    try:
        model.encoder.load_state_dict(checkpoint.load_state(arrays, "encoder", dtype))
        model.decoder.load_state_dict(checkpoint.load_state(arrays, "decoder", dtype))
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match architecture: {exc}") from exc
    return model
