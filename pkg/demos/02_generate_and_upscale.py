"""Data augmentation half of the pipeline: unconditional 64² generation, then 4× SR.

Trains a small noise-prediction UNet on phantom X-rays, draws ancestral
samples, trains the residual-shift super-resolver on 256² phantoms and lifts
the samples to 256².  Budgets default to a few CPU minutes; raise the step
counts for cleaner samples.

    python demos/02_generate_and_upscale.py --out demo_out/02
"""

import argparse
from pathlib import Path

import numpy as np

from maskel.cli import tile
from maskel.diffusion import DenoiserConfig, make_linear_schedule, p_sample, train_denoiser
from maskel.metrics import psnr
from maskel.phantom import box_downsample, render_arrays, save_png
from maskel.resshift import SRConfig, make_residual_pair, make_shift_schedule, super_resolve, train_sr
from maskel.training import smoothed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_out/02")
    ap.add_argument("--diffusion-steps", type=int, default=1500)
    ap.add_argument("--sr-steps", type=int, default=150)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    _, xrays = render_arrays(200, 64, args.seed)
    s = make_linear_schedule()
    cfg = DenoiserConfig(steps=args.diffusion_steps, batch_size=8, lr=2e-4, channels=(16, 32, 32),
                         seed=args.seed, log_every=0)
    model = train_denoiser(xrays, s, cfg)
    curve = smoothed(model.losses, min(100, len(model.losses)))
    print(f"denoiser: {args.diffusion_steps} steps, smoothed loss {curve[0]:.4f} -> {curve[-1]:.4f}")
    samples = p_sample(model, s, 8, seed=args.seed)
    save_png(out / "samples_64.png", tile(samples, ncol=8))
    print(f"8 samples, mean intensity {samples.mean():.3f} (training data {xrays.mean():.3f})")

    _, hr = render_arrays(40, 256, args.seed + 1)
    pairs = [make_residual_pair(box_downsample(h, 4), h) for h in hr]
    rs = make_shift_schedule()
    sr = train_sr(pairs, rs, SRConfig(steps=args.sr_steps, channels=(16, 32, 32, 32), seed=args.seed, log_every=0))
    print(f"super-resolver: {args.sr_steps} steps, loss {np.mean(sr.losses[:10]):.5f} -> {np.mean(sr.losses[-10:]):.5f}")
    up = super_resolve(sr, samples, rs, seed=args.seed)
    save_png(out / "samples_256.png", tile(up, ncol=4))

    # structure check: shrinking the SR output should give back its input
    back = [psnr(lo, box_downsample(hi, 4)) for lo, hi in zip(samples, up)]
    print(f"box-downsampled SR output vs LR input: {np.mean(back):.1f} dB mean over {len(back)} samples")
    print(f"images written to {out}")


if __name__ == "__main__":
    main()
