"""Phantom data and the two forward noising processes.

Renders a handful of mask/X-ray phantom pairs, then pushes one X-ray through
the DDPM forward process and one LR/HR pair through the residual-shift
process.  Each chain is checked against its closed-form marginal on the way.

    python demos/01_phantoms_and_noise.py --out demo_out/01
"""

import argparse
from pathlib import Path

import numpy as np

from maskel.cli import tile
from maskel.diffusion import make_linear_schedule, q_sample_marginal, q_sample_step
from maskel.phantom import box_downsample, render_arrays, save_png
from maskel.resshift import make_residual_pair, make_shift_schedule, shift_forward_marginal
from maskel.verify import ddpm_consistency, resshift_consistency


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_out/01")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    # 1. phantoms: binary body silhouette plus bone-bright X-ray
    masks, xrays = render_arrays(8, 64, args.seed)
    save_png(out / "phantoms.png", tile(list(masks) + list(xrays), ncol=8))
    print(f"phantoms: {len(masks)} pairs, body covers {masks.mean():.1%} of pixels")

    # 2. DDPM forward chain, image scaled to [-1, 1]
    s = make_linear_schedule()
    rng = np.random.default_rng(args.seed)
    x = xrays[0] * 2 - 1
    frames = [x]
    for t in range(1, s.T + 1):
        x = q_sample_step(x, t, rng.standard_normal(x.shape), s)
        if t in (50, 150, 300, 600, 1000):
            frames.append(x)
    save_png(out / "ddpm_chain.png", tile([(f.clip(-1, 1) + 1) / 2 for f in frames], ncol=len(frames)))
    jump = q_sample_marginal(xrays[0] * 2 - 1, s.T, rng.standard_normal(x.shape), s)
    print(f"ddpm: alpha_bar_T = {s.alpha_bar[-1]:.2e}; x_T std {jump.std():.3f} (unit Gaussian expected)")
    ok, detail = ddpm_consistency(n=20_000)
    print(f"ddpm step composition vs marginal: {'ok' if ok else 'MISMATCH'}  {detail}")

    # 3. residual shifting: HR image drifts toward its upsampled LR version
    _, hr = render_arrays(1, 256, args.seed + 1)
    pair = make_residual_pair(box_downsample(hr[0], 4), hr[0])
    rs = make_shift_schedule()
    noise = rng.standard_normal(pair.x0.shape)
    steps = [shift_forward_marginal(pair.x0, pair.e0, t, noise * 0.1, rs) for t in (1, 5, 10, 15)]
    save_png(out / "resshift_chain.png", tile([pair.x0] + [np.clip(v, 0, 1) for v in steps] + [pair.y0], ncol=6))
    print(f"resshift: eta from {rs.eta[0]:.1e} to {rs.eta[-1]:.3f}, kappa {rs.kappa}")
    ok, detail = resshift_consistency(n=20_000)
    print(f"resshift step composition vs marginal: {'ok' if ok else 'MISMATCH'}  {detail}")
    print(f"images written to {out}")


if __name__ == "__main__":
    main()
