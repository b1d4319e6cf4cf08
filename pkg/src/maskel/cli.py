"""Command-line driver: ``maskel <command> [flags]``.

Every command that writes artifacts takes ``--out``; when omitted the
directory defaults to ``$MASKEL_OUTPUT_ROOT/<command>`` (``./maskel_runs``
if the variable is unset).  Output directories are locked while a command
runs, and each run leaves ``config.json`` (the resolved configuration) next
to its artifacts.  Training logs are JSON lines on stdout and in the output
directory.

Exit status: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, MaskelError
from .training import config_from_dict

log = logging.getLogger("maskel")

ENV_OUTPUT_ROOT = "MASKEL_OUTPUT_ROOT"
LOCK_NAME = ".maskel.lock"
SECTIONS = ("data", "diffusion", "sr", "mae", "stage2", "eval")
GLOBAL_KEYS = {"seed", "output_root", "device", "precision"}

# section keys that are not fields of the trainer config dataclasses
EXTRAS = {
    "data": {"n": 500, "n_test": 40, "n_hr": 200, "resolution": 64},
    "diffusion": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "n_samples": 16},
    "sr": {"T": 15, "eta1": 1e-3, "etaT": 0.999, "kappa": 2.0, "n_upscale": 8},
    "mae": {},
    "stage2": {},
    "eval": {"perceptual": True, "mae_ratio": 0.0},
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def read_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def check_config(doc, require_all=False, where="config"):
    """Reject unknown top-level keys and sections; optionally demand all sections."""
    unknown = set(doc) - GLOBAL_KEYS - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    for name in SECTIONS:
        if name in doc and not isinstance(doc[name], dict):
            raise ConfigError(f"{where}: [{name}] must be a table")
    if require_all:
        missing = [s for s in SECTIONS if s not in doc]
        if missing:
            raise ConfigError(f"{where}: missing sections {missing}")


def split_section(name, section, cls=None, overrides=None, seed=None):
    """Resolve one config section into ``(trainer_config, extras)``.

    Precedence: dataclass defaults < TOML section < command-line overrides.
    """
    section = dict(section or {})
    section.update({k: v for k, v in (overrides or {}).items() if v is not None})
    extras = dict(EXTRAS[name])
    for key in list(section):
        if key in extras:
            extras[key] = section.pop(key)
    if cls is None:
        if section:
            raise ConfigError(f"[{name}]: unknown keys {sorted(section)}")
        return None, extras
    if seed is not None:
        section.setdefault("seed", seed)
    return config_from_dict(cls, section, where=f"[{name}]"), extras


def load_section(args, name, cls=None, overrides=None):
    doc = {}
    if getattr(args, "config", None):
        doc = read_toml(args.config)
        check_config(doc, where=args.config)
    return split_section(name, doc.get(name), cls, overrides, doc.get("seed"))


def jsonable(obj):
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_config(out_dir, command, **parts):
    rec = {"command": command, "maskel_version": __version__, **jsonable(parts)}
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "config.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def output_dir(args, command):
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "maskel_runs")) / command


class OutputLock:
    """Exclusive lock on an output directory for the duration of a run."""

    def __init__(self, directory):
        from filelock import FileLock, Timeout
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._timeout = Timeout
        self.lock = FileLock(str(self.directory / LOCK_NAME))

    def __enter__(self):
        try:
            self.lock.acquire(timeout=0)
        except self._timeout as exc:
            raise MaskelError(f"output directory {self.directory} is in use by another run") from exc
        return self

    def __exit__(self, *exc):
        self.lock.release()
        return False


def setup_logging(out_dir=None, quiet=False):
    logger = logging.getLogger("maskel")
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()
    logger.setLevel(logging.INFO)
    logger.propagate = False
    fmt = logging.Formatter("%(message)s")
    if not quiet:
        h = logging.StreamHandler(sys.stdout)
        h.setFormatter(fmt)
        logger.addHandler(h)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(Path(out_dir) / "run.log")
        fh.setFormatter(fmt)
        logger.addHandler(fh)


def event(name, **fields):
    log.info(json.dumps({"event": name, **jsonable(fields)}))


def load_images(path, field="xray"):
    """``(ids, images)`` from a PNG file, a manifest directory or a PNG directory."""
    from .phantom import MANIFEST_NAME, DatasetManifest, load_png
    path = Path(path)
    if path.is_file():
        return [path.stem], [load_png(path)]
    if (path / MANIFEST_NAME).is_file():
        m = DatasetManifest.read(path)
        return [e["id"] for e in m.entries], [load_png(path / e[field]) for e in m.entries]
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if files:
            return [f.stem for f in files], [load_png(f) for f in files]
    raise MaskelError(f"no images found at {path}")


def tile(images, ncol=None, pad=2):
    """Arrange equally sized 2-D images in a grid with white separators."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    h, w = images[0].shape
    n = len(images)
    ncol = ncol or int(np.ceil(np.sqrt(n)))
    nrow = int(np.ceil(n / ncol))
    out = np.ones((nrow * (h + pad) + pad, ncol * (w + pad) + pad))
    for k, im in enumerate(images):
        r, c = divmod(k, ncol)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        out[y:y + h, x:x + w] = im
    return out


def write_images(out_dir, ids, images, sub="images"):
    from .phantom import save_png
    d = Path(out_dir) / sub
    d.mkdir(parents=True, exist_ok=True)
    for i, im in zip(ids, images):
        save_png(d / f"{i}.png", im)


def _ids(n):
    width = max(6, len(str(n - 1)))
    return [f"{i:0{width}d}" for i in range(n)]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    from .phantom import PhantomRanges, generate_dataset
    out = output_dir(args, "gen-data")
    ranges = PhantomRanges.from_dict(json.loads(Path(args.ranges).read_text())) if args.ranges else None
    with OutputLock(out):
        m = generate_dataset(args.n, args.res, args.seed, out, ranges)
        write_config(out, "gen-data", n=args.n, resolution=args.res, seed=args.seed,
                     ranges=(ranges or PhantomRanges()).to_dict())
        # no timings here: the whole tree, log included, is reproducible
        event("gen-data", count=m.count, resolution=args.res, seed=args.seed)


def _overrides(args, keys):
    return {k: getattr(args, k, None) for k in keys}


def cmd_train_diffusion(args):
    from .diffusion import DenoiserConfig, make_linear_schedule, train_denoiser
    from .phantom import load_arrays
    cfg, ex = load_section(args, "diffusion", DenoiserConfig,
                           _overrides(args, ["steps", "batch_size", "lr", "seed", "dtype", "log_every"]))
    out = output_dir(args, "train-diffusion")
    _, xrays = load_arrays(args.data)
    cfg = dataclasses.replace(cfg, out_dir=str(out), resolution=xrays.shape[-1])
    s = make_linear_schedule(ex["T"], ex["beta_start"], ex["beta_end"])
    with OutputLock(out):
        write_config(out, "train-diffusion", data=args.data, config=cfg, schedule=s.to_dict())
        model = train_denoiser(xrays, s, cfg)
        event("trained", stage="diffusion", steps=model.step, final_loss=model.losses[-1],
              checkpoint=out / "diffusion.ckpt")


def cmd_sample(args):
    from .diffusion import load_denoiser, p_sample
    model = load_denoiser(args.ckpt)
    out = output_dir(args, "sample")
    with OutputLock(out):
        write_config(out, "sample", ckpt=args.ckpt, n=args.n, seed=args.seed)
        imgs = p_sample(model, model.schedule, args.n, args.seed)
        _write_sample_set(out, imgs, "samples")


def _write_sample_set(out, imgs, label):
    from .phantom import save_png
    ids = _ids(len(imgs))
    write_images(out, ids, imgs)
    save_png(Path(out) / "grid.png", tile(imgs))
    event(label, out=out, count=len(imgs))


def cmd_train_sr(args):
    from .phantom import box_downsample, load_arrays
    from .resshift import SRConfig, make_residual_pair, make_shift_schedule, train_sr
    cfg, ex = load_section(args, "sr", SRConfig,
                           _overrides(args, ["steps", "batch_size", "lr", "seed", "dtype", "log_every"]))
    out = output_dir(args, "train-sr")
    _, hr = load_arrays(args.pairs)
    pairs = [make_residual_pair(box_downsample(h, cfg.scale), h) for h in hr]
    s = make_shift_schedule(ex["T"], ex["eta1"], ex["etaT"], ex["kappa"])
    cfg = dataclasses.replace(cfg, out_dir=str(out))
    with OutputLock(out):
        write_config(out, "train-sr", pairs=args.pairs, config=cfg, schedule=s.to_dict())
        model = train_sr(pairs, s, cfg)
        event("trained", stage="sr", steps=model.step, final_loss=model.losses[-1], checkpoint=out / "sr.ckpt")


def cmd_upscale(args):
    from .phantom import save_png
    from .resshift import load_sr, super_resolve
    model = load_sr(args.ckpt)
    ids, lr = load_images(args.inp)
    out = output_dir(args, "upscale")
    with OutputLock(out):
        write_config(out, "upscale", ckpt=args.ckpt, input=args.inp, seed=args.seed)
        hr = super_resolve(model, np.stack(lr), model.schedule, args.seed)
        write_images(out, ids, hr)
        save_png(Path(out) / "grid.png", tile(hr))
        event("upscaled", out=out, count=len(hr), size=hr.shape[-1])


def cmd_train_mae(args):
    from .mae import MAEConfig, train_stage1
    from .phantom import load_arrays
    cfg, _ = load_section(args, "mae", MAEConfig,
                          _overrides(args, ["steps", "batch_size", "lr", "seed", "dtype", "log_every", "ratio"]))
    out = output_dir(args, "train-mae")
    _, xrays = load_arrays(args.data)
    cfg = dataclasses.replace(cfg, out_dir=str(out), img_size=xrays.shape[-1])
    with OutputLock(out):
        write_config(out, "train-mae", data=args.data, config=cfg)
        res = train_stage1(xrays, cfg)
        event("trained", stage="mae", steps=len(res.losses), final_loss=res.losses[-1],
              checkpoint=out / "mae.ckpt", encoder=out / "mae_encoder.ckpt")


def mae_recon(ckpt, inp, out, ratio=0.0, seed=0, extractor=None):
    from .mae import load_mae, mae_reconstruct
    from .metrics import evaluate_images, report_table
    from .phantom import save_png
    model = load_mae(ckpt)
    ids, imgs = load_images(inp)
    rec = mae_reconstruct(model, np.stack(imgs), ratio, seed)
    write_images(out, ids, rec)
    k = min(8, len(imgs))
    save_png(Path(out) / "recon_grid.png", tile(list(imgs[:k]) + list(rec[:k]), ncol=k))
    report = evaluate_images(ids, list(rec), imgs, extractor if extractor is not None else model.encoder,
                             label="desk_R")
    (Path(out) / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (Path(out) / "metrics.txt").write_text(report_table(report) + "\n")
    return report


def cmd_mae_recon(args):
    out = output_dir(args, "mae-recon")
    with OutputLock(out):
        write_config(out, "mae-recon", ckpt=args.ckpt, input=args.inp, ratio=args.ratio, seed=args.seed)
        report = mae_recon(args.ckpt, args.inp, out, args.ratio, args.seed)
        event("mae-recon", out=out, **report.means())


def _load_encoder_a(path):
    from .mae import load_encoder
    return load_encoder(path)


def cmd_train_stage2(args):
    from .phantom import load_arrays
    from .stage2 import Stage2Config, train_stage2
    cfg, _ = load_section(args, "stage2", Stage2Config,
                          _overrides(args, ["steps", "batch_size", "lr", "seed", "dtype", "log_every"]))
    out = output_dir(args, "train-stage2")
    masks, xrays = load_arrays(args.pairs)
    enc_a = _load_encoder_a(args.mae_ckpt)
    cfg = dataclasses.replace(cfg, out_dir=str(out))
    with OutputLock(out):
        write_config(out, "train-stage2", pairs=args.pairs, mae_ckpt=args.mae_ckpt, config=cfg)
        res = train_stage2(masks, xrays, enc_a, cfg)
        event("trained", stage="stage2", steps=len(res.losses["total"]),
              final={k: v[-1] for k, v in res.losses.items()}, checkpoint=out / "stage2.ckpt")


def predict(ckpt, mask_path, out, gt_path=None):
    """Predict X-rays for every mask; writes a manifest directory plus panels."""
    from .phantom import MANIFEST_VERSION, DatasetManifest, save_png
    from .stage2 import load_stage2, predict_xray
    model = load_stage2(ckpt)
    ids, masks = load_images(mask_path, field="mask")
    preds = predict_xray(model, np.stack(masks))
    gts = None
    if gt_path is not None:
        gt_ids, gt_imgs = load_images(gt_path, field="xray")
        by_id = dict(zip(gt_ids, gt_imgs))
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise MaskelError(f"ground truth lacks ids {missing[:5]}")
        gts = [by_id[i] for i in ids]
    out = Path(out)
    write_images(out, ids, masks, "masks")
    write_images(out, ids, preds, "xrays")
    entries = [{"id": i, "mask": f"masks/{i}.png", "xray": f"xrays/{i}.png", "seed": None} for i in ids]
    m = DatasetManifest(MANIFEST_VERSION, int(preds.shape[-1]), len(ids), entries,
                        {"generator": "stage2", "checkpoint": str(ckpt)})
    (out / "manifest.json").write_text(m.to_json())
    panels = []
    for k, i in enumerate(ids):
        row = [masks[k]] + ([gts[k]] if gts is not None else []) + [preds[k]]
        panel = tile(row, ncol=len(row))
        (out / "panels").mkdir(exist_ok=True)
        save_png(out / "panels" / f"{i}.png", panel)
        panels.append(panel)
    save_png(out / "panels_grid.png", tile(panels[:8], ncol=1))
    return ids, preds


def cmd_predict(args):
    out = output_dir(args, "predict")
    with OutputLock(out):
        write_config(out, "predict", ckpt=args.ckpt, mask=args.mask, gt=args.gt)
        ids, _ = predict(args.ckpt, args.mask, out, args.gt)
        event("predicted", out=out, count=len(ids))


def cmd_evaluate(args):
    from .metrics import evaluate_pairs, report_table
    out = output_dir(args, "evaluate")
    extractor = _load_encoder_a(args.extractor) if args.extractor else None
    with OutputLock(out):
        write_config(out, "evaluate", pred=args.pred, gt=args.gt, extractor=args.extractor)
        report = evaluate_pairs(args.pred, args.gt, extractor, out, label=args.label)
        print(report_table(report))


def cmd_study(args):
    from .metrics import format_confusion, study_report
    out = output_dir(args, "study")
    with OutputLock(out):
        write_config(out, "study", ratings=args.ratings)
        mats, avg = study_report(args.ratings, out)
        print(format_confusion(mats, avg))


def cmd_verify(args):
    from .verify import run_all
    results = run_all()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_pipeline(args):
    from .pipeline import run_pipeline
    doc = read_toml(args.config)
    out = Path(args.out) if args.out else Path(doc.get("output_root") or output_dir(args, "pipeline"))
    summary = run_pipeline(doc, out, where=args.config)
    print(summary["table"])


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _train_flags(p, ratio=False):
    p.add_argument("--config", help="TOML file; the matching section supplies defaults")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--log-every", dest="log_every", type=int)
    if ratio:
        p.add_argument("--ratio", type=float, help="masking ratio in [0, 1)")
    p.add_argument("--out")


def build_parser():
    ap = argparse.ArgumentParser(prog="maskel", description="Mask-to-X-ray synthesis pipeline.")
    ap.add_argument("--version", action="version", version=f"maskel {__version__}")
    ap.add_argument("--quiet", action="store_true", help="no log records on stdout")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="render a phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--res", type=int, default=64, choices=[64, 256])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ranges", help="JSON file of phantom parameter ranges")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-diffusion", help="train the unconditional denoiser")
    p.add_argument("--data", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("sample", help="ancestral sampling to a PNG grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-sr", help="train the residual-shift super-resolver on an HR dataset")
    p.add_argument("--pairs", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_train_sr)

    p = sub.add_parser("upscale", help="super-resolve LR images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("train-mae", help="stage-1 masked-autoencoder pretraining")
    p.add_argument("--data", required=True)
    _train_flags(p, ratio=True)
    p.set_defaults(func=cmd_train_mae)

    p = sub.add_parser("mae-recon", help="before/after reconstructions with metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--ratio", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mae_recon)

    p = sub.add_parser("train-stage2", help="train encoder B, codebook and decoder")
    p.add_argument("--pairs", required=True)
    p.add_argument("--mae-ckpt", dest="mae_ckpt", required=True)
    _train_flags(p)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("predict", help="masks to X-rays (with triptychs when --gt is given)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--gt")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/perceptual report for two manifest directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--extractor", help="stage-1 encoder checkpoint for the perceptual metric")
    p.add_argument("--label", default="eval")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("study", help="rater-study confusion matrices")
    p.add_argument("--ratings", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("verify", help="fast invariant self-test")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pipeline", help="run every stage from one TOML config (resumable)")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    out = None
    if args.command not in ("verify",):
        out = output_dir(args, args.command) if args.command != "pipeline" else None
    setup_logging(out, quiet=args.quiet)
    try:
        status = args.func(args)
    except ConfigError as exc:
        print(f"maskel {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (MaskelError, OSError, ValueError) as exc:
        print(f"maskel {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
