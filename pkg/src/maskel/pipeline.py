"""End-to-end desk pipeline driven by one TOML document.

Stages run in order under ``<output_root>/<stage>``.  A stage that finished
writes ``complete.json`` holding its resolved settings; a rerun skips every
stage whose marker matches, so an interrupted run resumes where it stopped.
Once a stage reruns, every later stage reruns too.
"""

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, MaskelError

log = logging.getLogger("maskel")

MARKER = "complete.json"
STAGES = ("gen-data", "train-diffusion", "sample", "train-sr", "upscale",
          "train-mae", "mae-recon", "train-stage2", "predict", "evaluate")


@dataclasses.dataclass
class Resolved:
    seed: int
    data: dict
    diffusion: object
    diffusion_x: dict
    sr: object
    sr_x: dict
    mae: object
    stage2: object
    eval: dict


def resolve(doc, where="config"):
    """Validate the whole document before any work starts."""
    from .cli import check_config, split_section
    from .diffusion import DenoiserConfig
    from .mae import MAEConfig
    from .resshift import SRConfig
    from .stage2 import Stage2Config
    check_config(doc, require_all=True, where=where)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"{where}: seed must be an integer")
    _, data = split_section("data", doc["data"])
    if data["resolution"] != 64:
        raise ConfigError(f"{where}: [data] resolution must be 64 (the HR set is 256)")
    diff, diff_x = split_section("diffusion", doc["diffusion"], DenoiserConfig, seed=seed)
    sr, sr_x = split_section("sr", doc["sr"], SRConfig, seed=seed)
    mae, _ = split_section("mae", doc["mae"], MAEConfig, seed=seed)
    s2, _ = split_section("stage2", doc["stage2"], Stage2Config, seed=seed)
    _, ev = split_section("eval", doc["eval"])
    for key in ("n", "n_test", "n_hr"):
        if not isinstance(data[key], int) or data[key] < 1:
            raise ConfigError(f"{where}: [data] {key} must be a positive integer")
    return Resolved(seed, data, diff, diff_x, sr, sr_x, mae, s2, ev)


class Runner:
    def __init__(self, root, cfg: Resolved):
        self.root = Path(root)
        self.cfg = cfg
        self.dirty = False
        self.ran, self.skipped = [], []

    def stage(self, name, settings, fn):
        from .cli import event, jsonable
        d = self.root / name
        marker = d / MARKER
        settings = jsonable(settings)
        if not self.dirty and marker.is_file():
            try:
                if json.loads(marker.read_text()).get("settings") == settings:
                    self.skipped.append(name)
                    event("stage_skipped", stage=name)
                    return
            except ValueError:
                pass
        self.dirty = True
        if marker.exists():
            marker.unlink()
        d.mkdir(parents=True, exist_ok=True)
        event("stage_start", stage=name)
        t0 = time.perf_counter()
        try:
            fn(d)
        except Exception as exc:
            raise MaskelError(f"stage {name} failed: {exc}") from exc
        seconds = time.perf_counter() - t0
        marker.write_text(json.dumps({"stage": name, "settings": settings, "seconds": seconds},
                                     indent=2, sort_keys=True) + "\n")
        self.ran.append(name)
        event("stage_done", stage=name, seconds=seconds)


def run_pipeline(doc, root, where="config"):
    """Run (or resume) every stage; returns the summary dictionary."""
    from .cli import OutputLock, mae_recon, predict, setup_logging, write_config
    cfg = resolve(doc, where)
    root = Path(root)
    with OutputLock(root):
        setup_logging(root)
        write_config(root, "pipeline", source=str(where), document=doc, resolved=cfg)
        r = Runner(root, cfg)
        data = root / "gen-data"
        train, test, hr = data / "train", data / "test", data / "hr"
        r.stage("gen-data", cfg.data, lambda d: _gen_data(d, cfg))
        r.stage("train-diffusion", {"cfg": _plain(cfg.diffusion), **cfg.diffusion_x},
                lambda d: _train_diffusion(d, train, cfg))
        r.stage("sample", {"n": cfg.diffusion_x["n_samples"], "seed": cfg.seed},
                lambda d: _sample(d, root / "train-diffusion" / "diffusion.ckpt", cfg))
        r.stage("train-sr", {"cfg": _plain(cfg.sr), **cfg.sr_x}, lambda d: _train_sr(d, hr, cfg))
        r.stage("upscale", {"seed": cfg.seed, "n": cfg.sr_x["n_upscale"]},
                lambda d: _upscale(d, root / "train-sr" / "sr.ckpt", root / "sample" / "images", cfg))
        r.stage("train-mae", _plain(cfg.mae), lambda d: _train_mae(d, train, cfg))
        r.stage("mae-recon", {"ratio": cfg.eval["mae_ratio"], "seed": cfg.seed},
                lambda d: mae_recon(root / "train-mae" / "mae.ckpt", test, d, cfg.eval["mae_ratio"], cfg.seed))
        r.stage("train-stage2", _plain(cfg.stage2),
                lambda d: _train_stage2(d, train, root / "train-mae" / "mae_encoder.ckpt", cfg))
        r.stage("predict", {}, lambda d: predict(root / "train-stage2" / "stage2.ckpt", test, d, test))
        r.stage("evaluate", cfg.eval, lambda d: _evaluate(d, root, test, cfg))
        summary = _summary(root, r)
        (root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        (root / "summary.txt").write_text(summary["table"] + "\n")
        return summary


def _plain(c):
    d = dataclasses.asdict(c)
    d.pop("out_dir", None)
    return d


def _gen_data(d, cfg):
    from .phantom import generate_dataset
    n, res = cfg.data, cfg.data["resolution"]
    generate_dataset(n["n"], res, cfg.seed, d / "train")
    generate_dataset(n["n_test"], res, cfg.seed + 1, d / "test")
    generate_dataset(n["n_hr"], 256, cfg.seed + 2, d / "hr")


def _train_diffusion(d, train, cfg):
    from .diffusion import make_linear_schedule, train_denoiser
    from .phantom import load_arrays
    x = cfg.diffusion_x
    _, xrays = load_arrays(train)
    c = dataclasses.replace(cfg.diffusion, out_dir=str(d), resolution=xrays.shape[-1])
    train_denoiser(xrays, make_linear_schedule(x["T"], x["beta_start"], x["beta_end"]), c)


def _sample(d, ckpt, cfg):
    from .cli import _write_sample_set
    from .diffusion import load_denoiser, p_sample
    model = load_denoiser(ckpt)
    _write_sample_set(d, p_sample(model, model.schedule, cfg.diffusion_x["n_samples"], cfg.seed), "samples")


def _train_sr(d, hr_dir, cfg):
    from .phantom import box_downsample, load_arrays
    from .resshift import make_residual_pair, make_shift_schedule, train_sr
    x = cfg.sr_x
    _, hr = load_arrays(hr_dir)
    pairs = [make_residual_pair(box_downsample(h, cfg.sr.scale), h) for h in hr]
    s = make_shift_schedule(x["T"], x["eta1"], x["etaT"], x["kappa"])
    train_sr(pairs, s, dataclasses.replace(cfg.sr, out_dir=str(d)))


def _upscale(d, ckpt, lr_dir, cfg):
    from .cli import load_images, tile, write_images
    from .phantom import save_png
    from .resshift import load_sr, super_resolve
    model = load_sr(ckpt)
    ids, lr = load_images(lr_dir)
    n = cfg.sr_x["n_upscale"]
    ids, lr = ids[:n], np.stack(lr[:n])
    hr = super_resolve(model, lr, model.schedule, cfg.seed)
    write_images(d, ids, hr)
    save_png(d / "grid.png", tile(hr))


def _train_mae(d, train, cfg):
    from .mae import train_stage1
    from .phantom import load_arrays
    _, xrays = load_arrays(train)
    train_stage1(xrays, dataclasses.replace(cfg.mae, out_dir=str(d), img_size=xrays.shape[-1]))


def _train_stage2(d, train, enc_ckpt, cfg):
    from .mae import load_encoder
    from .phantom import load_arrays
    from .stage2 import train_stage2
    masks, xrays = load_arrays(train)
    train_stage2(masks, xrays, load_encoder(enc_ckpt), dataclasses.replace(cfg.stage2, out_dir=str(d)))


def _evaluate(d, root, test, cfg):
    from .mae import load_encoder
    from .metrics import evaluate_pairs
    ext = load_encoder(root / "train-mae" / "mae_encoder.ckpt") if cfg.eval["perceptual"] else None
    evaluate_pairs(root / "predict", test, ext, d, label="desk_G")


def _summary(root, r):
    from .metrics import REFERENCE_ROWS, format_table
    rows = dict(REFERENCE_ROWS)
    out = {"ran": r.ran, "skipped": r.skipped, "rows": {}}
    for label, path in (("desk_R", root / "mae-recon" / "metrics.json"),
                        ("desk_G", root / "evaluate" / "metrics.json")):
        m = json.loads(path.read_text())["mean"]
        rows[label] = (m["psnr"], m["ssim"], m["perceptual"])
        out["rows"][label] = m
    out["table"] = format_table(rows)
    return out
