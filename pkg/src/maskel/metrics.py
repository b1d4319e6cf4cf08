"""Image-quality metrics and rater-study confusion matrices.

PSNR and SSIM follow their usual definitions (SSIM: 11×11 Gaussian window,
sigma 1.5, ``C1 = (0.01 L)^2``, ``C2 = (0.03 L)^2``, ``L = 1``, mean over the
valid window positions).  The perceptual distance is an LPIPS-style
surrogate computed on a frozen stage-1 encoder: its values rank image pairs
but are not on the scale of published LPIPS numbers.
"""

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import binary_dilation
from scipy.signal import convolve2d

from .errors import ConfigError, DatasetError, ShapeError
from .phantom import DatasetManifest, load_png

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

# published reference rows (real DXA data): PSNR dB, SSIM, LPIPS
REFERENCE_ROWS = {
    "Ours_R": (33.82, 0.9881, 0.0210),
    "Ours_G": (23.46, 0.9206, 0.0324),
}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes {a.shape} and {b.shape} differ")
    return a, b


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; identical images give ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak ** 2 / mse)))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, data_range=1.0):
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    w = gaussian_window()

    def filt(z):
        return convolve2d(z, w, mode="valid")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a * mu_a
    s_bb = filt(b * b) - mu_b * mu_b
    s_ab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(a, b, data_range=1.0):
    """Mean structural similarity over valid 11×11 Gaussian windows."""
    return float(np.mean(ssim_map(a, b, data_range)))


def mask_containment(pred, mask, threshold=0.1, radius=3):
    """Fraction of predicted support (``pred > threshold``) inside the dilated mask.

    Dilation uses a ``(2 radius + 1)`` square; an empty support counts as 1.
    """
    pred, mask = _pair(pred, mask)
    support = pred > threshold
    if not support.any():
        return 1.0
    grown = binary_dilation(mask > 0.5, np.ones((2 * radius + 1,) * 2, dtype=bool)) if radius else mask > 0.5
    return float((support & grown).sum() / support.sum())


@torch.no_grad()
def perceptual_metric(extractor, a, b, taps=None):
    """LPIPS-style distance on frozen encoder features.

    Per tapped block, each position's feature vector is scaled to unit
    length; squared differences are summed over channels and averaged over
    positions, then averaged over blocks.  Accepts single images or
    ``(N, H, W)`` stacks (returns one value per image).
    """
    if extractor is None:
        raise ConfigError("perceptual metric needs a trained feature extractor")
    a, b = _pair(a, b)
    single = a.ndim == 2
    dtype = next(extractor.parameters()).dtype
    ta = torch.as_tensor(a[None] if single else a, dtype=dtype)
    tb = torch.as_tensor(b[None] if single else b, dtype=dtype)
    fa = extractor.features(ta, taps)
    fb = extractor.features(tb, taps)
    d = 0.0
    for x, y in zip(fa, fb):
        x = x / (x.norm(dim=-1, keepdim=True) + 1e-10)
        y = y / (y.norm(dim=-1, keepdim=True) + 1e-10)
        d = d + ((x - y) ** 2).sum(-1).mean(-1)
    d = (d / len(fa)).double().numpy()
    return float(d[0]) if single else d


@dataclass
class MetricsReport:
    ids: list
    psnr: list
    ssim: list
    perceptual: list | None = None
    label: str = "eval"

    @property
    def count(self):
        return len(self.ids)

    def means(self):
        out = {"psnr": float(np.mean(self.psnr)), "ssim": float(np.mean(self.ssim))}
        out["perceptual"] = float(np.mean(self.perceptual)) if self.perceptual is not None else None
        return out

    def to_dict(self):
        d = asdict(self)
        d["count"] = self.count
        d["mean"] = self.means()
        return d


def format_table(rows):
    """Aligned text table; ``rows`` maps a label to ``(psnr, ssim, perceptual)``."""
    lines = [f"{'Metrics':<10}{'PSNR':>9}{'SSIM':>9}{'LPIPS':>9}"]
    for name, (p, s, l) in rows.items():
        lp = "-" if l is None else f"{l:.4f}"
        lines.append(f"{name:<10}{p:>9.2f}{s:>9.4f}{lp:>9}")
    return "\n".join(lines)


def report_table(report: MetricsReport, with_reference=True):
    m = report.means()
    rows = dict(REFERENCE_ROWS) if with_reference else {}
    rows[report.label] = (m["psnr"], m["ssim"], m["perceptual"])
    return format_table(rows)


def evaluate_images(ids, preds, gts, extractor=None, label="eval"):
    if len(preds) != len(gts) or len(ids) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground-truth images")
    p = [psnr(g, q) for q, g in zip(preds, gts)]
    s = [ssim(g, q) for q, g in zip(preds, gts)]
    lp = None
    if extractor is not None:
        lp = [float(v) for v in np.atleast_1d(perceptual_metric(extractor, np.stack(gts), np.stack(preds)))]
    return MetricsReport(list(ids), p, s, lp, label)


def evaluate_pairs(pred_dir, gt_dir, extractor=None, out_dir=None, label="eval", field_name="xray"):
    """Compare the X-ray images of two manifest directories entry by entry.

    Entries are matched by id; both manifests must list the same ids.  With
    ``out_dir`` writes ``metrics.json`` and ``metrics.txt``.
    """
    pm = DatasetManifest.read(pred_dir)
    gm = DatasetManifest.read(gt_dir)
    gt_by_id = {e["id"]: e for e in gm.entries}
    if pm.count != gm.count or set(gt_by_id) != {e["id"] for e in pm.entries}:
        raise DatasetError(f"manifests differ: {pm.count} predictions vs {gm.count} ground truth",
                           path=str(pred_dir))
    ids, preds, gts = [], [], []
    for e in pm.entries:
        ids.append(e["id"])
        preds.append(load_png(Path(pred_dir) / e[field_name]))
        gts.append(load_png(Path(gt_dir) / gt_by_id[e["id"]][field_name]))
    report = evaluate_images(ids, preds, gts, extractor, label)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        (out / "metrics.txt").write_text(report_table(report) + "\n")
    return report


# ---------------------------------------------------------------------------
# Rater study
# ---------------------------------------------------------------------------

LABELS = ("real", "generated")


@dataclass
class ConfusionMatrix:
    """Rater tallies with "generated" as the class to detect.

    TP: generated rated generated; FN: generated rated real (fooled);
    TN: real rated real; FP: real rated generated.
    """

    tn: float
    fp: float
    fn: float
    tp: float
    rater: str = "average"

    @property
    def total(self):
        return self.tn + self.fp + self.fn + self.tp

    @property
    def accuracy(self):
        return (self.tn + self.tp) / self.total if self.total else float("nan")

    @property
    def false_negative_rate(self):
        """Share of generated images mistaken for real ones."""
        n = self.fn + self.tp
        return self.fn / n if n else float("nan")

    def as_tuple(self):
        return (self.tn, self.fp, self.fn, self.tp)

    def to_dict(self):
        return {"rater": self.rater, "TN": self.tn, "FP": self.fp, "FN": self.fn, "TP": self.tp,
                "accuracy": self.accuracy, "false_negative_rate": self.false_negative_rate}


def read_ratings(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"rater", "image", "true_label", "rated_label"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ConfigError(f"{path}: header must contain {sorted(need)}")
        for line, row in enumerate(reader, start=2):
            for key in ("true_label", "rated_label"):
                if row[key].strip().lower() not in LABELS:
                    raise ConfigError(f"{path}:{line}: unknown label {row[key]!r}")
            rows.append((row["rater"].strip(), row["image"].strip(),
                         row["true_label"].strip().lower(), row["rated_label"].strip().lower()))
    return rows


def confusion_from_rows(rows):
    seen = set()
    per = {}
    for rater, image, truth, rated in rows:
        if (rater, image) in seen:
            raise ConfigError(f"duplicate rating for rater {rater!r}, image {image!r}")
        seen.add((rater, image))
        c = per.setdefault(rater, [0, 0, 0, 0])
        if truth == "real":
            c[0 if rated == "real" else 1] += 1
        else:
            c[2 if rated == "real" else 3] += 1
    mats = [ConfusionMatrix(*map(int, c), rater=r) for r, c in per.items()]
    if not mats:
        raise ConfigError("no ratings")
    avg = np.mean([m.as_tuple() for m in mats], axis=0)
    return mats, ConfusionMatrix(*map(float, avg), rater="average")


def confusion_from_ratings(path):
    """Per-rater integer matrices and their elementwise average."""
    return confusion_from_rows(read_ratings(path))


def format_confusion(mats, avg):
    lines = [f"{'rater':<10}{'TN':>8}{'FP':>8}{'FN':>8}{'TP':>8}{'acc':>8}{'FNR':>8}"]
    for m in list(mats) + [avg]:
        lines.append(f"{m.rater:<10}{m.tn:>8.2f}{m.fp:>8.2f}{m.fn:>8.2f}{m.tp:>8.2f}"
                     f"{m.accuracy:>8.3f}{m.false_negative_rate:>8.3f}")
    lines.append("FN = generated images judged real")
    return "\n".join(lines)


def plot_confusion_grid(mats, avg, path):
    """Heatmap grid of every rater's matrix plus the average (PNG)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    items = list(mats) + [avg]
    fig, axes = plt.subplots(1, len(items), figsize=(2.6 * len(items), 2.8))
    axes = np.atleast_1d(axes)
    for ax, m in zip(axes, items):
        grid = np.array([[m.tn, m.fp], [m.fn, m.tp]])
        ax.imshow(grid, cmap="Blues", vmin=0, vmax=max(grid.sum(axis=1).max(), 1))
        for (i, j), v in np.ndenumerate(grid):
            ax.text(j, i, f"{v:.2f}" if m is avg else f"{int(v)}", ha="center", va="center")
        ax.set_xticks([0, 1], ["real", "generated"])
        ax.set_yticks([0, 1], ["real", "generated"])
        ax.set_xlabel("rated")
        ax.set_title(m.rater)
    axes[0].set_ylabel("true")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def study_report(ratings_path, out_dir):
    mats, avg = confusion_from_ratings(ratings_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "study.json").write_text(json.dumps(
        {"raters": [m.to_dict() for m in mats], "average": avg.to_dict()}, indent=2) + "\n")
    (out / "study.txt").write_text(format_confusion(mats, avg) + "\n")
    plot_confusion_grid(mats, avg, out / "confusion.png")
    return mats, avg
