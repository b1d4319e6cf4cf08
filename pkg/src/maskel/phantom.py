"""Procedural paired (masking image, pseudo skeleton X-ray) phantoms.

Each phantom is a lying-down articulated body seen from the front: head at
the top, torso, two arms at the sides and two legs.  The masking image is the
binary silhouette of the body envelope; the X-ray shows anti-aliased bone
strokes (skull, spine, ribs, clavicles, pelvis, long bones) with brighter
joints, always strictly inside the silhouette.

All geometry is expressed in fractions of the image height, so the same
parameters render consistently at every supported resolution.

Datasets are stored as 8-bit grayscale PNG files plus a versioned JSON
manifest::

    out_dir/
      manifest.json
      masks/000000.png
      xrays/000000.png
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import (
    ConfigError,
    CorruptImageError,
    DatasetError,
    ManifestVersionError,
    MissingFileError,
    ShapeError,
    ValidationError,
)

SUPPORTED_RESOLUTIONS = (64, 256)
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

# joint order for PhantomParams.pose_jitter
JOINTS = (
    "shoulder_l", "elbow_l", "shoulder_r", "elbow_r",
    "hip_l", "knee_l", "hip_r", "knee_r",
)
# limb order for limb_lengths / limb_widths
LIMBS = ("arm_l", "arm_r", "leg_l", "leg_r")

MAX_JITTER = 0.15
TOP_MARGIN = 0.04
NECK_LENGTH = 0.025


# ---------------------------------------------------------------------------
# Image validation
# ---------------------------------------------------------------------------

def validate_image(img, binary=False, name="image"):
    """Check the ImageTensor invariants and return ``img`` as float64.

    Raises :class:`ValidationError` for non-2D input, non-finite values,
    values outside ``[0, 1]`` or (with ``binary=True``) non-binary masks.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected a 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains NaN or Inf")
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValidationError(f"{name}: values outside [0, 1]")
    if binary and not np.all((arr == 0.0) | (arr == 1.0)):
        raise ValidationError(f"{name}: mask must be binary (values in {{0, 1}})")
    return arr


def quantize8(img):
    """Snap values onto the 1/255 grid used by the 8-bit PNG files."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomRanges:
    """Sampling ranges ``(min, max)`` for every phantom field.

    Geometric fields are fractions of image height.  ``min == max`` pins a
    field to a constant; ``min > max`` is rejected.
    """

    torso_length: tuple = (0.28, 0.32)
    torso_width: tuple = (0.17, 0.22)
    arm_length: tuple = (0.26, 0.32)
    leg_length: tuple = (0.36, 0.42)
    arm_width: tuple = (0.045, 0.06)
    leg_width: tuple = (0.065, 0.085)
    head_radius: tuple = (0.045, 0.055)
    pose_jitter: tuple = (-0.15, 0.15)
    rib_count: tuple = (8, 12)
    bone_intensity: tuple = (0.6, 1.0)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in dataclasses.fields(self):
            lo, hi = getattr(self, f.name)
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ConfigError(f"range {f.name}: bounds must be finite")
            if lo > hi:
                raise ConfigError(f"range {f.name}: min {lo} > max {hi}")
        lo, hi = self.pose_jitter
        if max(abs(lo), abs(hi)) > MAX_JITTER:
            raise ConfigError(f"range pose_jitter: |offset| must be <= {MAX_JITTER}")
        lo, hi = self.rib_count
        if int(lo) != lo or int(hi) != hi or lo < 8 or hi > 12:
            raise ConfigError("range rib_count: integers within [8, 12] required")
        lo, hi = self.bone_intensity
        if lo <= 0.5 or hi > 1.0:
            raise ConfigError("range bone_intensity: must lie in (0.5, 1.0]")
        if self.head_radius[0] <= 0 or self.arm_width[0] <= 0 or self.leg_width[0] <= 0:
            raise ConfigError("widths and head radius must be positive")
        worst = (TOP_MARGIN + 2 * self.head_radius[1] + NECK_LENGTH
                 + self.torso_length[1] + self.leg_length[1] + self.leg_width[1] / 2)
        if worst > 0.99:
            raise ConfigError("ranges allow a body taller than the image")
        if self.torso_width[1] / 2 + self.arm_length[1] * np.sin(0.12 + 2 * MAX_JITTER + 0.03) + self.arm_width[1] > 0.48:
            raise ConfigError("ranges allow arms outside the image")

    def to_dict(self):
        return {f.name: list(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown phantom range keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass(frozen=True)
class PhantomParams:
    seed: int
    torso_length: float
    torso_width: float
    limb_lengths: tuple  # arm_l, arm_r, leg_l, leg_r
    limb_widths: tuple
    head_radius: float
    pose_jitter: tuple  # radians, see JOINTS
    rib_count: int
    intensity_profile: float  # bone peak intensity

    def __post_init__(self):
        if len(self.limb_lengths) != 4 or len(self.limb_widths) != 4:
            raise ConfigError("limb_lengths and limb_widths need 4 entries")
        if len(self.pose_jitter) != len(JOINTS):
            raise ConfigError(f"pose_jitter needs {len(JOINTS)} entries")
        if any(abs(a) > MAX_JITTER + 1e-12 for a in self.pose_jitter):
            raise ConfigError("pose_jitter offsets must satisfy |offset| <= 0.15")
        if not 8 <= self.rib_count <= 12:
            raise ConfigError("rib_count must lie in [8, 12]")
        if not 0.5 < self.intensity_profile <= 1.0:
            raise ConfigError("intensity_profile must lie in (0.5, 1.0]")


def sample_phantom_params(seed, ranges=None):
    """Draw phantom parameters uniformly from ``ranges``; pure in ``seed``."""
    ranges = PhantomRanges() if ranges is None else ranges
    ranges.validate()
    rng = np.random.default_rng(seed)

    def u(rg, size=None):
        lo, hi = rg
        return rng.uniform(lo, hi, size) if lo < hi else (np.full(size, lo) if size else lo)

    torso_length = float(u(ranges.torso_length))
    torso_width = float(u(ranges.torso_width))
    arms = u(ranges.arm_length, 2)
    legs = u(ranges.leg_length, 2)
    arm_w = u(ranges.arm_width, 2)
    leg_w = u(ranges.leg_width, 2)
    head_radius = float(u(ranges.head_radius))
    jitter = u(ranges.pose_jitter, len(JOINTS))
    lo, hi = ranges.rib_count
    ribs = int(rng.integers(int(lo), int(hi) + 1))
    intensity = float(u(ranges.bone_intensity))
    return PhantomParams(
        seed=int(seed),
        torso_length=torso_length,
        torso_width=torso_width,
        limb_lengths=(float(arms[0]), float(arms[1]), float(legs[0]), float(legs[1])),
        limb_widths=(float(arm_w[0]), float(arm_w[1]), float(leg_w[0]), float(leg_w[1])),
        head_radius=head_radius,
        pose_jitter=tuple(float(a) for a in jitter),
        rib_count=ribs,
        intensity_profile=intensity,
    )


# ---------------------------------------------------------------------------
# Signed distance primitives (fractions of image height)
# ---------------------------------------------------------------------------

def _sd_capsule(x, y, a, b, r):
    ax, ay = a
    bx, by = b
    px, py = x - ax, y - ay
    dx, dy = bx - ax, by - ay
    h = np.clip((px * dx + py * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - h * dx, py - h * dy) - r


def _sd_circle(x, y, c, r):
    return np.hypot(x - c[0], y - c[1]) - r


def _sd_ellipse(x, y, c, rx, ry):
    # scaled-distance approximation; exact enough for soft bone blobs
    k = np.hypot((x - c[0]) / rx, (y - c[1]) / ry)
    return (k - 1.0) * min(rx, ry)


def _sd_round_box(x, y, c, hw, hh, rc):
    qx = np.abs(x - c[0]) - (hw - rc)
    qy = np.abs(y - c[1]) - (hh - rc)
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside - rc


def _coverage(sd, px):
    """Anti-aliased coverage from a signed distance, one-pixel ramp."""
    return np.clip(0.5 - sd / px, 0.0, 1.0)


@dataclass
class _Skeleton:
    """Resolved joint positions for one phantom (image-height fractions)."""

    head: tuple
    head_r: float
    neck: tuple
    torso_c: tuple
    torso_hw: float
    torso_hh: float
    shoulder_y: float
    hip_y: float
    limbs: dict = field(default_factory=dict)  # name -> (root, mid, end, width)


def _layout(p: PhantomParams) -> _Skeleton:
    cx = 0.5
    head_y = TOP_MARGIN + p.head_radius
    neck_top = head_y + p.head_radius * 0.8
    shoulder_y = head_y + p.head_radius + NECK_LENGTH
    hip_y = shoulder_y + p.torso_length
    hw = p.torso_width / 2
    sk = _Skeleton(
        head=(cx, head_y), head_r=p.head_radius,
        neck=((cx, neck_top), (cx, shoulder_y + 0.01)),
        torso_c=(cx, (shoulder_y + hip_y) / 2), torso_hw=hw,
        torso_hh=p.torso_length / 2, shoulder_y=shoulder_y, hip_y=hip_y,
    )
    j = dict(zip(JOINTS, p.pose_jitter))
    for side, sign in (("l", -1.0), ("r", 1.0)):
        k = 0 if side == "l" else 1
        # arms hang along the torso, slightly abducted
        aw = p.limb_widths[k]
        root = (cx + sign * (hw - aw / 2), shoulder_y + aw / 2)
        a1 = 0.12 + j[f"shoulder_{side}"]
        a2 = a1 + 0.03 + j[f"elbow_{side}"]
        length = p.limb_lengths[k]
        mid = (root[0] + sign * 0.48 * length * np.sin(a1), root[1] + 0.48 * length * np.cos(a1))
        end = (mid[0] + sign * 0.52 * length * np.sin(a2), mid[1] + 0.52 * length * np.cos(a2))
        sk.limbs[f"arm_{side}"] = (root, mid, end, aw)
        # legs from the hip sockets
        lw = p.limb_widths[2 + k]
        root = (cx + sign * (hw - lw / 2 - 0.01), hip_y - lw / 2)
        a1 = 0.04 + j[f"hip_{side}"] / 3
        a2 = a1 + j[f"knee_{side}"] / 3
        length = p.limb_lengths[2 + k]
        mid = (root[0] + sign * 0.5 * length * np.sin(a1), root[1] + 0.5 * length * np.cos(a1))
        end = (mid[0] + sign * 0.5 * length * np.sin(a2), mid[1] + 0.5 * length * np.cos(a2))
        sk.limbs[f"leg_{side}"] = (root, mid, end, lw)
    return sk


def _body_sdf(sk: _Skeleton, x, y):
    d = _sd_circle(x, y, sk.head, sk.head_r)
    d = np.minimum(d, _sd_capsule(x, y, sk.neck[0], sk.neck[1], sk.torso_hw * 0.35))
    d = np.minimum(d, _sd_round_box(x, y, sk.torso_c, sk.torso_hw, sk.torso_hh, sk.torso_hw * 0.3))
    for root, mid, end, w in sk.limbs.values():
        d = np.minimum(d, _sd_capsule(x, y, root, mid, w / 2))
        d = np.minimum(d, _sd_capsule(x, y, mid, end, w / 2 * 0.9))
    return d


def _bones(sk: _Skeleton, p: PhantomParams, x, y, px):
    """Bone intensity in [0, 1] before masking, peak-normalised."""
    cx = sk.head[0]
    out = np.zeros_like(x)

    def stroke(sd, level):
        np.maximum(out, level * _coverage(sd, px), out=out)

    # skull: dim vault with a brighter rim
    r = sk.head_r
    stroke(_sd_ellipse(x, y, sk.head, 0.82 * r, 0.9 * r), 0.45)
    stroke(np.abs(_sd_ellipse(x, y, sk.head, 0.82 * r, 0.9 * r)) - 0.012 * r / 0.05, 0.8)

    # spine with a segmental intensity pattern
    top = (cx, sk.head[1] + 0.85 * r)
    bottom = (cx, sk.hip_y - 0.01)
    sd = _sd_capsule(x, y, top, bottom, 0.011)
    n_vert = 24
    seg = 0.75 + 0.25 * np.cos(2 * np.pi * n_vert * (y - top[1]) / (bottom[1] - top[1])) ** 2
    np.maximum(out, 0.85 * seg * _coverage(sd, px), out=out)

    # ribs: paired arcs from the spine toward the torso wall
    hw = sk.torso_hw
    y0 = sk.shoulder_y + 0.03
    y1 = sk.shoulder_y + 0.55 * (sk.hip_y - sk.shoulder_y)
    for k in range(p.rib_count):
        yk = y0 + (y1 - y0) * k / max(p.rib_count - 1, 1)
        for sign in (-1.0, 1.0):
            a = (cx + sign * 0.012, yk)
            b = (cx + sign * 0.75 * hw, yk + 0.012)
            c = (cx + sign * 0.8 * hw, yk + 0.03)
            stroke(_sd_capsule(x, y, a, b, 0.0035), 0.6)
            stroke(_sd_capsule(x, y, b, c, 0.0035), 0.6)

    # clavicles
    for sign, name in ((-1.0, "arm_l"), (1.0, "arm_r")):
        root = sk.limbs[name][0]
        stroke(_sd_capsule(x, y, (cx + sign * 0.015, sk.shoulder_y + 0.012), root, 0.005), 0.75)

    # pelvis wings
    for sign in (-1.0, 1.0):
        c = (cx + sign * 0.45 * hw, sk.hip_y - 0.045)
        stroke(_sd_ellipse(x, y, c, 0.42 * hw, 0.04), 0.55)

    # long bones and joints
    for name, (root, mid, end, w) in sk.limbs.items():
        br = 0.27 * w
        stroke(_sd_capsule(x, y, root, mid, br), 0.8)
        stroke(_sd_capsule(x, y, mid, end, 0.85 * br), 0.8)
        for jpt, scale in ((root, 1.35), (mid, 1.3), (end, 1.1)):
            stroke(_sd_circle(x, y, jpt, scale * br), 1.0)
    return out


def _grid(resolution):
    c = (np.arange(resolution) + 0.5) / resolution
    return np.meshgrid(c, c)  # x varies along columns, y along rows


def render_pair(params: PhantomParams, resolution: int):
    """Render ``(mask, xray)`` at ``resolution`` (64 or 256).

    Both are float64 arrays on the 1/255 grid; the mask is binary and every
    positive X-ray pixel lies inside the mask.
    """
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ShapeError(f"unsupported resolution {resolution}; expected one of {SUPPORTED_RESOLUTIONS}")
    x, y = _grid(resolution)
    px = 1.0 / resolution
    sk = _layout(params)
    mask = (_body_sdf(sk, x, y) <= 0.0).astype(np.float64)
    xray = params.intensity_profile * _bones(sk, params, x, y, px)
    xray = quantize8(xray * mask)
    return mask, xray


def box_downsample(img, factor):
    """Average non-overlapping ``factor``×``factor`` blocks."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h % factor or w % factor:
        raise ShapeError(f"shape {img.shape} not divisible by {factor}")
    return img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    version: int
    resolution: int
    count: int
    entries: list  # dicts: id, mask, xray, seed (paths relative to the dataset dir)
    settings: dict

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def read(cls, directory):
        path = Path(directory) / MANIFEST_NAME
        if not path.is_file():
            raise MissingFileError(f"manifest not found: {path}", path=str(path))
        try:
            data = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise DatasetError(f"unreadable manifest {path}: {exc}", path=str(path)) from exc
        version = data.get("version")
        if version != MANIFEST_VERSION:
            raise ManifestVersionError(
                f"manifest {path}: version {version!r} unsupported (expected {MANIFEST_VERSION})",
                path=str(path))
        try:
            m = cls(**{f.name: data[f.name] for f in dataclasses.fields(cls)})
        except KeyError as exc:
            raise DatasetError(f"manifest {path}: missing field {exc}", path=str(path)) from exc
        if m.count != len(m.entries):
            raise DatasetError(f"manifest {path}: count {m.count} != {len(m.entries)} entries",
                               path=str(path))
        return m


def item_seeds(seed, n):
    """Independent per-item seeds derived from a dataset seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def save_png(path, img):
    arr = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(arr, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}", path=str(path)) from exc


def load_png(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing image file: {path}", path=str(path))
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "L":
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptImageError(f"corrupt image {path}: {exc}", path=str(path)) from exc
    return arr.astype(np.float64) / 255.0


def generate_dataset(n, resolution, seed, out_dir, ranges=None):
    """Render ``n`` phantom pairs into ``out_dir`` and write the manifest."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ShapeError(f"unsupported resolution {resolution}")
    ranges = PhantomRanges() if ranges is None else ranges
    out = Path(out_dir)
    try:
        (out / "masks").mkdir(parents=True, exist_ok=True)
        (out / "xrays").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out}: {exc}", path=str(out)) from exc
    width = max(6, len(str(n - 1)))
    entries = []
    for i, s in enumerate(item_seeds(seed, n)):
        mask, xray = render_pair(sample_phantom_params(s, ranges), resolution)
        ident = f"{i:0{width}d}"
        mpath, xpath = f"masks/{ident}.png", f"xrays/{ident}.png"
        save_png(out / mpath, mask)
        save_png(out / xpath, xray)
        entries.append({"id": ident, "mask": mpath, "xray": xpath, "seed": s})
    manifest = DatasetManifest(
        version=MANIFEST_VERSION, resolution=resolution, count=n, entries=entries,
        settings={"generator": "phantom", "seed": int(seed), "ranges": ranges.to_dict()},
    )
    path = out / MANIFEST_NAME
    try:
        path.write_text(manifest.to_json())
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}", path=str(path)) from exc
    return manifest


def load_dataset(directory, validate=True) -> Iterator[tuple]:
    """Yield ``(mask, xray)`` pairs in manifest order.

    The manifest is read eagerly, so version and structure problems surface
    on the call; image problems surface while iterating.
    """
    directory = Path(directory)
    manifest = DatasetManifest.read(directory)
    return _iter_pairs(directory, manifest, validate)


def _iter_pairs(directory, manifest, validate):
    for entry in manifest.entries:
        mask = load_png(directory / entry["mask"])
        xray = load_png(directory / entry["xray"])
        if validate:
            if mask.shape != xray.shape:
                raise CorruptImageError(f"entry {entry['id']}: mask/xray shapes differ",
                                        path=str(directory / entry["xray"]))
            try:
                validate_image(mask, binary=True, name=f"entry {entry['id']} mask")
                validate_image(xray, name=f"entry {entry['id']} xray")
            except ValidationError as exc:
                raise CorruptImageError(str(exc), path=str(directory / entry["mask"])) from exc
        yield mask, xray


def load_arrays(directory):
    """Load a dataset as two stacked float32 arrays ``(N, H, W)``."""
    masks, xrays = zip(*load_dataset(directory))
    return np.stack(masks).astype(np.float32), np.stack(xrays).astype(np.float32)


def render_arrays(n, resolution, seed, ranges=None):
    """In-memory equivalent of :func:`generate_dataset` + :func:`load_arrays`."""
    pairs = [render_pair(sample_phantom_params(s, ranges), resolution) for s in item_seeds(seed, n)]
    masks, xrays = zip(*pairs)
    return np.stack(masks), np.stack(xrays)


def dataset_files(directory):
    """Every file path referenced by the manifest (useful for checksums)."""
    m = DatasetManifest.read(directory)
    out = [os.path.join(directory, MANIFEST_NAME)]
    for e in m.entries:
        out += [os.path.join(directory, e["mask"]), os.path.join(directory, e["xray"])]
    return out
