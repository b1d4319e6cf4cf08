"""Shared training-loop plumbing: configuration, seeded batching, JSON logs."""

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ShapeError, TrainingError

log = logging.getLogger("maskel")

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    """Options common to every trainer."""

    steps: int = 1000
    batch_size: int = 16
    lr: float = 2e-4
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 50
    checkpoint_every: int = 0  # 0: only the final checkpoint
    out_dir: str | None = None

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


def config_from_dict(cls, d, where="config"):
    """Build dataclass ``cls`` from ``d``, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


def as_image_batch(images, dtype, name="dataset"):
    """Stack an iterable of 2-D images into a ``(N, 1, H, W)`` tensor."""
    arrs = [np.asarray(im, dtype=np.float64) for im in images]
    if not arrs:
        raise TrainingError(f"{name} is empty")
    shape = arrs[0].shape
    if len(shape) != 2 or shape[0] != shape[1]:
        raise ShapeError(f"{name}: images must be square 2-D grids, got {shape}")
    for a in arrs:
        if a.shape != shape:
            raise ShapeError(f"{name}: mixed image shapes {shape} and {a.shape}")
    return torch.from_numpy(np.stack(arrs)[:, None]).to(dtype)


class BatchSampler:
    """Seeded, epoch-shuffled index batches; the order is fixed by ``seed``."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.gen = torch.Generator().manual_seed(seed)
        self._perm = torch.empty(0, dtype=torch.long)

    def next(self):
        if len(self._perm) < self.batch_size:
            self._perm = torch.cat([self._perm, torch.randperm(self.n, generator=self.gen)])
        idx, self._perm = self._perm[: self.batch_size], self._perm[self.batch_size:]
        return idx


def check_finite(step, components):
    for name, value in components.items():
        if not math.isfinite(value):
            raise TrainingError(
                f"non-finite loss at step {step}: "
                + ", ".join(f"{k}={v!r}" for k, v in components.items())
                + f" (offending term: {name})")


class StepLogger:
    """Writes one JSON record per logged step to the logger and an optional file."""

    def __init__(self, stage, cfg: TrainConfig):
        self.stage = stage
        self.cfg = cfg
        self.t0 = time.perf_counter()
        self.fh = None
        if cfg.out_dir:
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
            self.fh = open(Path(cfg.out_dir) / f"{stage}_log.jsonl", "w")

    def __call__(self, step, components):
        last = step == self.cfg.steps
        if not (last or (self.cfg.log_every and step % self.cfg.log_every == 0)):
            return
        elapsed = time.perf_counter() - self.t0
        rec = {"stage": self.stage, "step": step, **{k: float(v) for k, v in components.items()},
               "steps_per_s": step / elapsed if elapsed > 0 else None}
        line = json.dumps(rec)
        log.info(line)
        if self.fh:
            self.fh.write(line + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def smoothed(values, window=100):
    """Non-overlapping window means of a loss curve."""
    v = np.asarray(values, dtype=np.float64)
    k = len(v) // window
    return v[: k * window].reshape(k, window).mean(axis=1)
