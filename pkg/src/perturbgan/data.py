"""CIFAR-10 binary reader, synthetic desk-scale datasets and epoch shuffling."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .noisegen import DOMAIN_DATA, draw_normal, draw_uniform, seed_mix, seeded_state

RECORD = 1 + 3 * 32 * 32
SYNTH_KINDS = ("two-mode", "bars", "gaussians")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ImageBatch:
    images: np.ndarray  # (N, 3, 32, 32) in [-1, 1]
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)


def decode_cifar10(raw: bytes, source: str = "<bytes>") -> ImageBatch:
    if len(raw) % RECORD:
        raise DatasetError(f"{source}: length {len(raw)} is not a multiple of {RECORD} (truncated?)")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD)
    labels = rec[:, 0].copy()
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetError(f"{source}: record {bad} has label byte {labels[bad]} > 9")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64)
    return ImageBatch(pixels / 127.5 - 1.0, labels)


def load_cifar10(paths) -> ImageBatch:
    """Read one or more CIFAR-10 binary batch files (1 label byte + 3072 planar RGB bytes)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    parts = []
    for p in paths:
        with open(p, "rb") as fh:
            parts.append(decode_cifar10(fh.read(), str(p)))
    return ImageBatch(np.concatenate([b.images for b in parts]),
                      np.concatenate([b.labels for b in parts]))


def _ramp(width: int = 32) -> np.ndarray:
    return 1.0 - 2.0 * np.arange(width) / (width - 1)


def synth_dataset(kind: str, n: int, seed: int = 0) -> ImageBatch:
    """Deterministic labelled 32x32 images.

    two-mode: left-bright ramps (contrast 0.7-1.0) and mirrored ramps
    (contrast 0.3-0.6); bars: one horizontal or vertical bar; gaussians: a blob
    near one of four centres.
    """
    if kind not in SYNTH_KINDS:
        raise DatasetError(f"unknown synthetic dataset {kind!r}; choose from {SYNTH_KINDS}")
    n_classes = {"two-mode": 2, "bars": 2, "gaussians": 4}[kind]
    labels = (np.arange(n) % n_classes).astype(np.uint8)
    state = seeded_state("MT19937", seed_mix(seed, 0, 0, DOMAIN_DATA))
    u, state = draw_uniform(state, 3 * n)
    u = u.reshape(n, 3)
    noise, state = draw_normal(state, n * 3 * 32 * 32)
    noise = noise.reshape(n, 3, 32, 32)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    if kind == "two-mode":
        amp = np.where(labels == 0, 0.7 + 0.3 * u[:, 0], -(0.3 + 0.3 * u[:, 0]))
        img = amp[:, None, None, None] * _ramp()[None, None, None, :] + 0.05 * noise
    elif kind == "bars":
        pos = (u[:, 0] * 28).astype(int)
        img = -np.ones((n, 3, 32, 32))
        for i in range(n):
            if labels[i] == 0:
                img[i, :, pos[i]:pos[i] + 4, :] = 1.0
            else:
                img[i, :, :, pos[i]:pos[i] + 4] = 1.0
        img = img + 0.05 * noise
    else:
        centres = np.array([[8, 8], [8, 24], [24, 8], [24, 24]], dtype=np.float64)
        c = centres[labels] + (u[:, :2] - 0.5) * 2.0
        d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
        blob = -1.0 + 2.0 * np.exp(-d2 / (2 * 3.0 ** 2))
        img = np.repeat(blob[:, None], 3, axis=1) + 0.05 * noise
    return ImageBatch(np.clip(img, -1.0, 1.0), labels)


def epoch_permutation(n: int, data_seed: int, epoch: int) -> np.ndarray:
    """Shuffle order of epoch ``epoch``; depends only on (data_seed, epoch)."""
    state = seeded_state("MT19937", seed_mix(data_seed, epoch, 1, DOMAIN_DATA))
    u, _ = draw_uniform(state, n)
    return np.argsort(u, kind="stable")


@dataclass(frozen=True)
class StreamPosition:
    epoch: int = 0
    offset: int = 0


class BatchStream:
    """Fixed-size batches over reshuffled epochs. Never mutates the source images."""

    def __init__(self, data: ImageBatch, batch_size: int, data_seed: int,
                 position: StreamPosition = StreamPosition()):
        if len(data) < batch_size:
            raise DatasetError(f"dataset has {len(data)} images, fewer than batch size {batch_size}")
        self.data = data
        self.batch_size = batch_size
        self.data_seed = data_seed
        self.position = position
        self._perm_epoch = -1
        self._perm = None

    def _permutation(self, epoch: int) -> np.ndarray:
        if epoch != self._perm_epoch:
            self._perm = epoch_permutation(len(self.data), self.data_seed, epoch)
            self._perm_epoch = epoch
        return self._perm

    def next(self) -> np.ndarray:
        epoch, off = self.position.epoch, self.position.offset
        # a batch never straddles epochs; leftovers are dropped
        if off + self.batch_size > len(self.data):
            epoch, off = epoch + 1, 0
        idx = self._permutation(epoch)[off:off + self.batch_size]
        self.position = StreamPosition(epoch, off + self.batch_size)
        return self.data.images[idx]


def load_dataset(ref: str, n: int = 4096, seed: int = 0) -> ImageBatch:
    """``synth:<kind>`` or ``cifar10:<file>[,<file>...]``."""
    scheme, _, rest = ref.partition(":")
    if scheme == "synth":
        return synth_dataset(rest, n, seed)
    if scheme == "cifar10":
        return load_cifar10([p for p in rest.split(",") if p])
    raise DatasetError(f"unknown dataset reference {ref!r}")
