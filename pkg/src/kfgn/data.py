"""Synthetic datasets, IDX ingestion/export and minibatch sampling.

Pixel intensities are quantised to multiples of 1/255 so that datasets survive
an IDX round trip unchanged.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import ContractError, ParseError

IDX_VECTOR = 0x00000801
IDX_IMAGES = 0x00000803
_TEMPLATE_SEED = 20170606


@dataclass
class Dataset:
    """``inputs`` is ``(D0, M)`` in [0, 1]; ``targets`` are the inputs themselves
    for autoencoding or a ``(1, M)`` row of 0/1 labels."""

    inputs: np.ndarray
    targets: np.ndarray
    side: Optional[int] = None
    digits: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[1] < 1:
            raise ContractError("dataset needs at least one sample")
        if self.inputs.min() < 0 or self.inputs.max() > 1:
            raise ContractError("inputs must lie in [0, 1]")
        if self.targets.shape[1] != self.inputs.shape[1]:
            raise ContractError("inputs and targets disagree on the sample count")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[1]


# ------------------------------------------------------------------ rendering


def _bezier_points(ctrl: np.ndarray, n: int) -> np.ndarray:
    """``n`` points along quadratic Bezier curves; ``ctrl`` is ``(..., 3, 2)``."""
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2 = ctrl[..., 0:1, :], ctrl[..., 1:2, :], ctrl[..., 2:3, :]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _render(points: np.ndarray, side: int) -> np.ndarray:
    """Antialiased pen strokes. ``points`` is ``(M, P, 2)`` in pixel units;
    returns ``(side*side, M)`` with intensities quantised to k/255."""
    yy, xx = np.mgrid[0:side, 0:side]
    centres = np.stack([yy.ravel() + 0.5, xx.ravel() + 0.5], axis=1)  # row-major pixels
    out = np.empty((side * side, points.shape[0]))
    for m in range(points.shape[0]):
        diff = centres[:, None, :] - points[m][None, :, :]
        dist = np.sqrt(np.min(np.sum(diff * diff, axis=2), axis=1))
        out[:, m] = np.clip(1.5 - dist, 0.0, 1.0)
    return np.round(out * 255.0) / 255.0


def gen_curves(count: int, side: int = 28, seed: int = 0) -> Dataset:
    """Images of quadratic Bezier curves through three random points."""
    if side < 8 or count < 1:
        raise ContractError("need side >= 8 and count >= 1")
    rng = np.random.default_rng(seed)
    ctrl = rng.uniform(0.0, side, size=(count, 3, 2))
    X = _render(_bezier_points(ctrl, 4 * side), side)
    return Dataset(X, X, side=side)


def _digit_templates(side: int) -> np.ndarray:
    """Ten fixed two-stroke glyphs, shared by every seed."""
    rng = np.random.default_rng(_TEMPLATE_SEED)
    return rng.uniform(0.15, 0.85, size=(10, 2, 3, 2)) * side


def gen_digits(count: int, side: int = 28, seed: int = 0, jitter: float = 0.05) -> Dataset:
    """Synthetic ten-class glyph images labelled odd (1) or even (0).

    Each class is a fixed pair of Bezier strokes; samples jitter the control
    points by ``jitter * side`` pixels (standard deviation).
    """
    if side < 8 or count < 1:
        raise ContractError("need side >= 8 and count >= 1")
    rng = np.random.default_rng(seed)
    digits = rng.integers(0, 10, size=count)
    ctrl = _digit_templates(side)[digits] + rng.normal(0.0, jitter * side, size=(count, 2, 3, 2))
    ctrl = np.clip(ctrl, 0.0, side)
    pts = _bezier_points(ctrl, 4 * side).reshape(count, -1, 2)
    X = _render(pts, side)
    return Dataset(X, odd_even_labels(digits)[None, :].astype(np.float64), side=side, digits=digits)


def odd_even_labels(digits) -> np.ndarray:
    """1 for odd digits, 0 for even ones."""
    return np.asarray(digits, dtype=np.int64) % 2


# ------------------------------------------------------------------------ IDX


def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path) -> np.ndarray:
    """Raw IDX payload as uint8 with its declared shape."""
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ParseError("file too short for IDX magic", len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic == IDX_VECTOR:
        ndim = 1
    elif magic == IDX_IMAGES:
        ndim = 3
    else:
        raise ParseError(f"bad IDX magic 0x{magic:08X}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError("truncated IDX dimension header", len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise ParseError(f"truncated IDX payload, expected {size} bytes", len(raw))
    if len(raw) > header + size:
        raise ParseError("trailing bytes after IDX payload", header + size)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(path, scale: bool = True) -> np.ndarray:
    """IDX file as a float64 matrix with one column per item.

    Images are flattened row-major; values are divided by 255 when ``scale``.
    Label vectors come back as a ``(1, count)`` row.
    """
    arr = read_idx(path)
    mat = arr.reshape(arr.shape[0], -1).T.astype(np.float64)
    return mat / 255.0 if scale else mat


def save_idx_images(path, X: np.ndarray, rows: int, cols: int) -> None:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != rows * cols:
        raise ContractError(f"{X.shape[0]} pixels do not form a {rows}x{cols} image")
    if X.min() < 0 or X.max() > 1:
        raise ContractError("image values must lie in [0, 1]")
    payload = np.round(X.T * 255.0).astype(np.uint8)
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES, X.shape[1], rows, cols))
        fh.write(payload.tobytes())


def save_idx_labels(path, labels) -> None:
    labels = np.asarray(labels).reshape(-1)
    if labels.min() < 0 or labels.max() > 255:
        raise ContractError("labels must fit in an unsigned byte")
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_VECTOR, labels.size))
        fh.write(labels.astype(np.uint8).tobytes())


# ------------------------------------------------------------------ sampling


class MinibatchSampler:
    """Index batches drawn from a stream of shuffled epochs.

    Every batch lies inside one epoch, so it never repeats an index. When
    ``batch_size`` does not divide ``n_items`` the last partial batch of each
    epoch is dropped.
    """

    def __init__(self, n_items: int, batch_size: int, rng: np.random.Generator):
        if batch_size < 1 or batch_size > n_items:
            raise ContractError(f"batch size {batch_size} must lie in [1, {n_items}]")
        self.n_items = n_items
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        if self._order.size < self.batch_size:
            self._order = self.rng.permutation(self.n_items)
        idx, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return idx

    def __iter__(self):
        while True:
            yield self.next()


def minibatches(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Iterator:
    """Endless ``(X, Y)`` minibatches."""
    for idx in MinibatchSampler(dataset.n_samples, batch_size, rng):
        yield dataset.inputs[:, idx], dataset.targets[:, idx]
