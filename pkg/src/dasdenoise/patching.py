"""Tiling of 2-D records into flattened square windows and back."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class PatchIntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class PatchConfig:
    size: int = 48  # window side C
    overlap: int = 0  # D; stride is C - D

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"patch size must be positive, got {self.size}")
        if not 0 <= self.overlap < self.size:
            raise ValueError(f"overlap must satisfy 0 <= D < C, got D={self.overlap}, C={self.size}")

    @property
    def stride(self) -> int:
        return self.size - self.overlap


@dataclass
class PatchSet:
    vectors: np.ndarray  # (n_patches, size*size), row-major windows
    origins: list[tuple[int, int]]
    shape: tuple[int, int]
    size: int

    def __len__(self):
        return len(self.origins)

    def with_vectors(self, vectors: np.ndarray) -> "PatchSet":
        """Same windows, new contents (e.g. network output)."""
        return replace(self, vectors=np.asarray(vectors))


def window_starts(n: int, size: int, stride: int) -> list[int]:
    """Origins along one axis; a final window is shifted flush with the end
    when the regular stride does not land there."""
    if n < size:
        raise ValueError(f"axis length {n} is smaller than the patch size {size}")
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def extract_patches(data, cfg: PatchConfig = PatchConfig()) -> PatchSet:
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError(f"expected a 2-D record, got shape {data.shape}")
    h, w = data.shape
    c = cfg.size
    if h < c or w < c:
        raise ValueError(f"record {h}x{w} is smaller than one {c}x{c} patch")
    origins = [
        (r, col)
        for r in window_starts(h, c, cfg.stride)
        for col in window_starts(w, c, cfg.stride)
    ]
    vectors = np.stack([data[r : r + c, col : col + c].reshape(-1) for r, col in origins])
    return PatchSet(vectors, origins, (h, w), c)


def coverage(patches: PatchSet) -> np.ndarray:
    counts = np.zeros(patches.shape, dtype=np.int64)
    c = patches.size
    for r, col in patches.origins:
        counts[r : r + c, col : col + c] += 1
    return counts


def reconstruct(patches: PatchSet) -> np.ndarray:
    """Average all window values covering each sample."""
    h, w = patches.shape
    c = patches.size
    vecs = np.asarray(patches.vectors)
    if vecs.ndim != 2 or vecs.shape != (len(patches.origins), c * c):
        raise PatchIntegrityError(
            f"{len(patches.origins)} origins but vectors of shape {vecs.shape} for size {c}"
        )
    # running mean: windows that agree on a sample reproduce it bit-exactly
    mean = np.zeros((h, w), dtype=np.result_type(vecs.dtype, np.float64))
    counts = np.zeros((h, w), dtype=np.int64)
    for vec, (r, col) in zip(vecs, patches.origins):
        if r < 0 or col < 0 or r + c > h or col + c > w:
            raise PatchIntegrityError(f"window at {(r, col)} leaves the {h}x{w} record")
        cnt = counts[r : r + c, col : col + c]
        cnt += 1
        block = mean[r : r + c, col : col + c]
        block += (vec.reshape(c, c) - block) / cnt
    if np.any(counts == 0):
        raise PatchIntegrityError("patch set does not cover every sample")
    return mean
