"""Multi-resolution hash-grid positional encoder.

Positions normalized into [0,1]^3 are looked up on L voxel lattices whose
resolutions follow a geometric ladder; the eight cell-corner embeddings per
level are fetched through a fixed spatial hash (or dense row-major indexing
while the lattice still fits the table) and combined by trilinear
interpolation. The concatenated per-level features form the descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRangeError, OutOfRangeError

# de-facto multiresolution-hashing multipliers; the first is 1 so the
# x axis keeps locality before the modulo
DEFAULT_PRIMES = (1, 2654435761, 805459861)

# binary offsets of a cell's 8 corners
_CORNERS = np.array([[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    r_min: int = 16
    r_max: int = 1024
    table_size: int = 1 << 16   # paper-scale 2**21 supported, desk default small
    feature_dim: int = 4
    primes: tuple = DEFAULT_PRIMES
    always_hash: bool = False   # disable dense indexing at coarse levels
    seed: int = 0

    def __post_init__(self):
        if self.levels < 2:
            raise OutOfRangeError(f"levels must be >= 2, got {self.levels}")
        if self.r_min < 1 or self.r_max <= self.r_min:
            raise OutOfRangeError("need r_max > r_min >= 1")
        if self.table_size & (self.table_size - 1):
            raise OutOfRangeError(f"table_size must be a power of two, got {self.table_size}")
        if self.feature_dim < 1:
            raise OutOfRangeError("feature_dim must be >= 1")

    @property
    def descriptor_dim(self) -> int:
        return self.levels * self.feature_dim


def level_resolution(level: int, cfg: HashGridConfig) -> int:
    """Lattice resolution floor(r_min * eta**level) on the geometric ladder."""
    if not 0 <= level < cfg.levels:
        raise IndexOutOfRangeError(f"level {level} outside [0, {cfg.levels})")
    eta = math.exp((math.log(cfg.r_max) - math.log(cfg.r_min)) / (cfg.levels - 1))
    x = cfg.r_min * eta ** level
    # guard against FP undershoot when the true value is an integer
    return int(math.floor(x * (1.0 + 1e-12)))


def hash_index(vertex, table_size: int, primes=DEFAULT_PRIMES):
    """XOR of prime-multiplied coordinates, wrapped mod 2**64, reduced mod T."""
    v = np.asarray(vertex, dtype=np.uint64)
    single = v.ndim == 1
    v = v.reshape(-1, 3)
    with np.errstate(over="ignore"):
        h = v[:, 0] * np.uint64(primes[0])
        h ^= v[:, 1] * np.uint64(primes[1])
        h ^= v[:, 2] * np.uint64(primes[2])
    out = h % np.uint64(table_size)
    return int(out[0]) if single else out.astype(np.int64)


class HashGrid:
    """Learnable embedding tables over the resolution ladder.

    Every level allocates the full table_size x feature_dim block (dense
    levels simply use a prefix of it), which keeps the key-file layout
    uniform.
    """

    def __init__(self, config: HashGridConfig, bbox, tables=None):
        self.config = config
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        if not np.all(self.bbox[1] > self.bbox[0]):
            raise OutOfRangeError("bbox max must exceed bbox min on every axis")
        self.resolutions = [level_resolution(l, config) for l in range(config.levels)]
        if tables is None:
            rng = np.random.default_rng(config.seed)
            self.tables = rng.uniform(
                -1e-4, 1e-4, size=(config.levels, config.table_size, config.feature_dim)
            )
        else:
            self.tables = np.asarray(tables, dtype=np.float64)
            expect = (config.levels, config.table_size, config.feature_dim)
            if self.tables.shape != expect:
                raise OutOfRangeError(f"tables shape {self.tables.shape} != {expect}")

    def _level_dense(self, level: int) -> bool:
        r = self.resolutions[level]
        return not self.config.always_hash and (r + 1) ** 3 <= self.config.table_size

    def normalize(self, positions) -> np.ndarray:
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        u = (p - self.bbox[0]) / (self.bbox[1] - self.bbox[0])
        return np.clip(u, 0.0, 1.0)

    def corner_indices(self, positions):
        """Per level: (indices (N, 8), weights (N, 8)) of the trilinear stencil."""
        u = self.normalize(positions)
        out = []
        for level in range(self.config.levels):
            r = self.resolutions[level]
            scaled = u * r
            v0 = np.minimum(np.floor(scaled), r - 1).astype(np.int64)
            frac = scaled - v0
            corners = v0[:, None, :] + _CORNERS[None, :, :]          # (N, 8, 3)
            w = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
            weights = w.prod(axis=2)                                  # (N, 8)
            if self._level_dense(level):
                side = r + 1
                idx = (corners[:, :, 0] * side + corners[:, :, 1]) * side + corners[:, :, 2]
            else:
                idx = hash_index(corners.reshape(-1, 3), self.config.table_size,
                                 self.config.primes).reshape(-1, 8)
            out.append((idx, weights))
        return out

    def encode(self, positions) -> np.ndarray:
        """Multi-scale descriptor, shape (N, levels*feature_dim) (or 1-D for one point)."""
        single = np.asarray(positions).ndim == 1
        stencil = self.corner_indices(positions)
        feats = [
            np.einsum("nkf,nk->nf", self.tables[level][idx], weights)
            for level, (idx, weights) in enumerate(stencil)
        ]
        h = np.concatenate(feats, axis=1)
        return h[0] if single else h

    def encode_backward(self, positions, upstream):
        """Scatter upstream descriptor gradients onto the touched table entries.

        Returns a per-level list of (entry indices (M,), gradients (M, F)).
        """
        f = self.config.feature_dim
        up = np.asarray(upstream, dtype=np.float64).reshape(-1, self.config.descriptor_dim)
        stencil = self.corner_indices(positions)
        grads = []
        for level, (idx, weights) in enumerate(stencil):
            g_level = up[:, level * f:(level + 1) * f]              # (N, F)
            contrib = weights[:, :, None] * g_level[:, None, :]     # (N, 8, F)
            flat_idx = idx.reshape(-1)
            uniq, inv = np.unique(flat_idx, return_inverse=True)
            acc = np.zeros((len(uniq), f), dtype=np.float64)
            np.add.at(acc, inv, contrib.reshape(-1, f))
            grads.append((uniq, acc))
        return grads


def positions_bbox(positions, margin: float = 0.05) -> np.ndarray:
    """Axis-aligned box of the positions expanded by a relative margin."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    lo, hi = p.min(axis=0), p.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    return np.stack([lo - margin * span, hi + margin * span])
