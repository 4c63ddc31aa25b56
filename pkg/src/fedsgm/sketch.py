"""Gaussian sketching operators.

A sketch is a b x d random matrix R with iid N(0, 1/b) entries.  Applying R
compresses a d-dimensional vector to b dimensions; applying R^T lifts it back.
R^T R has identity expectation, so desketch(sketch(x)) is an unbiased (noisy)
estimate of x.

Matrices are generated from a counter-based PRNG (Philox) in fixed-size row
blocks, each block keyed by (seed, block_index).  Generation is therefore
deterministic, re-entrant, and streamable: any block can be (re)produced on
the fly without materializing the full matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

from .errors import DimensionMismatchError, ResourceLimitError

# Rows per generation block.  Fixed constant: changing it changes the bit
# layout of every sketch, so it is part of the on-disk/replay contract.
BLOCK_ROWS = 512

# Dense materialization is refused above this many entries.
DENSE_MAX_ENTRIES = 10**8

# Domain-separation tag so sketch streams never collide with noise streams
# derived from the same user seed elsewhere in the package.
_SKETCH_TAG = 0x5E7C

SeedLike = Union[int, Sequence[int]]


@dataclass(frozen=True)
class SketchSpec:
    """Immutable description of a sketch matrix: shape plus PRNG seed."""

    b: int
    d: int
    seed: SeedLike = 0

    def __post_init__(self):
        if self.b < 1 or self.d < 1:
            raise DimensionMismatchError(
                f"sketch dims must be positive, got b={self.b}, d={self.d}"
            )

    @property
    def entries(self) -> int:
        return self.b * self.d

    def _entropy(self) -> tuple:
        seed = self.seed
        if isinstance(seed, (int, np.integer)):
            key: tuple = (int(seed),)
        else:
            key = tuple(int(s) for s in seed)
        return key + (_SKETCH_TAG,)


def _block_seed_seq(spec: SketchSpec, block: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(spec._entropy(), spawn_key=(block,))


def _gen_block(spec: SketchSpec, block: int) -> np.ndarray:
    """Rows [block*BLOCK_ROWS, ...) of the matrix; identical bits on every call."""
    lo = block * BLOCK_ROWS
    rows = min(BLOCK_ROWS, spec.b - lo)
    rng = np.random.Generator(np.random.Philox(_block_seed_seq(spec, block)))
    return rng.standard_normal((rows, spec.d)) * (spec.b ** -0.5)


class SketchMatrix:
    """A realized Gaussian sketch.

    In dense mode the full matrix is cached; in streaming mode row blocks are
    regenerated per application.  Both modes produce bit-identical matrices
    because they share the per-block PRNG streams.
    """

    def __init__(self, spec: SketchSpec, mode: str = "auto"):
        if mode not in ("auto", "dense", "stream"):
            raise ValueError(f"unknown sketch mode {mode!r}")
        if mode == "auto":
            mode = "dense" if spec.entries <= DENSE_MAX_ENTRIES else "stream"
        if mode == "dense" and spec.entries > DENSE_MAX_ENTRIES:
            raise ResourceLimitError(
                f"dense sketch with {spec.entries:.3g} entries exceeds the "
                f"{DENSE_MAX_ENTRIES:.0e} limit; use streaming mode"
            )
        self.spec = spec
        self.mode = mode
        self._dense = None
        if mode == "dense":
            self._dense = self.materialize()

    @property
    def b(self) -> int:
        return self.spec.b

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def compression_ratio(self) -> float:
        """Input dimension over sketch dimension (>= 1 when compressing)."""
        return self.spec.d / self.spec.b

    def num_blocks(self) -> int:
        return -(-self.spec.b // BLOCK_ROWS)

    def iter_blocks(self) -> Iterator[np.ndarray]:
        """Yield row blocks in order; re-entrant (same bits every pass)."""
        for k in range(self.num_blocks()):
            yield _gen_block(self.spec, k)

    def materialize(self) -> np.ndarray:
        """The full (b, d) matrix. Deterministic given the SketchSpec alone."""
        if self._dense is not None:
            return self._dense
        if self.spec.entries > DENSE_MAX_ENTRIES:
            raise ResourceLimitError(
                f"refusing to materialize {self.spec.entries:.3g} entries"
            )
        return np.concatenate(list(self.iter_blocks()), axis=0)

    def sketch(self, x: np.ndarray) -> np.ndarray:
        """R @ x: compress a d-vector to b dimensions."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.spec.d,):
            raise DimensionMismatchError(
                f"expected shape ({self.spec.d},), got {x.shape}"
            )
        if self._dense is not None:
            return self._dense @ x
        out = np.empty(self.spec.b)
        lo = 0
        for block in self.iter_blocks():
            out[lo : lo + block.shape[0]] = block @ x
            lo += block.shape[0]
        return out

    def desketch(self, y: np.ndarray) -> np.ndarray:
        """R^T @ y: lift a b-vector back to d dimensions."""
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.spec.b,):
            raise DimensionMismatchError(
                f"expected shape ({self.spec.b},), got {y.shape}"
            )
        if self._dense is not None:
            return self._dense.T @ y
        out = np.zeros(self.spec.d)
        lo = 0
        for block in self.iter_blocks():
            out += block.T @ y[lo : lo + block.shape[0]]
            lo += block.shape[0]
        return out


class IdentityCompressor:
    """No-op stand-in for a sketch: b == d, sketch and desketch are identity."""

    def __init__(self, d: int):
        if d < 1:
            raise DimensionMismatchError(f"dimension must be positive, got d={d}")
        self.b = d
        self.d = d

    @property
    def compression_ratio(self) -> float:
        return 1.0

    def sketch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d,):
            raise DimensionMismatchError(f"expected shape ({self.d},), got {x.shape}")
        return x.copy()

    def desketch(self, y: np.ndarray) -> np.ndarray:
        return self.sketch(y)


Compressor = Union[SketchMatrix, IdentityCompressor]


def sample_sketch(spec: SketchSpec, mode: str = "auto") -> SketchMatrix:
    """Realize the sketch described by `spec`."""
    return SketchMatrix(spec, mode=mode)


def sketch(R: Compressor, x: np.ndarray) -> np.ndarray:
    return R.sketch(x)


def desketch(R: Compressor, y: np.ndarray) -> np.ndarray:
    return R.desketch(y)


def identity_compressor(d: int) -> IdentityCompressor:
    return IdentityCompressor(d)
