"""Compressed vector primitives used on the simulated wire.

Three representations cover every transfer the estimators make:

* :class:`CountSketchTable` — an r x c counter grid with per-row sign and
  bucket hashes.  Linear in its input, so sketches computed on different
  clients can be merged (weighted) on the server without decompressing.
  Coordinates are read back by a sign-corrected median over rows, which is
  accurate for coordinates holding a constant fraction of the squared mass
  once r*c scales like log(d/delta)/tau.
* :class:`TopKSparse` — the k largest-magnitude coordinates of a vector,
  stored as (index, value) pairs.  Dropping the rest contracts the squared
  norm by at least k/d, which is what makes error feedback converge.
* :class:`SparseEmbedding` — a random r x n matrix with exactly one +-1 per
  column.  Applied to both sides of a Hessian it preserves matrix products
  in expectation, so a least-squares solve in sketch space approximates the
  full linear system.

Hashes and embeddings are derived from a counter-based generator keyed on
(seed, row, index): rebuilding with the same geometry and seed reproduces
identical hash functions on any host, which is what lets clients and server
agree on a sketch without exchanging the hash tables themselves.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_U64 = (1 << 64) - 1

# Wire format tags.  Bump the version if the layout changes.
TABLE_MAGIC = b"CSKT"
TOPK_MAGIC = b"TKSV"
WIRE_VERSION = 1

_TABLE_HEADER = struct.Struct("<4sHIIQQ")  # magic, version, rows, cols, seed, dim
_TOPK_HEADER = struct.Struct("<4sHQQ")  # magic, version, dim, count


def _keyed_generator(seed: int, row: int) -> np.random.Generator:
    # Philox is counter-based: the (seed, row) key fully determines the stream.
    key = np.array([seed & _U64, row & _U64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@lru_cache(maxsize=32)
def _hash_arrays(rows: int, cols: int, dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Bucket and sign hash values for every (row, index) pair, memoized.

    Tables sharing (rows, cols, dim, seed) share these read-only arrays, so a
    training loop that sketches every iteration does not pay the hash cost
    more than once.
    """
    buckets = np.empty((rows, dim), dtype=np.int64)
    signs = np.empty((rows, dim), dtype=np.float64)
    for j in range(rows):
        gen = _keyed_generator(seed, j)
        buckets[j] = gen.integers(0, cols, size=dim)
        signs[j] = gen.integers(0, 2, size=dim) * 2.0 - 1.0
    buckets.setflags(write=False)
    signs.setflags(write=False)
    return buckets, signs


def sketch_table_shape(dim: int, size: int, delta: float = 0.05) -> tuple[int, int]:
    """Table geometry for a requested payload of ``size`` scalars.

    Rows grow like log2(dim/delta) so per-coordinate medians concentrate;
    columns take up the rest of the budget.  The realized payload is
    rows*cols, which rounds ``size`` up to a multiple of the row count.

    Raises ValueError if the budget cannot fit even one column per row.
    """
    if dim < 1 or size < 1:
        raise ValueError("dim and size must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    rows = max(3, math.ceil(math.log2(dim / delta)))
    if size < rows:
        raise ValueError(
            f"sketch budget {size} is smaller than the {rows} rows required "
            f"for dim={dim}, delta={delta}"
        )
    return rows, math.ceil(size / rows)


def heavy_hitter_table_shape(
    dim: int, tau: float, delta: float = 0.05, column_factor: float = 4.0
) -> tuple[int, int]:
    """Geometry sized to recover coordinates holding >= tau of squared mass.

    Columns scale like 1/tau (collision noise per row must stay below the
    heavy coordinate), rows like log2(dim/delta) (median amplification).
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    rows = max(3, math.ceil(math.log2(dim / delta)))
    cols = math.ceil(column_factor / tau)
    return rows, cols


@dataclass(frozen=True)
class TopKSparse:
    """Sparse record of the largest-magnitude coordinates of a dim-vector.

    Indices are strictly increasing and values are the original (signed)
    coordinates; everything not listed is implicitly zero.
    """

    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-d arrays of equal length")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.dim:
                raise ValueError("indices out of range")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    def __len__(self) -> int:
        return int(self.indices.size)

    def densify(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def serialize(self) -> bytes:
        header = _TOPK_HEADER.pack(TOPK_MAGIC, WIRE_VERSION, self.dim, len(self))
        return header + self.indices.tobytes() + self.values.tobytes()

    @property
    def serialized_nbytes(self) -> int:
        return _TOPK_HEADER.size + 16 * len(self)

    @staticmethod
    def deserialize(buf: bytes) -> "TopKSparse":
        magic, version, dim, count = _TOPK_HEADER.unpack_from(buf)
        if magic != TOPK_MAGIC:
            raise ValueError("not a top-k record")
        if version != WIRE_VERSION:
            raise ValueError(f"unsupported record version {version}")
        off = _TOPK_HEADER.size
        indices = np.frombuffer(buf, dtype=np.int64, count=count, offset=off).copy()
        values = np.frombuffer(
            buf, dtype=np.float64, count=count, offset=off + 8 * count
        ).copy()
        return TopKSparse(dim=int(dim), indices=indices, values=values)


def topk_compress(vector: np.ndarray, k: int) -> TopKSparse:
    """Keep the k largest-magnitude coordinates of ``vector``.

    Ties are broken toward the lower index so the output is a deterministic
    function of the input.  Exact zeros never make the cut: they carry no
    mass and are already implicit in the sparse record.
    """
    g = np.asarray(vector, dtype=np.float64)
    if g.ndim != 1:
        raise ValueError("expected a 1-d vector")
    d = g.size
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    # lexsort: primary key last -> sort by descending magnitude, then index.
    order = np.lexsort((np.arange(d), -np.abs(g)))[:k]
    keep = np.sort(order)
    keep = keep[g[keep] != 0.0]
    return TopKSparse(dim=d, indices=keep, values=g[keep])


class CountSketchTable:
    """Linear sketch of a dim-vector into an r x c counter grid.

    Inserting g adds sign[j, i] * g[i] to counter (j, bucket[j, i]) for every
    row j; reading coordinate i takes the median across rows of the
    sign-corrected counters.  Counters are plain float64, so scaling, adding
    and weighted merging of compatible tables operate on the grids directly.
    """

    __slots__ = ("rows", "cols", "dim", "seed", "counters", "_buckets", "_signs")

    def __init__(
        self,
        rows: int,
        cols: int,
        dim: int,
        seed: int,
        counters: np.ndarray | None = None,
    ) -> None:
        if rows < 1 or cols < 1 or dim < 1:
            raise ValueError("rows, cols and dim must be positive")
        if not 0 <= seed <= _U64:
            raise ValueError("seed must fit in 64 bits")
        self.rows = int(rows)
        self.cols = int(cols)
        self.dim = int(dim)
        self.seed = int(seed)
        if counters is None:
            self.counters = np.zeros((self.rows, self.cols))
        else:
            counters = np.asarray(counters, dtype=np.float64)
            if counters.shape != (self.rows, self.cols):
                raise ValueError("counter grid has the wrong shape")
            self.counters = counters
        self._buckets, self._signs = _hash_arrays(self.rows, self.cols, self.dim, self.seed)

    @property
    def size(self) -> int:
        """Scalars on the wire when this table is transmitted."""
        return self.rows * self.cols

    def spawn_empty(self) -> "CountSketchTable":
        """Fresh zero table sharing this table's geometry and hashes."""
        return CountSketchTable(self.rows, self.cols, self.dim, self.seed)

    def copy(self) -> "CountSketchTable":
        return CountSketchTable(
            self.rows, self.cols, self.dim, self.seed, self.counters.copy()
        )

    def _check_compatible(self, other: "CountSketchTable") -> None:
        if (self.rows, self.cols, self.dim, self.seed) != (
            other.rows,
            other.cols,
            other.dim,
            other.seed,
        ):
            raise ValueError("tables use different geometry or hash seed")

    def insert(self, vector: np.ndarray) -> "CountSketchTable":
        """Accumulate a vector into the counters; returns self for chaining."""
        g = np.asarray(vector, dtype=np.float64)
        if g.shape != (self.dim,):
            raise ValueError(f"expected a vector of dim {self.dim}, got shape {g.shape}")
        for j in range(self.rows):
            self.counters[j] += np.bincount(
                self._buckets[j], weights=self._signs[j] * g, minlength=self.cols
            )
        return self

    def estimate(self, index: int) -> float:
        """Median-of-rows estimate of one coordinate."""
        if not 0 <= index < self.dim:
            raise ValueError(f"index {index} out of range for dim {self.dim}")
        vals = self._signs[:, index] * self.counters[np.arange(self.rows), self._buckets[:, index]]
        return float(np.median(vals))

    def estimate_all(self) -> np.ndarray:
        """Coordinate estimates for the whole dim-vector at once."""
        rows = np.arange(self.rows)[:, None]
        vals = self._signs * self.counters[rows, self._buckets]
        return np.median(vals, axis=0)

    def decompress_topk(self, k: int | None = None) -> TopKSparse:
        """Sparse read-back: the k largest estimated coordinates.

        k defaults to the column count (at most one heavy coordinate per
        column is resolvable anyway).  An all-zero table yields an empty
        record and exact-zero estimates are dropped.
        """
        if k is None:
            k = self.cols
        est = self.estimate_all()
        return topk_compress(est, min(k, self.dim))

    # -- counter arithmetic (linearity) ------------------------------------

    def scaled(self, factor: float) -> "CountSketchTable":
        return CountSketchTable(
            self.rows, self.cols, self.dim, self.seed, self.counters * factor
        )

    def add_scaled(self, other: "CountSketchTable", factor: float = 1.0) -> "CountSketchTable":
        """In-place self += factor * other; tables must be compatible."""
        self._check_compatible(other)
        self.counters += factor * other.counters
        return self

    @staticmethod
    def merge_weighted(
        tables: list["CountSketchTable"], weights: np.ndarray
    ) -> "CountSketchTable":
        """Weighted sum of compatible tables, accumulated in list order."""
        if not tables:
            raise ValueError("nothing to merge")
        if len(tables) != len(weights):
            raise ValueError("one weight per table required")
        out = tables[0].spawn_empty()
        for table, w in zip(tables, weights):
            out.add_scaled(table, float(w))
        return out

    # -- wire format --------------------------------------------------------

    def serialize(self) -> bytes:
        header = _TABLE_HEADER.pack(
            TABLE_MAGIC, WIRE_VERSION, self.rows, self.cols, self.seed, self.dim
        )
        return header + self.counters.tobytes()

    @property
    def serialized_nbytes(self) -> int:
        return _TABLE_HEADER.size + 8 * self.size

    @staticmethod
    def deserialize(buf: bytes) -> "CountSketchTable":
        magic, version, rows, cols, seed, dim = _TABLE_HEADER.unpack_from(buf)
        if magic != TABLE_MAGIC:
            raise ValueError("not a count-sketch record")
        if version != WIRE_VERSION:
            raise ValueError(f"unsupported record version {version}")
        counters = np.frombuffer(
            buf, dtype=np.float64, count=rows * cols, offset=_TABLE_HEADER.size
        )
        return CountSketchTable(
            int(rows), int(cols), int(dim), int(seed), counters.reshape(rows, cols).copy()
        )


@dataclass(frozen=True)
class SparseEmbedding:
    """Random rows x cols matrix with exactly one +-1 entry per column.

    Column i holds sign[i] at row bucket[i].  Applying it to a vector is a
    signed bucket-sum; applying the adjoint is a signed gather.  For square
    products A^T S^T S B the collision cross-terms have zero mean, and with
    rows > 18/(eps^2 delta) the deviation exceeds eps ||A||_F ||B||_F with
    probability at most delta.
    """

    rows: int
    cols: int
    seed: int
    bucket: np.ndarray
    sign: np.ndarray

    @staticmethod
    def generate(rows: int, cols: int, seed: int) -> "SparseEmbedding":
        if rows < 1 or cols < 1:
            raise ValueError("rows and cols must be positive")
        gen = _keyed_generator(seed, 0)
        bucket = gen.integers(0, rows, size=cols)
        sign = gen.integers(0, 2, size=cols) * 2.0 - 1.0
        return SparseEmbedding(rows=rows, cols=cols, seed=int(seed), bucket=bucket, sign=sign)

    def apply(self, vector: np.ndarray) -> np.ndarray:
        """S @ v for a cols-vector."""
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (self.cols,):
            raise ValueError(f"expected a vector of dim {self.cols}, got shape {v.shape}")
        return np.bincount(self.bucket, weights=self.sign * v, minlength=self.rows)

    def apply_adjoint(self, vector: np.ndarray) -> np.ndarray:
        """S^T @ w for a rows-vector."""
        w = np.asarray(vector, dtype=np.float64)
        if w.shape != (self.rows,):
            raise ValueError(f"expected a vector of dim {self.rows}, got shape {w.shape}")
        return self.sign * w[self.bucket]

    def adjoint_basis_column(self, j: int) -> np.ndarray:
        """Column j of S^T, i.e. the indicator of bucket j with signs."""
        if not 0 <= j < self.rows:
            raise ValueError(f"row index {j} out of range")
        out = np.zeros(self.cols)
        mask = self.bucket == j
        out[mask] = self.sign[mask]
        return out

    def apply_matrix(self, matrix: np.ndarray) -> np.ndarray:
        """S @ A for a (cols x p) matrix; O(rows*p) output, built by scatter."""
        a = np.asarray(matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != self.cols:
            raise ValueError(f"expected a ({self.cols}, p) matrix, got shape {a.shape}")
        out = np.zeros((self.rows, a.shape[1]))
        np.add.at(out, self.bucket, self.sign[:, None] * a)
        return out

    def as_dense(self) -> np.ndarray:
        """Materialized matrix; only sensible at small sizes (tests, probes)."""
        dense = np.zeros((self.rows, self.cols))
        dense[self.bucket, np.arange(self.cols)] = self.sign
        return dense
