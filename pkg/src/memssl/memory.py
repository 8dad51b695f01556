"""Fixed-capacity FIFO memory of unit-norm embedding rows with stochastic
block retrieval.

The storage is a plain float32 ring buffer: gradients never flow into it
(consumers wrap retrieved rows as constants). Block sampling draws
``block_size`` distinct indices uniformly without replacement per step;
during warm-up (fewer rows stored than a block) every stored row is used.
A fixed-partition mode cycles disjoint contiguous blocks instead, for
ablation.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import ConfigError, TruncatedError

_SNAP_MAGIC = b"MBNK"
_SNAP_VERSION = 1
_NORM_TOL = 1e-4


class MemoryBank:
    def __init__(self, capacity: int, dim: int, block_size: int):
        if capacity < 1 or dim < 1 or block_size < 1:
            raise ConfigError(
                f"capacity, dim, block_size must be positive, got {capacity}, {dim}, {block_size}"
            )
        if capacity % block_size:
            raise ConfigError(f"block size {block_size} must divide capacity {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.block_size = block_size
        self.storage = np.zeros((capacity, dim), dtype=np.float32)
        self.cursor = 0
        self.filled = 0
        self._partition_cursor = 0

    def push(self, embeddings: np.ndarray) -> None:
        """Write unit-norm rows at consecutive ring positions, overwriting the
        oldest entries."""
        emb = np.asarray(embeddings, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[1] != self.dim:
            raise ValueError(f"expected (B, {self.dim}) rows, got shape {emb.shape}")
        b = emb.shape[0]
        if b > self.capacity:
            raise ValueError(f"cannot push {b} rows into capacity {self.capacity}")
        norms = np.linalg.norm(emb.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > _NORM_TOL):
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(f"row {bad} has norm {norms[bad]:.6f}, expected 1 +/- {_NORM_TOL}")
        end = self.cursor + b
        if end <= self.capacity:
            self.storage[self.cursor : end] = emb
        else:
            split = self.capacity - self.cursor
            self.storage[self.cursor :] = emb[:split]
            self.storage[: end % self.capacity] = emb[split:]
        self.cursor = end % self.capacity
        self.filled = min(self.filled + b, self.capacity)

    def sample_block(self, rng: np.random.Generator) -> np.ndarray:
        """Distinct row indices, uniform without replacement over the filled
        region. Warm-up (filled < block_size) returns all filled indices."""
        if self.filled == 0:
            raise ValueError("cannot sample a block from an empty memory")
        if self.filled < self.block_size:
            return np.arange(self.filled, dtype=np.int64)
        return rng.choice(self.filled, size=self.block_size, replace=False).astype(np.int64)

    def next_partition_block(self) -> np.ndarray:
        """Fixed-partition mode: cycle disjoint contiguous blocks in order."""
        if self.filled == 0:
            raise ValueError("cannot sample a block from an empty memory")
        if self.filled < self.block_size:
            return np.arange(self.filled, dtype=np.int64)
        n_blocks = self.filled // self.block_size
        start = (self._partition_cursor % n_blocks) * self.block_size
        self._partition_cursor += 1
        return np.arange(start, start + self.block_size, dtype=np.int64)

    def rows(self, block: np.ndarray) -> np.ndarray:
        if block.size and int(block.max()) >= self.filled:
            raise ValueError(f"block index {int(block.max())} >= filled {self.filled}")
        return self.storage[block]

    def similarities(self, queries: np.ndarray, block: np.ndarray) -> np.ndarray:
        """Raw dot products (V, block_size); unit norms are the caller's
        contract, so scores land in [-1, 1] up to rounding."""
        q = np.asarray(queries, dtype=np.float32)
        if q.ndim != 2 or q.shape[1] != self.dim:
            raise ValueError(f"expected (V, {self.dim}) queries, got shape {q.shape}")
        return q @ self.rows(block).T

    def snapshot(self) -> bytes:
        header = struct.pack(
            "<4sHQQQQ",
            _SNAP_MAGIC,
            _SNAP_VERSION,
            self.capacity,
            self.dim,
            self.cursor,
            self.filled,
        )
        body = header + struct.pack("<Q", self._partition_cursor) + self.storage.tobytes()
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def restore(cls, blob: bytes, block_size: int) -> "MemoryBank":
        head_fmt = "<4sHQQQQ"
        head_size = struct.calcsize(head_fmt)
        if len(blob) < head_size + 12:
            raise TruncatedError(f"memory snapshot too short ({len(blob)} bytes)")
        magic, version, capacity, dim, cursor, filled = struct.unpack_from(head_fmt, blob)
        if magic != _SNAP_MAGIC:
            raise TruncatedError(f"bad memory snapshot magic {magic!r}")
        if version != _SNAP_VERSION:
            raise TruncatedError(f"unsupported memory snapshot version {version}")
        expected = head_size + 8 + capacity * dim * 4 + 4
        if len(blob) != expected:
            raise TruncatedError(f"memory snapshot is {len(blob)} bytes, expected {expected}")
        (crc,) = struct.unpack_from("<I", blob, expected - 4)
        if crc != zlib.crc32(blob[: expected - 4]):
            raise TruncatedError("memory snapshot checksum mismatch")
        (partition_cursor,) = struct.unpack_from("<Q", blob, head_size)
        bank = cls(capacity, dim, block_size)
        bank.storage = np.frombuffer(
            blob[head_size + 8 : expected - 4], dtype="<f4"
        ).reshape(capacity, dim).copy()
        bank.cursor = cursor
        bank.filled = filled
        bank._partition_cursor = partition_cursor
        return bank
