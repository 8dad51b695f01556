"""Binary checkpoint container ("MMFM"): endian-pinned, CRC-guarded, byte
stable. All multi-byte fields are little-endian; tensors are float32
row-major; tensor tables are sorted by name, so save -> load -> save is
byte-identical.

Layout:
    magic "MMFM" | version u32 | config_hash 32B | step u64 | epoch u64
    5 length-prefixed (u64) sections in fixed order:
        student tensor table, teacher tensor table, optimizer state,
        rng/sampler state, memory-bank snapshot (may be empty)
    crc32 u32 over everything before it
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigHashMismatchError,
    TensorShapeError,
    TruncatedError,
    VersionMismatchError,
)

MAGIC = b"MMFM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI32sQQ")


@dataclass
class CheckpointData:
    config_hash: bytes
    step: int
    epoch: int
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    opt_t: int
    opt_beta1: float
    opt_beta2: float
    opt_eps: float
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    seed: int
    sampler_state: dict[str, tuple[int, int]] = field(default_factory=dict)
    bank_blob: bytes = b""


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise TruncatedError(
                f"{self.path}: truncated container (needed {n} bytes at offset {self.off})"
            )
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def _pack_tensor_table(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _read_tensor_table(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = np.frombuffer(r.take(size * 4), dtype="<f4").reshape(dims).copy()
        out[name] = data
    return out


def _pack_rng(seed: int, sampler_state: dict[str, tuple[int, int]]) -> bytes:
    parts = [struct.pack("<QI", seed & 0xFFFFFFFFFFFFFFFF, len(sampler_state))]
    for tag in sorted(sampler_state):
        cycle, pos = sampler_state[tag]
        encoded = tag.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<QQ", cycle, pos))
    return b"".join(parts)


def _read_rng(r: _Reader) -> tuple[int, dict[str, tuple[int, int]]]:
    seed, count = r.unpack("<QI")
    state: dict[str, tuple[int, int]] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        tag = r.take(name_len).decode("utf-8")
        cycle, pos = r.unpack("<QQ")
        state[tag] = (cycle, pos)
    return seed, state


def serialize_checkpoint(data: CheckpointData) -> bytes:
    if len(data.config_hash) != 32:
        raise ValueError("config_hash must be a 32-byte digest")
    opt = struct.pack("<Qddd", data.opt_t, data.opt_beta1, data.opt_beta2, data.opt_eps)
    opt += _pack_tensor_table(data.opt_m)
    opt += _pack_tensor_table(data.opt_v)
    sections = [
        _pack_tensor_table(data.student),
        _pack_tensor_table(data.teacher),
        opt,
        _pack_rng(data.seed, data.sampler_state),
        data.bank_blob,
    ]
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, data.config_hash, data.step, data.epoch)
    for sec in sections:
        body += struct.pack("<Q", len(sec)) + sec
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize_checkpoint(blob: bytes, path: str = "<bytes>") -> CheckpointData:
    if len(blob) < _HEADER.size + 4:
        raise TruncatedError(f"{path}: container too short ({len(blob)} bytes)")
    magic = blob[:4]
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if crc_stored != zlib.crc32(blob[:-4]):
        raise TruncatedError(f"{path}: checksum mismatch (corrupt or truncated container)")
    r = _Reader(blob[:-4], path)
    _, version, config_hash, step, epoch = r.unpack("<4sI32sQQ")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, expected {FORMAT_VERSION}")

    def section() -> _Reader:
        (length,) = r.unpack("<Q")
        return _Reader(r.take(length), path)

    student = _read_tensor_table(section())
    teacher = _read_tensor_table(section())
    opt_r = section()
    opt_t, beta1, beta2, eps = opt_r.unpack("<Qddd")
    opt_m = _read_tensor_table(opt_r)
    opt_v = _read_tensor_table(opt_r)
    seed, sampler_state = _read_rng(section())
    bank_r = section()
    bank_blob = bank_r.take(len(bank_r.blob))
    if r.off != len(r.blob):
        raise TruncatedError(f"{path}: {len(r.blob) - r.off} trailing bytes after last section")
    return CheckpointData(
        config_hash=config_hash,
        step=step,
        epoch=epoch,
        student=student,
        teacher=teacher,
        opt_t=opt_t,
        opt_beta1=beta1,
        opt_beta2=beta2,
        opt_eps=eps,
        opt_m=opt_m,
        opt_v=opt_v,
        seed=seed,
        sampler_state=sampler_state,
        bank_blob=bank_blob,
    )


def save_checkpoint(data: CheckpointData, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(serialize_checkpoint(data))
    tmp.replace(path)


def load_checkpoint(
    path: str | Path,
    expected_hash: bytes | None = None,
    allow_hash_mismatch: bool = False,
) -> CheckpointData:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = deserialize_checkpoint(path.read_bytes(), str(path))
    if expected_hash is not None and data.config_hash != expected_hash and not allow_hash_mismatch:
        raise ConfigHashMismatchError(
            f"{path}: checkpoint config hash {data.config_hash.hex()[:12]}... does not match "
            f"the active config ({expected_hash.hex()[:12]}...); pass the explicit override "
            "flag to load anyway"
        )
    return data


def check_shapes(tensors: dict[str, np.ndarray], reference: dict[str, tuple[int, ...]], path: str) -> None:
    """Validate a loaded tensor table against expected shapes."""
    missing = sorted(set(reference) - set(tensors))
    extra = sorted(set(tensors) - set(reference))
    if missing or extra:
        raise TensorShapeError(f"{path}: tensor names differ (missing {missing}, unexpected {extra})")
    for name, shape in reference.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise TensorShapeError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {shape}"
            )
