"""Token shard files: the on-disk unit of corpus storage.

Layout (little-endian): magic ``TLLMSHRD`` (8 bytes), u32 version = 1,
u32 reserved = 0, u64 token_count, then token_count u16 token ids. A shard
stream is the ordered list of shards in one directory; concatenating them
yields exactly the tokens that were written.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

SHARD_MAGIC = b"TLLMSHRD"
SHARD_VERSION = 1
HEADER_SIZE = 24
_HEADER = struct.Struct("<8sIIQ")

DEFAULT_SHARD_SIZE = 200 * 1024 * 1024  # production default; fixtures use 1 MiB
MIN_SHARD_SIZE = 1024 * 1024


@dataclass(frozen=True)
class TokenShard:
    path: Path
    token_count: int
    version: int = SHARD_VERSION


def write_shard(path: str | Path, tokens: np.ndarray) -> TokenShard:
    path = Path(path)
    tokens = np.ascontiguousarray(tokens, dtype="<u2")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, 0, tokens.size))
        fh.write(tokens.tobytes())
    return TokenShard(path=path, token_count=int(tokens.size))


def read_shard_header(path: str | Path) -> TokenShard:
    path = Path(path)
    size = path.stat().st_size
    if size < HEADER_SIZE:
        raise ValueError(f"{path}: truncated shard (size {size} < header {HEADER_SIZE})")
    with open(path, "rb") as fh:
        magic, version, _reserved, count = _HEADER.unpack(fh.read(HEADER_SIZE))
    if magic != SHARD_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {SHARD_MAGIC!r}")
    if version != SHARD_VERSION:
        raise ValueError(f"{path}: unsupported shard version {version}")
    expected = HEADER_SIZE + 2 * count
    if size != expected:
        raise ValueError(f"{path}: expected file size {expected}, got {size}")
    return TokenShard(path=path, token_count=count, version=version)


def read_shard(path: str | Path) -> np.ndarray:
    shard = read_shard_header(path)
    with open(shard.path, "rb") as fh:
        fh.seek(HEADER_SIZE)
        data = fh.read(2 * shard.token_count)
    return np.frombuffer(data, dtype="<u2")


def shard_paths(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"shard directory not found: {directory}")
    return sorted(directory.glob("shard_*.bin"))


class ShardWriter:
    """Single-writer shard stream, rolling to a new file at the size limit.

    Non-final shards are filled to exactly ``capacity`` tokens so that a
    document may span shards while global token order is preserved.
    """

    def __init__(self, out_dir: str | Path, shard_size_limit: int = DEFAULT_SHARD_SIZE):
        if shard_size_limit < MIN_SHARD_SIZE:
            raise ValueError(
                f"shard_size_limit must be >= {MIN_SHARD_SIZE} bytes, got {shard_size_limit}"
            )
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.capacity = shard_size_limit // 2  # tokens per full shard
        self._buffer: list[np.ndarray] = []
        self._buffered = 0
        self.shards: list[TokenShard] = []
        self.total_tokens = 0
        self._closed = False

    def append(self, tokens: Sequence[int] | np.ndarray) -> None:
        if self._closed:
            raise RuntimeError("ShardWriter is closed")
        arr = np.asarray(tokens, dtype="<u2")
        if arr.size == 0:
            return
        self._buffer.append(arr)
        self._buffered += arr.size
        self.total_tokens += arr.size
        while self._buffered >= self.capacity:
            self._flush_one(self.capacity)

    def _flush_one(self, count: int) -> None:
        flat = np.concatenate(self._buffer) if len(self._buffer) > 1 else self._buffer[0]
        chunk, rest = flat[:count], flat[count:]
        path = self.out_dir / f"shard_{len(self.shards):06d}.bin"
        self.shards.append(write_shard(path, chunk))
        self._buffer = [rest] if rest.size else []
        self._buffered = int(rest.size)

    def close(self) -> list[TokenShard]:
        if not self._closed:
            self._closed = True
            if self._buffered:
                self._flush_one(self._buffered)
        return self.shards

    def __enter__(self) -> "ShardWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def iter_stream_tokens(
    paths: Iterable[str | Path], chunk_tokens: int = 1 << 20
) -> Iterator[np.ndarray]:
    """Lazily yield token chunks from a shard stream, in order."""
    for path in paths:
        shard = read_shard_header(path)
        with open(shard.path, "rb") as fh:
            fh.seek(HEADER_SIZE)
            remaining = shard.token_count
            while remaining:
                n = min(remaining, chunk_tokens)
                data = fh.read(2 * n)
                remaining -= n
                yield np.frombuffer(data, dtype="<u2")


def iter_documents(paths: Iterable[str | Path], eot_id: int) -> Iterator[np.ndarray]:
    """Yield whole documents (tokens through their terminating eot) lazily.

    A trailing run without an eot terminator is yielded as-is.
    """
    pending: list[np.ndarray] = []
    for chunk in iter_stream_tokens(paths):
        (ends,) = np.nonzero(chunk == eot_id)
        start = 0
        for end in ends:
            piece = chunk[start : end + 1]
            if pending:
                pending.append(piece)
                yield np.concatenate(pending)
                pending = []
            else:
                yield piece
            start = end + 1
        if start < chunk.size:
            pending.append(chunk[start:])
    if pending:
        yield np.concatenate(pending)


def read_stream(directory: str | Path) -> np.ndarray:
    """Read a whole shard stream into memory. Test/fixture scale only."""
    paths = shard_paths(directory)
    if not paths:
        return np.empty(0, dtype="<u2")
    return np.concatenate([read_shard(p) for p in paths])


def stream_token_count(directory: str | Path) -> int:
    return sum(read_shard_header(p).token_count for p in shard_paths(directory))
