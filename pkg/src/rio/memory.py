"""Flat byte arenas standing in for process memory.

Client-side process memory is modeled as a sparse flat address space of
4 KB chunks; every (addr, len) pair in the protocol indexes into it.
"""

from __future__ import annotations

PAGE_SIZE = 4096


class ByteArena:
    """Sparse byte-addressable memory, materialized 4 KB at a time."""

    def __init__(self) -> None:
        self._chunks: dict[int, bytearray] = {}

    def _chunk(self, index: int) -> bytearray:
        chunk = self._chunks.get(index)
        if chunk is None:
            chunk = bytearray(PAGE_SIZE)
            self._chunks[index] = chunk
        return chunk

    def read(self, addr: int, length: int) -> bytes:
        if length < 0 or addr < 0:
            raise ValueError("negative address or length")
        out = bytearray(length)
        pos = 0
        while pos < length:
            a = addr + pos
            idx, off = divmod(a, PAGE_SIZE)
            take = min(PAGE_SIZE - off, length - pos)
            chunk = self._chunks.get(idx)
            if chunk is not None:
                out[pos : pos + take] = chunk[off : off + take]
            pos += take
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        if addr < 0:
            raise ValueError("negative address")
        pos = 0
        length = len(data)
        while pos < length:
            a = addr + pos
            idx, off = divmod(a, PAGE_SIZE)
            take = min(PAGE_SIZE - off, length - pos)
            self._chunk(idx)[off : off + take] = data[pos : pos + take]
            pos += take

    def touched_bytes(self) -> int:
        return len(self._chunks) * PAGE_SIZE


class Allocator:
    """Bump allocator handing out non-overlapping arena ranges."""

    def __init__(self, base: int = 0x0010_0000) -> None:
        self._next = base

    def alloc(self, length: int, align: int = PAGE_SIZE) -> int:
        if length <= 0:
            raise ValueError("allocation size must be positive")
        addr = (self._next + align - 1) // align * align
        self._next = addr + length
        return addr
