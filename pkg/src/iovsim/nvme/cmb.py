"""Controller Memory Buffer: device memory exposed as plain read/write HPA space."""
from __future__ import annotations

import bisect

from ..mem import AllocationError, HostMemory
from .constants import PAGE_SIZE


class CmbRegion:
    """Page-granular allocator over ``[0, size)`` with byte access through ``memory``.

    Allocations never overlap, so each one can be mapped into a single guest.
    Freed space is zeroed and reused first-fit.
    """

    def __init__(self, base: int, size: int, memory: HostMemory):
        self.base = base
        self.size = size
        self.memory = memory
        self.allocations: dict[int, tuple[int, str]] = {}  # offset -> (length, tag)
        self._offsets: list[int] = []

    def alloc(self, size: int, tag: str) -> int:
        if size <= 0:
            raise ValueError("CMB allocation size must be positive")
        length = -(-size // PAGE_SIZE) * PAGE_SIZE
        offs = self._offsets
        end = offs[-1] + self.allocations[offs[-1]][0] if offs else 0
        if end + length <= self.size:
            off = end
        else:
            off = self._first_fit(length)
        self.allocations[off] = (length, tag)
        bisect.insort(offs, off)
        return off

    def _first_fit(self, length: int) -> int:
        cursor = 0
        for off in self._offsets:
            if off - cursor >= length:
                return cursor
            cursor = off + self.allocations[off][0]
        if self.size - cursor >= length:
            return cursor
        raise AllocationError(
            f"CMB exhausted: {length} bytes requested, {self.free_bytes()} free")

    def free(self, offset: int) -> None:
        length, _ = self.allocations.pop(offset)
        del self._offsets[bisect.bisect_left(self._offsets, offset)]
        self.memory.release(self.base + offset, length)

    def free_bytes(self) -> int:
        return self.size - sum(length for length, _ in self.allocations.values())

    def contains(self, hpa: int) -> bool:
        return self.base <= hpa < self.base + self.size

    def _check(self, offset: int, length: int) -> None:
        if offset < 0 or offset + length > self.size:
            raise IndexError(f"CMB access [{offset:#x}, {offset + length:#x}) outside region")

    def read(self, offset: int, length: int) -> bytes:
        self._check(offset, length)
        return self.memory.read(self.base + offset, length)

    def write(self, offset: int, data) -> None:
        self._check(offset, len(data))
        self.memory.write(self.base + offset, data)
