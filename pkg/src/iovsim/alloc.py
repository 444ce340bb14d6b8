"""Allocators for per-VM device resources: LBA extents and queue ids."""
from __future__ import annotations

import bisect
import heapq

from .mem import AllocationError


class LbaAllocator:
    """First-fit allocator of disjoint ``[start, start+size)`` block ranges."""

    def __init__(self, total_blocks: int):
        self.total_blocks = total_blocks
        self._free: list[tuple[int, int]] = [(0, total_blocks)]  # sorted (start, size)
        self.grants: dict[object, tuple[int, int]] = {}

    def free_blocks(self) -> int:
        return sum(s for _, s in self._free)

    def alloc(self, owner, size: int) -> tuple[int, int]:
        if size < 0:
            raise ValueError("negative LBA range")
        if owner in self.grants:
            raise AllocationError(f"{owner} already holds an LBA range")
        if size == 0:
            self.grants[owner] = (0, 0)
            return 0, 0
        for i, (start, avail) in enumerate(self._free):
            if avail >= size:
                if avail == size:
                    del self._free[i]
                else:
                    self._free[i] = (start + size, avail - size)
                self.grants[owner] = (start, size)
                return start, size
        raise AllocationError(
            f"LBA space exhausted: {size} blocks requested, largest free extent "
            f"{max((s for _, s in self._free), default=0)}")

    def release(self, owner) -> None:
        start, size = self.grants.pop(owner)
        if not size:
            return
        i = bisect.bisect(self._free, (start, size))
        self._free.insert(i, (start, size))
        # merge with neighbours
        if i + 1 < len(self._free) and start + size == self._free[i + 1][0]:
            self._free[i] = (start, size + self._free[i + 1][1])
            del self._free[i + 1]
        if i > 0 and self._free[i - 1][0] + self._free[i - 1][1] == start:
            self._free[i - 1] = (self._free[i - 1][0], self._free[i - 1][1] + self._free[i][1])
            del self._free[i]


class QidAllocator:
    """Lowest-free-first queue ids in ``[1, limit]``."""

    def __init__(self, limit: int):
        self.limit = limit
        self._next = 1
        self._freed: list[int] = []
        self.in_use = 0

    def available(self) -> int:
        return self.limit - self.in_use

    def alloc(self) -> int:
        if self._freed:
            qid = heapq.heappop(self._freed)
        elif self._next <= self.limit:
            qid = self._next
            self._next += 1
        else:
            raise AllocationError(f"all {self.limit} I/O queue ids are in use")
        self.in_use += 1
        return qid

    def release(self, qid: int) -> None:
        heapq.heappush(self._freed, qid)
        self.in_use -= 1
