"""Block namespace backed by a sparse in-memory map or a sparse flat file."""
from __future__ import annotations

import os


class MemoryStore:
    def __init__(self, block_size: int):
        self.block_size = block_size
        self.blocks: dict[int, bytes] = {}

    def read(self, lba: int) -> bytes | None:
        return self.blocks.get(lba)

    def write(self, lba: int, data: bytes) -> None:
        self.blocks[lba] = data

    def written(self):
        return self.blocks.keys()

    def close(self) -> None:
        pass


class FileStore:
    """Flat file of ``block_size * total_blocks`` bytes, created sparse."""

    def __init__(self, path, block_size: int, total_blocks: int):
        self.path = os.fspath(path)
        self.block_size = block_size
        exists = os.path.exists(self.path)
        self.fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        size = block_size * total_blocks
        if not exists or os.fstat(self.fd).st_size != size:
            os.ftruncate(self.fd, size)
        self._written: set[int] = set()

    def read(self, lba: int) -> bytes | None:
        data = os.pread(self.fd, self.block_size, lba * self.block_size)
        return data

    def write(self, lba: int, data: bytes) -> None:
        os.pwrite(self.fd, data, lba * self.block_size)
        self._written.add(lba)

    def written(self):
        return self._written

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1


class Namespace:
    """``total_blocks`` blocks of ``block_size`` bytes; unwritten blocks read as zeros."""

    def __init__(self, nsid: int = 1, block_size: int = 4096, total_blocks: int = 1 << 20,
                 path=None):
        if block_size not in (512, 4096):
            raise ValueError(f"block size must be 512 or 4096, got {block_size}")
        if total_blocks <= 0:
            raise ValueError("namespace needs at least one block")
        self.nsid = nsid
        self.block_size = block_size
        self.total_blocks = total_blocks
        self.store = (FileStore(path, block_size, total_blocks) if path is not None
                      else MemoryStore(block_size))
        self._zero = bytes(block_size)

    @property
    def size_bytes(self) -> int:
        return self.block_size * self.total_blocks

    def in_range(self, slba: int, nblocks: int) -> bool:
        return 0 <= slba and slba + nblocks <= self.total_blocks

    def read_blocks(self, slba: int, nblocks: int) -> bytes:
        if not self.in_range(slba, nblocks):
            raise IndexError(f"blocks [{slba}, {slba + nblocks}) outside namespace")
        get = self.store.read
        zero = self._zero
        if nblocks == 1:
            return get(slba) or zero
        return b"".join(get(lba) or zero for lba in range(slba, slba + nblocks))

    def write_blocks(self, slba: int, data) -> None:
        bs = self.block_size
        if len(data) % bs:
            raise ValueError("write length must be a multiple of the block size")
        nblocks = len(data) // bs
        if not self.in_range(slba, nblocks):
            raise IndexError(f"blocks [{slba}, {slba + nblocks}) outside namespace")
        put = self.store.write
        data = bytes(data)
        for i in range(nblocks):
            put(slba + i, data[i * bs:(i + 1) * bs])

    def written_blocks(self) -> list[int]:
        return sorted(self.store.written())

    def snapshot(self) -> dict[int, bytes]:
        """Contents of every block ever written (for byte-level diffs)."""
        return {lba: self.read_blocks(lba, 1) for lba in self.store.written()}

    def diff(self, before: dict[int, bytes]) -> list[int]:
        """Blocks whose bytes differ from ``before`` (missing entries mean zeros)."""
        changed = []
        for lba in sorted(set(before) | set(self.store.written())):
            old = before.get(lba, self._zero)
            if self.read_blocks(lba, 1) != old:
                changed.append(lba)
        return changed

    def close(self) -> None:
        self.store.close()
