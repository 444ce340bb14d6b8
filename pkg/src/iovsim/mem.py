"""Host physical memory, guest address spaces, DMA remapping and interrupt remapping.

Addresses are byte addresses; tables are keyed by 4 KiB page numbers.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable

from .nvme.constants import PAGE_SHIFT, PAGE_SIZE

PAGE_MASK = PAGE_SIZE - 1
_ZERO_PAGE = bytes(PAGE_SIZE)

GiB = 1 << 30

# Guest RAM grants live below this bound; host-owned DMA addresses sit above it.
GUEST_GPA_LIMIT = 1 << 46
HOST_IOVA_BASE = 1 << 46
HOST_IOVA_SIZE = 1 << 45
# Emulated device windows (BARs) are placed in a separate aperture per VM.
MMIO_APERTURE_BASE = 1 << 47


class MemoryFault(Exception):
    """Access outside any backing memory."""


class GuestMemoryFault(MemoryFault):
    """Second-level translation miss that no handler resolved."""

    def __init__(self, vm, gpa):
        super().__init__(f"vm {vm}: unmapped guest-physical address {gpa:#x}")
        self.vm = vm
        self.gpa = gpa


class DmaFault(MemoryFault):
    def __init__(self, device, addr):
        super().__init__(f"device {device}: unmapped DMA address {addr:#x}")
        self.device = device
        self.addr = addr


class MappingError(Exception):
    pass


class AllocationError(Exception):
    pass


def page_of(addr: int) -> int:
    return addr >> PAGE_SHIFT


def pages_spanned(addr: int, length: int) -> range:
    if length <= 0:
        return range(0)
    return range(addr >> PAGE_SHIFT, ((addr + length - 1) >> PAGE_SHIFT) + 1)


def require_aligned(addr: int, what: str = "address") -> None:
    if addr & PAGE_MASK:
        raise ValueError(f"{what} {addr:#x} is not 4 KiB aligned")


class MmioHandler:
    """Interface for register windows mapped into the physical address space."""

    def mmio_read(self, offset: int, size: int) -> int:  # pragma: no cover - interface
        raise NotImplementedError

    def mmio_write(self, offset: int, size: int, value: int) -> None:  # pragma: no cover
        raise NotImplementedError


class HostMemory:
    """Sparse host-physical memory with MMIO windows.

    Pages are materialized on first write; reads of untouched pages return
    zeros. ``alloc`` hands out HPA ranges from a monotone cursor.
    """

    def __init__(self, size_limit: int = 1 << 44):
        self.size_limit = size_limit
        self.pages: dict[int, bytearray] = {}
        self._next = PAGE_SIZE  # keep HPA 0 unused so a null pointer faults
        self._mmio_starts: list[int] = []
        self._mmio: list[tuple[int, int, MmioHandler]] = []

    # allocation -----------------------------------------------------------
    def alloc(self, size: int) -> int:
        npages = (size + PAGE_MASK) >> PAGE_SHIFT
        base = self._next
        if base + npages * PAGE_SIZE > self.size_limit:
            raise AllocationError(f"host memory exhausted allocating {size} bytes")
        self._next = base + npages * PAGE_SIZE
        return base

    @property
    def allocated_bytes(self) -> int:
        return self._next - PAGE_SIZE

    @property
    def resident_pages(self) -> int:
        return len(self.pages)

    def release(self, base: int, size: int) -> None:
        """Drop resident pages of a range so they read back as zeros."""
        for p in pages_spanned(base, size):
            self.pages.pop(p, None)

    # mmio ------------------------------------------------------------------
    def add_mmio(self, base: int, size: int, handler: MmioHandler) -> None:
        i = bisect.bisect(self._mmio_starts, base)
        if i and self._mmio[i - 1][1] > base:
            raise MappingError(f"MMIO window at {base:#x} overlaps an existing window")
        if i < len(self._mmio) and self._mmio[i][0] < base + size:
            raise MappingError(f"MMIO window at {base:#x} overlaps an existing window")
        self._mmio_starts.insert(i, base)
        self._mmio.insert(i, (base, base + size, handler))

    def _mmio_at(self, addr: int):
        if not self._mmio_starts or addr < self._mmio_starts[0]:
            return None
        i = bisect.bisect(self._mmio_starts, addr) - 1
        start, end, handler = self._mmio[i]
        if addr < end:
            return start, handler
        return None

    # byte access -------------------------------------------------------------
    def read(self, addr: int, length: int) -> bytes:
        hit = self._mmio_at(addr)
        if hit is not None:
            start, handler = hit
            return handler.mmio_read(addr - start, length).to_bytes(length, "little")
        off = addr & PAGE_MASK
        if off + length <= PAGE_SIZE:
            page = self.pages.get(addr >> PAGE_SHIFT)
            if page is None:
                return _ZERO_PAGE[:length]
            return bytes(page[off:off + length])
        out = bytearray()
        while length:
            n = min(length, PAGE_SIZE - (addr & PAGE_MASK))
            out += self.read(addr, n)
            addr += n
            length -= n
        return bytes(out)

    def write(self, addr: int, data) -> None:
        hit = self._mmio_at(addr)
        if hit is not None:
            start, handler = hit
            handler.mmio_write(addr - start, len(data), int.from_bytes(data, "little"))
            return
        mv = memoryview(data)
        pos = 0
        length = len(mv)
        pages = self.pages
        while pos < length:
            pn = addr >> PAGE_SHIFT
            off = addr & PAGE_MASK
            n = min(length - pos, PAGE_SIZE - off)
            page = pages.get(pn)
            if page is None:
                page = pages[pn] = bytearray(PAGE_SIZE)
            page[off:off + n] = mv[pos:pos + n]
            pos += n
            addr += n

    def read32(self, addr: int) -> int:
        return int.from_bytes(self.read(addr, 4), "little")

    def write32(self, addr: int, value: int) -> None:
        self.write(addr, (value & 0xFFFFFFFF).to_bytes(4, "little"))

    def read64(self, addr: int) -> int:
        return int.from_bytes(self.read(addr, 8), "little")

    def write64(self, addr: int, value: int) -> None:
        self.write(addr, (value & (2**64 - 1)).to_bytes(8, "little"))

    def dump(self) -> str:
        lines = [f"hostmem resident_pages={len(self.pages)} next={self._next:#x}"]
        for start, end, handler in self._mmio:
            lines.append(f"  mmio {start:#x}-{end:#x} {type(handler).__name__}")
        return "\n".join(lines)


FaultHandler = Callable[[object, int], bool]


class SecondLevelTable:
    """Per-VM GPA->HPA page table (the EPT analogue).

    A miss calls ``fault_handler(vm, gpa_page)`` once; if the handler
    installed a mapping the access is retried, otherwise it fails.
    """

    def __init__(self, vm, fault_handler: FaultHandler | None = None):
        self.vm = vm
        self.entries: dict[int, int] = {}
        self.readonly: set[int] = set()
        self.fault_handler = fault_handler
        self.fault_counts: dict[int, int] = {}
        self.fault_total = 0

    def map(self, gpa_page: int, hpa_page: int, writable: bool = True) -> None:
        cur = self.entries.get(gpa_page)
        if cur is not None and cur != hpa_page:
            raise MappingError(
                f"vm {self.vm}: GPA page {gpa_page:#x} already maps HPA page {cur:#x}, "
                f"refusing alias to {hpa_page:#x}")
        self.entries[gpa_page] = hpa_page
        if writable:
            self.readonly.discard(gpa_page)
        else:
            self.readonly.add(gpa_page)

    def map_range(self, gpa: int, hpa: int, size: int, writable: bool = True) -> None:
        require_aligned(gpa, "gpa")
        require_aligned(hpa, "hpa")
        g, h = gpa >> PAGE_SHIFT, hpa >> PAGE_SHIFT
        for i in range((size + PAGE_MASK) >> PAGE_SHIFT):
            self.map(g + i, h + i, writable)

    def unmap(self, gpa_page: int) -> None:
        self.entries.pop(gpa_page, None)
        self.readonly.discard(gpa_page)

    def unmap_range(self, gpa: int, size: int) -> None:
        for p in pages_spanned(gpa, size):
            self.unmap(p)

    def translate(self, gpa: int, write: bool = False) -> int:
        pn = gpa >> PAGE_SHIFT
        hpa_page = self.entries.get(pn)
        if hpa_page is None:
            if self.fault_handler is None:
                raise GuestMemoryFault(self.vm, gpa)
            self.fault_counts[pn] = self.fault_counts.get(pn, 0) + 1
            self.fault_total += 1
            self.fault_handler(self.vm, pn)
            hpa_page = self.entries.get(pn)
            if hpa_page is None:
                raise GuestMemoryFault(self.vm, gpa)
        if write and pn in self.readonly:
            raise GuestMemoryFault(self.vm, gpa)
        return (hpa_page << PAGE_SHIFT) | (gpa & PAGE_MASK)

    def dump(self) -> str:
        lines = [f"sl_table vm={self.vm} entries={len(self.entries)} faults={self.fault_total}"]
        for g in sorted(self.entries):
            ro = " ro" if g in self.readonly else ""
            lines.append(f"  {g << PAGE_SHIFT:#014x} -> {self.entries[g] << PAGE_SHIFT:#014x}{ro}")
        return "\n".join(lines)


class DmaTable:
    """Per-device DMA-address->HPA page table (the IOMMU analogue).

    One table per device; every VM sharing the device shares it.
    """

    def __init__(self, device):
        self.device = device
        self.entries: dict[int, int] = {}

    def map(self, dma_page: int, hpa_page: int) -> None:
        cur = self.entries.get(dma_page)
        if cur is not None and cur != hpa_page:
            raise MappingError(
                f"device {self.device}: DMA page {dma_page:#x} already maps {cur:#x}")
        self.entries[dma_page] = hpa_page

    def map_range(self, dma: int, hpa: int, size: int) -> None:
        require_aligned(dma, "dma address")
        require_aligned(hpa, "hpa")
        d, h = dma >> PAGE_SHIFT, hpa >> PAGE_SHIFT
        entries = self.entries
        for i in range((size + PAGE_MASK) >> PAGE_SHIFT):
            cur = entries.get(d + i)
            if cur is not None and cur != h + i:
                raise MappingError(f"device {self.device}: DMA page {d + i:#x} already mapped")
            entries[d + i] = h + i

    def unmap_range(self, dma: int, size: int) -> None:
        for p in pages_spanned(dma, size):
            self.entries.pop(p, None)

    def translate(self, dma_addr: int) -> int:
        hpa_page = self.entries.get(dma_addr >> PAGE_SHIFT)
        if hpa_page is None:
            raise DmaFault(self.device, dma_addr)
        return (hpa_page << PAGE_SHIFT) | (dma_addr & PAGE_MASK)

    def __len__(self) -> int:
        return len(self.entries)

    def dump(self) -> str:
        lines = [f"dma_table device={self.device} entries={len(self.entries)}"]
        for d in sorted(self.entries):
            lines.append(f"  {d << PAGE_SHIFT:#014x} -> {self.entries[d] << PAGE_SHIFT:#014x}")
        return "\n".join(lines)


class GpaRangeAllocator:
    """Hands out pairwise-disjoint guest-physical ranges, one per VM.

    Ranges are never reused after release, so a stale DMA address can not
    alias a later VM's memory.
    """

    def __init__(self, limit: int = GUEST_GPA_LIMIT, base: int = 0):
        self.base = base
        self.limit = limit
        self.next_free = base
        self.grants: dict[object, tuple[int, int]] = {}
        self._starts: list[int] = []
        self._owners: list[object] = []

    def alloc(self, vm, size: int) -> tuple[int, int]:
        require_aligned(size, "size")
        if vm in self.grants:
            raise AllocationError(f"vm {vm} already holds a GPA grant")
        if self.next_free + size > self.limit:
            raise AllocationError(
                f"GPA space exhausted: {size} bytes requested, "
                f"{self.limit - self.next_free} left")
        grant = (self.next_free, size)
        self.grants[vm] = grant
        if size:
            self._starts.append(self.next_free)
            self._owners.append(vm)
        self.next_free += size
        return grant

    def release(self, vm) -> None:
        grant = self.grants.pop(vm, None)
        if grant is None or not grant[1]:
            return
        i = bisect.bisect_left(self._starts, grant[0])
        del self._starts[i]
        del self._owners[i]

    def owner_of(self, addr: int):
        i = bisect.bisect(self._starts, addr) - 1
        if i < 0:
            return None
        vm = self._owners[i]
        base, size = self.grants[vm]
        return vm if base <= addr < base + size else None

    def contains(self, vm, addr: int, length: int = 1) -> bool:
        grant = self.grants.get(vm)
        if grant is None:
            return False
        base, size = grant
        return base <= addr and addr + length <= base + size

    def dump(self) -> str:
        lines = [f"gpa_allocator next_free={self.next_free:#x}"]
        for vm, (b, s) in sorted(self.grants.items(), key=lambda kv: kv[1]):
            lines.append(f"  vm {vm}: [{b:#x}, {b + s:#x})")
        return "\n".join(lines)


@dataclass(frozen=True, slots=True)
class RemapEntry:
    vm: object
    vvector: int
    posted: bool


@dataclass(frozen=True, slots=True)
class DeliveryRecord:
    ts: float
    vm: object
    vvector: int
    mode: str  # "posted" | "injected"


class InterruptRemapTable:
    """Physical vector -> (VM, virtual vector) translation.

    Posted entries reach the guest without a hypervisor exit; injected
    entries cost one exit-class event. ``deliver`` is called with the
    DeliveryRecord so the platform can run the guest's handler.
    """

    def __init__(self, ledger=None, deliver: Callable | None = None):
        self.entries: dict[int, RemapEntry] = {}
        self.delivery_log: list[DeliveryRecord] = []
        self.ledger = ledger
        self.deliver = deliver

    def irq_map(self, physical_vector: int, vm, virtual_vector: int, posted: bool) -> None:
        cur = self.entries.get(physical_vector)
        if cur is not None and cur.vm != vm:
            raise MappingError(
                f"vector {physical_vector} already routed to vm {cur.vm}")
        self.entries[physical_vector] = RemapEntry(vm, virtual_vector, posted)

    def irq_unmap(self, physical_vector: int) -> None:
        self.entries.pop(physical_vector, None)

    def irq_raise(self, physical_vector: int, reqs: tuple = ()) -> DeliveryRecord | None:
        entry = self.entries.get(physical_vector)
        ledger = self.ledger
        if entry is None:
            if ledger is not None:
                ledger.record(None, "spurious", origin=f"irq:{physical_vector}")
            return None
        ts = ledger.clock() if ledger is not None else 0.0
        mode = "posted" if entry.posted else "injected"
        rec = DeliveryRecord(ts, entry.vm, entry.vvector, mode)
        self.delivery_log.append(rec)
        if ledger is not None:
            ledger.record(entry.vm, "intr_posted" if entry.posted else "intr_injected",
                          origin="irq", reqs=reqs)
        if self.deliver is not None:
            self.deliver(rec)
        return rec

    def dump(self) -> str:
        lines = [f"irq_remap entries={len(self.entries)}"]
        for pv in sorted(self.entries):
            e = self.entries[pv]
            lines.append(f"  pv {pv} -> vm {e.vm} vvec {e.vvector} {'posted' if e.posted else 'injected'}")
        return "\n".join(lines)


@dataclass
class Iommu:
    """DMA tables (one per device) and the interrupt remap table."""

    remap: InterruptRemapTable = field(default_factory=InterruptRemapTable)
    tables: dict = field(default_factory=dict)

    def table(self, device) -> DmaTable:
        t = self.tables.get(device)
        if t is None:
            t = self.tables[device] = DmaTable(device)
        return t

    def dma_translate(self, device, dma_addr: int) -> int:
        t = self.tables.get(device)
        if t is None:
            raise DmaFault(device, dma_addr)
        return t.translate(dma_addr)


def dma_hpa_owners(table: DmaTable, gpa: GpaRangeAllocator) -> dict[int, set]:
    """Brute force: HPA page -> set of grant owners whose DMA pages reach it."""
    owners: dict[int, set] = {}
    for dma_page, hpa_page in table.entries.items():
        owner = gpa.owner_of(dma_page << PAGE_SHIFT)
        if owner is None and dma_page << PAGE_SHIFT >= HOST_IOVA_BASE:
            owner = "host"
        owners.setdefault(hpa_page, set()).add(owner)
    return owners
