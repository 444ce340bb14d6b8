"""Guest VM context: GPA grant, RAM, second-level table and trapped MMIO ranges."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

from .mem import PAGE_MASK, PAGE_SIZE, AllocationError, SecondLevelTable

# handler(offset, size, is_write, value) -> value read (ignored for writes)
TrapHandler = Callable[[int, int, bool, int], int]


@dataclass
class Trap:
    start: int
    end: int
    handler: TrapHandler


@dataclass
class Vm:
    """Everything the hypervisor knows about one guest."""

    vm: object
    ssd: int
    gpa_base: int
    gpa_size: int
    ram_hpa: int
    ept: SecondLevelTable
    traps: list[Trap] = field(default_factory=list)
    apertures: list[tuple[int, int]] = field(default_factory=list)
    ram_next: int = 0
    current_req: object = None  # request on whose behalf the vCPU is running

    def ram_alloc(self, size: int, align: int = PAGE_SIZE) -> int:
        """Bump-allocate guest RAM; returns a GPA."""
        off = -(-self.ram_next // align) * align
        if off + size > self.gpa_size:
            raise AllocationError(
                f"vm {self.vm}: guest RAM exhausted ({size} bytes requested, "
                f"{self.gpa_size - off} left)")
        self.ram_next = off + size
        return self.gpa_base + off

    def in_ram(self, gpa: int, length: int = 1) -> bool:
        return self.gpa_base <= gpa and gpa + length <= self.gpa_base + self.gpa_size

    def add_trap(self, start: int, size: int, handler: TrapHandler) -> None:
        self.traps.append(Trap(start, start + size, handler))

    def trap_at(self, gpa: int) -> Trap | None:
        for t in self.traps:
            if t.start <= gpa < t.end:
                return t
        return None


class GuestMemory:
    """CPU-side view of guest memory: trapped MMIO, then EPT translation.

    Every access goes through the VM's second-level table, so first touches
    of lazily mapped pages run the registered fault handler.
    """

    def __init__(self, vm: Vm, host):
        self.vm = vm
        self.host = host

    def _trap(self, gpa: int):
        return self.vm.trap_at(gpa) if self.vm.traps else None

    def touch(self, gpa: int, write: bool = False) -> int:
        """Translate one address; returns the number of faults it took."""
        ept = self.vm.ept
        before = ept.fault_total
        ept.translate(gpa, write)
        return ept.fault_total - before

    def read(self, gpa: int, length: int) -> bytes:
        t = self._trap(gpa)
        if t is not None:
            return t.handler(gpa - t.start, length, False, 0).to_bytes(length, "little")
        out = bytearray()
        ept = self.vm.ept
        while length:
            n = min(length, PAGE_SIZE - (gpa & PAGE_MASK))
            out += self.host.read(ept.translate(gpa), n)
            gpa += n
            length -= n
        return bytes(out)

    def write(self, gpa: int, data) -> None:
        t = self._trap(gpa)
        if t is not None:
            t.handler(gpa - t.start, len(data), True, int.from_bytes(data, "little"))
            return
        mv = memoryview(bytes(data))
        ept = self.vm.ept
        pos = 0
        while pos < len(mv):
            n = min(len(mv) - pos, PAGE_SIZE - (gpa & PAGE_MASK))
            self.host.write(ept.translate(gpa, write=True), mv[pos:pos + n])
            gpa += n
            pos += n

    def read32(self, gpa: int) -> int:
        return struct.unpack("<I", self.read(gpa, 4))[0]

    def read64(self, gpa: int) -> int:
        return struct.unpack("<Q", self.read(gpa, 8))[0]

    def write32(self, gpa: int, value: int) -> None:
        self.write(gpa, struct.pack("<I", value & 0xFFFFFFFF))

    def write64(self, gpa: int, value: int) -> None:
        self.write(gpa, struct.pack("<Q", value & 0xFFFFFFFFFFFFFFFF))
