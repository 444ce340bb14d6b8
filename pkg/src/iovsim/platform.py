"""A host with one or more simulated SSDs, shared memory, IOMMU and event loop."""
from __future__ import annotations

from dataclasses import dataclass, field

from .mem import (
    HOST_IOVA_BASE, HOST_IOVA_SIZE, MMIO_APERTURE_BASE, PAGE_SIZE, AllocationError,
    GpaRangeAllocator, HostMemory, InterruptRemapTable, Iommu, SecondLevelTable,
)
from .nvme.cmb import CmbRegion
from .nvme.constants import MAX_IO_QPAIRS
from .nvme.controller import NvmeController
from .nvme.hostdrv import HostDriver
from .nvme.namespace import Namespace
from .sim import EventLoop
from .telemetry import CostModel, EventLedger
from .vm import GuestMemory, Vm

# Host-physical placement of device windows, above any RAM allocation.
BAR0_HPA_BASE = 1 << 45
BAR0_HPA_STRIDE = 1 << 32
CMB_HPA_BASE = 3 << 46  # clear of every DMA address (guest GPAs and host IOVAs)
CMB_HPA_STRIDE = 1 << 40

VECTORS_PER_DEVICE = 1 << 16
MMIO_APERTURE_LIMIT = 1 << 48

GiB = 1 << 30
TiB = 1 << 40


@dataclass
class SsdConfig:
    block_size: int = 4096
    capacity_bytes: int = 2 * TiB
    cmb_bytes: int = 1 * GiB
    max_qpairs: int = MAX_IO_QPAIRS
    backing_path: str | None = None


@dataclass
class Ssd:
    index: int
    ctrl: NvmeController
    namespace: Namespace
    cmb: CmbRegion
    driver: HostDriver
    next_vector: int = 1
    free_vectors: list = field(default_factory=list)

    def alloc_vector(self) -> int:
        if self.free_vectors:
            return self.free_vectors.pop()
        v = self.next_vector
        if v >= VECTORS_PER_DEVICE:
            raise RuntimeError(f"ssd {self.index}: interrupt vectors exhausted")
        self.next_vector += 1
        return v

    def free_vector(self, v: int) -> None:
        self.free_vectors.append(v)


class Platform:
    """Everything a backend needs: memory, IOMMU, SSDs, event loop, ledger.

    With ``timed=False`` there is no event loop; controllers service
    doorbells synchronously and interrupts are delivered inline.
    """

    def __init__(self, n_ssds: int = 1, cost: CostModel | None = None,
                 ssd: SsdConfig | None = None, timed: bool = True,
                 host_memory_limit: int = 1 << 44, record_fetches: bool = True):
        self.cost = cost or CostModel()
        self.ssd_config = ssd or SsdConfig()
        self.sim = EventLoop() if timed else None
        clock = (lambda: self.sim.now) if timed else (lambda: 0.0)
        self.ledger = EventLedger(clock)
        self.memory = HostMemory(host_memory_limit)
        self.iommu = Iommu(remap=InterruptRemapTable(self.ledger, self._on_delivery))
        self.gpa = GpaRangeAllocator()
        self._host_vectors: dict[int, object] = {}
        self._vm_irq_handlers: dict[tuple, object] = {}
        self.ssds: list[Ssd] = []
        self.vms: dict[object, Vm] = {}
        self._aperture_next = MMIO_APERTURE_BASE
        cfg = self.ssd_config
        for i in range(n_ssds):
            path = None
            if cfg.backing_path is not None:
                path = f"{cfg.backing_path}.{i}"
            ns = Namespace(1, cfg.block_size, cfg.capacity_bytes // cfg.block_size, path=path)
            cmb = CmbRegion(CMB_HPA_BASE + i * CMB_HPA_STRIDE, cfg.cmb_bytes, self.memory)
            ctrl = NvmeController(
                i, self.memory, self.iommu, ns,
                bar0_base=BAR0_HPA_BASE + i * BAR0_HPA_STRIDE, cmb=cmb,
                max_qpairs=cfg.max_qpairs, sim=self.sim, ledger=self.ledger,
                service_time_fn=self._service_time,
                parallelism=self.cost.device_parallelism,
                irq_hook=self._irq, record_fetches=record_fetches)
            drv = HostDriver(ctrl, self.memory, self.iommu,
                             HOST_IOVA_BASE + i * (HOST_IOVA_SIZE // 64), HOST_IOVA_SIZE // 64)
            self.ssds.append(Ssd(i, ctrl, ns, cmb, drv))

    @property
    def now(self) -> float:
        return self.sim.now if self.sim is not None else 0.0

    def _service_time(self, opcode: int, nbytes: int) -> float:
        return self.cost.service_ns(nbytes)

    # -------------------------------------------------------------- VMs
    def create_vm(self, vm, ram_bytes: int, ssd_index: int, fault_handler=None) -> Vm:
        """Grant GPA space, back it with RAM, map it in the EPT and the device DMA table."""
        if vm in self.vms:
            raise AllocationError(f"vm {vm} already exists")
        if not 0 <= ssd_index < len(self.ssds):
            raise ValueError(f"no SSD {ssd_index}")
        size = -(-ram_bytes // PAGE_SIZE) * PAGE_SIZE
        base, size = self.gpa.alloc(vm, size)
        hpa = self.memory.alloc(size) if size else 0
        ept = SecondLevelTable(vm, fault_handler)
        ctx = Vm(vm, ssd_index, base, size, hpa, ept)
        if size:
            ept.map_range(base, hpa, size)
            self.iommu.table(ssd_index).map_range(base, hpa, size)
        self.vms[vm] = ctx
        return ctx

    def destroy_vm(self, vm) -> None:
        ctx = self.vms.pop(vm)
        if ctx.gpa_size:
            self.iommu.table(ctx.ssd).unmap_range(ctx.gpa_base, ctx.gpa_size)
            self.memory.release(ctx.ram_hpa, ctx.gpa_size)
        ctx.ept.entries.clear()
        ctx.traps.clear()
        for key in [k for k in self._vm_irq_handlers if k[0] == vm]:
            del self._vm_irq_handlers[key]
        self.gpa.release(vm)

    def guest_memory(self, vm) -> GuestMemory:
        return GuestMemory(self.vms[vm], self.memory)

    def alloc_aperture(self, ctx: Vm, size: int) -> int:
        """Reserve guest-physical space for a virtual device BAR (never reused)."""
        size = -(-size // PAGE_SIZE) * PAGE_SIZE
        base = self._aperture_next
        if base + size > MMIO_APERTURE_LIMIT:
            raise AllocationError("guest MMIO aperture exhausted")
        self._aperture_next += size
        ctx.apertures.append((base, size))
        return base

    # -------------------------------------------------------------- interrupts
    @staticmethod
    def global_vector(ssd_index: int, vector: int) -> int:
        return ssd_index * VECTORS_PER_DEVICE + vector

    def register_host_vector(self, ssd_index: int, vector: int, handler) -> None:
        self._host_vectors[self.global_vector(ssd_index, vector)] = handler

    def unregister_host_vector(self, ssd_index: int, vector: int) -> None:
        self._host_vectors.pop(self.global_vector(ssd_index, vector), None)

    def register_vm_irq(self, vm, vvector: int, handler) -> None:
        self._vm_irq_handlers[(vm, vvector)] = handler

    def unregister_vm_irq(self, vm, vvector: int) -> None:
        self._vm_irq_handlers.pop((vm, vvector), None)

    def _irq(self, ctrl: NvmeController, vector: int, reqs: tuple) -> None:
        gv = self.global_vector(ctrl.device_id, vector)
        host = self._host_vectors.get(gv)
        if host is not None:
            host(ctrl, vector)
            return
        self.iommu.remap.irq_raise(gv, reqs)

    def _on_delivery(self, rec) -> None:
        handler = self._vm_irq_handlers.get((rec.vm, rec.vvector))
        if handler is None:
            self.ledger.record(rec.vm, "spurious", origin=f"vvec:{rec.vvector}")
            return
        delay = self.cost.posted_ns if rec.mode == "posted" else self.cost.injection_ns
        self.defer(delay, handler)

    def inject(self, vm, handler, reqs: tuple = (), origin: str = "inject") -> None:
        """Software interrupt injection by a host backend (one exit-class event)."""
        self.ledger.record(vm, "intr_injected", origin=origin, reqs=reqs)
        self.defer(self.cost.injection_ns, handler)

    def defer(self, delay: float, fn, *args) -> None:
        if self.sim is None:
            fn(*args)
        else:
            self.sim.after(delay, fn, *args)

    def run(self, until: float | None = None, stop=None) -> float:
        if self.sim is None:
            return 0.0
        return self.sim.run(until=until, stop=stop)

    def dump(self) -> str:
        parts = [self.memory.dump(), self.gpa.dump(), self.iommu.remap.dump()]
        for dev in sorted(self.iommu.tables):
            parts.append(self.iommu.tables[dev].dump())
        for s in self.ssds:
            parts.append(s.ctrl.dump())
        return "\n".join(parts) + "\n"
