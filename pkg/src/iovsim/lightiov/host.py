"""Host side of I/O queue passthrough.

The host splits each physical controller into control resources, which it
keeps and emulates per VM, and data resources (I/O queue pairs, doorbell
pages, interrupt vectors, an LBA range), which it hands to guests. Guest
rings live in the controller memory buffer; the guest reaches them and its
doorbell pages through second-level mappings installed lazily by a fault
handler, one fault per page.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

from ..alloc import LbaAllocator, QidAllocator
from ..mem import PAGE_SHIFT, PAGE_SIZE, AllocationError
from ..nvme.commands import NvmeCommand, NvmeCompletion
from ..nvme.constants import (
    ADMIN_CREATE_IO_CQ, ADMIN_CREATE_IO_SQ, ADMIN_DELETE_IO_CQ, ADMIN_DELETE_IO_SQ,
    ADMIN_IDENTIFY, ADMIN_SET_FEATURES, CC_EN, CNS_CONTROLLER, CNS_NAMESPACE, CQE_SIZE,
    CSTS_CFS, CSTS_RDY, DB_BASE, DB_STRIDE, DSTRD, FEAT_NUM_QUEUES, NVME_VERSION,
    REG_ACQ, REG_AQA, REG_ASQ, REG_CAP, REG_CC, REG_CMBLOC, REG_CMBSZ, REG_CSTS,
    REG_VS, REG_VS_LBA_SIZE, REG_VS_LBA_START, SC_CQ_INVALID, SC_DATA_XFER_ERROR,
    SC_INVALID_FIELD, SC_INVALID_NAMESPACE, SC_INVALID_OPCODE, SC_INVALID_QID,
    SC_INVALID_QSIZE, SC_INVALID_QUEUE_DELETION, SC_SUCCESS, SQE_SIZE,
)
from ..nvme.hostdrv import AdminError
from ..nvme.identify import identify_controller, identify_namespace
from ..platform import Platform
from ..vm import Vm

log = logging.getLogger(__name__)

PCI_VENDOR_ID = 0x1D1D
PCI_DEVICE_ID = 0x5A1A
PCI_CLASS_NVME = 0x010802
CFG_SIZE = 4096

BAR0_REG_PAGE = 0
BAR0_TRAPPED = 2 * PAGE_SIZE  # register page + admin doorbell page
META_SIZE = 16

REGION_CONFIG = "pcie_config"
REGION_BAR0 = "bar0"


class ProvisionError(Exception):
    pass


class GuestInitError(Exception):
    def __init__(self, what: str, status: int = 0):
        super().__init__(f"{what} (status {status:#x})" if status else what)
        self.status = status


def _pages(nbytes: int) -> int:
    return -(-nbytes // PAGE_SIZE)


@dataclass
class VmResources:
    vm: object
    ssd: int
    depth: int
    qids: list[int]
    sq_hpa: list[int]
    cq_hpa: list[int]
    db_hpa: list[int]
    vectors: list[int]
    lba_start: int
    lba_size: int
    cmb_offset: int  # window start inside the device CMB
    cmb_size: int
    # window-relative offsets
    meta_offset: int = 0
    sq_offsets: list[int] = field(default_factory=list)
    cq_offsets: list[int] = field(default_factory=list)
    # guest-physical placement of the virtual BARs
    bar0_gpa: int = 0
    bar0_size: int = 0
    cmb_gpa: int = 0

    @property
    def n_queues(self) -> int:
        return len(self.qids)

    def sq_bytes(self) -> int:
        return _pages(self.depth * SQE_SIZE) * PAGE_SIZE

    def cq_bytes(self) -> int:
        return _pages(self.depth * CQE_SIZE) * PAGE_SIZE

    def ring_pages(self) -> int:
        return self.n_queues * (self.sq_bytes() + self.cq_bytes()) // PAGE_SIZE

    def doorbell_pages(self) -> int:
        return self.n_queues

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vm"] = self.vm if isinstance(self.vm, (int, str)) else str(self.vm)
        return d


class VirtualController:
    """Trap-and-emulate control plane of one VM's virtual NVMe device."""

    def __init__(self, host: LightIovHost, ctx: Vm, res: VmResources):
        self.host = host
        self.ctx = ctx
        self.res = res
        self.vm = ctx.vm
        self.config = bytearray(CFG_SIZE)
        self.cc = 0
        self.csts = 0
        self.aqa = 0
        self.asq = 0
        self.acq = 0
        self.asq_head = 0
        self.asq_tail = 0
        self.acq_tail = 0
        self.acq_head = 0
        self.acq_phase = 1
        self.created_cq: set[int] = set()
        self.created_sq: set[int] = set()
        self.admin_commands = 0
        self._bar_probe: set[int] = set()
        self._build_config()

    # -------------------------------------------------------------- config space
    def _build_config(self) -> None:
        c = self.config
        struct.pack_into("<HHHH", c, 0, PCI_VENDOR_ID, PCI_DEVICE_ID, 0x0006, 0x0010)
        c[8] = 1  # revision
        c[9:12] = PCI_CLASS_NVME.to_bytes(3, "little")
        c[0x0E] = 0
        struct.pack_into("<Q", c, 0x10, self.res.bar0_gpa | 0x4)  # 64-bit memory BAR
        struct.pack_into("<Q", c, 0x18, self.res.cmb_gpa | 0x4)
        struct.pack_into("<HH", c, 0x2C, PCI_VENDOR_ID, PCI_DEVICE_ID)

    def _bar_size(self, reg: int) -> int:
        return self.res.bar0_size if reg in (0x10, 0x14) else self.res.cmb_size

    def config_access(self, offset: int, size: int, is_write: bool, value: int) -> int:
        if offset < 0 or offset + size > CFG_SIZE:
            return (1 << (8 * size)) - 1
        reg = offset & ~3
        if is_write:
            if reg in (0x10, 0x18) and value & 0xFFFFFFFF == 0xFFFFFFFF:
                self._bar_probe.add(reg)
            elif reg in (0x14, 0x1C) and value & 0xFFFFFFFF == 0xFFFFFFFF:
                self._bar_probe.add(reg)
            elif offset == 0x04 and size >= 2:
                struct.pack_into("<H", self.config, 4, value & 0x0007)
            else:
                self._bar_probe.discard(reg)
            return 0
        if reg in self._bar_probe:
            self._bar_probe.discard(reg)
            mask = ~(self._bar_size(reg) - 1) & ((1 << 64) - 1)
            word = mask & 0xFFFFFFF0 | 0x4 if reg in (0x10, 0x18) else mask >> 32
            return (word >> (8 * (offset - reg))) & ((1 << (8 * size)) - 1)
        return int.from_bytes(self.config[offset:offset + size], "little")

    # -------------------------------------------------------------- BAR0
    def cap(self) -> int:
        mqes = self.res.depth - 1
        return mqes | (1 << 16) | (0x20 << 24) | (DSTRD << 32) | (1 << 37)

    def bar0_access(self, offset: int, size: int, is_write: bool, value: int) -> int:
        if offset < 0 or offset + size > self.res.bar0_size:
            return (1 << (8 * size)) - 1
        if offset >= DB_BASE:
            if is_write and offset < BAR0_TRAPPED:
                rel = offset - DB_BASE
                if rel == 0:
                    self._admin_sq_doorbell(value & 0xFFFF)
                elif rel == DB_STRIDE:
                    self.acq_head = value & 0xFFFF
            return 0
        if is_write:
            if offset == REG_CC:
                self._write_cc(value)
            elif offset == REG_AQA:
                self.aqa = value & 0x0FFF0FFF
            elif offset == REG_ASQ:
                self.asq = value & ~0xFFF
            elif offset == REG_ACQ:
                self.acq = value & ~0xFFF
            return 0
        meta = self.host.read_meta(self.res)
        regs = {REG_CAP: self.cap(), REG_VS: NVME_VERSION, REG_CC: self.cc,
                REG_CSTS: self.csts, REG_AQA: self.aqa, REG_ASQ: self.asq, REG_ACQ: self.acq,
                REG_CMBLOC: 2, REG_CMBSZ: (self.res.cmb_size >> 12) << 12 | 0x1F,
                REG_VS_LBA_START: meta[0], REG_VS_LBA_SIZE: meta[1]}
        if offset in regs:
            return regs[offset] & ((1 << (8 * size)) - 1)
        for base in (REG_CAP, REG_ASQ, REG_ACQ, REG_VS_LBA_START, REG_VS_LBA_SIZE):
            if offset == base + 4 and size == 4:
                return regs[base] >> 32
        return 0

    def _write_cc(self, value: int) -> None:
        was = self.cc & CC_EN
        self.cc = value
        if value & CC_EN and not was:
            if not (self.ctx.in_ram(self.asq, self._asq_depth * SQE_SIZE)
                    and self.ctx.in_ram(self.acq, self._acq_depth * CQE_SIZE)):
                self.csts |= CSTS_CFS
                return
            self.asq_head = self.asq_tail = self.acq_tail = self.acq_head = 0
            self.acq_phase = 1
            self.csts = CSTS_RDY
        elif not value & CC_EN and was:
            self.csts = 0
            self.created_sq.clear()
            self.created_cq.clear()

    @property
    def _asq_depth(self) -> int:
        return (self.aqa & 0xFFF) + 1

    @property
    def _acq_depth(self) -> int:
        return ((self.aqa >> 16) & 0xFFF) + 1

    def _guest_read(self, gpa: int, n: int) -> bytes:
        if not self.ctx.in_ram(gpa, n):
            raise AllocationError(f"gpa {gpa:#x} outside guest RAM")
        return self.host.platform.memory.read(self.ctx.ept.translate(gpa), n)

    def _guest_write(self, gpa: int, data: bytes) -> None:
        if not self.ctx.in_ram(gpa, len(data)):
            raise AllocationError(f"gpa {gpa:#x} outside guest RAM")
        mem = self.host.platform.memory
        pos = 0
        while pos < len(data):
            n = min(len(data) - pos, PAGE_SIZE - (gpa + pos) % PAGE_SIZE)
            mem.write(self.ctx.ept.translate(gpa + pos), data[pos:pos + n])
            pos += n

    def _admin_sq_doorbell(self, tail: int) -> None:
        if not self.csts & CSTS_RDY or tail >= self._asq_depth:
            self.csts |= CSTS_CFS
            return
        self.asq_tail = tail
        try:
            while self.asq_head != self.asq_tail:
                if (self.acq_tail + 1) % self._acq_depth == self.acq_head:
                    break
                raw = self._guest_read(self.asq + self.asq_head * SQE_SIZE, SQE_SIZE)
                self.asq_head = (self.asq_head + 1) % self._asq_depth
                cmd = NvmeCommand.decode(raw)
                cpl = self.virtual_admin(cmd)
                cpl.sq_head = self.asq_head
                cpl.phase = self.acq_phase
                self._guest_write(self.acq + self.acq_tail * CQE_SIZE, cpl.encode())
                self.acq_tail += 1
                if self.acq_tail == self._acq_depth:
                    self.acq_tail = 0
                    self.acq_phase ^= 1
        except AllocationError:
            self.csts |= CSTS_CFS

    # -------------------------------------------------------------- admin emulation
    def virtual_admin(self, cmd: NvmeCommand) -> NvmeCompletion:
        self.admin_commands += 1
        op = cmd.opcode
        handler = {
            ADMIN_IDENTIFY: self._identify,
            ADMIN_SET_FEATURES: self._set_features,
            ADMIN_CREATE_IO_CQ: self._create_cq,
            ADMIN_CREATE_IO_SQ: self._create_sq,
            ADMIN_DELETE_IO_SQ: self._delete_sq,
            ADMIN_DELETE_IO_CQ: self._delete_cq,
        }.get(op)
        status, result = (SC_INVALID_OPCODE, 0) if handler is None else handler(cmd)
        return NvmeCompletion(result, self.asq_head, 0, cmd.cid, status)

    def _identify(self, cmd: NvmeCommand) -> tuple[int, int]:
        cns = cmd.cdw10 & 0xFF
        ns = self.host.platform.ssds[self.res.ssd].namespace
        if cns == CNS_CONTROLLER:
            data = identify_controller(serial=f"LIOV{self.vm}", model="iovsim virtual nvme",
                                       max_qpairs=self.res.n_queues)
        elif cns == CNS_NAMESPACE:
            if cmd.nsid != ns.nsid:
                return SC_INVALID_NAMESPACE, 0
            data = identify_namespace(nsze=self.res.lba_size, block_size=ns.block_size)
        else:
            return SC_INVALID_FIELD, 0
        try:
            self._guest_write(cmd.prp1, data)
        except AllocationError:
            return SC_DATA_XFER_ERROR, 0
        return SC_SUCCESS, 0

    def _set_features(self, cmd: NvmeCommand) -> tuple[int, int]:
        if cmd.cdw10 & 0xFF != FEAT_NUM_QUEUES:
            return SC_INVALID_FIELD, 0
        n = max(self.res.n_queues - 1, 0)
        return SC_SUCCESS, (n << 16) | n

    def _qid_ok(self, qid: int) -> bool:
        return 1 <= qid <= self.res.n_queues

    def _create_cq(self, cmd: NvmeCommand) -> tuple[int, int]:
        qid = cmd.cdw10 & 0xFFFF
        size = (cmd.cdw10 >> 16) + 1
        if not self._qid_ok(qid) or qid in self.created_cq:
            return SC_INVALID_QID, 0
        if size != self.res.depth:
            return SC_INVALID_QSIZE, 0
        i = qid - 1
        if cmd.cdw11 & 0x2:
            gv = self.host.platform.global_vector(self.res.ssd, self.res.vectors[i])
            self.host.platform.iommu.remap.irq_map(gv, self.vm, cmd.cdw11 >> 16, posted=True)
        self.created_cq.add(qid)
        return SC_SUCCESS, self.res.cq_offsets[i]

    def _create_sq(self, cmd: NvmeCommand) -> tuple[int, int]:
        qid = cmd.cdw10 & 0xFFFF
        size = (cmd.cdw10 >> 16) + 1
        cqid = cmd.cdw11 >> 16
        if not self._qid_ok(qid) or qid in self.created_sq:
            return SC_INVALID_QID, 0
        if cqid != qid or cqid not in self.created_cq:
            return SC_CQ_INVALID, 0
        if size != self.res.depth:
            return SC_INVALID_QSIZE, 0
        self.created_sq.add(qid)
        return SC_SUCCESS, self.res.sq_offsets[qid - 1]

    def _delete_sq(self, cmd: NvmeCommand) -> tuple[int, int]:
        qid = cmd.cdw10 & 0xFFFF
        if qid not in self.created_sq:
            return SC_INVALID_QID, 0
        self.created_sq.discard(qid)
        return SC_SUCCESS, 0

    def _delete_cq(self, cmd: NvmeCommand) -> tuple[int, int]:
        qid = cmd.cdw10 & 0xFFFF
        if qid not in self.created_cq:
            return SC_INVALID_QID, 0
        if qid in self.created_sq:
            return SC_INVALID_QUEUE_DELETION, 0
        self.created_cq.discard(qid)
        return SC_SUCCESS, 0


class LightIovHost:
    """Provisions VMs with passthrough queues on the platform's SSDs."""

    def __init__(self, platform: Platform, queue_depth: int = 1024):
        if queue_depth < 2:
            raise ValueError("queue depth must be at least 2")
        self.platform = platform
        self.queue_depth = queue_depth
        self.resources: dict[object, VmResources] = {}
        self.controllers: dict[object, VirtualController] = {}
        self._qids = [QidAllocator(s.ctrl.max_qpairs) for s in platform.ssds]
        self._lbas = [LbaAllocator(s.namespace.total_blocks) for s in platform.ssds]
        self._teardown_pending: set = set()

    # -------------------------------------------------------------- provisioning
    def free_qpairs(self, ssd: int) -> int:
        return self._qids[ssd].available()

    def free_blocks(self, ssd: int) -> int:
        return self._lbas[ssd].free_blocks()

    def provision_vm(self, vm, n_queues: int, capacity_blocks: int, ssd: int = 0,
                     ram_bytes: int = 1 << 20, depth: int | None = None) -> VmResources:
        plat = self.platform
        depth = depth or self.queue_depth
        if vm in self.resources or vm in plat.vms:
            raise ProvisionError(f"vm {vm} is already provisioned")
        if n_queues < 0:
            raise ProvisionError("n_queues must be >= 0")
        if not 0 <= ssd < len(plat.ssds):
            raise ProvisionError(f"no SSD {ssd}")
        free = self._qids[ssd].available()
        if free < n_queues:
            raise ProvisionError(
                f"queue exhaustion on ssd {ssd}: {n_queues} pairs requested, {free} free "
                f"(short by {n_queues - free})")
        s = plat.ssds[ssd]
        try:
            lba_start, lba_size = self._lbas[ssd].alloc(vm, capacity_blocks)
        except AllocationError as exc:
            raise ProvisionError(f"LBA exhaustion on ssd {ssd}: {exc}") from None

        res = VmResources(vm, ssd, depth, [], [], [], [], [], lba_start, lba_size, 0, 0)
        sqb, cqb = res.sq_bytes(), res.cq_bytes()
        window = PAGE_SIZE + n_queues * (sqb + cqb)
        ctx = None
        try:
            res.cmb_offset = s.cmb.alloc(window, f"vm{vm}")
            res.cmb_size = window
            off = PAGE_SIZE
            for _ in range(n_queues):
                res.sq_offsets.append(off)
                res.cq_offsets.append(off + sqb)
                off += sqb + cqb
            s.cmb.write(res.cmb_offset, struct.pack("<QQ", lba_start, lba_size))
            ctx = plat.create_vm(vm, ram_bytes, ssd, fault_handler=self.handle_queue_fault)
            for i in range(n_queues):
                qid = self._qids[ssd].alloc()
                res.qids.append(qid)
                vec = s.alloc_vector()
                res.vectors.append(vec)
                sq_hpa = s.cmb.base + res.cmb_offset + res.sq_offsets[i]
                cq_hpa = s.cmb.base + res.cmb_offset + res.cq_offsets[i]
                s.driver.create_pair(qid, depth, sq_hpa, cq_hpa, vec)
                s.ctrl.set_owner(qid, vm)
                res.sq_hpa.append(sq_hpa)
                res.cq_hpa.append(cq_hpa)
                res.db_hpa.append(s.ctrl.doorbell_page_addr(qid))
                plat.iommu.remap.irq_map(plat.global_vector(ssd, vec), vm, i + 1, posted=True)
            res.bar0_size = BAR0_TRAPPED + n_queues * PAGE_SIZE
            res.bar0_gpa = plat.alloc_aperture(ctx, res.bar0_size)
            res.cmb_gpa = plat.alloc_aperture(ctx, window)
        except (AllocationError, AdminError, RuntimeError) as exc:
            self._release(res, ctx, created=len(res.sq_hpa))
            raise ProvisionError(f"provisioning vm {vm} failed: {exc}") from None
        vctrl = VirtualController(self, ctx, res)
        ctx.add_trap(res.bar0_gpa, BAR0_TRAPPED, self._bar0_trap(vm))
        self.resources[vm] = res
        self.controllers[vm] = vctrl
        plat.ledger.record(vm, "lifecycle", origin="provision")
        return res

    def _bar0_trap(self, vm):
        def trap(offset: int, size: int, is_write: bool, value: int) -> int:
            return self.mmio_access(vm, REGION_BAR0, offset, is_write, value, size)
        return trap

    def read_meta(self, res: VmResources) -> tuple[int, int]:
        cmb = self.platform.ssds[res.ssd].cmb
        return struct.unpack("<QQ", cmb.read(res.cmb_offset + res.meta_offset, META_SIZE))

    # -------------------------------------------------------------- passthrough fault
    def handle_queue_fault(self, vm, gpa_page: int) -> bool:
        """Map a ring or doorbell page on first touch. Returns True if installed."""
        res = self.resources.get(vm)
        ctx = self.platform.vms.get(vm)
        if res is None or ctx is None:
            return False
        gpa = gpa_page << PAGE_SHIFT
        hpa = None
        rel = gpa - res.cmb_gpa
        if PAGE_SIZE <= rel < res.cmb_size:
            hpa = self.platform.ssds[res.ssd].cmb.base + res.cmb_offset + rel
            origin = "ring"
        else:
            rel = gpa - res.bar0_gpa
            if BAR0_TRAPPED <= rel < res.bar0_size:
                y = rel // PAGE_SIZE - 1  # guest qid of this doorbell page
                hpa = res.db_hpa[y - 1]
                origin = "doorbell"
        if hpa is None:
            return False
        ctx.ept.map(gpa_page, hpa >> PAGE_SHIFT)
        reqs = (ctx.current_req,) if ctx.current_req is not None else ()
        self.platform.ledger.record(vm, "page_fault", origin=origin, reqs=reqs)
        return True

    # -------------------------------------------------------------- trap-and-emulate
    def mmio_access(self, vm, region: str, offset: int, is_write: bool, value: int = 0,
                    size: int = 4) -> int:
        """One trapped guest access to the virtual device's control registers."""
        vctrl = self.controllers.get(vm)
        if vctrl is None:
            raise GuestInitError(f"vm {vm} has no virtual controller")
        origin = REGION_CONFIG if region == REGION_CONFIG else "mmio"
        if region == REGION_BAR0 and is_write and offset == DB_BASE:
            origin = "admin"
        self.platform.ledger.record(vm, "vm_exit", origin=origin)
        if region == REGION_CONFIG:
            return vctrl.config_access(offset, size, is_write, value)
        if region == REGION_BAR0:
            return vctrl.bar0_access(offset, size, is_write, value)
        return (1 << (8 * size)) - 1

    def virtual_admin(self, vm, cmd: NvmeCommand) -> NvmeCompletion:
        vctrl = self.controllers.get(vm)
        if vctrl is None:
            raise GuestInitError(f"vm {vm} is not provisioned")
        return vctrl.virtual_admin(cmd)

    # -------------------------------------------------------------- teardown
    def teardown_vm(self, vm, on_done=None) -> None:
        """Release a VM's grant once every in-flight command has completed."""
        plat = self.platform
        res = self.resources.get(vm)
        if res is None:
            log.warning("teardown of unknown vm %s", vm)
            plat.ledger.record(vm, "spurious", origin="teardown_unknown")
            return
        if vm in self._teardown_pending:
            return
        ctrl = plat.ssds[res.ssd].ctrl
        if ctrl.outstanding(res.qids) == 0 or plat.sim is None:
            if plat.sim is None:
                ctrl.service()
            self._finish_teardown(vm, on_done)
            return
        self._teardown_pending.add(vm)

        def listener(c, sq, cpl):
            if sq.qid in res.qids and c.outstanding(res.qids) == 0:
                c.completion_listeners.remove(listener)
                # run after the guest's posted interrupt handler
                plat.defer(plat.cost.posted_ns, self._finish_teardown, vm, on_done)

        ctrl.completion_listeners.append(listener)

    def _finish_teardown(self, vm, on_done=None) -> None:
        self._teardown_pending.discard(vm)
        res = self.resources.pop(vm)
        self.controllers.pop(vm, None)
        self._release(res, self.platform.vms.get(vm), created=len(res.sq_hpa))
        self.platform.ledger.record(vm, "lifecycle", origin="teardown")
        if on_done is not None:
            on_done(vm)

    def _release(self, res: VmResources, ctx: Vm | None, created: int) -> None:
        plat = self.platform
        s = plat.ssds[res.ssd]
        for i, qid in enumerate(res.qids):
            if i < created:
                s.driver.delete_pair(qid)
            self._qids[res.ssd].release(qid)
        for vec in res.vectors:
            plat.iommu.remap.irq_unmap(plat.global_vector(res.ssd, vec))
            s.free_vector(vec)
        if res.cmb_size:
            s.cmb.free(res.cmb_offset)
        self._lbas[res.ssd].release(res.vm)
        if ctx is not None:
            plat.destroy_vm(res.vm)

    # -------------------------------------------------------------- manifest
    def manifest(self) -> str:
        """Deterministic JSON rendering of every live grant."""
        items = sorted(self.resources.values(), key=lambda r: (r.ssd, r.qids, str(r.vm)))
        return json.dumps({"vms": [r.to_dict() for r in items]}, sort_keys=True, indent=2) + "\n"

    def tracer(self, vm):
        """Instrumentation hook labelling a guest command for ledger traces."""
        res = self.resources[vm]
        ctrl = self.platform.ssds[res.ssd].ctrl

        def label(guest_qid: int, cid: int, tag) -> None:
            if tag is not None:
                ctrl.label(res.qids[guest_qid - 1], cid, tag)
        return label
