"""Guest side of I/O queue passthrough.

The driver brings the virtual controller up through trapped register and
admin accesses, then runs the data path entirely on mapped pages: SQ
entries go straight into the CMB ring, doorbells are plain stores to the
device's own doorbell page, and completions arrive as posted interrupts.
Every request is bounds-checked against the VM's LBA grant and every PRP
page against its guest-physical grant before anything reaches the device.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

from ..mem import PAGE_SHIFT, PAGE_SIZE
from ..nvme.commands import NvmeCommand, NvmeCompletion
from ..nvme.constants import (
    ADMIN_CREATE_IO_CQ, ADMIN_CREATE_IO_SQ, ADMIN_IDENTIFY, ADMIN_SET_FEATURES, CC_EN,
    CNS_CONTROLLER, CNS_NAMESPACE, CSTS_RDY, FEAT_NUM_QUEUES, IO_READ, IO_WRITE, REG_ACQ,
    REG_AQA, REG_ASQ, REG_CAP, REG_CC, REG_CSTS, REG_VS_LBA_SIZE, REG_VS_LBA_START,
    SQE_SIZE, CQE_SIZE, doorbell_offset,
)
from ..nvme.identify import parse_identify_controller, parse_identify_namespace
from ..nvme.queues import CqConsumer, QueueFullError, SqProducer
from ..platform import Platform
from .host import REGION_CONFIG, GuestInitError, LightIovHost

ADMIN_DEPTH = 16
MAX_TRANSFER = 512 * PAGE_SIZE  # one PRP list page


class LocalIoError(Exception):
    """Request rejected by the guest driver; nothing was sent to the device."""


@dataclass(slots=True)
class GuestIoRequest:
    op: str  # "read" | "write"
    vlba: int
    blocks: int
    buffer_gpa: int
    tag: object = None


@dataclass
class GuestQueue:
    qid: int
    sq: SqProducer
    cq: CqConsumer
    sq_db: int
    cq_db: int
    free_cids: list[int]
    outstanding: dict[int, GuestIoRequest] = field(default_factory=dict)
    prp_lists: dict[int, int] = field(default_factory=dict)
    busy_until: float = 0.0  # vCPU stalled on a fault until this time

    def full(self) -> bool:
        return self.sq.full() or not self.free_cids


@dataclass
class GuestDeviceState:
    lba_start: int
    lba_size: int
    block_size: int
    gpa_base: int
    gpa_size: int
    max_qpairs: int
    bar0_gpa: int
    cmb_gpa: int
    rings: list[GuestQueue]
    init_accesses: dict[str, int]

    @property
    def outstanding(self) -> dict:
        return {(q.qid, cid): r for q in self.rings for cid, r in q.outstanding.items()}


def check_request(req: GuestIoRequest, lba_size: int, block_size: int,
                  in_ram: Callable[[int, int], bool]) -> int:
    """Validate a request against the LBA and memory grants; returns its byte length."""
    if req.op not in ("read", "write"):
        raise LocalIoError(f"unsupported op {req.op!r}")
    if req.blocks < 1:
        raise LocalIoError("request must cover at least one block")
    if req.vlba < 0 or req.vlba + req.blocks > lba_size:
        raise LocalIoError(
            f"vlba range [{req.vlba}, {req.vlba + req.blocks}) outside [0, {lba_size})")
    length = req.blocks * block_size
    if length > MAX_TRANSFER:
        raise LocalIoError(f"transfer of {length} bytes exceeds {MAX_TRANSFER}")
    if req.buffer_gpa & 0x3:
        raise LocalIoError("buffer is not dword aligned")
    if length > PAGE_SIZE - req.buffer_gpa % PAGE_SIZE and req.buffer_gpa % PAGE_SIZE:
        raise LocalIoError("multi-page buffer must be page aligned")
    first = req.buffer_gpa & ~(PAGE_SIZE - 1)
    last = (req.buffer_gpa + length - 1) & ~(PAGE_SIZE - 1)
    for page in range(first, last + 1, PAGE_SIZE):
        if not in_ram(page, PAGE_SIZE):
            raise LocalIoError(f"PRP page {page:#x} outside the VM's memory grant")
    return length


class LightIovGuest:
    """Frontend driver for one VM."""

    def __init__(self, platform: Platform, host: LightIovHost, vm):
        self.platform = platform
        self.host = host
        self.vm = vm
        self.ctx = platform.vms.get(vm)
        self.mem = platform.guest_memory(vm) if self.ctx is not None else None
        self.state: GuestDeviceState | None = None
        self.on_complete: Callable | None = None
        self.armed_ts: float | None = None
        self._unarmed: set[int] = set()
        self.rejected = 0
        self.protocol_errors = 0
        self._tracer = None

    # -------------------------------------------------------------- control plane
    def _cfg(self, offset: int, size: int = 4) -> int:
        self._acc["config_reads"] += 1
        return self.host.mmio_access(self.vm, REGION_CONFIG, offset, False, 0, size)

    def _rd(self, offset: int, size: int = 4) -> int:
        self._acc["bar_reads"] += 1
        return int.from_bytes(self.mem.read(self._bar0 + offset, size), "little")

    def _wr(self, offset: int, value: int, size: int = 4, kind: str = "bar_writes") -> None:
        self._acc[kind] += 1
        self.mem.write(self._bar0 + offset, value.to_bytes(size, "little"))

    def _admin(self, cmd: NvmeCommand) -> NvmeCompletion:
        cmd.cid = self._acid = (self._acid + 1) & 0xFFFF
        tail = self._asq.push(cmd)
        self._wr(doorbell_offset(0, False), tail, kind="admin_commands")
        cpls = self._acq.poll()
        if len(cpls) != 1 or cpls[0].cid != cmd.cid:
            raise GuestInitError(f"admin opcode {cmd.opcode:#x} got no completion",
                                 cpls[0].status if cpls else 0)
        self._asq.update_head(cpls[0].sq_head)
        self._wr(doorbell_offset(0, True), self._acq.head)
        if cpls[0].status:
            raise GuestInitError(f"admin opcode {cmd.opcode:#x} failed", cpls[0].status)
        return cpls[0]

    def init(self, n_queues: int | None = None) -> GuestDeviceState:
        """Probe, enable and configure the virtual device; arm the data path."""
        if self.ctx is None or self.vm not in self.host.controllers:
            raise GuestInitError(f"vm {self.vm} has no provisioned device")
        self._acc = {"config_reads": 0, "bar_reads": 0, "bar_writes": 0, "admin_commands": 0}
        vid = self._cfg(0x00, 2)
        self._cfg(0x02, 2)
        cls = self._cfg(0x08) >> 8
        if vid == 0xFFFF or cls != 0x010802:
            raise GuestInitError(f"no NVMe device in config space (vid {vid:#x})")
        self._bar0 = (self._cfg(0x10) | (self._cfg(0x14) << 32)) & ~0xF
        cmb_gpa = (self._cfg(0x18) | (self._cfg(0x1C) << 32)) & ~0xF

        cap = self._rd(REG_CAP, 8)
        depth = (cap & 0xFFFF) + 1
        ctx = self.ctx
        asq = ctx.ram_alloc(ADMIN_DEPTH * SQE_SIZE)
        acq = ctx.ram_alloc(ADMIN_DEPTH * CQE_SIZE)
        ident = ctx.ram_alloc(PAGE_SIZE)
        self._asq = SqProducer(self.mem, asq, ADMIN_DEPTH, 0)
        self._acq = CqConsumer(self.mem, acq, ADMIN_DEPTH, 0)
        self._acid = 0
        self._wr(REG_AQA, ((ADMIN_DEPTH - 1) << 16) | (ADMIN_DEPTH - 1))
        self._wr(REG_ASQ, asq, 8)
        self._wr(REG_ACQ, acq, 8)
        self._wr(REG_CC, CC_EN | (6 << 16) | (4 << 20))
        if not self._rd(REG_CSTS) & CSTS_RDY:
            raise GuestInitError("controller did not become ready")
        lba_start = self._rd(REG_VS_LBA_START, 8)
        lba_size = self._rd(REG_VS_LBA_SIZE, 8)

        self._admin(NvmeCommand(ADMIN_IDENTIFY, prp1=ident, cdw10=CNS_CONTROLLER))
        max_q = parse_identify_controller(self.mem.read(ident, PAGE_SIZE))["max_qpairs"]
        self._admin(NvmeCommand(ADMIN_IDENTIFY, nsid=1, prp1=ident, cdw10=CNS_NAMESPACE))
        ns = parse_identify_namespace(self.mem.read(ident, PAGE_SIZE))
        if ns["nsze"] != lba_size:
            raise GuestInitError(f"namespace size {ns['nsze']} != grant {lba_size}")
        want = max_q if n_queues is None else n_queues
        rings = []
        if want:
            cpl = self._admin(NvmeCommand(ADMIN_SET_FEATURES, cdw10=FEAT_NUM_QUEUES,
                                          cdw11=((want - 1) << 16) | (want - 1)))
            want = min(want, (cpl.result & 0xFFFF) + 1)
        for y in range(1, want + 1):
            cq_off = self._admin(NvmeCommand(
                ADMIN_CREATE_IO_CQ, prp1=0, cdw10=((depth - 1) << 16) | y,
                cdw11=(y << 16) | 0x3)).result
            sq_off = self._admin(NvmeCommand(
                ADMIN_CREATE_IO_SQ, prp1=0, cdw10=((depth - 1) << 16) | y,
                cdw11=(y << 16) | 0x1)).result
            q = GuestQueue(y, SqProducer(self.mem, cmb_gpa + sq_off, depth, y),
                           CqConsumer(self.mem, cmb_gpa + cq_off, depth, y),
                           self._bar0 + doorbell_offset(y, False),
                           self._bar0 + doorbell_offset(y, True),
                           list(range(depth - 1, -1, -1)))
            rings.append(q)
            self.platform.register_vm_irq(self.vm, y, self._irq_handler(q))
            for base, n in ((q.sq.base, depth * SQE_SIZE), (q.cq.base, depth * CQE_SIZE)):
                self._unarmed.update(range(base >> PAGE_SHIFT, (base + n - 1 >> PAGE_SHIFT) + 1))
            self._unarmed.add(q.sq_db >> PAGE_SHIFT)
        self.state = GuestDeviceState(
            lba_start, lba_size, ns["block_size"], ctx.gpa_base, ctx.gpa_size, max_q,
            self._bar0, cmb_gpa, rings, dict(self._acc))
        if not rings:
            self.armed_ts = self.platform.now
        return self.state

    @property
    def init_exits(self) -> int:
        return sum(self.state.init_accesses.values()) if self.state else 0

    # -------------------------------------------------------------- data path
    @property
    def n_queues(self) -> int:
        return len(self.state.rings)

    @property
    def lba_size(self) -> int:
        return self.state.lba_size

    @property
    def block_size(self) -> int:
        return self.state.block_size

    def full(self, queue: int = 0) -> bool:
        return self.state.rings[queue].full()

    def set_tracer(self, fn) -> None:
        """Instrumentation: fn(guest_qid, cid, tag) labels commands for ledger traces."""
        self._tracer = fn

    def submit(self, req: GuestIoRequest, queue: int = 0) -> int:
        st = self.state
        if st is None:
            raise GuestInitError("device not initialized")
        try:
            length = check_request(req, st.lba_size, st.block_size, self.ctx.in_ram)
        except LocalIoError:
            self.rejected += 1
            raise
        q = st.rings[queue]
        if q.full():
            raise QueueFullError(f"vm {self.vm} queue {q.qid} full")
        cid = q.free_cids.pop()
        prp2 = self._prp2(q, cid, req.buffer_gpa, length)
        cmd = NvmeCommand.io(IO_WRITE if req.op == "write" else IO_READ, cid, 1,
                             req.vlba + st.lba_start, req.blocks - 1, req.buffer_gpa, prp2)
        q.outstanding[cid] = req
        if self._tracer is not None:
            self._tracer(q.qid, cid, req.tag)
        ctx = self.ctx
        ctx.current_req = req.tag
        try:
            faults = (self.mem.touch(q.sq.slot_addr(q.sq.tail), write=True)
                      + self.mem.touch(q.sq_db, write=True))
        finally:
            ctx.current_req = None
        tail = q.sq.push(cmd)
        sim = self.platform.sim
        if sim is not None and (faults or q.busy_until > sim.now):
            when = max(sim.now, q.busy_until) + faults * self.platform.cost.page_fault_ns
            q.busy_until = when
            sim.at(when, self._ring, q, tail)
        else:
            self._ring(q, tail)
        if faults:
            self._check_armed()
        return cid

    def _ring(self, q: GuestQueue, tail: int) -> None:
        if self.ctx.ept.entries:  # not torn down
            self.mem.write32(q.sq_db, tail)

    def _prp2(self, q: GuestQueue, cid: int, buf: int, length: int) -> int:
        first = PAGE_SIZE - buf % PAGE_SIZE
        if length <= first:
            return 0
        rest = -(-(length - first) // PAGE_SIZE)
        second = (buf & ~(PAGE_SIZE - 1)) + PAGE_SIZE
        if rest == 1:
            return second
        lst = q.prp_lists.get(cid)
        if lst is None:
            lst = q.prp_lists[cid] = self.ctx.ram_alloc(PAGE_SIZE)
        self.mem.write(lst, struct.pack(f"<{rest}Q",
                                        *(second + i * PAGE_SIZE for i in range(rest))))
        return lst

    def _irq_handler(self, q: GuestQueue):
        def handler():
            if not self.ctx.ept.entries:
                return
            self.ctx.current_req = None
            faults = self.mem.touch(q.cq.base + q.cq.head * CQE_SIZE)
            if faults:
                self._check_armed()
                self.platform.defer(faults * self.platform.cost.page_fault_ns,
                                    self._drain, q)
            else:
                self._drain(q)
        return handler

    def _drain(self, q: GuestQueue) -> list:
        if not self.ctx.ept.entries:  # torn down while the vCPU was stalled
            return []
        cpls = q.cq.poll()
        if not cpls:
            return []
        out = []
        for c in cpls:
            q.sq.update_head(c.sq_head)
            req = q.outstanding.pop(c.cid, None)
            if req is None:
                self.protocol_errors += 1
                self.platform.ledger.record(self.vm, "spurious", origin="unknown_cid")
                continue
            q.free_cids.append(c.cid)
            out.append((req.tag, c.status))
            if self.on_complete is not None:
                self.on_complete(req, c.status)
        self.mem.write32(q.cq_db, q.cq.head)
        return out

    def poll_completions(self, queue: int | None = None) -> list:
        """Consume new completions by phase tag; returns [(tag, status), ...]."""
        rings = self.state.rings if queue is None else [self.state.rings[queue]]
        out = []
        for q in rings:
            out.extend(self._drain(q))
        return out

    def _check_armed(self) -> None:
        if self.armed_ts is not None:
            return
        entries = self.ctx.ept.entries
        self._unarmed = {p for p in self._unarmed if p not in entries}
        if not self._unarmed:
            self.armed_ts = self.platform.now


def guest_init(platform: Platform, host: LightIovHost, vm, n_queues: int | None = None
               ) -> LightIovGuest:
    g = LightIovGuest(platform, host, vm)
    g.init(n_queues)
    return g
