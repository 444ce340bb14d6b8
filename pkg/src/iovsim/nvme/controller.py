"""One simulated NVMe controller: registers, admin queue, I/O queue pairs, CMB and DMA.

Two driving modes share the same fetch/execute/post code:

* without an event loop every SQ doorbell is serviced immediately
  (``auto_process``) or on an explicit ``service()`` call;
* with an event loop, fetched commands occupy one of ``parallelism``
  service slots for ``service_time_fn(opcode, nbytes)`` nanoseconds and
  complete later. Data moves when the command completes.

Arbitration across ready SQs is round-robin, one command per turn.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable

from ..mem import DmaFault, HostMemory, Iommu, MmioHandler
from .cmb import CmbRegion
from .commands import NvmeCommand, NvmeCompletion
from .constants import (
    ADMIN_CREATE_IO_CQ, ADMIN_CREATE_IO_SQ, ADMIN_DELETE_IO_CQ, ADMIN_DELETE_IO_SQ,
    ADMIN_IDENTIFY, ADMIN_SET_FEATURES, CC_EN, CNS_CONTROLLER, CNS_NAMESPACE, CQE_SIZE,
    CSTS_RDY, DB_BASE, DB_STRIDE, DSTRD, FEAT_NUM_QUEUES, IO_FLUSH, IO_READ, IO_WRITE,
    MAX_IO_QPAIRS, NVME_VERSION, PAGE_SIZE, REG_ACQ, REG_AQA, REG_ASQ, REG_CAP, REG_CC,
    REG_CMBLOC, REG_CMBSZ, REG_CSTS, REG_VS, SC_CQ_INVALID, SC_DATA_XFER_ERROR,
    SC_INVALID_FIELD, SC_INVALID_NAMESPACE, SC_INVALID_OPCODE, SC_INVALID_QID,
    SC_INVALID_QSIZE, SC_INVALID_QUEUE_DELETION, SC_LBA_OUT_OF_RANGE, SC_SUCCESS, SQE_SIZE,
)
from .identify import identify_controller, identify_namespace
from .namespace import Namespace
from .queues import CQ_HEAD, SQ_TAIL, DoorbellRegister, QueuePair

log = logging.getLogger(__name__)

MAX_QUEUE_ENTRIES = 65536
PRP_ENTRIES_PER_PAGE = PAGE_SIZE // 8


class ControllerError(Exception):
    pass


@dataclass(frozen=True, slots=True)
class FetchRecord:
    qid: int
    cid: int
    opcode: int
    nsid: int
    slba: int
    nlb: int
    prp1: int
    owner: object


def affine_service_time(a: float, b: float) -> Callable[[int, int], float]:
    """t = a + b * bytes, independent of opcode."""
    def fn(opcode: int, nbytes: int) -> float:
        return a + b * nbytes
    return fn


def prp_entry_count(prp1: int, length: int) -> int:
    """Number of data pages after the one named by prp1."""
    first = PAGE_SIZE - (prp1 % PAGE_SIZE)
    if length <= first:
        return 0
    return -(-(length - first) // PAGE_SIZE)


class NvmeController(MmioHandler):
    """A physical NVMe controller attached to ``memory`` through ``iommu``."""

    def __init__(self, device_id, memory: HostMemory, iommu: Iommu, namespace: Namespace,
                 *, bar0_base: int | None = None, cmb: CmbRegion | None = None,
                 max_qpairs: int = MAX_IO_QPAIRS, sim=None, ledger=None,
                 service_time_fn: Callable[[int, int], float] | None = None,
                 parallelism: int = 1, irq_hook: Callable | None = None,
                 auto_process: bool = True, record_fetches: bool = True):
        if not 1 <= max_qpairs <= MAX_IO_QPAIRS:
            raise ValueError(f"max_qpairs must be in [1, {MAX_IO_QPAIRS}], got {max_qpairs}")
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self.device_id = device_id
        self.memory = memory
        self.iommu = iommu
        self.namespace = namespace
        self.cmb = cmb
        self.max_qpairs = max_qpairs
        self.sim = sim
        self.ledger = ledger
        self.service_time_fn = service_time_fn or affine_service_time(0.0, 0.0)
        self.parallelism = parallelism
        self.irq_hook = irq_hook
        self.auto_process = auto_process
        self.record_fetches = record_fetches

        self.cap = ((MAX_QUEUE_ENTRIES - 1) | (1 << 16) | (0x20 << 24)
                    | (DSTRD << 32) | (1 << 37))
        self.cc = 0
        self.csts = 0
        self.aqa = 0
        self.asq = 0
        self.acq = 0
        self.qpairs: dict[int, QueuePair] = {}
        self.io_registered = 0
        self.fetch_log: list[FetchRecord] = []
        self.completions_posted = 0
        self.commands_fetched = 0
        self.busy = 0
        self._ready: deque[int] = deque()
        self._in_ready: set[int] = set()
        self._stalled: dict[int, set[int]] = {}
        self._labels: dict[tuple[int, int], object] = {}
        self.completion_listeners: list[Callable] = []
        self.bar0_base = bar0_base
        self.bar0_size = DB_BASE + (max_qpairs + 1) * PAGE_SIZE
        if bar0_base is not None:
            memory.add_mmio(bar0_base, self.bar0_size, self)

    # ------------------------------------------------------------------ registers
    @property
    def enabled(self) -> bool:
        return bool(self.cc & CC_EN)

    @property
    def ready(self) -> bool:
        return bool(self.csts & CSTS_RDY)

    def doorbell_addr(self, qid: int, kind: str) -> int:
        if self.bar0_base is None:
            raise ControllerError("controller has no BAR0 mapping")
        return self.bar0_base + DB_BASE + (2 * qid + (kind == CQ_HEAD)) * DB_STRIDE

    def doorbell_page_addr(self, qid: int) -> int:
        return self.bar0_base + DB_BASE + qid * PAGE_SIZE

    def mmio_read(self, offset: int, size: int) -> int:
        regs = {REG_CAP: self.cap, REG_VS: NVME_VERSION, REG_CC: self.cc,
                REG_CSTS: self.csts, REG_AQA: self.aqa, REG_ASQ: self.asq,
                REG_ACQ: self.acq, REG_CMBLOC: self._cmbloc(), REG_CMBSZ: self._cmbsz()}
        if offset in regs:
            return regs[offset] & ((1 << (8 * size)) - 1)
        if REG_CAP < offset < REG_VS and size == 4:
            return self.cap >> 32
        return 0

    def _cmbloc(self) -> int:
        return 2 if self.cmb is not None else 0  # BIR 2

    def _cmbsz(self) -> int:
        if self.cmb is None:
            return 0
        # SZU=2 (1 MiB units); SQS | CQS | WDS | RDS supported
        return (max(1, self.cmb.size >> 20) << 12) | (2 << 8) | 0x1B

    def mmio_write(self, offset: int, size: int, value: int) -> None:
        if offset >= DB_BASE:
            rel = offset - DB_BASE
            idx, within = divmod(rel, DB_STRIDE)
            if within:
                self._spurious(None, f"doorbell_unaligned:{offset:#x}")
                return
            qid, is_cq = divmod(idx, 2)
            self.ring_doorbell(DoorbellRegister(qid, CQ_HEAD if is_cq else SQ_TAIL), value & 0xFFFF)
            return
        if offset == REG_CC:
            self._write_cc(value)
        elif offset == REG_AQA:
            self.aqa = value & 0x0FFF0FFF
        elif offset == REG_ASQ:
            self.asq = (self.asq & ~0xFFFFFFFF) | value if size == 4 else value
        elif offset == REG_ASQ + 4:
            self.asq = (self.asq & 0xFFFFFFFF) | (value << 32)
        elif offset == REG_ACQ:
            self.acq = (self.acq & ~0xFFFFFFFF) | value if size == 4 else value
        elif offset == REG_ACQ + 4:
            self.acq = (self.acq & 0xFFFFFFFF) | (value << 32)

    def _write_cc(self, value: int) -> None:
        was = self.enabled
        if value & 1 and not was:
            asqs = (self.aqa & 0xFFF) + 1
            acqs = ((self.aqa >> 16) & 0xFFF) + 1
            if asqs < 2 or acqs < 2 or not self.asq or not self.acq:
                raise ControllerError("CC.EN set without an admin queue configured")
        self.cc = value & 0xFFFFFFFF
        if self.enabled and not was:
            self.qpairs[0] = QueuePair(0, sq_base=self.asq, cq_base=self.acq,
                                       sq_depth=asqs, cq_depth=acqs, cqid=0,
                                       int_vector=0, has_sq=True, has_cq=True)
            self.csts |= CSTS_RDY
        elif was and not self.enabled:
            self.reset()

    def reset(self) -> None:
        """Controller reset: all queues, including admin, are dropped."""
        self.qpairs.clear()
        self.io_registered = 0
        self._ready.clear()
        self._in_ready.clear()
        self._stalled.clear()
        self._labels.clear()
        self.csts &= ~CSTS_RDY

    # ------------------------------------------------------------------ bookkeeping
    def label(self, qid: int, cid: int, req) -> None:
        """Attach a trace correlation id to the next command (qid, cid) fetched."""
        self._labels[(qid, cid)] = req

    def set_owner(self, qid: int, owner) -> None:
        self.qpairs[qid].owner = owner

    def registered_pairs(self) -> int:
        return self.io_registered

    def outstanding(self, qids) -> int:
        n = 0
        for q in qids:
            qp = self.qpairs.get(q)
            if qp is not None:
                n += qp.sq_pending() + qp.inflight
        return n

    def _record(self, vm, kind: str, **kw) -> None:
        if self.ledger is not None:
            self.ledger.record(vm, kind, **kw)

    def _spurious(self, vm, origin: str) -> None:
        log.debug("device %s: %s", self.device_id, origin)
        self._record(vm, "spurious", origin=origin)

    # ------------------------------------------------------------------ device-side memory access
    def _dev_read(self, addr: int, length: int) -> bytes:
        cmb = self.cmb
        if cmb is not None and cmb.base <= addr < cmb.base + cmb.size:
            return self.memory.read(addr, length)
        if addr % PAGE_SIZE + length <= PAGE_SIZE:
            return self.memory.read(self.iommu.dma_translate(self.device_id, addr), length)
        out = bytearray()
        while length:
            n = min(length, PAGE_SIZE - addr % PAGE_SIZE)
            out += self._dev_read(addr, n)
            addr += n
            length -= n
        return bytes(out)

    def _dev_write(self, addr: int, data) -> None:
        cmb = self.cmb
        if cmb is not None and cmb.base <= addr < cmb.base + cmb.size:
            self.memory.write(addr, data)
            return
        length = len(data)
        if addr % PAGE_SIZE + length <= PAGE_SIZE:
            self.memory.write(self.iommu.dma_translate(self.device_id, addr), data)
            return
        mv = memoryview(data)
        pos = 0
        while pos < length:
            n = min(length - pos, PAGE_SIZE - addr % PAGE_SIZE)
            self._dev_write(addr, mv[pos:pos + n])
            addr += n
            pos += n

    # ------------------------------------------------------------------ doorbells
    def ring_doorbell(self, db: DoorbellRegister, new_value: int) -> None:
        qp = self.qpairs.get(db.qid)
        is_sq = db.kind == SQ_TAIL
        if qp is None or not (qp.has_sq if is_sq else qp.has_cq):
            self._spurious(None, f"doorbell_unknown_qid:{db.qid}")
            return
        self._record(qp.owner, "doorbell", origin="sq_tail" if is_sq else "cq_head")
        depth = qp.sq_depth if is_sq else qp.cq_depth
        if new_value >= depth:
            qp.error = True
            self._spurious(qp.owner, f"doorbell_overflow:{db.qid}")
            return
        if qp.error:
            return
        if is_sq:
            qp.sq_tail = new_value
            if db.qid == 0:
                self._process_admin()
            elif qp.sq_pending():
                self._make_ready(qp)
                self._kick()
        else:
            qp.cq_head = new_value
            if qp.cq_used() == 0:
                qp.irq_pending = False
            stalled = self._stalled.pop(db.qid, None)
            if stalled:
                for sqid in sorted(stalled):
                    sq = self.qpairs.get(sqid)
                    if sq is not None and sq.sq_pending():
                        self._make_ready(sq)
                self._kick()

    def _make_ready(self, qp: QueuePair) -> None:
        if qp.qid not in self._in_ready:
            self._in_ready.add(qp.qid)
            self._ready.append(qp.qid)

    def _kick(self) -> None:
        if self.sim is not None:
            self._arbitrate()
        elif self.auto_process:
            self.service()

    # ------------------------------------------------------------------ fetch / arbitration
    def _eligible(self, qp: QueuePair) -> bool:
        cq = self.qpairs.get(qp.cqid)
        if cq is None or not cq.has_cq:
            return False
        return cq.cq_free() - cq.cq_reserved > 0

    def _next_ready(self) -> QueuePair | None:
        """Pop the next SQ in round-robin order that may fetch now."""
        ready = self._ready
        while ready:
            qid = ready.popleft()
            self._in_ready.discard(qid)
            qp = self.qpairs.get(qid)
            if qp is None or not qp.has_sq or qp.error or not qp.sq_pending():
                continue
            if not self._eligible(qp):
                self._stalled.setdefault(qp.cqid, set()).add(qid)
                continue
            return qp
        return None

    def _fetch(self, qp: QueuePair) -> tuple[NvmeCommand, object]:
        raw = self._dev_read(qp.sq_base + qp.sq_head * SQE_SIZE, SQE_SIZE)
        cmd = NvmeCommand.decode(raw)
        qp.sq_head = (qp.sq_head + 1) % qp.sq_depth
        qp.inflight += 1
        self.qpairs[qp.cqid].cq_reserved += 1
        self.commands_fetched += 1
        if self.record_fetches:
            self.fetch_log.append(FetchRecord(qp.qid, cmd.cid, cmd.opcode, cmd.nsid,
                                              cmd.slba, cmd.nlb, cmd.prp1, qp.owner))
        req = self._labels.pop((qp.qid, cmd.cid), None) if self._labels else None
        if qp.sq_pending():
            self._make_ready(qp)
        return cmd, req

    def service(self) -> list[NvmeCompletion]:
        """Untimed mode: drain every ready SQ round-robin, one command per turn."""
        out = []
        while True:
            qp = self._next_ready()
            if qp is None:
                return out
            cmd, req = self._fetch(qp)
            out.append(self._complete(qp, cmd, req))

    def process_sq(self, qid: int) -> list[NvmeCompletion]:
        """Untimed mode: drain one SQ until empty or its CQ is full."""
        qp = self.qpairs.get(qid)
        if qp is None or not qp.has_sq:
            raise ControllerError(f"SQ {qid} is not registered")
        out = []
        while qp.sq_pending() and not qp.error:
            if not self._eligible(qp):
                self._stalled.setdefault(qp.cqid, set()).add(qid)
                break
            cmd, req = self._fetch(qp)
            out.append(self._complete(qp, cmd, req))
        return out

    def _arbitrate(self) -> None:
        sim = self.sim
        while self.busy < self.parallelism:
            qp = self._next_ready()
            if qp is None:
                return
            cmd, req = self._fetch(qp)
            self.busy += 1
            nbytes = self._transfer_bytes(cmd)
            duration = self.service_time_fn(cmd.opcode, nbytes)
            self._record(qp.owner, "device_service", nbytes=nbytes, origin=str(self.device_id),
                         reqs=(req,) if req is not None else ())
            sim.after(duration, self._finish, qp, cmd, req)

    def _finish(self, qp: QueuePair, cmd: NvmeCommand, req) -> None:
        self.busy -= 1
        self._complete(qp, cmd, req)
        self._arbitrate()

    def _transfer_bytes(self, cmd: NvmeCommand) -> int:
        if cmd.opcode in (IO_READ, IO_WRITE):
            return (cmd.nlb + 1) * self.namespace.block_size
        return 0

    def _complete(self, qp: QueuePair, cmd: NvmeCommand, req) -> NvmeCompletion:
        if self.sim is None:
            self._record(qp.owner, "device_service", nbytes=self._transfer_bytes(cmd),
                         origin=str(self.device_id), reqs=(req,) if req is not None else ())
        status, _ = self.execute_io(cmd, self.namespace, owner=qp.owner)
        return self._post(qp, NvmeCompletion(0, qp.sq_head, qp.qid, cmd.cid, status), req)

    def _post(self, sq: QueuePair, cpl: NvmeCompletion, req=None) -> NvmeCompletion:
        cq = self.qpairs.get(sq.cqid)
        sq.inflight -= 1
        if cq is None or not cq.has_cq:
            self._spurious(sq.owner, f"completion_dropped_no_cq:{sq.cqid}")
            return cpl
        cq.cq_reserved -= 1
        cpl.sq_head = sq.sq_head
        cpl.phase = cq.cq_phase
        self._dev_write(cq.cq_base + cq.cq_tail * CQE_SIZE, cpl.encode())
        cq.cq_tail += 1
        if cq.cq_tail == cq.cq_depth:
            cq.cq_tail = 0
            cq.cq_phase ^= 1
        cq.irq_pending = True
        self.completions_posted += 1
        if cq.int_vector is not None and self.irq_hook is not None and cq.qid != 0:
            self.irq_hook(self, cq.int_vector, (req,) if req is not None else ())
        for fn in self.completion_listeners:
            fn(self, sq, cpl)
        return cpl

    # ------------------------------------------------------------------ I/O execution
    def prp_pages(self, cmd: NvmeCommand, length: int) -> tuple[list[int], int]:
        """Resolve PRP1/PRP2 into per-page DMA addresses.

        Returns (addresses, list_entries_consumed). Raises ValueError on a
        malformed PRP and DmaFault if a PRP list page is unmapped.
        """
        prp1 = cmd.prp1
        if prp1 & 0x3:
            raise ValueError("prp1 is not dword aligned")
        addrs = [prp1]
        extra = prp_entry_count(prp1, length)
        if extra == 0:
            return addrs, 0
        if extra == 1:
            if cmd.prp2 % PAGE_SIZE:
                raise ValueError("prp2 data pointer has a page offset")
            addrs.append(cmd.prp2)
            return addrs, 0
        list_addr = cmd.prp2
        if list_addr & 0x7:
            raise ValueError("PRP list pointer is not qword aligned")
        consumed = 0
        remaining = extra
        while remaining:
            slots = (PAGE_SIZE - list_addr % PAGE_SIZE) // 8
            raw = self._dev_read(list_addr, slots * 8)
            entries = [int.from_bytes(raw[i:i + 8], "little") for i in range(0, len(raw), 8)]
            if remaining <= slots:
                take = entries[:remaining]
                addrs.extend(take)
                consumed += remaining
                remaining = 0
            else:
                take = entries[:slots - 1]
                addrs.extend(take)
                consumed += slots - 1
                remaining -= slots - 1
                list_addr = entries[slots - 1]
                if list_addr % PAGE_SIZE:
                    raise ValueError("chained PRP list pointer has a page offset")
        for a in addrs[1:]:
            if a % PAGE_SIZE:
                raise ValueError("PRP entry has a page offset")
        return addrs, consumed

    def execute_io(self, cmd: NvmeCommand, ns: Namespace, owner=None) -> tuple[int, int]:
        """Execute a read/write/flush against ``ns``. Returns (status, bytes moved)."""
        op = cmd.opcode
        if op == IO_FLUSH:
            return SC_SUCCESS, 0
        if op not in (IO_READ, IO_WRITE):
            return SC_INVALID_OPCODE, 0
        if cmd.nsid != ns.nsid:
            return SC_INVALID_NAMESPACE, 0
        nblocks = cmd.nlb + 1
        if not ns.in_range(cmd.slba, nblocks):
            return SC_LBA_OUT_OF_RANGE, 0
        length = nblocks * ns.block_size
        try:
            addrs, _ = self.prp_pages(cmd, length)
            segs = []
            left = length
            for a in addrs:
                n = min(left, PAGE_SIZE - a % PAGE_SIZE)
                segs.append((a, n))
                left -= n
            if op == IO_WRITE:
                data = b"".join(self._dev_read(a, n) for a, n in segs)
                ns.write_blocks(cmd.slba, data)
            else:
                data = memoryview(ns.read_blocks(cmd.slba, nblocks))
                pos = 0
                for a, n in segs:
                    self._dev_write(a, data[pos:pos + n])
                    pos += n
        except ValueError:
            return SC_INVALID_FIELD, 0
        except DmaFault as exc:
            self._record(owner, "dma_fault", nbytes=length, origin=f"{exc.addr:#x}")
            return SC_DATA_XFER_ERROR, 0
        return SC_SUCCESS, length

    # ------------------------------------------------------------------ admin
    def _process_admin(self) -> None:
        qp = self.qpairs[0]
        while qp.sq_pending():
            raw = self._dev_read(qp.sq_base + qp.sq_head * SQE_SIZE, SQE_SIZE)
            qp.sq_head = (qp.sq_head + 1) % qp.sq_depth
            cmd = NvmeCommand.decode(raw)
            if qp.cq_free() <= 0:
                raise ControllerError("admin completion queue overrun")
            cpl = self.admin_execute(cmd)
            qp.inflight += 1
            qp.cq_reserved += 1
            self._post(qp, cpl)

    def admin_execute(self, cmd: NvmeCommand) -> NvmeCompletion:
        if not self.ready:
            raise ControllerError("admin command issued while controller is not ready")
        op = cmd.opcode
        handler = {
            ADMIN_IDENTIFY: self._admin_identify,
            ADMIN_CREATE_IO_CQ: self._admin_create_cq,
            ADMIN_CREATE_IO_SQ: self._admin_create_sq,
            ADMIN_DELETE_IO_SQ: self._admin_delete_sq,
            ADMIN_DELETE_IO_CQ: self._admin_delete_cq,
            ADMIN_SET_FEATURES: self._admin_set_features,
        }.get(op)
        if handler is None:
            status, result = SC_INVALID_OPCODE, 0
        else:
            status, result = handler(cmd)
        sq_head = self.qpairs[0].sq_head if 0 in self.qpairs else 0
        return NvmeCompletion(result, sq_head, 0, cmd.cid, status)

    def _admin_identify(self, cmd: NvmeCommand) -> tuple[int, int]:
        cns = cmd.cdw10 & 0xFF
        if cns == CNS_CONTROLLER:
            data = identify_controller(serial=f"SIM{self.device_id}", model="iovsim nvme",
                                       max_qpairs=self.max_qpairs)
        elif cns == CNS_NAMESPACE:
            if cmd.nsid != self.namespace.nsid:
                return SC_INVALID_NAMESPACE, 0
            data = identify_namespace(nsze=self.namespace.total_blocks,
                                      block_size=self.namespace.block_size)
        else:
            return SC_INVALID_FIELD, 0
        try:
            self._dev_write(cmd.prp1, data)
        except DmaFault:
            return SC_DATA_XFER_ERROR, 0
        return SC_SUCCESS, 0

    def _check_new_qid(self, qid: int, cq: bool) -> int:
        if qid == 0 or qid > self.max_qpairs:
            return SC_INVALID_QID
        qp = self.qpairs.get(qid)
        if qp is not None and (qp.has_cq if cq else qp.has_sq):
            return SC_INVALID_QID
        if qp is None and self.io_registered >= self.max_qpairs:
            return SC_INVALID_QID
        return SC_SUCCESS

    def _admin_create_cq(self, cmd: NvmeCommand) -> tuple[int, int]:
        qid = cmd.cdw10 & 0xFFFF
        size = (cmd.cdw10 >> 16) + 1
        status = self._check_new_qid(qid, cq=True)
        if status:
            return status, 0
        if size < 2:
            return SC_INVALID_QSIZE, 0
        if cmd.prp1 % PAGE_SIZE or not cmd.prp1:
            return SC_INVALID_FIELD, 0
        ien = bool(cmd.cdw11 & 0x2)
        qp = self._pair(qid)
        qp.cq_base = cmd.prp1
        qp.cq_depth = size
        qp.cq_tail = qp.cq_head = 0
        qp.cq_phase = 1
        qp.int_vector = (cmd.cdw11 >> 16) if ien else None
        qp.has_cq = True
        return SC_SUCCESS, 0

    def _admin_create_sq(self, cmd: NvmeCommand) -> tuple[int, int]:
        qid = cmd.cdw10 & 0xFFFF
        size = (cmd.cdw10 >> 16) + 1
        cqid = cmd.cdw11 >> 16
        status = self._check_new_qid(qid, cq=False)
        if status:
            return status, 0
        cq = self.qpairs.get(cqid)
        if cqid == 0 or cq is None or not cq.has_cq:
            return SC_CQ_INVALID, 0
        if size < 2:
            return SC_INVALID_QSIZE, 0
        if cmd.prp1 % PAGE_SIZE or not cmd.prp1:
            return SC_INVALID_FIELD, 0
        qp = self._pair(qid)
        qp.sq_base = cmd.prp1
        qp.sq_depth = size
        qp.sq_tail = qp.sq_head = 0
        qp.cqid = cqid
        qp.has_sq = True
        qp.error = False
        return SC_SUCCESS, 0

    def _pair(self, qid: int) -> QueuePair:
        qp = self.qpairs.get(qid)
        if qp is None:
            qp = self.qpairs[qid] = QueuePair(qid)
            self.io_registered += 1
        return qp

    def _drop_if_empty(self, qp: QueuePair) -> None:
        if not qp.has_sq and not qp.has_cq:
            del self.qpairs[qp.qid]
            self.io_registered -= 1

    def _admin_delete_sq(self, cmd: NvmeCommand) -> tuple[int, int]:
        qid = cmd.cdw10 & 0xFFFF
        qp = self.qpairs.get(qid)
        if qid == 0 or qp is None or not qp.has_sq:
            return SC_INVALID_QID, 0
        qp.has_sq = False
        qp.sq_base = qp.sq_depth = qp.sq_head = qp.sq_tail = 0
        self._in_ready.discard(qid)
        for s in self._stalled.values():
            s.discard(qid)
        self._drop_if_empty(qp)
        return SC_SUCCESS, 0

    def _admin_delete_cq(self, cmd: NvmeCommand) -> tuple[int, int]:
        qid = cmd.cdw10 & 0xFFFF
        qp = self.qpairs.get(qid)
        if qid == 0 or qp is None or not qp.has_cq:
            return SC_INVALID_QID, 0
        for other in self.qpairs.values():
            if other.has_sq and other.cqid == qid and other.qid != 0:
                return SC_INVALID_QUEUE_DELETION, 0
        qp.has_cq = False
        qp.cq_base = qp.cq_depth = 0
        qp.int_vector = None
        qp.irq_pending = False
        self._stalled.pop(qid, None)
        self._drop_if_empty(qp)
        return SC_SUCCESS, 0

    def _admin_set_features(self, cmd: NvmeCommand) -> tuple[int, int]:
        fid = cmd.cdw10 & 0xFF
        if fid != FEAT_NUM_QUEUES:
            return SC_INVALID_FIELD, 0
        nsqr = cmd.cdw11 & 0xFFFF
        ncqr = cmd.cdw11 >> 16
        if nsqr == 0xFFFF or ncqr == 0xFFFF:
            return SC_INVALID_FIELD, 0
        cap = self.max_qpairs - 1
        return SC_SUCCESS, (min(ncqr, cap) << 16) | min(nsqr, cap)

    def dump(self) -> str:
        lines = [f"controller {self.device_id} cc={self.cc:#x} csts={self.csts:#x} "
                 f"pairs={self.io_registered}"]
        for qid in sorted(self.qpairs):
            qp = self.qpairs[qid]
            lines.append(
                f"  q{qid} sq={qp.sq_base:#x}/{qp.sq_depth} h{qp.sq_head} t{qp.sq_tail} "
                f"cq={qp.cq_base:#x}/{qp.cq_depth} h{qp.cq_head} t{qp.cq_tail} p{qp.cq_phase} "
                f"iv={qp.int_vector} owner={qp.owner}")
        return "\n".join(lines)
