"""Host kernel NVMe driver: admin queue bring-up and host-owned I/O queues."""
from __future__ import annotations

from ..mem import AllocationError, HostMemory, Iommu
from .commands import NvmeCommand, NvmeCompletion
from .constants import (
    ADMIN_CREATE_IO_CQ, ADMIN_CREATE_IO_SQ, ADMIN_DELETE_IO_CQ, ADMIN_DELETE_IO_SQ,
    ADMIN_IDENTIFY, ADMIN_SET_FEATURES, CC_EN, CNS_CONTROLLER, CNS_NAMESPACE, CQE_SIZE,
    FEAT_NUM_QUEUES, PAGE_SIZE, REG_ACQ, REG_AQA, REG_ASQ, REG_CC, SQE_SIZE,
)
from .controller import NvmeController
from .identify import IDENTIFY_SIZE
from .queues import CQ_HEAD, SQ_TAIL, CqConsumer, SqProducer


class AdminError(Exception):
    def __init__(self, what: str, status: int):
        super().__init__(f"{what} failed with status {status:#x}")
        self.status = status


class HostQueue:
    """A host-owned I/O queue pair living in host memory."""

    def __init__(self, drv: HostDriver, qid: int, depth: int, sq_hpa: int, cq_hpa: int,
                 sq_iova: int, cq_iova: int):
        self.drv = drv
        self.qid = qid
        self.depth = depth
        self.sq = SqProducer(drv.memory, sq_hpa, depth, qid)
        self.cq = CqConsumer(drv.memory, cq_hpa, depth, qid)
        self.sq_iova = sq_iova
        self.cq_iova = cq_iova
        self._cids = list(range(depth - 1, -1, -1))
        self.outstanding: dict[int, object] = {}

    def full(self) -> bool:
        return self.sq.full() or not self._cids

    def submit(self, cmd: NvmeCommand, ctx=None, label=None) -> int:
        cid = self._cids.pop()
        cmd.cid = cid
        self.outstanding[cid] = ctx
        if label is not None:
            self.drv.ctrl.label(self.qid, cid, label)
        tail = self.sq.push(cmd)
        self.drv.memory.write32(self.drv.ctrl.doorbell_addr(self.qid, SQ_TAIL), tail)
        return cid

    def reap(self) -> list[tuple[NvmeCompletion, object]]:
        cpls = self.cq.poll()
        if not cpls:
            return []
        out = []
        for c in cpls:
            self.sq.update_head(c.sq_head)
            ctx = self.outstanding.pop(c.cid)
            self._cids.append(c.cid)
            out.append((c, ctx))
        self.drv.memory.write32(self.drv.ctrl.doorbell_addr(self.qid, CQ_HEAD), self.cq.head)
        return out


class HostDriver:
    """Brings up one controller and issues admin commands through its admin queue.

    Host DMA buffers get IOVAs from a private window so they never collide
    with guest-physical addresses in the shared per-device DMA table.
    """

    ADMIN_DEPTH = 64

    def __init__(self, ctrl: NvmeController, memory: HostMemory, iommu: Iommu,
                 iova_base: int, iova_size: int):
        self.ctrl = ctrl
        self.memory = memory
        self.iommu = iommu
        self.iova_base = iova_base
        self.iova_limit = iova_base + iova_size
        self._iova_next = iova_base
        self._admin_cid = 0
        self.queues: dict[int, HostQueue] = {}
        self.admin_commands = 0
        sq_hpa, sq_iova = self.dma_alloc(self.ADMIN_DEPTH * SQE_SIZE)
        cq_hpa, cq_iova = self.dma_alloc(self.ADMIN_DEPTH * CQE_SIZE)
        self._asq = SqProducer(memory, sq_hpa, self.ADMIN_DEPTH, 0)
        self._acq = CqConsumer(memory, cq_hpa, self.ADMIN_DEPTH, 0)
        self._ident_hpa, self._ident_iova = self.dma_alloc(IDENTIFY_SIZE)
        bar = ctrl.bar0_base
        memory.write32(bar + REG_AQA, ((self.ADMIN_DEPTH - 1) << 16) | (self.ADMIN_DEPTH - 1))
        memory.write64(bar + REG_ASQ, sq_iova)
        memory.write64(bar + REG_ACQ, cq_iova)
        memory.write32(bar + REG_CC, CC_EN | (6 << 16) | (4 << 20))

    def dma_alloc(self, size: int) -> tuple[int, int]:
        """Allocate host memory mapped for device DMA; returns (hpa, iova)."""
        size = -(-size // PAGE_SIZE) * PAGE_SIZE
        if self._iova_next + size > self.iova_limit:
            raise AllocationError("host IOVA window exhausted")
        hpa = self.memory.alloc(size)
        iova = self._iova_next
        self._iova_next += size
        self.iommu.table(self.ctrl.device_id).map_range(iova, hpa, size)
        return hpa, iova

    def admin(self, cmd: NvmeCommand) -> NvmeCompletion:
        self._admin_cid = (self._admin_cid + 1) & 0xFFFF
        cmd.cid = self._admin_cid
        tail = self._asq.push(cmd)
        self.memory.write32(self.ctrl.doorbell_addr(0, SQ_TAIL), tail)
        cpls = self._acq.poll()
        if len(cpls) != 1 or cpls[0].cid != cmd.cid:
            raise RuntimeError(f"admin queue protocol error: got {cpls}")
        self._asq.update_head(cpls[0].sq_head)
        self.memory.write32(self.ctrl.doorbell_addr(0, CQ_HEAD), self._acq.head)
        self.admin_commands += 1
        return cpls[0]

    def _check(self, cpl: NvmeCompletion, what: str) -> NvmeCompletion:
        if cpl.status:
            raise AdminError(what, cpl.status)
        return cpl

    def identify(self, cns: int = CNS_CONTROLLER, nsid: int = 0) -> bytes:
        cpl = self.admin(NvmeCommand(ADMIN_IDENTIFY, nsid=nsid, prp1=self._ident_iova,
                                     cdw10=cns))
        self._check(cpl, "IDENTIFY")
        return self.memory.read(self._ident_hpa, IDENTIFY_SIZE)

    def identify_namespace(self, nsid: int = 1) -> bytes:
        return self.identify(CNS_NAMESPACE, nsid)

    def set_num_queues(self, n: int) -> int:
        cpl = self._check(self.admin(NvmeCommand(
            ADMIN_SET_FEATURES, cdw10=FEAT_NUM_QUEUES, cdw11=((n - 1) << 16) | (n - 1))),
            "SET_FEATURES")
        return (cpl.result & 0xFFFF) + 1

    def create_cq(self, qid: int, depth: int, base: int, vector: int | None) -> NvmeCompletion:
        cdw11 = 0x1 | ((0x2 | (vector << 16)) if vector is not None else 0)
        return self.admin(NvmeCommand(ADMIN_CREATE_IO_CQ, prp1=base,
                                      cdw10=((depth - 1) << 16) | qid, cdw11=cdw11))

    def create_sq(self, qid: int, depth: int, base: int, cqid: int) -> NvmeCompletion:
        return self.admin(NvmeCommand(ADMIN_CREATE_IO_SQ, prp1=base,
                                      cdw10=((depth - 1) << 16) | qid,
                                      cdw11=(cqid << 16) | 0x1))

    def delete_sq(self, qid: int) -> NvmeCompletion:
        return self.admin(NvmeCommand(ADMIN_DELETE_IO_SQ, cdw10=qid))

    def delete_cq(self, qid: int) -> NvmeCompletion:
        return self.admin(NvmeCommand(ADMIN_DELETE_IO_CQ, cdw10=qid))

    def create_pair(self, qid: int, depth: int, sq_base: int, cq_base: int,
                    vector: int | None) -> None:
        self._check(self.create_cq(qid, depth, cq_base, vector), f"CREATE_IO_CQ {qid}")
        cpl = self.create_sq(qid, depth, sq_base, qid)
        if cpl.status:
            self.delete_cq(qid)
            raise AdminError(f"CREATE_IO_SQ {qid}", cpl.status)

    def delete_pair(self, qid: int) -> None:
        self._check(self.delete_sq(qid), f"DELETE_IO_SQ {qid}")
        self._check(self.delete_cq(qid), f"DELETE_IO_CQ {qid}")

    def create_host_queue(self, qid: int, depth: int, vector: int | None = None) -> HostQueue:
        """Create an I/O pair whose rings live in host memory."""
        sq_hpa, sq_iova = self.dma_alloc(depth * SQE_SIZE)
        cq_hpa, cq_iova = self.dma_alloc(depth * CQE_SIZE)
        self.create_pair(qid, depth, sq_iova, cq_iova, vector)
        q = HostQueue(self, qid, depth, sq_hpa, cq_hpa, sq_iova, cq_iova)
        self.queues[qid] = q
        return q

    def destroy_host_queue(self, qid: int) -> None:
        """Delete the pair and return its ring memory (the IOVA range is not reused)."""
        q = self.queues.pop(qid)
        self.delete_pair(qid)
        table = self.iommu.table(self.ctrl.device_id)
        for iova, hpa, size in ((q.sq_iova, q.sq.base, q.depth * SQE_SIZE),
                                (q.cq_iova, q.cq.base, q.depth * CQE_SIZE)):
            size = -(-size // PAGE_SIZE) * PAGE_SIZE
            table.unmap_range(iova, size)
            self.memory.release(hpa, size)
