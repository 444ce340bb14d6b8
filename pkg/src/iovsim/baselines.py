"""Comparison backends sharing the guest driver interface of the passthrough path.

virtio: the guest posts descriptor chains on a split virtqueue and kicks a
trapped notify register; the host copies payloads through bounce buffers,
drives its own NVMe queue and injects one interrupt per completed request.

vhost_poll: the guest drives a shadow NVMe queue in its own memory without
exiting; dedicated poller cores pick submissions and completions up one per
tick, forward commands zero-copy to a host NVMe queue and inject completions.
"""
from __future__ import annotations

import logging
import struct
from collections import deque
from dataclasses import dataclass, field

from .alloc import LbaAllocator, QidAllocator
from .lightiov.guest import GuestIoRequest, LocalIoError, check_request
from .mem import PAGE_SIZE, AllocationError
from .nvme.commands import NvmeCommand, NvmeCompletion
from .nvme.constants import (
    CQE_SIZE, IO_FLUSH, IO_READ, IO_WRITE, SC_DATA_XFER_ERROR, SC_INVALID_FIELD,
    SC_INVALID_NAMESPACE, SC_INVALID_OPCODE, SC_LBA_OUT_OF_RANGE, SQE_SIZE,
)
from .nvme.controller import prp_entry_count
from .nvme.hostdrv import HostQueue
from .nvme.queues import CQ_HEAD, CqConsumer, QueueFullError, SqProducer
from .platform import Platform
from .vm import Vm

log = logging.getLogger(__name__)

SECTOR = 512
VIRTIO_BLK_T_IN = 0
VIRTIO_BLK_T_OUT = 1
VIRTIO_BLK_S_OK = 0
VIRTIO_BLK_S_IOERR = 1
VRING_DESC_F_NEXT = 1
VRING_DESC_F_WRITE = 2

_DESC = struct.Struct("<QIHH")
_HDR = struct.Struct("<IIQ")


class ProvisionError(Exception):
    pass


@dataclass
class BaselineGrant:
    vm: object
    ssd: int
    depth: int
    qids: list[int]
    lba_start: int
    lba_size: int
    vectors: list[int] = field(default_factory=list)


class _BaselineHost:
    """LBA ranges, host queue ids and guest memory for baseline VMs."""

    def __init__(self, platform: Platform, queue_depth: int = 1024):
        self.platform = platform
        self.queue_depth = queue_depth
        self.grants: dict[object, BaselineGrant] = {}
        self._qids = [QidAllocator(s.ctrl.max_qpairs) for s in platform.ssds]
        self._lbas = [LbaAllocator(s.namespace.total_blocks) for s in platform.ssds]

    def _provision(self, vm, n_queues: int, capacity_blocks: int, ssd: int,
                   ram_bytes: int, depth: int | None) -> tuple[BaselineGrant, Vm]:
        plat = self.platform
        if vm in self.grants or vm in plat.vms:
            raise ProvisionError(f"vm {vm} is already provisioned")
        if self._qids[ssd].available() < n_queues:
            raise ProvisionError(f"queue exhaustion on ssd {ssd}: {n_queues} requested, "
                                 f"{self._qids[ssd].available()} free")
        try:
            start, size = self._lbas[ssd].alloc(vm, capacity_blocks)
        except AllocationError as exc:
            raise ProvisionError(f"LBA exhaustion on ssd {ssd}: {exc}") from None
        grant = BaselineGrant(vm, ssd, depth or self.queue_depth, [], start, size)
        try:
            ctx = plat.create_vm(vm, ram_bytes, ssd)
        except AllocationError as exc:
            self._lbas[ssd].release(vm)
            raise ProvisionError(str(exc)) from None
        self.grants[vm] = grant
        plat.ledger.record(vm, "lifecycle", origin="provision")
        return grant, ctx

    def _host_queue(self, grant: BaselineGrant, vector: int | None) -> HostQueue:
        s = self.platform.ssds[grant.ssd]
        qid = self._qids[grant.ssd].alloc()
        grant.qids.append(qid)
        hq = s.driver.create_host_queue(qid, grant.depth, vector)
        s.ctrl.set_owner(qid, grant.vm)
        return hq

    def teardown_vm(self, vm) -> None:
        plat = self.platform
        grant = self.grants.pop(vm, None)
        if grant is None:
            plat.ledger.record(vm, "spurious", origin="teardown_unknown")
            return
        s = plat.ssds[grant.ssd]
        if plat.sim is None:
            s.ctrl.service()
        for qid in grant.qids:
            s.driver.destroy_host_queue(qid)
            self._qids[grant.ssd].release(qid)
        for vec in grant.vectors:
            plat.unregister_host_vector(grant.ssd, vec)
            s.free_vector(vec)
        self._lbas[grant.ssd].release(vm)
        self._forget(vm)
        plat.destroy_vm(vm)
        plat.ledger.record(vm, "lifecycle", origin="teardown")

    def _forget(self, vm) -> None:
        pass


def _check_prps(ctx: Vm, mem, cmd: NvmeCommand, length: int) -> bool:
    """Host-side check that every data page and PRP list page lies in the VM's RAM."""
    if not ctx.in_ram(cmd.prp1):
        return False
    extra = prp_entry_count(cmd.prp1, length)
    if extra == 0:
        return True
    if extra == 1:
        return ctx.in_ram(cmd.prp2, PAGE_SIZE)
    if not ctx.in_ram(cmd.prp2, extra * 8):
        return False
    raw = mem.read(cmd.prp2, extra * 8)
    return all(ctx.in_ram(a, PAGE_SIZE) for a in struct.unpack(f"<{extra}Q", raw))


# ===================================================================== virtio

@dataclass
class Virtqueue:
    """Split-ring layout in guest memory."""

    index: int
    size: int
    desc: int
    avail: int
    used: int
    headers: int
    status: int

    @staticmethod
    def layout_bytes(size: int) -> int:
        return 3 * size * _DESC.size + (4 + 2 * size) + (4 + 8 * size) + 16 * size + size + 64


class VirtioHost(_BaselineHost):
    """Host backend for para-virtual block devices."""

    name = "virtio"

    def __init__(self, platform: Platform, queue_depth: int = 1024):
        super().__init__(platform, queue_depth)
        self._vqs: dict[object, list] = {}
        self.notify_gpa: dict[object, int] = {}

    def provision_vm(self, vm, n_queues: int, capacity_blocks: int, ssd: int = 0,
                     ram_bytes: int = 1 << 20, depth: int | None = None) -> BaselineGrant:
        grant, ctx = self._provision(vm, n_queues, capacity_blocks, ssd, ram_bytes, depth)
        s = self.platform.ssds[ssd]
        try:
            qs = []
            for i in range(n_queues):
                vec = s.alloc_vector()
                grant.vectors.append(vec)
                hq = self._host_queue(grant, vec)
                state = _VirtioHostQueue(self, grant, ctx, i, hq)
                self.platform.register_host_vector(ssd, vec, state.on_device_irq)
                qs.append(state)
            self._vqs[vm] = qs
            gpa = self.platform.alloc_aperture(ctx, PAGE_SIZE)
            ctx.add_trap(gpa, PAGE_SIZE, self._notify_trap(vm))
            self.notify_gpa[vm] = gpa
        except (AllocationError, RuntimeError) as exc:
            self.teardown_vm(vm)
            raise ProvisionError(f"provisioning vm {vm} failed: {exc}") from None
        return grant

    def _notify_trap(self, vm):
        def trap(offset: int, size: int, is_write: bool, value: int) -> int:
            qs = self._vqs.get(vm, [])
            if is_write and 0 <= value < len(qs):
                qs[value].kick()
            else:
                self.platform.ledger.record(vm, "vm_exit", origin="notify")
            return 0
        return trap

    def attach(self, vm, index: int, vq: Virtqueue, guest) -> None:
        self._vqs[vm][index].attach(vq, guest)

    def _forget(self, vm) -> None:
        self._vqs.pop(vm, None)
        self.notify_gpa.pop(vm, None)


class _VirtioHostQueue:
    def __init__(self, host: VirtioHost, grant: BaselineGrant, ctx: Vm, index: int,
                 hq: HostQueue):
        self.host = host
        self.plat = host.platform
        self.grant = grant
        self.ctx = ctx
        self.index = index
        self.hq = hq
        self.mem = self.plat.guest_memory(grant.vm)
        self.vq: Virtqueue | None = None
        self.guest = None
        self.last_avail = 0
        self.used_idx = 0
        self.backlog: deque = deque()
        self._bounce: dict[int, tuple] = {}  # head -> (user hpa, kernel hpa, kernel iova, size)
        self._prp_lists: dict[int, tuple] = {}  # head -> (hpa, iova) of its PRP list page

    def attach(self, vq: Virtqueue, guest) -> None:
        self.vq = vq
        self.guest = guest

    def kick(self) -> None:
        vq = self.vq
        idx = struct.unpack("<H", self.mem.read(vq.avail + 2, 2))[0]
        heads = []
        i = self.last_avail
        while i != idx:
            heads.append(struct.unpack("<H", self.mem.read(vq.avail + 4 + 2 * (i % vq.size), 2))[0])
            i = (i + 1) & 0xFFFF
        self.last_avail = idx
        tags = tuple(self.guest.tag_of(self.index, h) for h in heads)
        self.plat.ledger.record(self.grant.vm, "vm_exit", origin="kick", reqs=tags)
        self.plat.defer(self.plat.cost.vm_exit_ns, self._process, heads)

    def _desc(self, i: int) -> tuple[int, int, int, int]:
        return _DESC.unpack(self.mem.read(self.vq.desc + i * _DESC.size, _DESC.size))

    def _buffers(self, size: int, head: int) -> tuple:
        cur = self._bounce.get(head)
        if cur is None or cur[3] < size:
            drv = self.plat.ssds[self.grant.ssd].driver
            size = -(-size // PAGE_SIZE) * PAGE_SIZE
            user = self.plat.memory.alloc(size)
            khpa, kiova = drv.dma_alloc(size)
            cur = self._bounce[head] = (user, khpa, kiova, size)
        return cur

    def _process(self, heads: list[int]) -> None:
        for head in heads:
            self._start(head)

    def _start(self, head: int) -> None:
        hdr_addr, _, _, nxt = self._desc(head)
        rtype, _, sector = _HDR.unpack(self.mem.read(hdr_addr, _HDR.size))
        data_addr, length, _, snext = self._desc(nxt)
        status_addr = self._desc(snext)[0]
        tag = self.guest.tag_of(self.index, head)
        bs = self.plat.ssds[self.grant.ssd].namespace.block_size
        per = bs // SECTOR
        blocks = length // bs
        vlba = sector // per
        ok = (rtype in (VIRTIO_BLK_T_IN, VIRTIO_BLK_T_OUT) and length and length % bs == 0
              and sector % per == 0 and vlba + blocks <= self.grant.lba_size
              and self.ctx.in_ram(data_addr, length))
        if not ok:
            self._finish(head, status_addr, VIRTIO_BLK_S_IOERR, tag, 0)
            return
        user, khpa, kiova, _ = self._buffers(length, head)
        op = IO_WRITE if rtype == VIRTIO_BLK_T_OUT else IO_READ
        ctxt = (head, status_addr, data_addr, length, user, khpa, op, tag)
        cmd = self._nvme(op, vlba + self.grant.lba_start, blocks, kiova, length, head)
        if op == IO_WRITE:
            mem = self.plat.memory
            mem.write(user, self.mem.read(data_addr, length))
            self.plat.ledger.record(self.grant.vm, "data_copy", nbytes=length,
                                    origin="guest_to_host", reqs=(tag,))
            mem.write(khpa, mem.read(user, length))
            self.plat.ledger.record(self.grant.vm, "data_copy", nbytes=length,
                                    origin="host_to_device", reqs=(tag,))
            self.plat.defer(2 * self.plat.cost.copy_ns_per_byte * length,
                            self._submit, cmd, ctxt)
        else:
            self._submit(cmd, ctxt)

    def _nvme(self, op: int, slba: int, blocks: int, iova: int, length: int,
              head: int) -> NvmeCommand:
        extra = prp_entry_count(iova, length)
        prp2 = 0
        if extra == 1:
            prp2 = iova + PAGE_SIZE
        elif extra > 1:
            lst, lst_iova = self._prp_lists.get(head) or (None, None)
            if lst is None:
                drv = self.plat.ssds[self.grant.ssd].driver
                lst, lst_iova = self._prp_lists[head] = drv.dma_alloc(PAGE_SIZE)
            self.plat.memory.write(lst, struct.pack(
                f"<{extra}Q", *(iova + (i + 1) * PAGE_SIZE for i in range(extra))))
            prp2 = lst_iova
        return NvmeCommand.io(op, 0, 1, slba, blocks - 1, iova, prp2)

    def _submit(self, cmd: NvmeCommand, ctxt) -> None:
        if self.hq.full():
            self.backlog.append((cmd, ctxt))
            return
        self.hq.submit(cmd, ctxt, label=ctxt[-1])

    def on_device_irq(self, ctrl, vector) -> None:
        for cpl, ctxt in self.hq.reap():
            head, status_addr, data_addr, length, user, khpa, op, tag = ctxt
            status = VIRTIO_BLK_S_OK if cpl.ok else VIRTIO_BLK_S_IOERR
            if op == IO_READ and cpl.ok:
                mem = self.plat.memory
                mem.write(user, mem.read(khpa, length))
                self.plat.ledger.record(self.grant.vm, "data_copy", nbytes=length,
                                        origin="device_to_host", reqs=(tag,))
                self.mem.write(data_addr, mem.read(user, length))
                self.plat.ledger.record(self.grant.vm, "data_copy", nbytes=length,
                                        origin="host_to_guest", reqs=(tag,))
                self.plat.defer(2 * self.plat.cost.copy_ns_per_byte * length,
                                self._finish, head, status_addr, status, tag, length)
            else:
                self._finish(head, status_addr, status, tag, length if cpl.ok else 0)
        while self.backlog and not self.hq.full():
            cmd, ctxt = self.backlog.popleft()
            self.hq.submit(cmd, ctxt, label=ctxt[-1])

    def _finish(self, head: int, status_addr: int, status: int, tag, written: int) -> None:
        if self.grant.vm not in self.plat.vms:
            return
        vq = self.vq
        self.mem.write(status_addr, bytes([status]))
        slot = self.used_idx % vq.size
        self.mem.write(vq.used + 4 + 8 * slot, struct.pack("<II", head, written))
        self.used_idx = (self.used_idx + 1) & 0xFFFF
        self.mem.write(vq.used + 2, struct.pack("<H", self.used_idx))
        self.plat.inject(self.grant.vm, self.guest.irq_handler(self.index), reqs=(tag,),
                         origin="virtio")


class VirtioGuest:
    """virtio-blk style frontend. Kicks are coalesced per simulated instant."""

    def __init__(self, platform: Platform, host: VirtioHost, vm):
        self.platform = platform
        self.host = host
        self.vm = vm
        self.ctx = platform.vms.get(vm)
        self.mem = platform.guest_memory(vm) if self.ctx is not None else None
        self.on_complete = None
        self.armed_ts = None
        self.rejected = 0
        self.auto_kick = True
        self.queues: list[dict] = []
        self._kick_pending: set[int] = set()

    def init(self) -> VirtioGuest:
        grant = self.host.grants.get(self.vm)
        if grant is None:
            raise ProvisionError(f"vm {self.vm} is not provisioned")
        self._lba_size = grant.lba_size
        self._bs = self.platform.ssds[grant.ssd].namespace.block_size
        size = grant.depth
        for i in range(len(grant.qids)):
            base = self.ctx.ram_alloc(Virtqueue.layout_bytes(size))
            desc = base
            avail = desc + 3 * size * _DESC.size
            used = -(-(avail + 4 + 2 * size) // 4) * 4
            headers = -(-(used + 4 + 8 * size) // 16) * 16
            status = headers + 16 * size
            vq = Virtqueue(i, size, desc, avail, used, headers, status)
            self.host.attach(self.vm, i, vq, self)
            self.queues.append({"vq": vq, "free": list(range(size - 1, -1, -1)),
                                "avail_idx": 0, "last_used": 0, "tags": {}, "reqs": {}})
        self.armed_ts = self.platform.now
        return self

    @property
    def n_queues(self) -> int:
        return len(self.queues)

    @property
    def lba_size(self) -> int:
        return self._lba_size

    @property
    def block_size(self) -> int:
        return self._bs

    def full(self, queue: int = 0) -> bool:
        return not self.queues[queue]["free"]

    def tag_of(self, queue: int, head: int):
        return self.queues[queue]["tags"].get(head)

    def submit(self, req: GuestIoRequest, queue: int = 0) -> int:
        try:
            length = check_request(req, self._lba_size, self._bs, self.ctx.in_ram)
        except LocalIoError:
            self.rejected += 1
            raise
        q = self.queues[queue]
        if not q["free"]:
            raise QueueFullError(f"vm {self.vm} virtqueue {queue} full")
        slot = q["free"].pop()
        vq = q["vq"]
        d0, d1, d2 = 3 * slot, 3 * slot + 1, 3 * slot + 2
        hdr = vq.headers + 16 * slot
        rtype = VIRTIO_BLK_T_OUT if req.op == "write" else VIRTIO_BLK_T_IN
        self.mem.write(hdr, _HDR.pack(rtype, 0, req.vlba * (self._bs // SECTOR)))
        wflag = VRING_DESC_F_WRITE if req.op == "read" else 0
        self.mem.write(vq.desc + d0 * _DESC.size, _DESC.pack(hdr, 16, VRING_DESC_F_NEXT, d1))
        self.mem.write(vq.desc + d1 * _DESC.size,
                       _DESC.pack(req.buffer_gpa, length, VRING_DESC_F_NEXT | wflag, d2))
        self.mem.write(vq.desc + d2 * _DESC.size,
                       _DESC.pack(vq.status + slot, 1, VRING_DESC_F_WRITE, 0))
        q["tags"][d0] = req.tag
        q["reqs"][d0] = req
        a = q["avail_idx"]
        self.mem.write(vq.avail + 4 + 2 * (a % vq.size), struct.pack("<H", d0))
        q["avail_idx"] = (a + 1) & 0xFFFF
        self.mem.write(vq.avail + 2, struct.pack("<H", q["avail_idx"]))
        if self.auto_kick:
            self._schedule_kick(queue)
        return d0

    def _schedule_kick(self, queue: int) -> None:
        sim = self.platform.sim
        if sim is None:
            self.kick(queue)
        elif queue not in self._kick_pending:
            self._kick_pending.add(queue)
            sim.call_soon(self.kick, queue)

    def kick(self, queue: int = 0) -> None:
        """Notify the host of everything posted since the previous kick (one exit)."""
        self._kick_pending.discard(queue)
        if self.vm in self.platform.vms:
            self.mem.write32(self.host.notify_gpa[self.vm], queue)

    def irq_handler(self, queue: int):
        return lambda: self.poll_completions(queue)

    def poll_completions(self, queue: int | None = None) -> list:
        out = []
        if self.vm not in self.platform.vms:
            return out
        for i in (range(len(self.queues)) if queue is None else (queue,)):
            q = self.queues[i]
            vq = q["vq"]
            idx = struct.unpack("<H", self.mem.read(vq.used + 2, 2))[0]
            while q["last_used"] != idx:
                slot = q["last_used"] % vq.size
                head, _ = struct.unpack("<II", self.mem.read(vq.used + 4 + 8 * slot, 8))
                q["last_used"] = (q["last_used"] + 1) & 0xFFFF
                req = q["reqs"].pop(head)
                q["tags"].pop(head, None)
                st = self.mem.read(vq.status + head // 3, 1)[0]
                q["free"].append(head // 3)
                status = 0 if st == VIRTIO_BLK_S_OK else SC_DATA_XFER_ERROR
                out.append((req.tag, status))
                if self.on_complete is not None:
                    self.on_complete(req, status)
        return out


# ===================================================================== vhost polling

@dataclass
class ShadowQueue:
    vm: object
    index: int
    depth: int
    sq: int  # guest-physical ring bases
    cq: int
    db: int  # guest-physical word pair: sq tail, cq head
    hq: HostQueue | None = None
    ctx: Vm | None = None
    mem: object = None
    guest: object = None
    sq_head: int = 0
    cq_tail: int = 0
    cq_phase: int = 1
    done: deque = field(default_factory=deque)  # (guest cid, status) awaiting post
    core: int = 0


@dataclass
class PollerCore:
    index: int
    ready: deque = field(default_factory=deque)
    in_ready: set = field(default_factory=set)
    running: bool = False
    idle_since: float = 0.0
    cycles: int = 0
    serviced: int = 0


class VhostPollHost(_BaselineHost):
    """Dedicated polling cores servicing per-VM shadow queues."""

    name = "vhost_poll"

    def __init__(self, platform: Platform, cores: int = 1, queue_depth: int = 1024):
        if cores < 1:
            raise ValueError("vhost polling needs at least one poller core")
        super().__init__(platform, queue_depth)
        self.cores = [PollerCore(i) for i in range(cores)]
        self.shadow: dict[object, list[ShadowQueue]] = {}
        self._by_qid: dict[tuple[int, int], ShadowQueue] = {}
        self._vm_order: dict[object, int] = {}
        self._started = platform.now
        for c in self.cores:
            c.idle_since = self._started
        for s in platform.ssds:
            s.ctrl.completion_listeners.append(self._on_device_completion)

    @property
    def tick_ns(self) -> float:
        return self.platform.cost.poller_tick_ns

    def provision_vm(self, vm, n_queues: int, capacity_blocks: int, ssd: int = 0,
                     ram_bytes: int = 1 << 20, depth: int | None = None) -> BaselineGrant:
        grant, ctx = self._provision(vm, n_queues, capacity_blocks, ssd, ram_bytes, depth)
        core = len(self._vm_order) % len(self.cores)
        self._vm_order[vm] = core
        qs = []
        try:
            for i in range(n_queues):
                hq = self._host_queue(grant, None)
                d = grant.depth
                sq = ctx.ram_alloc(d * SQE_SIZE)
                cq = ctx.ram_alloc(d * CQE_SIZE)
                db = ctx.ram_alloc(8, 8)
                q = ShadowQueue(vm, i, d, sq, cq, db, hq, ctx, self.platform.guest_memory(vm),
                                core=core)
                qs.append(q)
                self._by_qid[(ssd, hq.qid)] = q
        except (AllocationError, RuntimeError) as exc:
            self.shadow[vm] = qs
            self.teardown_vm(vm)
            raise ProvisionError(f"provisioning vm {vm} failed: {exc}") from None
        self.shadow[vm] = qs
        return grant

    def _forget(self, vm) -> None:
        for q in self.shadow.pop(vm, []):
            for c in self.cores:
                c.in_ready.discard(id(q))
        self._by_qid = {k: v for k, v in self._by_qid.items() if v.vm != vm}
        for c in self.cores:
            c.ready = deque(q for q in c.ready if q.vm != vm)

    # ---------------------------------------------------------------- work discovery
    def notify(self, q: ShadowQueue) -> None:
        """Work appeared on ``q``; the owning core sees it at its next tick."""
        core = self.cores[q.core]
        if id(q) not in core.in_ready:
            core.in_ready.add(id(q))
            core.ready.append(q)
        self._wake(core)

    def _on_device_completion(self, ctrl, sq, cpl) -> None:
        q = self._by_qid.get((ctrl.device_id, sq.qid))
        if q is not None:
            self.notify(q)

    def _wake(self, core: PollerCore) -> None:
        sim = self.platform.sim
        if sim is None or core.running:
            return
        core.running = True
        tick = self.tick_ns
        if tick <= 0:
            sim.call_soon(self._run_tick, core)
            return
        n = -(-(sim.now - self._started) // tick)
        when = self._started + n * tick
        idle = int(round((when - core.idle_since) / tick))
        if idle > 0:
            core.cycles += idle
            self.platform.ledger.record(None, "poller_cycle", nbytes=idle,
                                        origin=f"idle:{core.index}")
        sim.at(when, self._run_tick, core)

    def _run_tick(self, core: PollerCore) -> None:
        sim = self.platform.sim
        item = self._step(core)
        if item is None:
            core.running = False
            core.idle_since = sim.now
            return
        core.cycles += 1
        sim.after(self.tick_ns, self._run_tick, core)

    def vhost_poll_tick(self) -> int:
        """Advance every core by one tick (manual stepping); returns items serviced."""
        n = 0
        for core in self.cores:
            core.cycles += 1
            if self._step(core) is not None:
                n += 1
        return n

    def poller_cycles(self, now: float | None = None) -> int:
        """Ticks consumed by all cores, idle ones included, up to ``now``."""
        total = 0
        now = self.platform.now if now is None else now
        for c in self.cores:
            total += c.cycles
            if not c.running and self.platform.sim is not None and self.tick_ns > 0:
                total += int((now - c.idle_since) // self.tick_ns)
        return total

    # ---------------------------------------------------------------- servicing
    def _has_work(self, q: ShadowQueue) -> bool:
        if q.done or (q.hq is not None and q.hq.cq.peek() is not None):
            return True
        tail = q.mem.read32(q.db)
        return tail != q.sq_head

    def _step(self, core: PollerCore):
        """Service one item from the next ready queue, round-robin."""
        while core.ready:
            q = core.ready.popleft()
            core.in_ready.discard(id(q))
            if q.vm not in self.shadow or not self._has_work(q):
                continue
            item = self._service(q)
            if item is None:
                continue  # guest CQ full; the guest's head update re-arms it
            core.serviced += 1
            if self._has_work(q):
                core.in_ready.add(id(q))
                core.ready.append(q)
            return item
        return None

    def _service(self, q: ShadowQueue):
        plat = self.platform
        delay = self.tick_ns if plat.sim is not None else 0.0
        if q.done or q.hq.cq.peek() is not None:
            if not q.done:
                cpl = q.hq.cq.poll(limit=1)[0]
                q.hq.sq.update_head(cpl.sq_head)
                gcid, tag = q.hq.outstanding.pop(cpl.cid)
                q.hq._cids.append(cpl.cid)
                plat.memory.write32(q.hq.drv.ctrl.doorbell_addr(q.hq.qid, CQ_HEAD),
                                    q.hq.cq.head)
                q.done.append((gcid, cpl.status, tag))
            gcid, status, tag = q.done[0]
            if (q.cq_tail + 1) % q.depth == q.mem.read32(q.db + 4) % q.depth:
                return None  # guest CQ full; retry on a later tick
            q.done.popleft()
            plat.ledger.record(q.vm, "poller_cycle", nbytes=1, origin="complete", reqs=(tag,))
            plat.defer(delay, self._post, q, gcid, status, tag)
            return "complete"
        raw = q.mem.read(q.sq + q.sq_head * SQE_SIZE, SQE_SIZE)
        q.sq_head = (q.sq_head + 1) % q.depth
        cmd = NvmeCommand.decode(raw)
        tag = q.guest.tag_of(q.index, cmd.cid) if q.guest is not None else None
        plat.ledger.record(q.vm, "poller_cycle", nbytes=1, origin="submit", reqs=(tag,))
        status = self._validate(q, cmd)
        if status:
            q.done.append((cmd.cid, status, tag))
            return "reject"
        plat.defer(delay, self._forward, q, cmd, tag)
        return "submit"

    def _validate(self, q: ShadowQueue, cmd: NvmeCommand) -> int:
        grant = self.grants[q.vm]
        if cmd.opcode == IO_FLUSH:
            return 0
        if cmd.opcode not in (IO_READ, IO_WRITE):
            return SC_INVALID_OPCODE
        if cmd.nsid != 1:
            return SC_INVALID_NAMESPACE
        if cmd.slba + cmd.nlb + 1 > grant.lba_size:
            return SC_LBA_OUT_OF_RANGE
        bs = self.platform.ssds[grant.ssd].namespace.block_size
        if not _check_prps(q.ctx, q.mem, cmd, (cmd.nlb + 1) * bs):
            return SC_INVALID_FIELD
        return 0

    def _forward(self, q: ShadowQueue, cmd: NvmeCommand, tag) -> None:
        if q.vm not in self.shadow:
            return
        gcid = cmd.cid
        if cmd.opcode != IO_FLUSH:
            slba = cmd.slba + self.grants[q.vm].lba_start
            cmd.cdw10, cmd.cdw11 = slba & 0xFFFFFFFF, slba >> 32
        q.hq.submit(cmd, (gcid, tag), label=tag)

    def _post(self, q: ShadowQueue, gcid: int, status: int, tag) -> None:
        if q.vm not in self.shadow:
            return
        cpl = NvmeCompletion(0, q.sq_head, q.index + 1, gcid, status, q.cq_phase)
        q.mem.write(q.cq + q.cq_tail * CQE_SIZE, cpl.encode())
        q.cq_tail += 1
        if q.cq_tail == q.depth:
            q.cq_tail = 0
            q.cq_phase ^= 1
        self.platform.inject(q.vm, q.guest.irq_handler(q.index), reqs=(tag,), origin="vhost")

    def attach(self, vm, guest) -> list[ShadowQueue]:
        for q in self.shadow[vm]:
            q.guest = guest
        return self.shadow[vm]


class VhostGuest:
    """Guest NVMe driver whose queues are shadowed by the host pollers."""

    def __init__(self, platform: Platform, host: VhostPollHost, vm):
        self.platform = platform
        self.host = host
        self.vm = vm
        self.ctx = platform.vms.get(vm)
        self.mem = platform.guest_memory(vm) if self.ctx is not None else None
        self.on_complete = None
        self.armed_ts = None
        self.rejected = 0
        self.rings: list[dict] = []

    def init(self) -> VhostGuest:
        grant = self.host.grants.get(self.vm)
        if grant is None:
            raise ProvisionError(f"vm {self.vm} is not provisioned")
        self._lba_size = grant.lba_size
        self._bs = self.platform.ssds[grant.ssd].namespace.block_size
        for q in self.host.attach(self.vm, self):
            self.rings.append({
                "shadow": q,
                "sq": SqProducer(self.mem, q.sq, q.depth, q.index + 1),
                "cq": CqConsumer(self.mem, q.cq, q.depth, q.index + 1),
                "free": list(range(q.depth - 1, -1, -1)),
                "out": {}, "prp": {},
            })
        self.armed_ts = self.platform.now
        return self

    @property
    def n_queues(self) -> int:
        return len(self.rings)

    @property
    def lba_size(self) -> int:
        return self._lba_size

    @property
    def block_size(self) -> int:
        return self._bs

    def full(self, queue: int = 0) -> bool:
        r = self.rings[queue]
        return r["sq"].full() or not r["free"]

    def tag_of(self, queue: int, cid: int):
        req = self.rings[queue]["out"].get(cid)
        return req.tag if req is not None else None

    def submit(self, req: GuestIoRequest, queue: int = 0) -> int:
        try:
            length = check_request(req, self._lba_size, self._bs, self.ctx.in_ram)
        except LocalIoError:
            self.rejected += 1
            raise
        r = self.rings[queue]
        if self.full(queue):
            raise QueueFullError(f"vm {self.vm} shadow queue {queue} full")
        cid = r["free"].pop()
        prp2 = 0
        extra = prp_entry_count(req.buffer_gpa, length)
        second = (req.buffer_gpa & ~(PAGE_SIZE - 1)) + PAGE_SIZE
        if extra == 1:
            prp2 = second
        elif extra > 1:
            lst = r["prp"].get(cid)
            if lst is None:
                lst = r["prp"][cid] = self.ctx.ram_alloc(PAGE_SIZE)
            self.mem.write(lst, struct.pack(f"<{extra}Q",
                                            *(second + i * PAGE_SIZE for i in range(extra))))
            prp2 = lst
        cmd = NvmeCommand.io(IO_WRITE if req.op == "write" else IO_READ, cid, 1, req.vlba,
                             req.blocks - 1, req.buffer_gpa, prp2)
        r["out"][cid] = req
        tail = r["sq"].push(cmd)
        q = r["shadow"]
        self.mem.write32(q.db, tail)
        self.platform.ledger.record(self.vm, "doorbell", origin="shadow_tail", reqs=(req.tag,))
        self.host.notify(q)
        return cid

    def irq_handler(self, queue: int):
        return lambda: self.poll_completions(queue)

    def poll_completions(self, queue: int | None = None) -> list:
        out = []
        if self.vm not in self.platform.vms:
            return out
        for i in (range(len(self.rings)) if queue is None else (queue,)):
            r = self.rings[i]
            cpls = r["cq"].poll()
            for c in cpls:
                r["sq"].update_head(c.sq_head)
                req = r["out"].pop(c.cid, None)
                if req is None:
                    self.platform.ledger.record(self.vm, "spurious", origin="unknown_cid")
                    continue
                r["free"].append(c.cid)
                out.append((req.tag, c.status))
                if self.on_complete is not None:
                    self.on_complete(req, c.status)
            if cpls:
                self.mem.write32(r["shadow"].db + 4, r["cq"].head)
                if r["shadow"].done:
                    self.host.notify(r["shadow"])
        return out
