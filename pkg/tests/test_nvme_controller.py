import struct

import pytest

from iovsim.mem import HostMemory, Iommu
from iovsim.nvme.cmb import CmbRegion
from iovsim.nvme.commands import NvmeCommand
from iovsim.nvme.constants import (
    ADMIN_CREATE_IO_CQ, ADMIN_CREATE_IO_SQ, ADMIN_DELETE_IO_CQ, ADMIN_DELETE_IO_SQ,
    CNS_CONTROLLER, CNS_NAMESPACE, IO_FLUSH, PAGE_SIZE, REG_CC, REG_CSTS, SC_CQ_INVALID,
    SC_DATA_XFER_ERROR, SC_INVALID_FIELD, SC_INVALID_OPCODE, SC_INVALID_QID,
    SC_INVALID_QUEUE_DELETION, SC_LBA_OUT_OF_RANGE, SC_SUCCESS,
)
from iovsim.nvme.controller import ControllerError, NvmeController, prp_entry_count
from iovsim.nvme.hostdrv import HostDriver
from iovsim.nvme.identify import parse_identify_controller, parse_identify_namespace
from iovsim.nvme.namespace import Namespace
from iovsim.nvme.queues import CQ_HEAD, SQ_TAIL, DoorbellRegister
from iovsim.mem import AllocationError
from iovsim.platform import Platform, SsdConfig

from conftest import io_cmd


@pytest.fixture
def dev(plat):
    s = plat.ssds[0]
    return s.ctrl, s.driver


def make_pair(drv, qid, depth=128):
    sq, sq_iova = drv.dma_alloc(depth * 64)
    cq, cq_iova = drv.dma_alloc(depth * 16)
    return (drv.create_cq(qid, depth, cq_iova, None),
            drv.create_sq(qid, depth, sq_iova, qid))


# ------------------------------------------------------------------ admin

def test_create_sq_after_cq(dev):
    ctrl, drv = dev
    cq, sq = make_pair(drv, 1)
    assert (cq.status, sq.status) == (SC_SUCCESS, SC_SUCCESS)
    assert ctrl.qpairs[1].has_sq and ctrl.registered_pairs() == 1


def test_create_highest_qid(dev):
    ctrl, drv = dev
    cq, sq = make_pair(drv, 65535, depth=2)
    assert sq.status == SC_SUCCESS


def test_delete_nonexistent_sq(dev):
    _, drv = dev
    assert drv.delete_sq(7).status == SC_INVALID_QID


def test_create_sq_without_cq(dev):
    _, drv = dev
    _, iova = drv.dma_alloc(4096)
    assert drv.create_sq(3, 16, iova, 3).status == SC_CQ_INVALID


def test_duplicate_qid_rejected(dev):
    _, drv = dev
    make_pair(drv, 1)
    cq, sq = make_pair(drv, 1)
    assert cq.status == SC_INVALID_QID and sq.status == SC_INVALID_QID


def test_qid_beyond_max():
    p = Platform(1, ssd=SsdConfig(capacity_bytes=1 << 30, cmb_bytes=1 << 20, max_qpairs=4),
                 timed=False)
    drv = p.ssds[0].driver
    for q in range(1, 5):
        assert make_pair(drv, q, 2)[1].status == SC_SUCCESS
    assert make_pair(drv, 5, 2)[0].status == SC_INVALID_QID


def test_unsupported_admin_opcode(dev):
    _, drv = dev
    assert drv.admin(NvmeCommand(0x7F)).status == SC_INVALID_OPCODE


def test_delete_cq_with_live_sq(dev):
    _, drv = dev
    make_pair(drv, 2)
    assert drv.delete_cq(2).status == SC_INVALID_QUEUE_DELETION
    assert drv.delete_sq(2).status == SC_SUCCESS
    assert drv.delete_cq(2).status == SC_SUCCESS


def test_pair_count_follows_deletes(dev):
    ctrl, drv = dev
    drv.create_pair(1, 16, drv.dma_alloc(1024)[1], drv.dma_alloc(256)[1], None)
    assert ctrl.registered_pairs() == 1
    drv.delete_pair(1)
    assert ctrl.registered_pairs() == 0 and 1 not in ctrl.qpairs


def test_identify(dev):
    _, drv = dev
    c = parse_identify_controller(drv.identify(CNS_CONTROLLER))
    assert c["max_qpairs"] == 65535 and c["vid"] == 0x1D1D
    n = parse_identify_namespace(drv.identify_namespace(1))
    assert n["nsze"] == (1 << 30) // 4096 and n["block_size"] == 4096


def test_set_features_number_of_queues(dev):
    _, drv = dev
    assert drv.set_num_queues(8) == 8


def test_enable_sequence():
    mem, iommu = HostMemory(), Iommu()
    ctrl = NvmeController(0, mem, iommu, Namespace(1, 4096, 16), bar0_base=1 << 40)
    with pytest.raises(ControllerError):
        mem.write32((1 << 40) + REG_CC, 1)  # no admin queue configured
    drv = HostDriver(ctrl, mem, iommu, 1 << 41, 1 << 30)
    assert mem.read32((1 << 40) + REG_CSTS) & 1
    mem.write32((1 << 40) + REG_CC, 0)
    assert not ctrl.ready and not ctrl.qpairs
    assert drv.memory is mem


def test_admin_requires_ready():
    ctrl = NvmeController(0, HostMemory(), Iommu(), Namespace(1, 4096, 16))
    with pytest.raises(ControllerError):
        ctrl.admin_execute(NvmeCommand(0x06))


# ------------------------------------------------------------------ doorbells / processing

def hold(ctrl):
    ctrl.auto_process = False


def test_single_submission_fetched(dev):
    ctrl, drv = dev
    q = drv.create_host_queue(1, 16)
    buf, iova = drv.dma_alloc(4096)
    q.submit(io_cmd("read", 0, 1, iova))
    assert ctrl.commands_fetched == 1
    (cpl, _), = q.reap()
    assert cpl.status == SC_SUCCESS


def test_doorbell_value_at_depth_is_queue_error(dev):
    ctrl, drv = dev
    q = drv.create_host_queue(1, 16)
    ctrl.ring_doorbell(DoorbellRegister(1, SQ_TAIL), 16)
    assert ctrl.qpairs[1].error and ctrl.commands_fetched == 0
    assert q.qid == 1


def test_unknown_qid_doorbell_is_spurious(plat):
    ctrl = plat.ssds[0].ctrl
    ctrl.ring_doorbell(DoorbellRegister(99, SQ_TAIL), 1)
    assert plat.ledger.count("spurious") == 1


def test_fifo_on_one_queue(dev):
    ctrl, drv = dev
    hold(ctrl)
    q = drv.create_host_queue(1, 128)
    _, iova = drv.dma_alloc(4096)
    cids = [q.submit(io_cmd("read", i, 1, iova)) for i in range(3)]
    out = ctrl.process_sq(1)
    assert [c.cid for c in out] == cids
    assert [c.cid for c, _ in q.reap()] == cids


def test_cq_depth_two_defers_completions(dev):
    ctrl, drv = dev
    hold(ctrl)
    sq, sq_iova = drv.dma_alloc(4096)
    cq, cq_iova = drv.dma_alloc(4096)
    drv.create_cq(1, 2, cq_iova, None)
    drv.create_sq(1, 4, sq_iova, 1)
    from iovsim.nvme.hostdrv import HostQueue
    q = HostQueue(drv, 1, 4, sq, cq, sq_iova, cq_iova)
    q.cq.depth = 2
    _, buf = drv.dma_alloc(4096)
    for i in range(3):
        q.submit(io_cmd("read", i, 1, buf))
    assert len(ctrl.service()) == 1  # a depth-2 CQ holds one entry
    assert ctrl.qpairs[1].sq_pending() == 2
    assert len(q.reap()) == 1  # head doorbell releases the slot
    assert len(ctrl.service()) == 1
    assert len(q.reap()) == 1
    ctrl.service()
    assert len(q.reap()) == 1
    assert ctrl.completions_posted - 0 >= 3


def test_round_robin_between_queues(dev):
    ctrl, drv = dev
    hold(ctrl)
    a, b = drv.create_host_queue(1, 16), drv.create_host_queue(2, 16)
    _, buf = drv.dma_alloc(4096)
    for _ in range(2):
        a.submit(io_cmd("read", 0, 1, buf))
    for _ in range(2):
        b.submit(io_cmd("read", 0, 1, buf))
    start = len(ctrl.fetch_log)
    ctrl.service()
    assert [f.qid for f in ctrl.fetch_log[start:]] == [1, 2, 1, 2]


def test_cq_head_full_drain_clears_interrupt(dev):
    ctrl, drv = dev
    q = drv.create_host_queue(1, 16)
    _, buf = drv.dma_alloc(4096)
    q.submit(io_cmd("read", 0, 1, buf))
    assert ctrl.qpairs[1].irq_pending
    q.reap()
    assert not ctrl.qpairs[1].irq_pending
    assert ctrl.qpairs[1].cq_used() == 0


# ------------------------------------------------------------------ execute_io

def test_write_read_roundtrip(plat):
    drv = plat.ssds[0].driver
    q = drv.create_host_queue(1, 16)
    hpa, iova = drv.dma_alloc(8192)
    plat.memory.write(hpa, bytes(range(256)) * 16)
    q.submit(io_cmd("write", 0, 1, iova))
    q.submit(io_cmd("read", 0, 1, iova + 4096))
    assert all(c.status == 0 for c, _ in q.reap())
    assert plat.memory.read(hpa + 4096, 4096) == bytes(range(256)) * 16


def test_read_at_end_of_namespace(plat):
    s = plat.ssds[0]
    q = s.driver.create_host_queue(1, 16)
    _, iova = s.driver.dma_alloc(4096)
    q.submit(io_cmd("read", s.namespace.total_blocks, 1, iova))
    (c, _), = q.reap()
    assert c.status == SC_LBA_OUT_OF_RANGE


def test_128k_write_consumes_31_prp_list_entries(plat):
    s = plat.ssds[0]
    ctrl, drv = s.ctrl, s.driver
    hpa, iova = drv.dma_alloc(32 * PAGE_SIZE)
    lst_hpa, lst_iova = drv.dma_alloc(PAGE_SIZE)
    plat.memory.write(lst_hpa, struct.pack("<31Q", *(iova + (i + 1) * PAGE_SIZE
                                                     for i in range(31))))
    cmd = io_cmd("write", 8, 32, iova, lst_iova)
    addrs, consumed = ctrl.prp_pages(cmd, 32 * PAGE_SIZE)
    assert consumed == 31 and len(addrs) == 32
    assert prp_entry_count(iova, 131072) == 31
    status, moved = ctrl.execute_io(cmd, s.namespace)
    assert (status, moved) == (SC_SUCCESS, 131072)


def test_misaligned_prp1_is_invalid_field(plat):
    s = plat.ssds[0]
    _, iova = s.driver.dma_alloc(4096)
    status, _ = s.ctrl.execute_io(io_cmd("read", 0, 1, iova + 2), s.namespace)
    assert status == SC_INVALID_FIELD


def test_unmapped_prp_is_data_transfer_error(plat):
    s = plat.ssds[0]
    status, _ = s.ctrl.execute_io(io_cmd("read", 0, 1, 0x5000), s.namespace)
    assert status == SC_DATA_XFER_ERROR
    assert plat.ledger.count("dma_fault") == 1


def test_flush_is_noop(plat):
    s = plat.ssds[0]
    assert s.ctrl.execute_io(NvmeCommand(IO_FLUSH, nsid=1), s.namespace) == (SC_SUCCESS, 0)


# ------------------------------------------------------------------ CMB / namespace

def test_cmb_alloc_disjoint_and_rw():
    cmb = CmbRegion(1 << 40, 1 << 20, HostMemory())
    a, b = cmb.alloc(4096, "sq1"), cmb.alloc(4096, "cq1")
    assert abs(a - b) >= 4096
    cmb.write(0, b"\xAB" * 64)
    assert cmb.read(0, 64) == b"\xAB" * 64


def test_cmb_exhaustion_leaves_table_unchanged():
    cmb = CmbRegion(1 << 40, 8192, HostMemory())
    cmb.alloc(4096, "a")
    before = dict(cmb.allocations)
    with pytest.raises(AllocationError):
        cmb.alloc(8192, "b")
    assert cmb.allocations == before


def test_cmb_free_and_reuse():
    cmb = CmbRegion(1 << 40, 3 * 4096, HostMemory())
    offs = [cmb.alloc(4096, t) for t in "abc"]
    cmb.free(offs[1])
    assert cmb.alloc(4096, "d") == offs[1]


def test_namespace_zero_fill_and_bounds():
    ns = Namespace(1, 512, 8)
    assert ns.read_blocks(3, 2) == bytes(1024)
    with pytest.raises(IndexError):
        ns.read_blocks(7, 2)


def test_file_backed_namespace(tmp_path):
    path = tmp_path / "ns.img"
    ns = Namespace(1, 4096, 1024, path=path)
    ns.write_blocks(5, b"\x11" * 4096)
    assert ns.read_blocks(5, 1) == b"\x11" * 4096
    assert ns.read_blocks(6, 1) == bytes(4096)
    assert path.stat().st_size == 4096 * 1024
    ns.close()
