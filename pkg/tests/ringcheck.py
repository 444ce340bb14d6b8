"""Randomized model check of one SQ/CQ pair against the controller."""
import random

from iovsim.nvme.commands import NvmeCommand
from iovsim.nvme.constants import IO_FLUSH, SQE_SIZE
from iovsim.nvme.queues import CQ_HEAD, SQ_TAIL, CqConsumer, QueueFullError, SqProducer
from iovsim.platform import Platform, SsdConfig


def run_ring_model(n_ops: int, seed: int, sq_depth: int = 8, cq_depth: int = 4) -> dict:
    plat = Platform(1, ssd=SsdConfig(capacity_bytes=1 << 24, cmb_bytes=1 << 16), timed=False)
    ctrl, drv, mem = plat.ssds[0].ctrl, plat.ssds[0].driver, plat.memory
    ctrl.auto_process = False
    ctrl.record_fetches = False
    sq_hpa, sq_iova = drv.dma_alloc(sq_depth * SQE_SIZE)
    cq_hpa, cq_iova = drv.dma_alloc(cq_depth * 16)
    assert drv.create_cq(1, cq_depth, cq_iova, None).status == 0
    assert drv.create_sq(1, sq_depth, sq_iova, 1).status == 0
    sq = SqProducer(mem, sq_hpa, sq_depth, 1)
    cq = CqConsumer(mem, cq_hpa, cq_depth, 1)
    sq_db, cq_db = ctrl.doorbell_addr(1, SQ_TAIL), ctrl.doorbell_addr(1, CQ_HEAD)
    qp = ctrl.qpairs[1]

    rnd = random.Random(seed)
    next_cid = 0
    expect = []  # cids in submission order, not yet completed
    submitted = completed = full_hits = wraps = 0
    last_phase = cq.phase
    for _ in range(n_ops):
        r = rnd.random()
        if r < 0.45:
            cmd = NvmeCommand(IO_FLUSH, cid=next_cid, nsid=1)
            if sq.full():
                before = mem.read(sq_hpa, sq_depth * SQE_SIZE)
                try:
                    sq.push(cmd)
                except QueueFullError:
                    full_hits += 1
                else:
                    raise AssertionError("push into a full SQ succeeded")
                assert mem.read(sq_hpa, sq_depth * SQE_SIZE) == before
                continue
            mem.write32(sq_db, sq.push(cmd))
            expect.append(next_cid)
            next_cid = (next_cid + 1) & 0xFFFF
            submitted += 1
        elif r < 0.75:
            ctrl.process_sq(1)
        else:
            got = cq.poll(rnd.randint(1, cq_depth))
            if not got:
                continue
            for c in got:
                assert c.status == 0 and c.sqid == 1
                assert c.cid == expect.pop(0), "completion out of order"
                sq.update_head(c.sq_head)
            completed += len(got)
            mem.write32(cq_db, cq.head)
            if cq.phase != last_phase:
                wraps += 1
                last_phase = cq.phase
        assert 0 <= qp.cq_used() <= cq_depth - 1
        # conservation: each outstanding command is unfetched, backlogged or posted
        assert submitted == completed + len(expect)
        assert len(expect) == qp.sq_pending() + len(qp.cq_backlog) + qp.cq_used()

    # drain
    for _ in range(4 * sq_depth):
        ctrl.process_sq(1)
        got = cq.poll()
        for c in got:
            assert c.cid == expect.pop(0)
            sq.update_head(c.sq_head)
        completed += len(got)
        if got:
            mem.write32(cq_db, cq.head)
    assert not expect and submitted == completed
    assert not qp.error and plat.ledger.count("spurious") == 0
    return {"submitted": submitted, "completed": completed, "full_hits": full_hits,
            "cq_wraps": wraps}
