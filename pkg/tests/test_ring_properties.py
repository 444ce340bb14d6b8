from hypothesis import given, strategies as st

from iovsim.nvme.queues import ring_full, ring_used

from ringcheck import run_ring_model


@given(seed=st.integers(0, 2**32), sq=st.sampled_from([2, 3, 8, 16]),
       cq=st.sampled_from([2, 4, 8, 17]))
def test_ring_model_random_depths(seed, sq, cq):
    out = run_ring_model(800, seed, sq_depth=sq, cq_depth=cq)
    assert out["submitted"] == out["completed"]


def test_phase_survives_many_wraps():
    out = run_ring_model(20_000, 5)
    assert out["cq_wraps"] >= 3 and out["full_hits"] > 0


@given(depth=st.integers(2, 64), head=st.integers(0, 63), used=st.integers(0, 63))
def test_ring_arithmetic(depth, head, used):
    head %= depth
    used %= depth
    tail = (head + used) % depth
    assert ring_used(tail, head, depth) == used
    assert ring_full(tail, head, depth) == (used == depth - 1)
