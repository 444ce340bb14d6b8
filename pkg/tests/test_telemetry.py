import math
import random

import pytest
from hypothesis import given, strategies as st

from iovsim.telemetry import (
    CostModel, EventLedger, LedgerError, Record, RequestRecord, TraceError, aggregate,
    jain_fairness, latency_of, nearest_rank,
)

SPEC_COSTS = CostModel(vm_exit_ns=5000, injection_ns=5000, copy_ns_per_byte=0.2,
                       device_a_ns=10000, device_b_ns_per_byte=0)


def rec(ts, kind, nbytes=0):
    return Record(ts, 0, kind, nbytes)


VIRTIO_TRACE = [rec(0, "vm_exit"), rec(0, "data_copy", 4096), rec(0, "device_service", 4096),
                rec(0, "data_copy", 4096), rec(0, "intr_injected")]
LIGHTIOV_TRACE = [rec(0, "doorbell"), rec(0, "device_service", 4096), rec(0, "intr_posted")]


def test_latency_zero_costs():
    m = SPEC_COSTS.zeroed()
    assert latency_of(VIRTIO_TRACE, m) == 10000


def test_latency_virtio_hand_arithmetic():
    assert latency_of(VIRTIO_TRACE, SPEC_COSTS) == pytest.approx(21638.4)


def test_latency_lightiov_hand_arithmetic():
    assert latency_of(LIGHTIOV_TRACE, SPEC_COSTS) == 10000


def test_latency_counts_queueing_gaps():
    trace = [rec(0, "doorbell"), rec(500, "device_service", 4096), rec(20000, "intr_posted")]
    assert latency_of(trace, SPEC_COSTS) == 20000


def test_malformed_traces():
    with pytest.raises(TraceError):
        latency_of([], SPEC_COSTS)
    with pytest.raises(TraceError):
        latency_of([rec(0, "vm_exit")], SPEC_COSTS)


cost_field = st.sampled_from(["vm_exit_ns", "page_fault_ns", "copy_ns_per_byte",
                              "injection_ns", "poller_tick_ns", "device_a_ns",
                              "device_b_ns_per_byte"])


@given(cost_field, st.floats(0, 1e5), st.randoms(use_true_random=False))
def test_cost_monotonicity(name, bump, rnd):
    kinds = ["vm_exit", "page_fault", "data_copy", "device_service", "poller_cycle", "doorbell"]
    ts = 0.0
    trace = []
    for _ in range(rnd.randint(0, 8)):
        ts += rnd.choice([0, 100, 5000])
        trace.append(rec(ts, rnd.choice(kinds), rnd.choice([1, 4096])))
    trace.append(rec(ts, "intr_injected"))
    base = CostModel()
    hi = base.with_(**{name: getattr(base, name) + bump})
    assert latency_of(trace, hi) >= latency_of(trace, base)


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(vm_exit_ns=-1)
    with pytest.raises(ValueError):
        CostModel(posted_ns=10, injection_ns=5)
    with pytest.raises(ValueError):
        CostModel.from_dict({"bogus": 1})
    assert CostModel.from_dict(None) == CostModel()
    assert CostModel().device_limit_iops(4096, 2) == pytest.approx(
        2 * 64 * 1e9 / (80000 + 40.96))


def test_ledger_rejects_unknown_kind_and_time_travel():
    t = [10.0]
    led = EventLedger(lambda: t[0])
    led.record(0, "doorbell")
    with pytest.raises(LedgerError):
        led.record(0, "teleport")
    with pytest.raises(LedgerError):
        led.record(0, "doorbell", ts=5.0)


def test_ledger_counts_match_records():
    rnd = random.Random(3)
    led = EventLedger()
    kinds = ["vm_exit", "data_copy", "intr_posted", "doorbell"]
    for i in range(500):
        led.record(rnd.randrange(4), rnd.choice(kinds), reqs=(i,))
    for k in kinds:
        assert led.count(k) == len(led.select(k))
        for vm in range(4):
            assert led.count(k, vm=vm) == len(led.select(k, vm=vm))
            assert led.count(k, vm=vm, since=0.0) == led.count(k, vm=vm)
    assert led.trace(7) == [led[7]]


def test_nearest_rank_matches_sort_oracle():
    rnd = random.Random(1)
    xs = sorted(rnd.random() for _ in range(100))
    assert nearest_rank(xs, 99) == xs[98]
    assert nearest_rank(xs, 50) == xs[49]
    assert nearest_rank(xs, 100) == xs[99]
    assert nearest_rank(xs, 0) == xs[0]
    with pytest.raises(ValueError):
        nearest_rank([], 50)


def test_aggregate_constant_latency():
    reqs = [RequestRecord(0, i, "read", i * 10_000.0, i * 10_000.0 + 10_000.0, 4096)
            for i in range(1000)]
    out = aggregate(EventLedger(), (0.0, 1e7 + 1), reqs)
    assert out[0].ops == 1000
    assert out[0].iops == pytest.approx(1000 / ((1e7 + 1) / 1e9))
    assert out[0].p99_ns == 10_000.0 and out[0].mean_ns == 10_000.0


def test_aggregate_total_row_is_merge():
    led = EventLedger()
    led.record(0, "vm_exit", ts=1.0)
    led.record(1, "data_copy", 8, ts=2.0)
    led.record(1, "intr_injected", ts=3.0)
    reqs = [RequestRecord(0, 0, "read", 0, 100, 4096),
            RequestRecord(1, 0, "read", 0, 300, 4096),
            RequestRecord(1, 1, "read", 0, 500, 4096, ok=False)]
    out = aggregate(led, (0, 1000), reqs)
    assert out["all"].ops == out[0].ops + out[1].ops == 3
    assert out["all"].exits == out[0].exits + out[1].exits == 2
    assert out["all"].copies == 1 and out[1].errors == 1
    assert out["all"].bytes_moved == 8192
    assert out["all"].mean_ns == pytest.approx(300)


def test_aggregate_empty_window():
    assert aggregate(EventLedger(), (5, 5), []) == {}
    assert aggregate(EventLedger(), (0, 5), [RequestRecord(0, 0, "read", 0, 10, 1)]) == {}


def test_jain():
    assert jain_fairness([7, 7, 7, 7]) == 1.0
    assert jain_fairness([1, 0]) == 0.5
    with pytest.raises(ValueError):
        jain_fairness([0, 0])
    with pytest.raises(ValueError):
        jain_fairness([])


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=20).filter(lambda v: any(v)))
def test_jain_bounds(vals):
    j = jain_fairness(vals)
    assert 1 / len(vals) - 1e-9 <= j <= 1 + 1e-9
