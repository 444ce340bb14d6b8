"""Event ledger, cost model and per-VM statistics."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, NamedTuple

EVENT_KINDS = (
    "vm_exit", "page_fault", "data_copy", "doorbell", "intr_posted",
    "intr_injected", "poller_cycle", "device_service", "dma_fault",
    "spurious", "lifecycle",
)
EXIT_CLASS = ("vm_exit", "intr_injected")
INTERRUPT_KINDS = ("intr_posted", "intr_injected")

REPORT_SCHEMA = "iovsim.report/1"
CSV_COLUMNS = ("vm", "iops", "mean_ns", "p99_ns", "exits", "faults", "copies")


class LedgerError(Exception):
    pass


class TraceError(ValueError):
    pass


class Record(NamedTuple):
    ts: float
    vm: object
    kind: str
    nbytes: int = 0
    origin: str = ""
    reqs: tuple = ()


class EventLedger:
    """Append-only event log. Timestamps come from ``clock`` and never go back."""

    def __init__(self, clock=None):
        self.clock = clock or (lambda: 0.0)
        self._records: list[Record] = []
        self.counts: Counter = Counter()

    def record(self, vm, kind: str, nbytes: int = 0, origin: str = "",
               reqs: tuple = (), ts: float | None = None) -> Record:
        if kind not in EVENT_KINDS:
            raise LedgerError(f"unknown event kind {kind!r}")
        if ts is None:
            ts = self.clock()
        recs = self._records
        if recs and ts < recs[-1].ts:
            raise LedgerError(f"timestamp {ts} precedes {recs[-1].ts}")
        rec = Record(ts, vm, kind, nbytes, origin, reqs)
        recs.append(rec)
        self.counts[(vm, kind)] += 1
        return rec

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, i):
        return self._records[i]

    @property
    def records(self) -> tuple:
        return tuple(self._records)

    def count(self, kind: str | Iterable[str], vm=None, since: float | None = None,
              until: float | None = None) -> int:
        kinds = (kind,) if isinstance(kind, str) else tuple(kind)
        if since is None and until is None:
            if vm is None:
                return sum(n for (_, k), n in self.counts.items() if k in kinds)
            return sum(self.counts[(vm, k)] for k in kinds)
        n = 0
        for r in self._records:
            if r.kind not in kinds or (vm is not None and r.vm != vm):
                continue
            if since is not None and r.ts < since:
                continue
            if until is not None and r.ts > until:
                continue
            n += 1
        return n

    def select(self, kind=None, vm=None, origin=None) -> list[Record]:
        kinds = None if kind is None else ((kind,) if isinstance(kind, str) else tuple(kind))
        return [r for r in self._records
                if (kinds is None or r.kind in kinds)
                and (vm is None or r.vm == vm)
                and (origin is None or r.origin == origin)]

    def trace(self, req) -> list[Record]:
        """All records on the path of request ``req``, in ledger order."""
        return [r for r in self._records if req in r.reqs]


@dataclass(frozen=True)
class CostModel:
    """Nanosecond cost per event kind plus device service parameters.

    Absolute values are tunable defaults, not hardware measurements. The
    per-exit and per-injection costs absorb context-switch and cache effects.
    """

    vm_exit_ns: float = 20_000.0
    page_fault_ns: float = 20_000.0
    copy_ns_per_byte: float = 0.2
    injection_ns: float = 20_000.0
    posted_ns: float = 0.0
    poller_tick_ns: float = 1_000.0
    device_a_ns: float = 80_000.0
    device_b_ns_per_byte: float = 0.01
    device_parallelism: int = 64

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"cost {f.name} must be >= 0")
        if self.posted_ns > self.injection_ns:
            raise ValueError("posted delivery can not cost more than injection")
        if self.device_parallelism < 1:
            raise ValueError("device_parallelism must be >= 1")

    @classmethod
    def from_dict(cls, d: dict | None) -> CostModel:
        if not d:
            return cls()
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cost model keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> CostModel:
        d = self.to_dict()
        d.update(kw)
        return CostModel(**d)

    def zeroed(self) -> CostModel:
        """Every per-event cost 0; device service parameters kept."""
        return self.with_(vm_exit_ns=0.0, page_fault_ns=0.0, copy_ns_per_byte=0.0,
                          injection_ns=0.0, posted_ns=0.0, poller_tick_ns=0.0)

    def service_ns(self, nbytes: int) -> float:
        return self.device_a_ns + self.device_b_ns_per_byte * nbytes

    def device_limit_iops(self, nbytes: int, n_devices: int = 1) -> float:
        return n_devices * self.device_parallelism * 1e9 / self.service_ns(nbytes)

    def cost(self, rec: Record) -> float:
        k = rec.kind
        if k == "vm_exit":
            return self.vm_exit_ns
        if k == "page_fault":
            return self.page_fault_ns
        if k == "data_copy":
            return self.copy_ns_per_byte * rec.nbytes
        if k == "intr_injected":
            return self.injection_ns
        if k == "intr_posted":
            return self.posted_ns
        if k == "device_service":
            return self.service_ns(rec.nbytes)
        if k == "poller_cycle":
            return self.poller_tick_ns * rec.nbytes  # nbytes carries the tick count
        return 0.0


def latency_of(trace, model: CostModel) -> float:
    """End-to-end latency of one request from its ordered event trace.

    Events on one request's path are serial: each starts at its timestamp or
    when the previous one ends, whichever is later, and lasts
    ``model.cost(event)``. Waiting between events is queueing delay already
    present in the timestamps. The trace must end with the completion
    interrupt.
    """
    trace = list(trace)
    if not trace:
        raise TraceError("empty trace")
    if trace[-1].kind not in INTERRUPT_KINDS:
        raise TraceError(f"trace ends with {trace[-1].kind!r}, not a completion interrupt")
    start = cursor = trace[0].ts
    for rec in trace:
        cursor = max(cursor, rec.ts) + model.cost(rec)
    return cursor - start


@dataclass(frozen=True, slots=True)
class RequestRecord:
    vm: object
    tag: int
    op: str
    submit_ts: float
    complete_ts: float
    nbytes: int
    ok: bool = True

    @property
    def latency(self) -> float:
        return self.complete_ts - self.submit_ts


def nearest_rank(sorted_values, pct: float) -> float:
    """Nearest-rank percentile of an ascending sequence."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("percentile of empty sample")
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[rank - 1]


@dataclass
class VmStats:
    vm: object
    ops: int = 0
    iops: float = 0.0
    mean_ns: float = 0.0
    median_ns: float = 0.0
    p99_ns: float = 0.0
    p999_ns: float = 0.0
    exits: int = 0
    faults: int = 0
    copies: int = 0
    bytes_moved: int = 0
    errors: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _stats_for(vm, lats: list[float], nbytes: int, errors: int, span_s: float,
               counts: Counter) -> VmStats:
    st = VmStats(vm)
    st.ops = len(lats)
    st.bytes_moved = nbytes
    st.errors = errors
    st.exits = counts["exit"]
    st.faults = counts["page_fault"]
    st.copies = counts["data_copy"]
    if lats:
        lats.sort()
        st.iops = len(lats) / span_s
        st.mean_ns = math.fsum(lats) / len(lats)
        st.median_ns = nearest_rank(lats, 50)
        st.p99_ns = nearest_rank(lats, 99)
        st.p999_ns = nearest_rank(lats, 99.9)
    return st


def aggregate(ledger: EventLedger, window: tuple[float, float],
              requests) -> dict:
    """Per-VM statistics over requests completing in ``[start, end)``.

    Returns ``{vm: VmStats, ..., "all": VmStats}``; empty window -> ``{}``.
    Event totals are ledger counts for records timestamped in the window.
    """
    start, end = window
    if end <= start:
        return {}
    span_s = (end - start) / 1e9
    lats: dict = {}
    nbytes: Counter = Counter()
    errors: Counter = Counter()
    for r in requests:
        if start <= r.complete_ts < end:
            lats.setdefault(r.vm, []).append(r.complete_ts - r.submit_ts)
            if r.ok:
                nbytes[r.vm] += r.nbytes
            else:
                errors[r.vm] += 1
    if not lats:
        return {}
    counts: dict = {}
    for rec in ledger:
        if rec.ts < start or rec.ts >= end or rec.vm is None:
            continue
        k = rec.kind
        if k in EXIT_CLASS:
            k = "exit"
        elif k not in ("page_fault", "data_copy"):
            continue
        counts.setdefault(rec.vm, Counter())[k] += 1
    out = {}
    for vm in sorted(lats, key=_vm_key):
        out[vm] = _stats_for(vm, lats[vm], nbytes[vm], errors[vm], span_s,
                             counts.get(vm, Counter()))
    merged = [x for vm in lats for x in lats[vm]]
    total_counts: Counter = Counter()
    for vm, c in counts.items():
        if vm in lats:
            total_counts.update(c)
    out["all"] = _stats_for("all", merged, sum(nbytes.values()), sum(errors.values()),
                            span_s, total_counts)
    return out


def _vm_key(vm):
    return (0, vm, "") if isinstance(vm, int) else (1, 0, str(vm))


def jain_fairness(values) -> float:
    """(sum x)^2 / (n * sum x^2); 1.0 when every share is equal."""
    xs = [float(v) for v in values]
    if not xs:
        raise ValueError("fairness of an empty set is undefined")
    if any(x < 0 for x in xs):
        raise ValueError("fairness inputs must be non-negative")
    top = max(xs)
    if top == 0:
        raise ValueError("fairness is undefined when every value is zero")
    xs = [x / top for x in xs]  # scale-free; avoids underflow on tiny inputs
    sq = math.fsum(x * x for x in xs)
    return math.fsum(xs) ** 2 / (len(xs) * sq)


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def stats_csv(stats: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for vm, st in stats.items():
        if vm == "all":
            continue
        w.writerow([vm, f"{st.iops:.3f}", f"{st.mean_ns:.3f}", f"{st.p99_ns:.3f}",
                    st.exits, st.faults, st.copies])
    return buf.getvalue()
