"""Scenario configuration and closed-loop multi-VM benchmark runs."""
from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass, field, fields, replace

import yaml

from .baselines import VhostGuest, VhostPollHost, VirtioGuest, VirtioHost
from .baselines import ProvisionError as BaselineProvisionError
from .lightiov import GuestInitError, GuestIoRequest, LightIovGuest, LightIovHost
from .lightiov.host import ProvisionError as LightIovProvisionError
from .mem import dma_hpa_owners
from .platform import GiB, TiB, Platform, SsdConfig
from .telemetry import (
    EXIT_CLASS, CostModel, RequestRecord, aggregate, dumps_report, jain_fairness, stats_csv,
)
from .workload import PRESETS, WorkloadError, WorkloadSpec, block_pattern, gen_requests, preset

log = logging.getLogger(__name__)

REPORT_SCHEMA = "iovsim.report/1"
COMPARE_SCHEMA = "iovsim.compare/1"
BACKENDS = ("lightiov", "vhost_poll", "virtio")
PROFILE_KINDS = ("vm_exit", "intr_injected", "intr_posted", "page_fault", "data_copy",
                 "doorbell", "poller_cycle", "device_service", "dma_fault", "spurious")


class ConfigError(ValueError):
    pass


class HarnessError(RuntimeError):
    """A run that could not complete; ``partial`` holds whatever was gathered."""

    def __init__(self, msg: str, partial: dict | None = None):
        super().__init__(msg)
        self.partial = partial or {}


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    backend: str = "lightiov"
    n_vms: int = 1
    n_ssds: int = 1
    poller_cores: int = 1
    capacity_bytes: int = 10 * GiB
    workload: WorkloadSpec = field(default_factory=lambda: PRESETS["randread-4k-1-1"])
    cost: CostModel = field(default_factory=CostModel)
    seed: int | None = None
    queue_depth: int | None = None
    warmup_fraction: float = 0.1
    block_size: int = 4096
    ssd_capacity_bytes: int = 2 * TiB
    cmb_bytes: int = 1 * GiB
    verify: bool = True
    trace: bool = False

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.n_vms < 1 or self.n_ssds < 1:
            raise ConfigError("n_vms and n_ssds must be >= 1")
        if self.backend == "vhost_poll" and self.poller_cores < 1:
            raise ConfigError("vhost_poll needs poller_cores >= 1")
        if self.capacity_bytes < self.block_size or self.capacity_bytes % self.block_size:
            raise ConfigError("capacity_bytes must be a positive multiple of block_size")
        if self.workload.bs % self.block_size:
            raise ConfigError(f"bs {self.workload.bs} is not a multiple of {self.block_size}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        if self.queue_depth is not None and self.queue_depth <= self.workload.iodepth:
            raise ConfigError("queue_depth must exceed iodepth (one ring slot stays empty)")

    @property
    def spec(self) -> WorkloadSpec:
        """The workload with the scenario seed applied."""
        if self.seed is None:
            return self.workload
        return self.workload.with_(seed=self.seed)

    @property
    def depth(self) -> int:
        if self.queue_depth is not None:
            return self.queue_depth
        d = 64
        while d < self.workload.iodepth + 1:
            d *= 2
        return d

    def ssd_of(self, i: int) -> int:
        return i % self.n_ssds

    def with_(self, **kw) -> Scenario:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["workload"] = self.workload.to_dict()
        d["cost"] = self.cost.to_dict()
        return d


def scenario_from_dict(d: dict) -> Scenario:
    """Build a Scenario from a mapping whose keys are Scenario field names.

    ``workload`` may be a preset name or a mapping; a mapping with a
    ``preset`` key overrides fields of that preset.
    """
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    d = dict(d)
    known = {f.name for f in fields(Scenario)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    try:
        wl = d.get("workload")
        if isinstance(wl, str):
            d["workload"] = preset(wl)
        elif isinstance(wl, dict):
            wl = dict(wl)
            base = wl.pop("preset", None)
            if base is not None:
                if "duration_ns" in wl and "total_ops" not in wl:
                    wl["total_ops"] = None
                d["workload"] = preset(base, **wl)
            else:
                d["workload"] = WorkloadSpec.from_dict(wl)
        elif wl is not None and not isinstance(wl, WorkloadSpec):
            raise ConfigError("workload must be a preset name or a mapping")
        cost = d.get("cost")
        if isinstance(cost, dict) or cost is None:
            d["cost"] = CostModel.from_dict(cost)
        return Scenario(**d)
    except (WorkloadError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path) -> Scenario:
    with open(path, encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return scenario_from_dict(data or {})


# ---------------------------------------------------------------- backends

def _make_host(sc: Scenario, plat: Platform):
    if sc.backend == "lightiov":
        return LightIovHost(plat, queue_depth=sc.depth)
    if sc.backend == "virtio":
        return VirtioHost(plat, queue_depth=sc.depth)
    return VhostPollHost(plat, cores=sc.poller_cores, queue_depth=sc.depth)


def _make_guest(sc: Scenario, plat: Platform, host, vm: int, n_queues: int):
    if sc.backend == "lightiov":
        g = LightIovGuest(plat, host, vm)
        g.init(n_queues)
        if sc.trace:
            g.set_tracer(host.tracer(vm))
        return g
    if sc.backend == "virtio":
        return VirtioGuest(plat, host, vm).init()
    return VhostGuest(plat, host, vm).init()


_PROVISION_ERRORS = (LightIovProvisionError, BaselineProvisionError, GuestInitError)


# ---------------------------------------------------------------- closed loop

class _Job:
    __slots__ = ("queue", "stream", "budget", "outstanding")

    def __init__(self, queue: int, stream, budget: int | None):
        self.queue = queue
        self.stream = stream
        self.budget = budget  # None: until the deadline
        self.outstanding = 0


class _VmRun:
    def __init__(self, plat: Platform, vm: int, guest, lba_start: int, ssd: int, warm_n: int):
        self.vm = vm
        self.guest = guest
        self.ctx = plat.vms[vm]
        self.mem = plat.guest_memory(vm)
        self.lba_start = lba_start
        self.ssd = ssd
        self.jobs: list[_Job] = []
        self.done = 0
        self.warm_n = warm_n
        self.warm_ts: float | None = None
        self.last_ts = 0.0
        self.drain_ts: float | None = None  # first job out of budget
        self.shadow: dict[int, set] = {}
        self.inflight: Counter = Counter()
        self.last_write: dict[int, float] = {}


class _Runner:
    def __init__(self, sc: Scenario):
        self.sc = sc
        self.spec = sc.spec
        self.plat = Platform(
            sc.n_ssds, sc.cost,
            SsdConfig(block_size=sc.block_size, capacity_bytes=sc.ssd_capacity_bytes,
                      cmb_bytes=sc.cmb_bytes))
        self.host = _make_host(sc, self.plat)
        self.vms: list[_VmRun] = []
        self.requests: list[RequestRecord] = []
        self.pending: dict[int, tuple] = {}
        self.seq = 0
        self.deadline = self.spec.duration_ns
        self.integrity = Counter()
        self._zero = bytes(sc.block_size)
        self._free: dict[tuple, list] = {}

    # -- setup / teardown
    def provision(self) -> None:
        sc, spec = self.sc, self.spec
        blocks = sc.capacity_bytes // sc.block_size
        if spec.bs > sc.capacity_bytes:
            raise ConfigError(f"bs {spec.bs} exceeds the per-VM capacity {sc.capacity_bytes}")
        ram = spec.numjobs * spec.iodepth * spec.bs + spec.numjobs * sc.depth * 4096 + (1 << 20)
        if spec.total_ops is not None:
            per_vm = spec.total_ops
            warm_n = int(per_vm * sc.warmup_fraction)
        else:
            per_vm = None
            warm_n = 0
        for vm in range(sc.n_vms):
            ssd = sc.ssd_of(vm)
            grant = self.host.provision_vm(vm, spec.numjobs, blocks, ssd=ssd, ram_bytes=ram,
                                           depth=sc.depth)
            self.vms.append(None)  # placeholder so teardown covers a half-built VM
            guest = _make_guest(sc, self.plat, self.host, vm, spec.numjobs)
            vr = _VmRun(self.plat, vm, guest, grant.lba_start, ssd, warm_n)
            self.vms[-1] = vr
            guest.on_complete = self._completion(vr)
            for j in range(spec.numjobs):
                budget = None
                if per_vm is not None:
                    budget = per_vm // spec.numjobs + (j < per_vm % spec.numjobs)
                stream = gen_requests(spec, vm, guest.lba_size, guest.block_size, job=j)
                vr.jobs.append(_Job(j, stream, budget))

    def teardown(self) -> int:
        torn = 0
        for vm in sorted(self.plat.vms):
            self.host.teardown_vm(vm)
            torn += 1
        if self.plat.sim is not None:
            self.plat.run()
        return torn

    # -- closed loop
    def start(self) -> None:
        spec = self.spec
        for vr in self.vms:
            for job in vr.jobs:
                for _ in range(spec.iodepth):
                    if not self._issue(vr, job):
                        break

    def _issue(self, vr: _VmRun, job: _Job) -> bool:
        if job.budget is not None:
            if job.budget == 0:
                if vr.drain_ts is None:
                    vr.drain_ts = self.plat.now
                return False
            job.budget -= 1
        elif self.plat.now >= self.deadline:
            return False
        op, vlba, blocks = next(job.stream)
        tag = self.seq
        self.seq += 1
        bs = self.sc.block_size
        buf = self._buffer(vr, job)
        if op == "write":
            vr.mem.write(buf, b"".join(block_pattern(vr.vm, vlba + i, tag, bs)
                                       for i in range(blocks)))
            for i in range(blocks):
                vr.inflight[vlba + i] += 1
        self.pending[tag] = (vr, job, buf, op, vlba, blocks, self.plat.now)
        job.outstanding += 1
        vr.guest.submit(GuestIoRequest(op, vlba, blocks, buf, tag), job.queue)
        return True

    def _buffer(self, vr: _VmRun, job: _Job) -> int:
        # one buffer per outstanding slot, recycled through a per-job free list
        free = self._free.setdefault((vr.vm, job.queue), [])
        if free:
            return free.pop()
        return vr.ctx.ram_alloc(self.spec.bs)

    def _completion(self, vr: _VmRun):
        def on_complete(req, status):
            tag = req.tag
            _, job, buf, op, vlba, blocks, sub_ts = self.pending.pop(tag)
            now = self.plat.now
            ok = status == 0
            self.requests.append(RequestRecord(vr.vm, tag, op, sub_ts, now,
                                               blocks * self.sc.block_size, ok))
            vr.done += 1
            vr.last_ts = now
            if vr.done == vr.warm_n:
                vr.warm_ts = now
            if op == "write":
                self._note_write(vr, tag, vlba, blocks, sub_ts, ok, now)
            elif ok and self.sc.verify:
                self._check_read(vr, buf, vlba, blocks, sub_ts)
            job.outstanding -= 1
            self._free[(vr.vm, job.queue)].append(buf)
            self._issue(vr, job)
        return on_complete

    def _note_write(self, vr: _VmRun, seq: int, vlba: int, blocks: int, sub_ts: float,
                    ok: bool, now: float) -> None:
        self.integrity["writes"] += 1
        for b in range(vlba, vlba + blocks):
            vr.inflight[b] -= 1
            if not vr.inflight[b]:
                del vr.inflight[b]
            if not ok:
                continue
            # a write that overlapped another write to the same block may land
            # either side of it on the device; both contents are acceptable
            overlapped = b in vr.inflight or vr.last_write.get(b, -1.0) > sub_ts
            if overlapped and b in vr.shadow:
                vr.shadow[b].add(seq)
            else:
                vr.shadow[b] = {seq}
            vr.last_write[b] = now

    def _block_ok(self, vr: _VmRun, b: int, data: bytes) -> bool:
        exp = vr.shadow.get(b)
        if exp is None:
            return data == self._zero
        key, seq = struct.unpack_from("<QQ", data)
        return (key == (vr.vm << 40) | b and seq in exp
                and data == block_pattern(vr.vm, b, seq, self.sc.block_size))

    def _check_read(self, vr: _VmRun, buf: int, vlba: int, blocks: int, sub_ts: float) -> None:
        bs = self.sc.block_size
        data = vr.mem.read(buf, blocks * bs)
        for i in range(blocks):
            b = vlba + i
            if b in vr.inflight or vr.last_write.get(b, -1.0) > sub_ts:
                continue  # raced with a write; content is legitimately ambiguous
            self.integrity["reads_verified"] += 1
            if not self._block_ok(vr, b, data[i * bs:(i + 1) * bs]):
                self.integrity["read_mismatches"] += 1

    def sweep(self) -> None:
        """Re-read every written block from the namespace and check its content."""
        for vr in self.vms:
            ns = self.plat.ssds[vr.ssd].namespace
            for b in sorted(vr.shadow):
                self.integrity["blocks_verified"] += 1
                if not self._block_ok(vr, b, ns.read_blocks(vr.lba_start + b, 1)):
                    self.integrity["mismatches"] += 1

    # -- metrics
    def window(self) -> tuple[float, float]:
        start = 0.0
        for vr in self.vms:
            armed = vr.guest.armed_ts
            start = max(start, armed if armed is not None else start)
            if vr.warm_ts is not None:
                start = max(start, vr.warm_ts)
        if self.deadline is not None:
            start = max(start, self.deadline * self.sc.warmup_fraction)
            end = self.deadline
        else:
            # past the first drain, closed-loop load is no longer steady
            end = min(vr.drain_ts if vr.drain_ts is not None else vr.last_ts
                      for vr in self.vms)
            if end <= start:
                # the whole budget fit in flight at once: no steady phase exists
                end = max(vr.last_ts for vr in self.vms) + 1.0
        return start, end

    def dma_violations(self) -> int:
        bad = 0
        for dev in sorted(self.plat.iommu.tables):
            owners = dma_hpa_owners(self.plat.iommu.tables[dev], self.plat.gpa)
            bad += sum(1 for o in owners.values() if len(o) > 1)
        return bad

    def event_counts(self, window: tuple[float, float] | None = None) -> dict:
        c: Counter = Counter()
        for rec in self.plat.ledger:
            if window is not None and not window[0] <= rec.ts < window[1]:
                continue
            c[rec.kind] += rec.nbytes if rec.kind == "poller_cycle" else 1
        return {k: c.get(k, 0) for k in PROFILE_KINDS}


def _vm_to_ssd(sc: Scenario) -> dict:
    return {str(i): sc.ssd_of(i) for i in range(sc.n_vms)}


def _dump_events(ledger, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in ledger:
            f.write(f"{rec.ts:.3f}\t{rec.vm}\t{rec.kind}\t{rec.nbytes}\t{rec.origin}\t"
                    f"{','.join(map(str, rec.reqs))}\n")


def run_scenario(sc: Scenario, event_dump=None) -> dict:
    """Provision, run and verify one scenario; returns the report document.

    Raises HarnessError on provisioning or integrity failure after tearing
    down whatever was provisioned. ``event_dump`` names a file that receives
    the raw event ledger, one tab-separated record per line.
    """
    r = _Runner(sc)
    try:
        r.provision()
    except _PROVISION_ERRORS as exc:
        torn = r.teardown()
        raise HarnessError(f"provisioning failed: {exc}",
                           {"provisioned": torn, "torn_down": torn}) from None
    init_ledger = len(r.plat.ledger)
    r.start()
    r.plat.run()
    if r.pending:
        r.teardown()
        raise HarnessError(f"{len(r.pending)} requests never completed")
    if sc.verify:
        r.sweep()
    window = r.window()
    dma_bad = r.dma_violations()
    stats = aggregate(r.plat.ledger, window, r.requests)
    total = stats.get("all")
    per_vm = {str(vm): st.to_dict() for vm, st in stats.items() if vm != "all"}
    iops = [stats[vr.vm].iops if vr.vm in stats else 0.0 for vr in r.vms]
    fairness = jain_fairness(iops) if any(iops) else None
    warm = sum(1 for rec in r.plat.ledger.records[init_ledger:]
               if rec.ts < window[0] and rec.kind == "page_fault")
    poller = r.host.poller_cycles() if sc.backend == "vhost_poll" else 0
    ops = total.ops if total else 0
    steady = r.event_counts(window)
    report = {
        "schema": REPORT_SCHEMA,
        "scenario": sc.to_dict(),
        "backend": sc.backend,
        "vm_to_ssd": _vm_to_ssd(sc),
        "window_ns": list(window),
        "total": total.to_dict() if total else None,
        "per_vm": per_vm,
        "fairness_jain": fairness,
        "device_limit_iops": sc.cost.device_limit_iops(sc.workload.bs, sc.n_ssds),
        "events": {
            "run": r.event_counts(),
            "steady": steady,
            "steady_per_op": {k: (v / ops if ops else 0.0) for k, v in steady.items()},
            "warmup_faults": warm,
        },
        "exit_class": sorted(EXIT_CLASS),
        "poller_cycles": poller,
        "requests": {"completed": len(r.requests),
                     "errors": sum(1 for q in r.requests if not q.ok),
                     "rejected": sum(vr.guest.rejected for vr in r.vms)},
        "integrity": {k: r.integrity.get(k, 0) for k in
                      ("writes", "blocks_verified", "mismatches", "reads_verified",
                       "read_mismatches")},
        "dma_shared_hpa_pages": dma_bad,
        "sim_end_ns": r.plat.now,
    }
    report["torn_down"] = r.teardown()
    if event_dump is not None:
        _dump_events(r.plat.ledger, event_dump)
    report["csv"] = stats_csv(stats) if stats else ""
    if report["integrity"]["mismatches"] or report["integrity"]["read_mismatches"]:
        raise HarnessError("integrity sweep found mismatched blocks", report)
    if dma_bad:
        raise HarnessError("DMA pages of distinct VMs share host memory", report)
    return report


def compare_backends(template: Scenario, backends=BACKENDS) -> dict:
    """Run ``template`` once per backend with the same seed; side-by-side report."""
    runs: dict = {}
    for b in backends:
        try:
            runs[b] = run_scenario(template.with_(backend=b))
        except HarnessError as exc:
            raise HarnessError(f"{b}: {exc}",
                               {"runs": runs, "failed": b, "partial": exc.partial}) from None
    means = {b: rep["total"]["mean_ns"] for b, rep in runs.items() if rep["total"]}
    deltas = {}
    ref = means.get("lightiov")
    for b, rep in runs.items():
        per_op = rep["events"]["steady_per_op"]
        d = {
            "mean_ns": means.get(b),
            "exits_per_op": per_op["vm_exit"] + per_op["intr_injected"],
            "faults_per_op": per_op["page_fault"],
            "copies_per_op": per_op["data_copy"],
            "poller_cycles_per_op": per_op["poller_cycle"],
        }
        if ref and means.get(b) is not None:
            d["mean_vs_lightiov"] = (means[b] - ref) / ref
        deltas[b] = d
    return {
        "schema": COMPARE_SCHEMA,
        "template": template.to_dict(),
        "ordering": sorted(means, key=lambda b: (means[b], b)),
        "deltas": deltas,
        "runs": runs,
    }


def write_report(report: dict, path) -> None:
    """JSON document at ``path`` plus the per-VM CSV alongside it."""
    doc = dict(report)
    csv_text = doc.pop("csv", None)
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_report(doc))
    if csv_text:
        stem = str(path)[:-5] if str(path).endswith(".json") else str(path)
        with open(stem + ".csv", "w", encoding="utf-8") as f:
            f.write(csv_text)
