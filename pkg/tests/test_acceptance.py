"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line."""
import json
import random
import time

import pytest

from conftest import CRITERIA
from ringcheck import run_ring_model

from iovsim.baselines import VhostGuest, VhostPollHost, VirtioGuest, VirtioHost
from iovsim.harness import Scenario, compare_backends, run_scenario
from iovsim.lightiov.guest import GuestIoRequest, LocalIoError, guest_init
from iovsim.lightiov.host import LightIovHost, ProvisionError
from iovsim.mem import PAGE_SIZE, dma_hpa_owners
from iovsim.nvme.constants import SC_INVALID_QID
from iovsim.platform import Platform, SsdConfig
from iovsim.telemetry import EXIT_CLASS, dumps_report
from iovsim.workload import block_pattern, preset

GiB = 1 << 30


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[n] = line
    print(line)
    assert ok, line


# 1 ------------------------------------------------------------------ fast-path silence

def test_c01_fast_path_silence():
    t0 = time.perf_counter()
    rep = run_scenario(Scenario("c1", "lightiov", 1, 1,
                                workload=preset("randread-4k-1-1", total_ops=10_000), seed=1))
    dt = time.perf_counter() - t0
    steady = rep["events"]["steady"]
    depth = rep["scenario"]["queue_depth"] or 64
    budget = -(-depth * 64 // PAGE_SIZE) + -(-depth * 16 // PAGE_SIZE) + 1
    warm = rep["events"]["warmup_faults"]
    ok = (steady["vm_exit"] + steady["intr_injected"] == 0 and steady["page_fault"] == 0
          and warm <= budget and rep["total"]["ops"] > 0 and dt < 5.0)
    verdict(1, ok, f"steady exits={steady['vm_exit'] + steady['intr_injected']} "
                   f"faults={steady['page_fault']} warm-up faults={warm}<={budget} "
                   f"runtime={dt:.2f}s")


# 2 ------------------------------------------------------------------ one-fault rule

def _fault_fuzz(seed: int) -> tuple[int, int]:
    rnd = random.Random(seed)
    plat = Platform(2, ssd=SsdConfig(capacity_bytes=8 * GiB, cmb_bytes=256 << 20))
    host = LightIovHost(plat, queue_depth=rnd.choice([16, 64, 128]))
    tables, live, guests = [], [], {}
    pages_touched = 0
    for vm in range(50):
        host.provision_vm(vm, rnd.randint(1, 3), 4096, ssd=vm % 2, ram_bytes=1 << 20)
        tables.append(plat.vms[vm].ept)
        g = guest_init(plat, host, vm)
        g.buf = g.ctx.ram_alloc(8 * PAGE_SIZE)
        guests[vm] = g
        live.append(vm)
        for _ in range(rnd.randint(0, 200)):
            v = rnd.choice(live)
            gg = guests[v]
            q = rnd.randrange(gg.n_queues)
            if gg.full(q):
                continue
            n = rnd.randint(1, 8)
            gg.submit(GuestIoRequest(rnd.choice(["read", "write"]), rnd.randrange(4096 - n), n,
                                     gg.buf), queue=q)
        if rnd.random() < 0.3:
            plat.run(until=plat.now + rnd.uniform(0, 5e5))
        if rnd.random() < 0.25 and len(live) > 1:
            v = live.pop(rnd.randrange(len(live)))
            host.teardown_vm(v)
    plat.run()
    for v in list(live):
        host.teardown_vm(v)
    plat.run()
    worst = 0
    for t in tables:
        pages_touched += len(t.fault_counts)
        worst = max([worst, *t.fault_counts.values()])
    return worst, pages_touched


def test_c02_one_fault_rule():
    worst, pages = 0, 0
    for seed in range(10):
        w, p = _fault_fuzz(seed)
        worst, pages = max(worst, w), pages + p
    verdict(2, worst <= 1 and pages > 0,
            f"max faults per page={worst} over {pages} faulted pages, 10 seeds x 50 VMs")


# 3 ------------------------------------------------------------------ isolation fuzz

def test_c03_isolation_fuzz():
    t0 = time.perf_counter()
    rnd = random.Random(3)
    plat = Platform(1, ssd=SsdConfig(capacity_bytes=1 << 30, cmb_bytes=64 << 20), timed=False)
    host = LightIovHost(plat, queue_depth=64)
    n_vms, blocks = 4, 4096
    guests = []
    for vm in range(n_vms):
        host.provision_vm(vm, 1, blocks, ram_bytes=256 << 10)
        g = guest_init(plat, host, vm)
        g.buf = g.ctx.ram_alloc(8 * PAGE_SIZE)
        guests.append(g)
    ctrl, ns = plat.ssds[0].ctrl, plat.ssds[0].namespace
    fetched_before = len(ctrl.fetch_log)
    rejected = valid = 0
    bad_tags = set()
    for i in range(100_000):
        g = rnd.choice(guests)
        ctx = g.ctx
        n = rnd.randint(1, 8)
        kind = rnd.random()
        if kind < 0.45:
            vlba = rnd.choice([blocks - n + rnd.randint(1, n), blocks + rnd.randrange(1 << 30),
                               -rnd.randint(1, 1 << 20), (1 << 62) + rnd.randrange(1 << 20)])
            buf = g.buf
        elif kind < 0.9:
            vlba = rnd.randrange(blocks - n)
            buf = rnd.choice([
                ctx.gpa_base + ctx.gpa_size + rnd.randrange(1 << 30) * PAGE_SIZE,
                ctx.gpa_base - rnd.randint(1, 64) * PAGE_SIZE if ctx.gpa_base else 1 << 45,
                ctx.gpa_base + ctx.gpa_size - PAGE_SIZE * rnd.randint(0, n - 1) if n > 1
                else ctx.gpa_base + ctx.gpa_size,
                rnd.choice([g2 for g2 in guests if g2 is not g]).buf,
            ])
        else:
            vlba = rnd.randrange(blocks - n)
            g.mem.write(g.buf, block_pattern(g.vm, vlba, i, 4096) * n)
            g.submit(GuestIoRequest("write", vlba, n, g.buf, tag=("ok", i)))
            valid += 1
            continue
        try:
            g.submit(GuestIoRequest(rnd.choice(["read", "write"]), vlba, n, buf, tag=("bad", i)))
        except LocalIoError:
            rejected += 1
        else:
            bad_tags.add(i)
    adversarial = 100_000 - valid
    io_fetches = [f for f in ctrl.fetch_log[fetched_before:] if f.qid != 0]
    grants = {g.vm: (host.resources[g.vm].lba_start, host.resources[g.vm].lba_size)
              for g in guests}
    fetch_ok = len(io_fetches) == valid and all(
        grants[f.owner][0] <= f.slba and f.slba + f.nlb + 1 <= sum(grants[f.owner])
        for f in io_fetches)
    outside = 0
    for lba in ns.written_blocks():
        writer = int.from_bytes(ns.read_blocks(lba, 1)[:8], "little") >> 40
        start, size = grants[writer]
        outside += not (start <= lba < start + size)
    dt = time.perf_counter() - t0
    ok = (rejected == adversarial and not bad_tags and fetch_ok and outside == 0 and dt < 30)
    verdict(3, ok, f"{rejected}/{adversarial} adversarial rejected locally, "
                   f"{len(io_fetches)} device fetches all valid={fetch_ok}, "
                   f"writes outside grant={outside}, runtime={dt:.1f}s")


# 4 ------------------------------------------------------------------ DMA disjointness

def test_c04_dma_disjointness():
    shared = 0
    checked = 0
    for backend in ("lightiov", "vhost_poll", "virtio"):
        for wl in ("randwrite-4k-4-128", "seqread-128k-4-128"):
            rep = run_scenario(Scenario("c4", backend, 6, 2, capacity_bytes=64 << 20,
                                        workload=preset(wl, total_ops=600), seed=4))
            shared += rep["dma_shared_hpa_pages"]
            checked += 1
    # independent brute force on a live platform: no HPA page reachable by two owners
    plat = Platform(1, ssd=SsdConfig(capacity_bytes=1 << 30, cmb_bytes=64 << 20), timed=False)
    host = LightIovHost(plat, queue_depth=64)
    for vm in range(20):
        host.provision_vm(vm, 2, 1024, ram_bytes=512 << 10)
        guest_init(plat, host, vm)
    owners = dma_hpa_owners(plat.iommu.table(0), plat.gpa)
    live_shared = sum(1 for o in owners.values() if len(o) > 1)
    verdict(4, shared == 0 and live_shared == 0,
            f"{checked} scenarios shared HPA pages={shared}; "
            f"20-VM brute force over {len(owners)} pages shared={live_shared}")


# 5 ------------------------------------------------------------------ event profiles

def _profile(kind: str, n: int = 20) -> list[tuple[int, int]]:
    plat = Platform(1, ssd=SsdConfig(capacity_bytes=1 << 30, cmb_bytes=64 << 20))
    if kind == "lightiov":
        host = LightIovHost(plat, queue_depth=64)
        host.provision_vm(0, 1, 1024)
        g = guest_init(plat, host, 0)
        g.set_tracer(host.tracer(0))
    elif kind == "virtio":
        host = VirtioHost(plat, queue_depth=64)
        host.provision_vm(0, 1, 1024)
        g = VirtioGuest(plat, host, 0).init()
    else:
        host = VhostPollHost(plat, queue_depth=64)
        host.provision_vm(0, 1, 1024)
        g = VhostGuest(plat, host, 0).init()
    buf = g.ctx.ram_alloc(PAGE_SIZE)
    out = []
    for i in range(-1, n):  # request -1 warms the rings
        g.submit(GuestIoRequest("read", i % 512, 1, buf, tag=i))
        plat.run()
        if i >= 0:
            tr = plat.ledger.trace(i)
            out.append((sum(r.kind in EXIT_CLASS for r in tr),
                        sum(r.kind == "data_copy" for r in tr)))
    return out


def test_c05_event_profiles():
    lio, vho, vio = _profile("lightiov"), _profile("vhost_poll"), _profile("virtio")
    ok = (all(e == 0 and c == 0 for e, c in lio)
          and all(e == 1 and c == 0 for e, c in vho)
          and all(e >= 2 and c == 2 for e, c in vio))
    verdict(5, ok, f"per-request (exits, copies): lightiov={sorted(set(lio))} "
                   f"vhost_poll={sorted(set(vho))} virtio={sorted(set(vio))}")


# 6 ------------------------------------------------------------------ capacity

def test_c06_capacity():
    t0 = time.perf_counter()
    plat = Platform(1, timed=False, record_fetches=False)
    host = LightIovHost(plat, queue_depth=64)
    for vm in range(10_000):
        host.provision_vm(vm, 1, (64 << 20) // 4096, ram_bytes=64 << 10)
    ok10k = plat.ssds[0].ctrl.registered_pairs() == 10_000
    t10k = time.perf_counter() - t0
    for vm in range(10_000, 65_535):
        host.provision_vm(vm, 1, 16, ram_bytes=4096, depth=2)
    full = plat.ssds[0].ctrl.registered_pairs()
    try:
        host.provision_vm("one-too-many", 1, 16, depth=2)
        host_refused = False
    except ProvisionError:
        host_refused = True
    drv = plat.ssds[0].driver
    _, iova = drv.dma_alloc(PAGE_SIZE)
    dev_refused = drv.create_cq(65535, 2, iova, None).status == SC_INVALID_QID
    dt = time.perf_counter() - t0
    ok = ok10k and full == 65_535 and host_refused and dev_refused and dt < 60
    verdict(6, ok, f"10,000 VMs in {t10k:.1f}s; {full} pairs registered; 65,536th "
                   f"refused by host={host_refused} device={dev_refused}; total {dt:.1f}s")


# 7 ------------------------------------------------------------------ fairness

def test_c07_fairness():
    rep = run_scenario(Scenario("c7", "lightiov", 8, 2,
                                workload=preset("randread-4k-4-128", total_ops=8000), seed=7))
    jain = rep["fairness_jain"]
    ratio = rep["total"]["iops"] / rep["device_limit_iops"]
    verdict(7, jain >= 0.99 and abs(ratio - 1) <= 0.02,
            f"Jain={jain:.6f} aggregate/limit={ratio:.6f}")


# 8 ------------------------------------------------------------------ poller trend

def _vhost_mean(n_vms: int, cores: int) -> float:
    rep = run_scenario(Scenario("c8", "vhost_poll", n_vms, 2, poller_cores=cores,
                                capacity_bytes=64 << 20,
                                workload=preset("randread-4k-1-1", total_ops=100), seed=8))
    return rep["total"]["mean_ns"]


def test_c08_poller_trend():
    m25, m200, m200x2 = _vhost_mean(25, 1), _vhost_mean(200, 1), _vhost_mean(200, 2)
    verdict(8, m200 > m25 and m200x2 < m200,
            f"1 core: 25 VMs {m25 / 1e3:.1f}us < 200 VMs {m200 / 1e3:.1f}us; "
            f"200 VMs at 2 cores {m200x2 / 1e3:.1f}us")


# 9 ------------------------------------------------------------------ comparative latency

def test_c09_comparative_latency():
    rep = compare_backends(Scenario("c9", "lightiov", 1, 1,
                                    workload=preset("randread-4k-1-1", total_ops=10_000),
                                    seed=9))
    m = {b: rep["runs"][b]["total"]["mean_ns"] for b in rep["runs"]}
    gap = (m["virtio"] - m["lightiov"]) / m["virtio"]
    ok = m["lightiov"] < m["vhost_poll"] < m["virtio"] and gap > 0.30
    verdict(9, ok, f"mean lightiov={m['lightiov'] / 1e3:.2f}us "
                   f"vhost_poll={m['vhost_poll'] / 1e3:.2f}us virtio={m['virtio'] / 1e3:.2f}us "
                   f"gap={gap:.1%}")


# 10 ----------------------------------------------------------------- determinism + rings

def test_c10_determinism_and_rings():
    sc = Scenario("c10", "lightiov", 3, 2, capacity_bytes=64 << 20,
                  workload=preset("randwrite-4k-4-128", total_ops=2000), seed=10)
    docs = [dumps_report({k: v for k, v in run_scenario(sc).items()}) for _ in range(2)]
    vsc = sc.with_(backend="virtio")
    vdocs = [dumps_report(run_scenario(vsc)) for _ in range(2)]
    same = docs[0] == docs[1] and vdocs[0] == vdocs[1]
    json.loads(docs[0])
    t0 = time.perf_counter()
    ring = run_ring_model(1_000_000, 10)
    dt = time.perf_counter() - t0
    ok = same and ring["cq_wraps"] >= 3 and ring["full_hits"] > 0
    verdict(10, ok, f"byte-identical reports={same}; 10^6 ring ops: "
                    f"{ring['completed']} completions conserved, {ring['cq_wraps']} CQ wraps, "
                    f"{ring['full_hits']} queue-full refusals ({dt:.1f}s)")
