import json

import pytest

from iovsim.harness import (
    ConfigError, HarnessError, Scenario, compare_backends, load_config, run_scenario,
    scenario_from_dict, write_report,
)
from iovsim.telemetry import CostModel
from iovsim.workload import preset

GiB = 1 << 30
SMALL = dict(capacity_bytes=64 << 20, ssd_capacity_bytes=4 * GiB, cmb_bytes=64 << 20)


def small(backend="lightiov", n_vms=1, ops=300, wl="randread-4k-1-1", **kw):
    return Scenario("t", backend, n_vms, kw.pop("n_ssds", 1),
                    workload=preset(wl, total_ops=ops), seed=1, **{**SMALL, **kw})


def test_vm_to_ssd_round_robin():
    sc = small(n_vms=8, n_ssds=2)
    assert [sc.ssd_of(i) for i in range(8)] == [0, 1] * 4


@pytest.mark.parametrize("backend", ["lightiov", "vhost_poll", "virtio"])
@pytest.mark.parametrize("wl", ["randwrite-4k-4-128", "seqread-128k-4-128", "randread-4k-1-1"])
def test_each_backend_runs_clean(backend, wl):
    rep = run_scenario(small(backend, n_vms=2, ops=400, wl=wl, n_ssds=2))
    assert rep["schema"] == "iovsim.report/1"
    assert rep["requests"]["completed"] == 800
    assert rep["requests"]["errors"] == 0
    assert rep["integrity"]["mismatches"] == rep["integrity"]["read_mismatches"] == 0
    assert rep["dma_shared_hpa_pages"] == 0
    assert rep["torn_down"] == 2
    assert set(rep["per_vm"]) == {"0", "1"}
    assert rep["vm_to_ssd"] == {"0": 0, "1": 1}
    if "write" in wl:
        assert rep["integrity"]["blocks_verified"] > 0


def test_integrity_verifies_reads_after_writes():
    sc = small(wl="randwrite-4k-4-128", ops=400, capacity_bytes=64 * 4096)
    rep = run_scenario(sc)
    assert rep["integrity"]["writes"] == 400


def test_duration_mode():
    sc = small().with_(workload=preset("randread-4k-1-1").with_(total_ops=None,
                                                                  duration_ns=2e6))
    rep = run_scenario(sc)
    assert rep["window_ns"][1] == pytest.approx(2e6)
    assert rep["total"]["ops"] > 0


def test_provisioning_failure_tears_down():
    sc = small(n_vms=3, capacity_bytes=GiB, ssd_capacity_bytes=2 * GiB)
    with pytest.raises(HarnessError) as ei:
        run_scenario(sc)
    assert ei.value.partial == {"provisioned": 2, "torn_down": 2}


def test_two_hundred_vms_provision():
    rep = run_scenario(small("vhost_poll", n_vms=200, ops=5, n_ssds=2,
                             capacity_bytes=16 << 20))
    assert rep["requests"]["completed"] == 1000 and rep["torn_down"] == 200


def test_event_dump(tmp_path):
    path = tmp_path / "ev.tsv"
    run_scenario(small(ops=20), event_dump=path)
    lines = path.read_text().splitlines()
    assert lines and all(len(line.split("\t")) == 6 for line in lines)


def test_compare_orders_backends():
    rep = compare_backends(small(ops=300))
    assert rep["ordering"] == ["lightiov", "vhost_poll", "virtio"]
    d = rep["deltas"]
    assert d["lightiov"]["exits_per_op"] == 0 and d["lightiov"]["faults_per_op"] == 0
    assert d["virtio"]["copies_per_op"] == 2.0
    assert d["vhost_poll"]["exits_per_op"] == 1.0
    assert d["virtio"]["mean_vs_lightiov"] > 0.3


def test_zero_cost_ties_backends():
    sc = small(ops=200).with_(cost=CostModel().zeroed())
    means = {b: r["total"]["mean_ns"] for b, r in compare_backends(sc)["runs"].items()}
    assert len(set(means.values())) == 1


def test_scenario_validation():
    with pytest.raises(ConfigError):
        small(backend="sriov")
    with pytest.raises(ConfigError):
        small(n_vms=0)
    with pytest.raises(ConfigError):
        small(poller_cores=0, backend="vhost_poll")
    with pytest.raises(ConfigError):
        small(capacity_bytes=1000)
    with pytest.raises(ConfigError):
        small(queue_depth=1)
    with pytest.raises(ConfigError):
        small(warmup_fraction=1.0)
    assert small(wl="randread-4k-4-128").depth == 256
    assert small().depth == 64


def test_scenario_from_dict_forms():
    sc = scenario_from_dict({"name": "x", "backend": "virtio", "n_vms": 2, "n_ssds": 1,
                             "workload": {"preset": "seqwrite-4k-1-1", "total_ops": 50},
                             "cost": {"vm_exit_ns": 1.0}, "seed": 9})
    assert sc.workload.rw == "write" and sc.workload.total_ops == 50
    assert sc.cost.vm_exit_ns == 1.0 and sc.spec.seed == 9
    assert scenario_from_dict({"name": "y", "backend": "lightiov", "n_vms": 1, "n_ssds": 1,
                               "workload": "randread-4k-4-128"}).workload.iodepth == 128
    for bad in ({"name": "z", "backend": "lightiov", "n_vms": 1, "n_ssds": 1, "oops": 1},
                {"name": "z", "backend": "lightiov", "n_vms": 1, "n_ssds": 1, "workload": 3},
                {"name": "z", "backend": "lightiov", "n_vms": 1, "n_ssds": 1,
                 "workload": "nope"},
                {"name": "z", "backend": "lightiov", "n_vms": 1, "n_ssds": 1,
                 "cost": {"warp": 1}},
                [1, 2]):
        with pytest.raises(ConfigError):
            scenario_from_dict(bad)


def test_load_config(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("name: a\nbackend: vhost_poll\nn_vms: 4\nn_ssds: 2\npoller_cores: 2\n"
                 "workload: {preset: randread-4k-4-128, total_ops: 100}\n")
    sc = load_config(p)
    assert (sc.n_vms, sc.poller_cores, sc.workload.numjobs) == (4, 2, 4)
    p.write_text("name: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_write_report_json_and_csv(tmp_path):
    rep = run_scenario(small(n_vms=2, ops=50))
    out = tmp_path / "r.json"
    write_report(rep, out)
    doc = json.loads(out.read_text())
    assert "csv" not in doc and doc["backend"] == "lightiov"
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0].startswith("vm,iops") and len(rows) == 3
