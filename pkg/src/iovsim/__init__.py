"""Discrete-event model of NVMe I/O virtualization backends.

Three ways of giving VMs an SSD are modeled side by side: passthrough queue
pairs placed in the controller memory buffer (``lightiov``), a para-virtual
split-ring block device (``virtio``), and host polling cores that shadow
guest NVMe queues (``vhost_poll``).
"""
from .harness import Scenario, compare_backends, load_config, run_scenario
from .platform import Platform, SsdConfig
from .telemetry import CostModel, EventLedger, latency_of
from .workload import PRESETS, WorkloadSpec, gen_requests

__all__ = [
    "CostModel", "EventLedger", "PRESETS", "Platform", "Scenario", "SsdConfig",
    "WorkloadSpec", "compare_backends", "gen_requests", "latency_of", "load_config",
    "run_scenario",
]
__version__ = "0.1.0"
