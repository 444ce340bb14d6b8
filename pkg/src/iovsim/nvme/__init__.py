"""Simulated NVMe controller, queues, namespace and host driver."""
