"""fio-like closed-loop workload descriptions and request streams."""
from __future__ import annotations

import random
import struct
from dataclasses import asdict, dataclass, replace
from typing import Iterator

RW_MODES = ("randread", "randwrite", "read", "write")


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    """(bs, rw, numjobs, iodepth) plus how long to run.

    Exactly one of ``total_ops`` (per VM) and ``duration_ns`` bounds the run.
    """

    bs: int = 4096
    rw: str = "randread"
    numjobs: int = 1
    iodepth: int = 1
    total_ops: int | None = 10_000
    duration_ns: float | None = None
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.rw not in RW_MODES:
            raise WorkloadError(f"rw must be one of {RW_MODES}, got {self.rw!r}")
        if self.bs <= 0 or self.numjobs < 1 or self.iodepth < 1:
            raise WorkloadError("bs, numjobs and iodepth must be positive")
        if (self.total_ops is None) == (self.duration_ns is None):
            raise WorkloadError("set exactly one of total_ops and duration_ns")
        if self.total_ops is not None and self.total_ops < 1:
            raise WorkloadError("total_ops must be >= 1")
        if self.duration_ns is not None and self.duration_ns <= 0:
            raise WorkloadError("duration_ns must be > 0")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        kb = f"{self.bs // 1024}k" if self.bs % 1024 == 0 else f"{self.bs}b"
        rw = {"read": "seqread", "write": "seqwrite"}.get(self.rw, self.rw)
        return f"{rw}-{kb}-{self.numjobs}-{self.iodepth}"

    @property
    def is_write(self) -> bool:
        return self.rw in ("write", "randwrite")

    @property
    def is_random(self) -> bool:
        return self.rw.startswith("rand")

    def with_(self, **kw) -> WorkloadSpec:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> WorkloadSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise WorkloadError(f"unknown workload keys: {sorted(unknown)}")
        d = dict(d)
        if "duration_ns" in d and "total_ops" not in d:
            d["total_ops"] = None
        return cls(**d)


def _preset(name: str, bs: int, rw: str, numjobs: int, iodepth: int) -> WorkloadSpec:
    return WorkloadSpec(bs=bs, rw=rw, numjobs=numjobs, iodepth=iodepth, name=name)


PRESETS: dict[str, WorkloadSpec] = {p.name: p for p in (
    _preset("randread-4k-4-128", 4096, "randread", 4, 128),
    _preset("randwrite-4k-4-128", 4096, "randwrite", 4, 128),
    _preset("seqread-128k-4-128", 131072, "read", 4, 128),
    _preset("seqwrite-128k-4-128", 131072, "write", 4, 128),
    _preset("randread-4k-1-1", 4096, "randread", 1, 1),
    _preset("randwrite-4k-1-1", 4096, "randwrite", 1, 1),
    _preset("seqread-4k-1-1", 4096, "read", 1, 1),
    _preset("seqwrite-4k-1-1", 4096, "write", 1, 1),
)}


def preset(name: str, **overrides) -> WorkloadSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise WorkloadError(f"unknown workload {name!r}; known: {', '.join(PRESETS)}") from None
    return spec.with_(**overrides) if overrides else spec


def gen_requests(spec: WorkloadSpec, vm, lba_size: int, block_size: int,
                 job: int = 0) -> Iterator[tuple[str, int, int]]:
    """Endless (op, vlba, blocks) stream for one job of one VM.

    Random modes draw block-aligned offsets uniformly over the VM's range;
    sequential modes advance by ``bs`` and wrap. Each job has its own
    substream seeded from (seed, vm, job), and sequential jobs start at
    evenly spaced offsets.
    """
    if spec.bs % block_size:
        raise WorkloadError(f"bs {spec.bs} is not a multiple of the block size {block_size}")
    blocks = spec.bs // block_size
    slots = lba_size // blocks
    if slots < 1:
        raise WorkloadError(f"bs {spec.bs} exceeds the VM capacity of {lba_size} blocks")
    op = "write" if spec.is_write else "read"
    if spec.is_random:
        rng = random.Random(f"{spec.seed}:{vm}:{job}")
        draw = rng.randrange
        while True:
            yield op, draw(slots) * blocks, blocks
    else:
        i = (job * slots) // spec.numjobs
        while True:
            yield op, i * blocks, blocks
            i += 1
            if i == slots:
                i = 0


def block_pattern(vm: int, vlba: int, seq: int, block_size: int) -> bytes:
    """Self-describing fill for one written block."""
    return struct.pack("<QQ", (vm << 40) | vlba, seq) * (block_size // 16)
