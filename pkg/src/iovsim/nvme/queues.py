"""Queue-pair state on the device side and ring helpers for drivers."""
from __future__ import annotations

from dataclasses import dataclass, field

from .commands import NvmeCommand, NvmeCompletion
from .constants import CQE_SIZE, SQE_SIZE

SQ_TAIL = "sq_tail"
CQ_HEAD = "cq_head"


class QueueFullError(Exception):
    """Producer would overwrite an unconsumed entry."""


def ring_full(tail: int, head: int, depth: int) -> bool:
    return (tail + 1) % depth == head


def ring_used(tail: int, head: int, depth: int) -> int:
    return (tail - head) % depth


@dataclass(slots=True)
class QueuePair:
    """Controller-side view of one SQ/CQ pair registered at ``qid``.

    The SQ and CQ halves are created by separate admin commands, so either
    side may be absent. The SQ may post into another pair's CQ (``cqid``).
    """

    qid: int
    sq_base: int = 0
    cq_base: int = 0
    sq_depth: int = 0
    cq_depth: int = 0
    cqid: int = 0
    sq_tail: int = 0
    sq_head: int = 0
    cq_tail: int = 0
    cq_head: int = 0
    cq_phase: int = 1
    int_vector: int | None = None
    owner: object = None
    has_sq: bool = False
    has_cq: bool = False
    error: bool = False
    irq_pending: bool = False
    # completions waiting for CQ space, in post order
    cq_backlog: list = field(default_factory=list)
    # commands fetched from this SQ but not yet completed
    inflight: int = 0
    # CQ slots promised to fetched commands that have not posted yet
    cq_reserved: int = 0

    @property
    def depth(self) -> int:
        return self.sq_depth

    def sq_pending(self) -> int:
        if not self.has_sq:
            return 0
        return (self.sq_tail - self.sq_head) % self.sq_depth

    def cq_used(self) -> int:
        return (self.cq_tail - self.cq_head) % self.cq_depth

    def cq_free(self) -> int:
        """Entries the controller may still post without overrunning the host."""
        return self.cq_depth - 1 - self.cq_used()


@dataclass(slots=True)
class DoorbellRegister:
    qid: int
    kind: str  # SQ_TAIL | CQ_HEAD
    value: int = 0
    page_addr: int = 0


class SqProducer:
    """Driver-side submission ring writer.

    ``mem`` is anything with ``write(addr, data)``; the driver rings the
    doorbell itself with the returned tail.
    """

    def __init__(self, mem, base: int, depth: int, sqid: int):
        if depth < 2:
            raise ValueError("queue depth must be at least 2")
        self.mem = mem
        self.base = base
        self.depth = depth
        self.sqid = sqid
        self.tail = 0
        self.head = 0

    def full(self) -> bool:
        return (self.tail + 1) % self.depth == self.head

    def space(self) -> int:
        return self.depth - 1 - (self.tail - self.head) % self.depth

    def slot_addr(self, index: int) -> int:
        return self.base + index * SQE_SIZE

    def push(self, cmd: NvmeCommand) -> int:
        if self.full():
            raise QueueFullError(f"SQ {self.sqid} full (depth {self.depth})")
        self.mem.write(self.base + self.tail * SQE_SIZE, cmd.encode())
        self.tail = (self.tail + 1) % self.depth
        return self.tail

    def update_head(self, sq_head: int) -> None:
        self.head = sq_head % self.depth


class CqConsumer:
    """Driver-side completion ring reader using the phase tag."""

    def __init__(self, mem, base: int, depth: int, cqid: int):
        self.mem = mem
        self.base = base
        self.depth = depth
        self.cqid = cqid
        self.head = 0
        self.phase = 1

    def peek(self) -> NvmeCompletion | None:
        raw = self.mem.read(self.base + self.head * CQE_SIZE, CQE_SIZE)
        if raw[14] & 1 != self.phase:
            return None
        return NvmeCompletion.decode(raw)

    def poll(self, limit: int | None = None) -> list[NvmeCompletion]:
        out = []
        while limit is None or len(out) < limit:
            cpl = self.peek()
            if cpl is None:
                break
            out.append(cpl)
            self.head += 1
            if self.head == self.depth:
                self.head = 0
                self.phase ^= 1
        return out
