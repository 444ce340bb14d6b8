"""Bit-exact submission (64 B) and completion (16 B) queue entries."""
from __future__ import annotations

import struct
from dataclasses import dataclass

from .constants import CQE_SIZE, IO_READ, IO_WRITE, SQE_SIZE

_SQE = struct.Struct("<BBHI8xQQQ6I")
_CQE = struct.Struct("<IIHHHH")
assert _SQE.size == SQE_SIZE and _CQE.size == CQE_SIZE


@dataclass(slots=True)
class NvmeCommand:
    opcode: int
    cid: int = 0
    nsid: int = 0
    prp1: int = 0
    prp2: int = 0
    cdw10: int = 0
    cdw11: int = 0
    cdw12: int = 0
    cdw13: int = 0
    cdw14: int = 0
    cdw15: int = 0
    flags: int = 0
    mptr: int = 0

    @classmethod
    def io(cls, opcode: int, cid: int, nsid: int, slba: int, nlb: int,
           prp1: int, prp2: int = 0) -> NvmeCommand:
        """Build a read/write command. ``nlb`` is zero-based (blocks - 1)."""
        if not 0 <= nlb <= 0xFFFF:
            raise ValueError(f"nlb {nlb} does not fit 16 bits")
        return cls(opcode, cid, nsid, prp1, prp2,
                   slba & 0xFFFFFFFF, (slba >> 32) & 0xFFFFFFFF, nlb)

    @property
    def slba(self) -> int:
        return self.cdw10 | (self.cdw11 << 32)

    @property
    def nlb(self) -> int:
        return self.cdw12 & 0xFFFF

    @property
    def is_io_data(self) -> bool:
        return self.opcode in (IO_READ, IO_WRITE)

    def encode(self) -> bytes:
        return _SQE.pack(self.opcode, self.flags, self.cid, self.nsid,
                         self.mptr, self.prp1, self.prp2,
                         self.cdw10, self.cdw11, self.cdw12,
                         self.cdw13, self.cdw14, self.cdw15)

    @classmethod
    def decode(cls, raw) -> NvmeCommand:
        (opcode, flags, cid, nsid, mptr, prp1, prp2,
         c10, c11, c12, c13, c14, c15) = _SQE.unpack(raw)
        return cls(opcode, cid, nsid, prp1, prp2, c10, c11, c12, c13, c14,
                   c15, flags, mptr)


@dataclass(slots=True)
class NvmeCompletion:
    result: int = 0
    sq_head: int = 0
    sqid: int = 0
    cid: int = 0
    status: int = 0
    phase: int = 0

    @property
    def ok(self) -> bool:
        return self.status == 0

    def encode(self) -> bytes:
        if not 0 <= self.status < (1 << 15):
            raise ValueError(f"status {self.status:#x} does not fit 15 bits")
        return _CQE.pack(self.result, 0, self.sq_head, self.sqid, self.cid,
                         (self.status << 1) | (self.phase & 1))

    @classmethod
    def decode(cls, raw) -> NvmeCompletion:
        result, _, sq_head, sqid, cid, sf = _CQE.unpack(raw)
        return cls(result, sq_head, sqid, cid, sf >> 1, sf & 1)


def cqe_phase(raw) -> int:
    """Phase tag of an encoded completion without a full decode."""
    return raw[14] & 1
