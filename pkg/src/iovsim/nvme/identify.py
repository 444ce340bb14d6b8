"""4096-byte IDENTIFY data structures (the subset of fields the simulator uses)."""
from __future__ import annotations

import struct

IDENTIFY_SIZE = 4096

# Vendor-specific area: u16 number of I/O queue pairs this controller offers.
VS_MAX_QPAIRS_OFFSET = 3072


def _ascii(text: str, width: int) -> bytes:
    return text.encode("ascii")[:width].ljust(width, b" ")


def identify_controller(*, serial: str, model: str, max_qpairs: int, cntlid: int = 0,
                        nn: int = 1, version: int = 0x00010400) -> bytes:
    buf = bytearray(IDENTIFY_SIZE)
    struct.pack_into("<HH", buf, 0, 0x1D1D, 0x1D1D)  # VID, SSVID
    buf[4:24] = _ascii(serial, 20)
    buf[24:64] = _ascii(model, 40)
    buf[64:72] = _ascii("1.0", 8)
    buf[77] = 5  # MDTS: 2^5 pages = 128 KiB
    struct.pack_into("<HI", buf, 78, cntlid, version)
    buf[512] = 0x66  # SQES: 64-byte entries
    buf[513] = 0x44  # CQES: 16-byte entries
    struct.pack_into("<I", buf, 516, nn)
    struct.pack_into("<H", buf, VS_MAX_QPAIRS_OFFSET, max_qpairs)
    return bytes(buf)


def identify_namespace(*, nsze: int, block_size: int) -> bytes:
    buf = bytearray(IDENTIFY_SIZE)
    struct.pack_into("<QQQ", buf, 0, nsze, nsze, nsze)
    buf[25] = 0  # NLBAF: one format
    buf[26] = 0  # FLBAS: format 0
    lbads = block_size.bit_length() - 1
    struct.pack_into("<HBB", buf, 128, 0, lbads, 0)
    return bytes(buf)


def parse_identify_controller(data: bytes) -> dict:
    return {
        "vid": struct.unpack_from("<H", data, 0)[0],
        "serial": data[4:24].decode("ascii").rstrip(),
        "model": data[24:64].decode("ascii").rstrip(),
        "cntlid": struct.unpack_from("<H", data, 78)[0],
        "nn": struct.unpack_from("<I", data, 516)[0],
        "max_qpairs": struct.unpack_from("<H", data, VS_MAX_QPAIRS_OFFSET)[0],
    }


def parse_identify_namespace(data: bytes) -> dict:
    nsze, ncap, nuse = struct.unpack_from("<QQQ", data, 0)
    _, lbads, _ = struct.unpack_from("<HBB", data, 128)
    return {"nsze": nsze, "ncap": ncap, "nuse": nuse, "block_size": 1 << lbads}
