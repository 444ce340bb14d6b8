"""Opcode, status and register constants for the simulated NVMe controller."""

PAGE_SIZE = 4096
PAGE_SHIFT = 12

SQE_SIZE = 64
CQE_SIZE = 16

# Largest number of I/O queue pairs a controller can expose (qid 1..65535).
MAX_IO_QPAIRS = 65535

# Admin opcodes
ADMIN_DELETE_IO_SQ = 0x00
ADMIN_CREATE_IO_SQ = 0x01
ADMIN_DELETE_IO_CQ = 0x04
ADMIN_CREATE_IO_CQ = 0x05
ADMIN_IDENTIFY = 0x06
ADMIN_SET_FEATURES = 0x09

ADMIN_OPCODES = frozenset({
    ADMIN_DELETE_IO_SQ, ADMIN_CREATE_IO_SQ, ADMIN_DELETE_IO_CQ,
    ADMIN_CREATE_IO_CQ, ADMIN_IDENTIFY, ADMIN_SET_FEATURES,
})

# I/O opcodes
IO_FLUSH = 0x00
IO_WRITE = 0x01
IO_READ = 0x02

FEAT_NUM_QUEUES = 0x07

CNS_NAMESPACE = 0x00
CNS_CONTROLLER = 0x01

# Status codes (SCT 0 generic, SCT 1 command specific), packed as (sct << 8) | sc.
SC_SUCCESS = 0x000
SC_INVALID_OPCODE = 0x001
SC_INVALID_FIELD = 0x002
SC_DATA_XFER_ERROR = 0x004
SC_ABORTED_SQ_DELETION = 0x008
SC_INVALID_NAMESPACE = 0x00B
SC_LBA_OUT_OF_RANGE = 0x080
SC_CQ_INVALID = 0x100
SC_INVALID_QID = 0x101
SC_INVALID_QSIZE = 0x102
SC_INVALID_QUEUE_DELETION = 0x10C

STATUS_NAMES = {
    SC_SUCCESS: "success",
    SC_INVALID_OPCODE: "invalid_opcode",
    SC_INVALID_FIELD: "invalid_field",
    SC_DATA_XFER_ERROR: "data_transfer_error",
    SC_ABORTED_SQ_DELETION: "aborted_sq_deletion",
    SC_INVALID_NAMESPACE: "invalid_namespace",
    SC_LBA_OUT_OF_RANGE: "lba_out_of_range",
    SC_CQ_INVALID: "completion_queue_invalid",
    SC_INVALID_QID: "invalid_queue_identifier",
    SC_INVALID_QSIZE: "invalid_queue_size",
    SC_INVALID_QUEUE_DELETION: "invalid_queue_deletion",
}

# BAR0 register offsets
REG_CAP = 0x00
REG_VS = 0x08
REG_INTMS = 0x0C
REG_INTMC = 0x10
REG_CC = 0x14
REG_CSTS = 0x1C
REG_AQA = 0x24
REG_ASQ = 0x28
REG_ACQ = 0x30
REG_CMBLOC = 0x38
REG_CMBSZ = 0x3C
# Vendor-specific window holding the per-VM LBA grant (lba_start, lba_size).
REG_VS_LBA_START = 0xF00
REG_VS_LBA_SIZE = 0xF08

CC_EN = 0x1
CSTS_RDY = 0x1
CSTS_CFS = 0x2

NVME_VERSION = 0x00010400

# Doorbell stride: 4 << DSTRD bytes between doorbells. DSTRD=9 gives each
# queue pair (SQ tail + CQ head) its own 4 KiB page.
DSTRD = 9
DB_STRIDE = 4 << DSTRD
DB_BASE = 0x1000


def doorbell_offset(qid: int, cq: bool) -> int:
    """BAR0 offset of the SQ-tail (cq=False) or CQ-head doorbell of ``qid``."""
    return DB_BASE + (2 * qid + (1 if cq else 0)) * DB_STRIDE


def doorbell_page(qid: int) -> int:
    return DB_BASE + qid * PAGE_SIZE
