"""Store requests and wire packets exchanged between hubs"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, NamedTuple

FLIT_BYTES = 16
LINE_BYTES = 128
SUB_BLOCKS = LINE_BYTES // FLIT_BYTES
FULL_MASK = (1 << SUB_BLOCKS) - 1


class PacketKind(Enum):
    ROWSP = "rowsp"
    ROWSP_NOP = "rowsp_nop"
    PLAIN_STORE = "plain_store"
    WRITE_ACK = "write_ack"
    CONTROL = "control"

    @property
    def is_data(self) -> bool:
        return self in (PacketKind.ROWSP, PacketKind.ROWSP_NOP, PacketKind.PLAIN_STORE)

    @property
    def is_logical(self) -> bool:
        return self in (PacketKind.ROWSP, PacketKind.ROWSP_NOP)


class Priority(Enum):
    HIGH = 0
    NOP = 1


class MallocId(NamedTuple):
    """Region handle: target GPU plus a per-GPU region index."""

    gpu: int
    region: int


class LogicalDest(NamedTuple):
    malloc_id: MallocId
    row_id: int
    row_offset: int


def sub_block_mask(offset_in_line: int, size: int) -> int:
    """Validity bits covered by ``size`` bytes at ``offset_in_line`` inside one 128 B line."""
    if size <= 0 or size % FLIT_BYTES or offset_in_line % FLIT_BYTES:
        raise ValueError(f"fragment must be a positive multiple of {FLIT_BYTES} B, 16 B aligned")
    first = offset_in_line // FLIT_BYTES
    count = size // FLIT_BYTES
    if first + count > SUB_BLOCKS:
        raise ValueError("fragment crosses a 128 B line")
    return ((1 << count) - 1) << first


@dataclass(slots=True)
class StoreRequest:
    """One producer store, either destination-agnostic (logical) or address-centric."""

    src_gpu: int
    dst_gpu: int
    size: int
    priority: Priority = Priority.HIGH
    logical_dest: LogicalDest | None = None
    phys_addr: int | None = None
    tag: Any = None

    @property
    def is_logical(self) -> bool:
        return self.logical_dest is not None

    @property
    def line_offset(self) -> int:
        if self.logical_dest is not None:
            return self.logical_dest.row_offset % LINE_BYTES
        return self.phys_addr % LINE_BYTES  # type: ignore[operator]

    @property
    def mask(self) -> int:
        return sub_block_mask(self.line_offset, self.size)

    @property
    def routing_key(self) -> int:
        if self.logical_dest is not None:
            return self.logical_dest.row_id
        return self.phys_addr // LINE_BYTES  # type: ignore[operator]


@dataclass(slots=True)
class Packet:
    src_gpu: int
    dst_gpu: int
    payload_bytes: int
    kind: PacketKind
    issue_time: int
    logical_dest: LogicalDest | None = None
    phys_addr: int | None = None
    mask: int = FULL_MASK
    header_flits: int = 1
    switch: int = -1
    tag: Any = None
    ack_for: int | None = None

    def __post_init__(self) -> None:
        if self.payload_bytes > LINE_BYTES or self.payload_bytes < 0:
            raise ValueError(f"payload of {self.payload_bytes} B exceeds one {LINE_BYTES} B packet")
        if self.kind.is_data:
            if (self.logical_dest is None) == (self.phys_addr is None):
                raise ValueError("data packets carry exactly one of logical_dest / phys_addr")
            if self.kind.is_logical != (self.logical_dest is not None):
                raise ValueError("rowsp kinds require a logical destination")
        elif self.payload_bytes:
            raise ValueError("acks and control packets are header-only")

    @property
    def flits(self) -> int:
        return self.header_flits + -(-self.payload_bytes // FLIT_BYTES)

    @property
    def routing_key(self) -> int:
        if self.logical_dest is not None:
            return self.logical_dest.row_id
        if self.phys_addr is not None:
            return self.phys_addr // LINE_BYTES
        return 0

    @property
    def line_key(self) -> tuple:
        """Identity of the 128 B line this packet writes (used for ack bookkeeping)."""
        if self.logical_dest is not None:
            dest = self.logical_dest
            return (dest.malloc_id, dest.row_id, dest.row_offset // LINE_BYTES)
        return (self.phys_addr // LINE_BYTES,)  # type: ignore[operator]
