from __future__ import annotations

from dataclasses import dataclass

from .core import NetAddress, Protocol


@dataclass(frozen=True)
class PacketEvent:
    """One packet in flight. ``origin`` names the emitting node and is
    simulator bookkeeping only; receivers must not trust or use it."""

    src: NetAddress
    dst: NetAddress
    protocol: Protocol
    src_port: int
    dst_port: int
    payload: bytes = b""
    valid_checksum: bool = True
    deliver_at_ms: int = 0
    origin: str = ""
    pid: int = 0

    def describe(self) -> str:
        flag = "" if self.valid_checksum else " badsum"
        if self.protocol is Protocol.ICMP:
            where = f"{self.src} > {self.dst}"
        else:
            where = f"{self.src}:{self.src_port} > {self.dst}:{self.dst_port}"
        return f"#{self.pid} {self.protocol} {where} len={len(self.payload)}{flag}"
