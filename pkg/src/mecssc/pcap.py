"""Classic libpcap container (Ethernet link type) for dissector cross-checks."""

from __future__ import annotations

import struct
from pathlib import Path

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
SNAPLEN = 65535


def pcap_bytes(records) -> bytes:
    """records: iterable of (time_us, frame_bytes)."""
    out = [struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, SNAPLEN, LINKTYPE_ETHERNET)]
    for t_us, data in records:
        sec, usec = divmod(int(t_us), 1_000_000)
        cap = data[:SNAPLEN]
        out.append(struct.pack("<IIII", sec, usec, len(cap), len(data)))
        out.append(cap)
    return b"".join(out)


def write_pcap(path, records) -> None:
    Path(path).write_bytes(pcap_bytes(records))


def read_pcap(path) -> list[tuple[int, bytes]]:
    data = Path(path).read_bytes()
    magic, _, _, _, _, _, linktype = struct.unpack("<IHHiIII", data[:24])
    if magic != PCAP_MAGIC or linktype != LINKTYPE_ETHERNET:
        raise ValueError("not a little-endian Ethernet pcap file")
    records, off = [], 24
    while off < len(data):
        sec, usec, incl, _ = struct.unpack("<IIII", data[off:off + 16])
        off += 16
        records.append((sec * 1_000_000 + usec, data[off:off + incl]))
        off += incl
    return records
