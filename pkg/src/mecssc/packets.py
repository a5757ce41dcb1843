"""Ethernet / IPv4 / UDP building blocks shared by the codecs and the switch."""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass

ETH_TYPE_IPV4 = 0x0800
IPPROTO_ICMP = 1
IPPROTO_TCP = 6
IPPROTO_UDP = 17

GTPU_PORT = 2152
GTPC_PORT = 2123

BROADCAST_MAC = "ff:ff:ff:ff:ff:ff"
ZERO_MAC = "00:00:00:00:00:00"

IP_DF = 0x4000


class PacketError(ValueError):
    """Raised when bytes do not parse as the expected protocol unit."""


def ip_to_bytes(ip: str) -> bytes:
    return ipaddress.IPv4Address(ip).packed


def bytes_to_ip(data: bytes) -> str:
    return str(ipaddress.IPv4Address(bytes(data)))


def mac_to_bytes(mac: str) -> bytes:
    parts = mac.split(":")
    if len(parts) != 6:
        raise PacketError(f"bad MAC address {mac!r}")
    return bytes(int(p, 16) for p in parts)


def bytes_to_mac(data: bytes) -> str:
    return ":".join(f"{b:02x}" for b in data)


def is_unicast_mac(mac: str) -> bool:
    return not (int(mac[:2], 16) & 1)


def internet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


@dataclass(frozen=True)
class EthernetFrame:
    eth_src: str
    eth_dst: str
    eth_type: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return (mac_to_bytes(self.eth_dst) + mac_to_bytes(self.eth_src)
                + struct.pack("!H", self.eth_type) + self.payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> EthernetFrame:
        if len(data) < 14:
            raise PacketError("ethernet frame shorter than 14 bytes")
        (eth_type,) = struct.unpack("!H", data[12:14])
        frame = cls(bytes_to_mac(data[6:12]), bytes_to_mac(data[0:6]),
                    eth_type, bytes(data[14:]))
        if eth_type == ETH_TYPE_IPV4:
            parse_ipv4(frame.payload)
        return frame

    def __len__(self) -> int:
        return 14 + len(self.payload)


@dataclass(frozen=True)
class Ipv4Packet:
    src: str
    dst: str
    proto: int
    tos: int
    ttl: int
    ident: int
    flags_frag: int
    header_len: int
    payload: bytes


def build_ipv4(src: str, dst: str, proto: int, payload: bytes, *, tos: int = 0,
               ttl: int = 64, ident: int = 0, flags_frag: int = IP_DF) -> bytes:
    total = 20 + len(payload)
    if total > 0xFFFF:
        raise PacketError("IPv4 packet too long")
    header = struct.pack("!BBHHHBBH4s4s", 0x45, tos, total, ident, flags_frag,
                         ttl, proto, 0, ip_to_bytes(src), ip_to_bytes(dst))
    csum = internet_checksum(header)
    return header[:10] + struct.pack("!H", csum) + header[12:] + payload


def parse_ipv4(data: bytes) -> Ipv4Packet:
    if len(data) < 20:
        raise PacketError("IPv4 header shorter than 20 bytes")
    vihl, tos, total, ident, flags_frag, ttl, proto = struct.unpack("!BBHHHBB", data[:10])
    if vihl >> 4 != 4:
        raise PacketError(f"IP version {vihl >> 4} is not 4")
    ihl = (vihl & 0x0F) * 4
    if ihl < 20 or len(data) < ihl:
        raise PacketError("bad IPv4 header length")
    if total != len(data):
        raise PacketError(f"IPv4 total length {total} != {len(data)} bytes present")
    return Ipv4Packet(bytes_to_ip(data[12:16]), bytes_to_ip(data[16:20]), proto, tos,
                      ttl, ident, flags_frag, ihl, bytes(data[ihl:]))


def is_ipv4(data: bytes) -> bool:
    try:
        parse_ipv4(data)
    except PacketError:
        return False
    return True


def _pseudo_header(src: str, dst: str, proto: int, length: int) -> bytes:
    return ip_to_bytes(src) + ip_to_bytes(dst) + struct.pack("!BBH", 0, proto, length)


def udp_checksum(src: str, dst: str, segment: bytes) -> int:
    seg = segment[:6] + b"\x00\x00" + segment[8:]
    csum = internet_checksum(_pseudo_header(src, dst, IPPROTO_UDP, len(seg)) + seg)
    return csum or 0xFFFF


def build_udp(src: str, dst: str, sport: int, dport: int, payload: bytes, *,
              checksum: bool = False) -> bytes:
    seg = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload
    if checksum:
        seg = seg[:6] + struct.pack("!H", udp_checksum(src, dst, seg)) + seg[8:]
    return seg


@dataclass(frozen=True)
class UdpDatagram:
    sport: int
    dport: int
    checksum: int
    payload: bytes


def parse_udp(segment: bytes) -> UdpDatagram:
    if len(segment) < 8:
        raise PacketError("UDP header shorter than 8 bytes")
    sport, dport, length, csum = struct.unpack("!HHHH", segment[:8])
    if length != len(segment):
        raise PacketError(f"UDP length {length} != {len(segment)} bytes present")
    return UdpDatagram(sport, dport, csum, bytes(segment[8:]))


def udp_ipv4_packet(src: str, dst: str, sport: int, dport: int, payload: bytes, *,
                    checksum: bool = False, **ip_fields) -> bytes:
    seg = build_udp(src, dst, sport, dport, payload, checksum=checksum)
    return build_ipv4(src, dst, IPPROTO_UDP, seg, **ip_fields)


def _fix_l4_checksum(packet: bytearray, ihl: int) -> None:
    ip = parse_ipv4(bytes(packet))
    seg = bytearray(packet[ihl:])
    if ip.proto == IPPROTO_UDP and len(seg) >= 8:
        if seg[6:8] == b"\x00\x00":
            return  # checksum disabled by the sender
        struct.pack_into("!H", seg, 6, udp_checksum(ip.src, ip.dst, bytes(seg)))
    elif ip.proto == IPPROTO_TCP and len(seg) >= 20:
        struct.pack_into("!H", seg, 16, 0)
        csum = internet_checksum(_pseudo_header(ip.src, ip.dst, IPPROTO_TCP, len(seg)) + bytes(seg))
        struct.pack_into("!H", seg, 16, csum)
    else:
        return
    packet[ihl:] = seg


def rewrite_ipv4(packet: bytes, *, src: str | None = None, dst: str | None = None) -> bytes:
    """Return `packet` with new addresses and consistent IP/L4 checksums."""
    ip = parse_ipv4(packet)
    buf = bytearray(packet)
    if src is not None:
        buf[12:16] = ip_to_bytes(src)
    if dst is not None:
        buf[16:20] = ip_to_bytes(dst)
    buf[10:12] = b"\x00\x00"
    struct.pack_into("!H", buf, 10, internet_checksum(bytes(buf[:ip.header_len])))
    _fix_l4_checksum(buf, ip.header_len)
    return bytes(buf)
