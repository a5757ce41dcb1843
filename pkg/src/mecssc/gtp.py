"""GTP-U (G-PDU) and minimal GTPv2-C codecs.

Header layouts
--------------

GTP-U, 8 mandatory bytes::

     0      1      2-3        4-7
    +------+------+----------+----------+
    |flags | 0xFF | length   |  TEID    |   flags = 001 1 0 E S PN  (0x30)
    +------+------+----------+----------+
    [ seq(2) | N-PDU(1) | next-ext(1) ]    present when any of E/S/PN is set

GTPv2-C, 12 bytes with the TEID flag set::

     0      1      2-3        4-7        8-10    11
    +------+------+----------+----------+-------+-----+
    | 0x48 | type | length   |  TEID    |  seq  |spare|
    +------+------+----------+----------+-------+-----+

followed by type/length/instance IEs. Requests are padded with a Private
Extension IE to fixed sizes: Create Session Request 146 bytes, Modify Bearer
Request 43 bytes, 189 bytes together.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from enum import IntEnum

from .packets import (ETH_TYPE_IPV4, GTPC_PORT, GTPU_PORT, IP_DF, IPPROTO_UDP,
                      EthernetFrame, PacketError, bytes_to_ip, ip_to_bytes, is_ipv4,
                      parse_ipv4, parse_udp, udp_ipv4_packet)

GTPU_G_PDU = 0xFF
GTPU_HEADER_LEN = 8

CSR_SIZE = 146
MBR_SIZE = 43
PER_UE_CONTROL_BYTES = CSR_SIZE + MBR_SIZE


class GtpError(ValueError):
    pass


class MalformedInnerError(GtpError):
    pass


class EncodeError(GtpError):
    pass


class InvalidRewriteError(GtpError):
    pass


class DecodeError(GtpError):
    def __init__(self, field: str, detail: str):
        super().__init__(f"{field}: {detail}")
        self.field = field


# -- GTP-U -------------------------------------------------------------------

@dataclass(frozen=True)
class GtpUserPacket:
    teid: int
    inner: bytes
    outer_src_ip: str = "0.0.0.0"
    outer_dst_ip: str = "0.0.0.0"
    outer_src_port: int = GTPU_PORT
    outer_dst_port: int = GTPU_PORT
    seq: int | None = None

    @property
    def nonstandard_port(self) -> bool:
        return self.outer_dst_port != GTPU_PORT


def encode_gtpu(pkt: GtpUserPacket) -> bytes:
    """Return the UDP payload (GTP-U header followed by the inner packet)."""
    if not 0 <= pkt.teid <= 0xFFFFFFFF:
        raise EncodeError(f"TEID {pkt.teid} out of 32-bit range")
    if not is_ipv4(pkt.inner):
        raise MalformedInnerError("inner payload is not a well-formed IPv4 packet")
    if pkt.seq is None:
        return struct.pack("!BBHI", 0x30, GTPU_G_PDU, len(pkt.inner), pkt.teid) + pkt.inner
    if not 0 <= pkt.seq <= 0xFFFF:
        raise EncodeError(f"sequence number {pkt.seq} out of 16-bit range")
    return (struct.pack("!BBHIHBB", 0x32, GTPU_G_PDU, len(pkt.inner) + 4, pkt.teid,
                        pkt.seq, 0, 0) + pkt.inner)


def decode_gtpu(data: bytes, outer: tuple = ("0.0.0.0", "0.0.0.0", GTPU_PORT, GTPU_PORT)
                ) -> GtpUserPacket:
    """Parse a GTP-U G-PDU. `outer` is (src_ip, dst_ip, src_port, dst_port)."""
    if len(data) < GTPU_HEADER_LEN:
        raise DecodeError("header", f"{len(data)} bytes, need at least {GTPU_HEADER_LEN}")
    flags, msg_type, length, teid = struct.unpack("!BBHI", data[:8])
    if flags >> 5 != 1:
        raise DecodeError("version", f"{flags >> 5} != 1")
    if not flags & 0x10:
        raise DecodeError("protocol_type", "PT bit is 0 (GTP')")
    if msg_type != GTPU_G_PDU:
        raise DecodeError("message_type", f"{msg_type} != 255 (G-PDU)")
    if length != len(data) - GTPU_HEADER_LEN:
        raise DecodeError("length", f"declared {length}, {len(data) - GTPU_HEADER_LEN} present")
    offset = GTPU_HEADER_LEN
    seq = None
    if flags & 0x07:
        if len(data) < 12:
            raise DecodeError("optional_fields", "truncated")
        s_flag, next_ext = flags & 0x02, data[11]
        if s_flag:
            (seq,) = struct.unpack("!H", data[8:10])
        offset = 12
        if flags & 0x04:
            while next_ext:
                if offset >= len(data):
                    raise DecodeError("extension_header", "truncated")
                ext_len = data[offset] * 4
                if ext_len == 0 or offset + ext_len > len(data):
                    raise DecodeError("extension_header", "bad length")
                next_ext = data[offset + ext_len - 1]
                offset += ext_len
    src, dst, sport, dport = outer
    return GtpUserPacket(teid, bytes(data[offset:]), src, dst, sport, dport, seq)


# -- GTPv2-C -----------------------------------------------------------------

class MsgKind(IntEnum):
    CREATE_SESSION_REQUEST = 32
    CREATE_SESSION_RESPONSE = 33
    MODIFY_BEARER_REQUEST = 34
    MODIFY_BEARER_RESPONSE = 35
    DELETE_SESSION_REQUEST = 36
    DELETE_SESSION_RESPONSE = 37

    @property
    def is_request(self) -> bool:
        return self.value % 2 == 0


class Cause(IntEnum):
    REQUEST_ACCEPTED = 16
    CONTEXT_NOT_FOUND = 64
    NO_RESOURCES_AVAILABLE = 73


IE_IMSI = 1
IE_CAUSE = 2
IE_EBI = 73
IE_PAA = 79
IE_FTEID = 87
IE_BEARER_CONTEXT = 93
IE_PRIVATE_EXTENSION = 255

IF_S1U_ENB = 0
IF_S1U_SGW = 1
IF_S11_MME = 10
IF_S11_SGW = 11

PAD_ENTERPRISE_ID = 0xFFFF

_REQUEST_SIZES = {MsgKind.CREATE_SESSION_REQUEST: CSR_SIZE,
                  MsgKind.MODIFY_BEARER_REQUEST: MBR_SIZE}

_OPTIONAL = ("imsi", "sender_s11_teid", "s1u_teid_enb", "enb_s1u_ip", "s1u_teid_sgw",
             "sgw_s1u_ip", "ue_ip", "cause")

# fields each kind carries on the wire; everything else must be left unset
_CARRIED = {
    MsgKind.CREATE_SESSION_REQUEST: {"imsi", "sender_s11_teid"},
    MsgKind.CREATE_SESSION_RESPONSE: {"cause", "sender_s11_teid", "ue_ip", "s1u_teid_sgw",
                                      "sgw_s1u_ip"},
    MsgKind.MODIFY_BEARER_REQUEST: {"s1u_teid_enb", "enb_s1u_ip"},
    MsgKind.MODIFY_BEARER_RESPONSE: {"cause"},
    MsgKind.DELETE_SESSION_REQUEST: set(),
    MsgKind.DELETE_SESSION_RESPONSE: {"cause"},
}


@dataclass(frozen=True)
class GtpControlMessage:
    msg_kind: MsgKind
    seq: int
    peer_s11_teid: int = 0
    imsi: str | None = None
    sender_s11_teid: int | None = None
    s1u_teid_enb: int | None = None
    enb_s1u_ip: str | None = None
    s1u_teid_sgw: int | None = None
    sgw_s1u_ip: str | None = None
    ue_ip: str | None = None
    cause: int | None = None
    ebi: int = 5
    src_ip: str = "0.0.0.0"
    dst_ip: str = "0.0.0.0"

    @property
    def accepted(self) -> bool:
        return self.cause == Cause.REQUEST_ACCEPTED


def _required_fields(msg: GtpControlMessage) -> set[str]:
    carried = _CARRIED[msg.msg_kind]
    if msg.msg_kind == MsgKind.CREATE_SESSION_RESPONSE and not msg.accepted:
        return {"cause"}
    return carried


def _carries_ebi(msg: GtpControlMessage) -> bool:
    if msg.msg_kind == MsgKind.DELETE_SESSION_RESPONSE:
        return False
    return msg.msg_kind.is_request or msg.accepted


def _validate(msg: GtpControlMessage) -> None:
    required = _required_fields(msg)
    for name in _OPTIONAL:
        value = getattr(msg, name)
        if name in required and value is None:
            raise EncodeError(f"{msg.msg_kind.name} requires {name}")
        if name not in required and value is not None:
            raise EncodeError(f"{msg.msg_kind.name} does not carry {name}")
    if not _carries_ebi(msg) and msg.ebi != 5:
        raise EncodeError(f"{msg.msg_kind.name} does not carry ebi")
    if not 0 <= msg.seq <= 0xFFFFFF:
        raise EncodeError(f"sequence number {msg.seq} out of 24-bit range")
    for name in ("peer_s11_teid", "sender_s11_teid", "s1u_teid_enb", "s1u_teid_sgw"):
        value = getattr(msg, name)
        if value is not None and not 0 <= value <= 0xFFFFFFFF:
            raise EncodeError(f"{name} {value} out of 32-bit range")
    if msg.imsi is not None and (len(msg.imsi) != 15 or not msg.imsi.isdigit()):
        raise EncodeError(f"IMSI must be 15 digits, got {msg.imsi!r}")
    if not 0 <= msg.ebi <= 15:
        raise EncodeError(f"EBI {msg.ebi} out of range")
    if msg.cause is not None and not 0 <= msg.cause <= 255:
        raise EncodeError(f"cause {msg.cause} out of range")


def _ie(ie_type: int, value: bytes, instance: int = 0) -> bytes:
    return struct.pack("!BHB", ie_type, len(value), instance & 0x0F) + value


def _tbcd(digits: str) -> bytes:
    digits = digits + "F" * (len(digits) % 2)
    return bytes(int(digits[i + 1], 16) << 4 | int(digits[i]) for i in range(0, len(digits), 2))


def _untbcd(data: bytes) -> str:
    out = []
    for b in data:
        out.append(str(b & 0x0F))
        if b >> 4 != 0x0F:
            out.append(str(b >> 4))
    return "".join(out)


def _fteid(iface: int, teid: int, ip: str) -> bytes:
    return _ie(IE_FTEID, struct.pack("!BI", 0x80 | iface, teid) + ip_to_bytes(ip))


def _cause(value: int) -> bytes:
    return _ie(IE_CAUSE, bytes([value, 0]))


def _ebi(value: int) -> bytes:
    return _ie(IE_EBI, bytes([value & 0x0F]))


def _body(msg: GtpControlMessage) -> bytes:
    kind = msg.msg_kind
    if kind == MsgKind.CREATE_SESSION_REQUEST:
        return (_ie(IE_IMSI, _tbcd(msg.imsi))
                + _fteid(IF_S11_MME, msg.sender_s11_teid, msg.src_ip)
                + _ie(IE_PAA, b"\x01" + ip_to_bytes("0.0.0.0"))
                + _ie(IE_BEARER_CONTEXT, _ebi(msg.ebi)))
    if kind == MsgKind.CREATE_SESSION_RESPONSE:
        if not msg.accepted:
            return _cause(msg.cause)
        bearer = (_ebi(msg.ebi) + _cause(msg.cause)
                  + _fteid(IF_S1U_SGW, msg.s1u_teid_sgw, msg.sgw_s1u_ip))
        return (_cause(msg.cause)
                + _fteid(IF_S11_SGW, msg.sender_s11_teid, msg.src_ip)
                + _ie(IE_PAA, b"\x01" + ip_to_bytes(msg.ue_ip))
                + _ie(IE_BEARER_CONTEXT, bearer))
    if kind == MsgKind.MODIFY_BEARER_REQUEST:
        return _ie(IE_BEARER_CONTEXT, _ebi(msg.ebi)
                   + _fteid(IF_S1U_ENB, msg.s1u_teid_enb, msg.enb_s1u_ip))
    if kind == MsgKind.MODIFY_BEARER_RESPONSE:
        if not msg.accepted:
            return _cause(msg.cause)
        return _cause(msg.cause) + _ie(IE_BEARER_CONTEXT, _ebi(msg.ebi) + _cause(msg.cause))
    if kind == MsgKind.DELETE_SESSION_REQUEST:
        return _ebi(msg.ebi)
    return _cause(msg.cause)


def encode_gtpc(msg: GtpControlMessage) -> bytes:
    _validate(msg)
    body = _body(msg)
    target = _REQUEST_SIZES.get(msg.msg_kind)
    if target is not None:
        pad = target - 12 - len(body) - 4
        body += _ie(IE_PRIVATE_EXTENSION, struct.pack("!H", PAD_ENTERPRISE_ID) + bytes(pad - 2))
    header = struct.pack("!BBHI", 0x48, msg.msg_kind, 8 + len(body), msg.peer_s11_teid)
    return header + msg.seq.to_bytes(3, "big") + b"\x00" + body


def _parse_ies(data: bytes, where: str) -> list[tuple[int, int, bytes]]:
    ies, offset = [], 0
    while offset < len(data):
        if offset + 4 > len(data):
            raise DecodeError(where, "truncated IE header")
        ie_type, length, inst = struct.unpack("!BHB", data[offset:offset + 4])
        if offset + 4 + length > len(data):
            raise DecodeError(where, f"IE {ie_type} overruns message")
        ies.append((ie_type, inst & 0x0F, bytes(data[offset + 4:offset + 4 + length])))
        offset += 4 + length
    return ies


def _find(ies, ie_type: int, field: str, required: bool = True) -> bytes | None:
    for t, _inst, value in ies:
        if t == ie_type:
            return value
    if required:
        raise DecodeError(field, f"missing IE type {ie_type}")
    return None


def _read_fteid(value: bytes, field: str) -> tuple[int, int, str]:
    if len(value) < 9 or not value[0] & 0x80:
        raise DecodeError(field, "F-TEID without IPv4 address")
    (teid,) = struct.unpack("!I", value[1:5])
    return value[0] & 0x3F, teid, bytes_to_ip(value[5:9])


def _read_cause(value: bytes) -> int:
    if len(value) < 2:
        raise DecodeError("cause", "short Cause IE")
    return value[0]


def _read_ebi(value: bytes) -> int:
    if len(value) < 1:
        raise DecodeError("ebi", "empty EBI IE")
    return value[0] & 0x0F


def decode_gtpc(data: bytes, addressing: tuple[str, str] = ("0.0.0.0", "0.0.0.0")
                ) -> GtpControlMessage:
    """Parse a GTPv2-C message. `addressing` is (src_ip, dst_ip)."""
    if len(data) < 12:
        raise DecodeError("header", f"{len(data)} bytes, need at least 12")
    if data[0] >> 5 != 2:
        raise DecodeError("version", f"{data[0] >> 5} != 2")
    if data[0] & 0x10:
        raise DecodeError("piggyback", "piggybacked messages are not supported")
    if not data[0] & 0x08:
        raise DecodeError("teid_flag", "header without TEID")
    msg_type, length, teid = struct.unpack("!BHI", data[1:8])
    if length != len(data) - 4:
        raise DecodeError("length", f"declared {length}, {len(data) - 4} present")
    try:
        kind = MsgKind(msg_type)
    except ValueError:
        raise DecodeError("msg_kind", f"unknown message type {msg_type}") from None
    seq = int.from_bytes(data[8:11], "big")
    ies = _parse_ies(data[12:], "ies")
    src, dst = addressing
    fields: dict = dict(msg_kind=kind, seq=seq, peer_s11_teid=teid, src_ip=src, dst_ip=dst)

    if kind == MsgKind.CREATE_SESSION_REQUEST:
        imsi = _find(ies, IE_IMSI, "imsi")
        fields["imsi"] = _untbcd(imsi)
        _iface, fields["sender_s11_teid"], _ip = _read_fteid(_find(ies, IE_FTEID, "sender_s11_teid"),
                                                             "sender_s11_teid")
        bearer = _parse_ies(_find(ies, IE_BEARER_CONTEXT, "bearer_context"), "bearer_context")
        fields["ebi"] = _read_ebi(_find(bearer, IE_EBI, "ebi"))
    elif kind == MsgKind.MODIFY_BEARER_REQUEST:
        bearer = _parse_ies(_find(ies, IE_BEARER_CONTEXT, "bearer_context"), "bearer_context")
        fields["ebi"] = _read_ebi(_find(bearer, IE_EBI, "ebi"))
        _iface, fields["s1u_teid_enb"], fields["enb_s1u_ip"] = _read_fteid(
            _find(bearer, IE_FTEID, "s1u_teid_enb"), "s1u_teid_enb")
    elif kind == MsgKind.DELETE_SESSION_REQUEST:
        fields["ebi"] = _read_ebi(_find(ies, IE_EBI, "ebi"))
    else:
        fields["cause"] = _read_cause(_find(ies, IE_CAUSE, "cause"))
        accepted = fields["cause"] == Cause.REQUEST_ACCEPTED
        if kind == MsgKind.CREATE_SESSION_RESPONSE and accepted:
            _iface, fields["sender_s11_teid"], _ip = _read_fteid(
                _find(ies, IE_FTEID, "sender_s11_teid"), "sender_s11_teid")
            paa = _find(ies, IE_PAA, "ue_ip")
            if len(paa) < 5:
                raise DecodeError("ue_ip", "short PAA IE")
            fields["ue_ip"] = bytes_to_ip(paa[1:5])
            bearer = _parse_ies(_find(ies, IE_BEARER_CONTEXT, "bearer_context"), "bearer_context")
            fields["ebi"] = _read_ebi(_find(bearer, IE_EBI, "ebi"))
            _iface, fields["s1u_teid_sgw"], fields["sgw_s1u_ip"] = _read_fteid(
                _find(bearer, IE_FTEID, "s1u_teid_sgw"), "s1u_teid_sgw")
        elif kind == MsgKind.MODIFY_BEARER_RESPONSE and accepted:
            bearer = _parse_ies(_find(ies, IE_BEARER_CONTEXT, "bearer_context"), "bearer_context")
            fields["ebi"] = _read_ebi(_find(bearer, IE_EBI, "ebi"))
    return GtpControlMessage(**fields)


def rewrite_s11_teid(msg: GtpControlMessage, new_teid: int) -> GtpControlMessage:
    """Readdress a Modify Bearer Request to another S/P-GW's S11 TEID."""
    if msg.msg_kind != MsgKind.MODIFY_BEARER_REQUEST:
        raise InvalidRewriteError(f"cannot rewrite S11 TEID of {msg.msg_kind.name}")
    if not 0 <= new_teid <= 0xFFFFFFFF:
        raise InvalidRewriteError(f"TEID {new_teid} out of 32-bit range")
    return dataclasses.replace(msg, peer_s11_teid=new_teid)


# -- Ethernet/IPv4/UDP carriers ------------------------------------------------

def gtpu_frame(pkt: GtpUserPacket, eth_src: str, eth_dst: str, *, tos: int = 0,
               ttl: int = 64, ident: int = 0, flags_frag: int = IP_DF,
               udp_checksum: bool = False) -> EthernetFrame:
    ip = udp_ipv4_packet(pkt.outer_src_ip, pkt.outer_dst_ip, pkt.outer_src_port,
                         pkt.outer_dst_port, encode_gtpu(pkt), checksum=udp_checksum,
                         tos=tos, ttl=ttl, ident=ident, flags_frag=flags_frag)
    return EthernetFrame(eth_src, eth_dst, ETH_TYPE_IPV4, ip)


def gtpc_frame(msg: GtpControlMessage, eth_src: str, eth_dst: str, *, ident: int = 0
               ) -> EthernetFrame:
    ip = udp_ipv4_packet(msg.src_ip, msg.dst_ip, GTPC_PORT, GTPC_PORT, encode_gtpc(msg),
                         ident=ident)
    return EthernetFrame(eth_src, eth_dst, ETH_TYPE_IPV4, ip)


def _udp_of(frame: EthernetFrame, port: int):
    if frame.eth_type != ETH_TYPE_IPV4:
        return None
    try:
        ip = parse_ipv4(frame.payload)
        if ip.proto != IPPROTO_UDP:
            return None
        udp = parse_udp(ip.payload)
    except PacketError:
        return None
    if udp.dport != port and udp.sport != port:
        return None
    return ip, udp


def frame_to_gtpu(frame: EthernetFrame) -> GtpUserPacket | None:
    """Decode a GTP-U frame; None when the frame is not UDP/2152."""
    found = _udp_of(frame, GTPU_PORT)
    if found is None:
        return None
    ip, udp = found
    return decode_gtpu(udp.payload, (ip.src, ip.dst, udp.sport, udp.dport))


def frame_to_gtpc(frame: EthernetFrame) -> GtpControlMessage | None:
    """Decode a GTP-C frame; None when the frame is not UDP/2123."""
    found = _udp_of(frame, GTPC_PORT)
    if found is None:
        return None
    ip, udp = found
    return decode_gtpc(udp.payload, (ip.src, ip.dst))
