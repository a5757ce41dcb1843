"""Multi-table match/action pipeline with a flow-based GTP tunnel port.

Tables: 0 classification, 1 GTP encapsulation, 2 forwarding. A GTP-U frame
sent to LOCAL is decapsulated by the emulated host stack and re-enters table 0
from the GTP port; a packet output to IN_PORT from the GTP port is
re-encapsulated and re-enters table 0 from LOCAL. At most two such
re-circulations happen per frame.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field, fields, replace
from enum import IntEnum
from typing import Union

from .gtp import GtpError, GtpUserPacket, decode_gtpu, encode_gtpu
from .packets import (ETH_TYPE_IPV4, GTPU_PORT, IPPROTO_UDP, ZERO_MAC, EthernetFrame,
                      PacketError, build_ipv4, build_udp, parse_ipv4, parse_udp,
                      rewrite_ipv4)

LOCAL = "LOCAL"
IN_PORT = "IN_PORT"
CONTROLLER = "CONTROLLER"
FLOOD = "FLOOD"

Port = Union[int, str]

N_TABLES = 3
MAX_RECIRCULATIONS = 2


class Priority(IntEnum):
    LOW = 100
    MEDIUM = 200
    HIGH = 300


class RuleError(ValueError):
    pass


# -- matching ------------------------------------------------------------------

@dataclass(frozen=True)
class FrameView:
    in_port: Port
    eth_src: str
    eth_dst: str
    eth_type: int
    ipv4_src: str | None = None
    ipv4_dst: str | None = None
    ip_proto: int | None = None
    udp_src: int | None = None
    udp_dst: int | None = None


def view_of(in_port: Port, frame: EthernetFrame) -> FrameView:
    kw = {}
    if frame.eth_type == ETH_TYPE_IPV4:
        try:
            ip = parse_ipv4(frame.payload)
        except PacketError:
            ip = None
        if ip is not None:
            kw.update(ipv4_src=ip.src, ipv4_dst=ip.dst, ip_proto=ip.proto)
            if ip.proto == IPPROTO_UDP and len(ip.payload) >= 8:
                kw.update(udp_src=int.from_bytes(ip.payload[0:2], "big"),
                          udp_dst=int.from_bytes(ip.payload[2:4], "big"))
    return FrameView(in_port, frame.eth_src, frame.eth_dst, frame.eth_type, **kw)


_MATCH_LABELS = {
    "in_port": "IN_PORT", "eth_src": "DL_SRC", "eth_dst": "DL_DST",
    "ipv4_src": "NW_SRC", "ipv4_dst": "NW_DST", "udp_src": "TP_SRC", "udp_dst": "TP_DST",
}


@dataclass(frozen=True)
class MatchFields:
    """Absent (None) fields are wildcards."""

    in_port: Port | None = None
    eth_type: int | None = None
    eth_src: str | None = None
    eth_dst: str | None = None
    ipv4_src: str | None = None
    ipv4_dst: str | None = None
    ip_proto: int | None = None
    udp_src: int | None = None
    udp_dst: int | None = None

    def validate(self) -> None:
        if (self.ipv4_src or self.ipv4_dst or self.ip_proto is not None) \
                and self.eth_type != ETH_TYPE_IPV4:
            raise RuleError("ipv4 fields require eth_type=IPv4")
        if (self.udp_src is not None or self.udp_dst is not None) \
                and self.ip_proto != IPPROTO_UDP:
            raise RuleError("udp fields require ip_proto=UDP")

    def matches(self, view: FrameView) -> bool:
        for f in fields(self):
            want = getattr(self, f.name)
            if want is not None and getattr(view, f.name) != want:
                return False
        return True

    def describe(self, aliases: dict | None = None) -> str:
        aliases = aliases or {}
        parts = []
        if self.in_port is not None:
            parts.append(f"IN_PORT={aliases.get(self.in_port, self.in_port)}")
        if self.eth_type == ETH_TYPE_IPV4:
            parts.append("IPv4")
        elif self.eth_type is not None:
            parts.append(f"DL_TYPE=0x{self.eth_type:04x}")
        for name in ("eth_src", "eth_dst", "ipv4_src", "ipv4_dst"):
            value = getattr(self, name)
            if value is not None:
                parts.append(f"{_MATCH_LABELS[name]}={aliases.get(value, value)}")
        if self.ip_proto == IPPROTO_UDP:
            parts.append("UDP")
        elif self.ip_proto is not None:
            parts.append(f"NW_PROTO={self.ip_proto}")
        for name in ("udp_src", "udp_dst"):
            value = getattr(self, name)
            if value is not None:
                parts.append(f"{_MATCH_LABELS[name]}={value}")
        return ",".join(parts) or "ANY"


# -- actions -------------------------------------------------------------------

@dataclass(frozen=True)
class SetIpSrc:
    addr: str
    label = "SET_IP_SRC"


@dataclass(frozen=True)
class SetIpDst:
    addr: str
    label = "SET_IP_DST"


@dataclass(frozen=True)
class SetEthSrc:
    addr: str
    label = "SET_ETH_SRC"


@dataclass(frozen=True)
class SetEthDst:
    addr: str
    label = "SET_ETH_DST"


@dataclass(frozen=True)
class SetTunnelDst:
    addr: str
    label = "SET_TUN_DST"


@dataclass(frozen=True)
class SetTunnelTeid:
    teid: int
    label = "SET_TUN_ID"


@dataclass(frozen=True)
class SetInnerSrc:
    addr: str
    label = "SET_INNER_SRC"


@dataclass(frozen=True)
class SetInnerDst:
    addr: str
    label = "SET_INNER_DST"


@dataclass(frozen=True)
class Output:
    port: Port


@dataclass(frozen=True)
class GotoTable:
    table_id: int


Action = Union[SetIpSrc, SetIpDst, SetEthSrc, SetEthDst, SetTunnelDst, SetTunnelTeid,
               SetInnerSrc, SetInnerDst, Output, GotoTable]


def describe_action(action: Action, aliases: dict | None = None) -> str:
    aliases = aliases or {}
    if isinstance(action, Output):
        if action.port == IN_PORT:
            return IN_PORT
        return f"OUTPUT={aliases.get(action.port, action.port)}"
    if isinstance(action, GotoTable):
        return f"GOTO_TABLE({action.table_id})"
    if isinstance(action, SetTunnelTeid):
        return f"{action.label}=0x{action.teid:08x}"
    return f"{action.label}={aliases.get(action.addr, action.addr)}"


@dataclass(eq=False)
class FlowRule:
    table_id: int
    priority: int
    match: MatchFields
    actions: tuple
    cookie: str = ""
    install_seq: int = -1
    packets: int = 0
    bytes: int = 0

    def __post_init__(self):
        self.actions = tuple(self.actions)

    def validate(self) -> None:
        if not 0 <= self.table_id < N_TABLES:
            raise RuleError(f"table {self.table_id} does not exist")
        self.match.validate()
        for action in self.actions:
            if isinstance(action, GotoTable) and not self.table_id < action.table_id < N_TABLES:
                raise RuleError(f"GOTO_TABLE({action.table_id}) from table {self.table_id} "
                                "must move strictly forward")

    def dump(self, aliases: dict | None = None) -> str:
        actions = ",".join(describe_action(a, aliases) for a in self.actions)
        return (f"table={self.table_id} prio={self.priority} seq={self.install_seq} "
                f"match{{{self.match.describe(aliases)}}} actions[{actions}]")


# -- pipeline results ------------------------------------------------------------

@dataclass(frozen=True)
class PacketIn:
    in_port: Port
    frame: EthernetFrame
    table_id: int
    cookie: str = ""


@dataclass(frozen=True)
class Drop:
    reason: str
    frame: EthernetFrame


@dataclass
class PipelineResult:
    outputs: list = field(default_factory=list)      # (port, EthernetFrame)
    packet_ins: list = field(default_factory=list)
    drops: list = field(default_factory=list)
    recirculations: int = 0


@dataclass(frozen=True)
class TunnelMeta:
    """Outer-header state captured at decapsulation (flow-based tunnel)."""

    teid: int
    outer_src: str
    outer_dst: str
    eth_src: str
    tos: int
    ttl: int
    ident: int
    flags_frag: int
    udp_src: int
    udp_checksum: bool
    seq: int | None = None


@dataclass
class _InFlight:
    frame: EthernetFrame
    in_port: Port
    recirc: int = 0
    tunnel: TunnelMeta | None = None
    tun_dst: str | None = None
    tun_teid: int | None = None


class FlowTablePipeline:
    """One switch datapath. GTP features are enabled when `gtp_port` is set."""

    def __init__(self, ports, *, name: str = "", local_ip: str | None = None,
                 local_mac: str | None = None, gtp_port: int | None = None,
                 neighbors: dict | None = None):
        self.name = name
        self.ports = sorted(set(ports), key=str)
        self.local_ip = local_ip
        self.local_mac = local_mac
        self.gtp_port = gtp_port
        self.neighbors = dict(neighbors or {})
        self.tables: list[list[FlowRule]] = [[] for _ in range(N_TABLES)]
        self._seq = itertools.count()
        if gtp_port is not None and (local_ip is None or local_mac is None):
            raise ValueError("a GTP port needs local_ip and local_mac for the host stack")

    # -- rule management

    def install_rule(self, rule: FlowRule) -> FlowRule:
        rule.validate()
        table = self.tables[rule.table_id]
        table[:] = [r for r in table if not (r.priority == rule.priority and r.match == rule.match)]
        rule.install_seq = next(self._seq)
        rule.packets = rule.bytes = 0
        table.append(rule)
        return rule

    def remove_rules(self, *, table_id: int | None = None, cookie: str | None = None,
                     match: MatchFields | None = None, priority: int | None = None,
                     predicate=None) -> list[FlowRule]:
        removed = []
        for tid, table in enumerate(self.tables):
            if table_id is not None and tid != table_id:
                continue
            keep = []
            for r in table:
                hit = ((cookie is None or r.cookie == cookie)
                       and (match is None or r.match == match)
                       and (priority is None or r.priority == priority)
                       and (predicate is None or predicate(r)))
                (removed if hit else keep).append(r)
            table[:] = keep
        return removed

    def apply_bundle(self, removals=(), installs=()) -> None:
        """Apply removals then installs as one atomic step (all-or-nothing)."""
        for rule in installs:
            rule.validate()
        for spec in removals:
            self.remove_rules(**spec)
        for rule in installs:
            self.install_rule(rule)

    def rules(self, table_id: int | None = None) -> list[FlowRule]:
        tids = range(N_TABLES) if table_id is None else [table_id]
        out = []
        for tid in tids:
            out.extend(sorted(self.tables[tid], key=lambda r: (-r.priority, r.install_seq)))
        return out

    def lookup(self, table_id: int, view: FrameView) -> FlowRule | None:
        best = None
        for rule in self.tables[table_id]:
            if not rule.match.matches(view):
                continue
            if best is None or rule.priority > best.priority or (
                    rule.priority == best.priority and rule.install_seq < best.install_seq):
                best = rule
        return best

    def dump(self, tables=None, aliases: dict | None = None) -> str:
        tids = range(N_TABLES) if tables is None else tables
        lines = [r.dump(aliases) for tid in tids for r in self.rules(tid)]
        return "\n".join(lines) + ("\n" if lines else "")

    def listing(self, tables=None, aliases: dict | None = None) -> str:
        """Table-by-table `PRIORITY | match | actions` view, lookup order within a table."""
        out = []
        for tid in range(N_TABLES) if tables is None else tables:
            out.append(f"Table {tid}")
            for r in self.rules(tid):
                prio = Priority(r.priority).name if r.priority in set(Priority) else r.priority
                actions = ",".join(describe_action(a, aliases) for a in r.actions)
                out.append(f"{prio} | {r.match.describe(aliases)} | {actions}")
        return "\n".join(out) + "\n"

    # -- GTP host stack

    def gtp_decap(self, frame: EthernetFrame) -> tuple[EthernetFrame, TunnelMeta]:
        """Terminate a GTP-U frame addressed to this switch; return the inner view."""
        if frame.eth_type != ETH_TYPE_IPV4:
            raise GtpError("not an IPv4 frame")
        ip = parse_ipv4(frame.payload)
        if ip.dst != self.local_ip or frame.eth_dst != self.local_mac:
            raise GtpError(f"frame for {ip.dst}/{frame.eth_dst} is not addressed to the switch")
        if ip.proto != IPPROTO_UDP:
            raise GtpError("not a GTP packet")
        udp = parse_udp(ip.payload)
        if udp.dport != GTPU_PORT:
            raise GtpError("not a GTP packet")
        pkt = decode_gtpu(udp.payload, (ip.src, ip.dst, udp.sport, udp.dport))
        parse_ipv4(pkt.inner)
        meta = TunnelMeta(pkt.teid, ip.src, ip.dst, frame.eth_src, ip.tos, ip.ttl, ip.ident,
                          ip.flags_frag, udp.sport, udp.checksum != 0, pkt.seq)
        return EthernetFrame(ZERO_MAC, ZERO_MAC, ETH_TYPE_IPV4, pkt.inner), meta

    def gtp_encap(self, inner: bytes, tun_dst: str, teid: int | None,
                  meta: TunnelMeta) -> EthernetFrame:
        """Encapsulate toward `tun_dst`; the TEID defaults to the one captured at decap."""
        if tun_dst not in self.neighbors:
            raise GtpError(f"no neighbor entry for tunnel destination {tun_dst}")
        teid = meta.teid if teid is None else teid
        payload = encode_gtpu(GtpUserPacket(teid, inner, self.local_ip, tun_dst,
                                            meta.udp_src, GTPU_PORT, meta.seq))
        seg = build_udp(self.local_ip, tun_dst, meta.udp_src, GTPU_PORT, payload,
                        checksum=meta.udp_checksum)
        ip = build_ipv4(self.local_ip, tun_dst, IPPROTO_UDP, seg, tos=meta.tos, ttl=meta.ttl,
                        ident=meta.ident, flags_frag=meta.flags_frag)
        return EthernetFrame(meta.eth_src, self.neighbors[tun_dst], ETH_TYPE_IPV4, ip)

    # -- processing

    def physical_ports(self) -> list:
        return [p for p in self.ports if p != LOCAL and p != self.gtp_port]

    def process_frame(self, in_port: Port, frame: EthernetFrame) -> PipelineResult:
        result = PipelineResult()
        queue = deque([_InFlight(frame, in_port)])
        while queue:
            self._run_tables(queue.popleft(), queue, result)
        return result

    def _recirculate(self, pkt: _InFlight, frame: EthernetFrame, in_port: Port, queue,
                     result: PipelineResult, **kw) -> None:
        if pkt.recirc >= MAX_RECIRCULATIONS:
            result.drops.append(Drop("re-circulation budget exceeded", frame))
            return
        result.recirculations += 1
        queue.append(_InFlight(frame, in_port, pkt.recirc + 1, **kw))

    def _run_tables(self, pkt: _InFlight, queue, result: PipelineResult) -> None:
        table = 0
        while table is not None:
            rule = self.lookup(table, view_of(pkt.in_port, pkt.frame))
            if rule is None:
                result.drops.append(Drop(f"table {table} miss", pkt.frame))
                return
            rule.packets += 1
            rule.bytes += len(pkt.frame)
            table = None
            for action in rule.actions:
                if isinstance(action, GotoTable):
                    table = action.table_id
                elif isinstance(action, Output):
                    self._output(pkt, action.port, rule, queue, result)
                else:
                    self._modify(pkt, action)

    def _modify(self, pkt: _InFlight, action) -> None:
        frame = pkt.frame
        if isinstance(action, SetEthSrc):
            pkt.frame = replace(frame, eth_src=action.addr)
        elif isinstance(action, SetEthDst):
            pkt.frame = replace(frame, eth_dst=action.addr)
        elif isinstance(action, SetTunnelDst):
            pkt.tun_dst = action.addr
        elif isinstance(action, SetTunnelTeid):
            pkt.tun_teid = action.teid
        elif isinstance(action, (SetIpSrc, SetIpDst, SetInnerSrc, SetInnerDst)):
            if frame.eth_type != ETH_TYPE_IPV4:
                return
            if isinstance(action, (SetInnerSrc, SetInnerDst)) and pkt.tunnel is None:
                return  # only packets that came out of the GTP port have an inner header here
            src = action.addr if isinstance(action, (SetIpSrc, SetInnerSrc)) else None
            dst = action.addr if isinstance(action, (SetIpDst, SetInnerDst)) else None
            pkt.frame = replace(frame, payload=rewrite_ipv4(frame.payload, src=src, dst=dst))

    def _output(self, pkt: _InFlight, port: Port, rule: FlowRule, queue,
                result: PipelineResult) -> None:
        frame = pkt.frame
        if port == IN_PORT:
            port = pkt.in_port
        elif port == pkt.in_port and port not in (self.gtp_port, LOCAL):
            result.drops.append(Drop("output to ingress port", frame))
            return
        if port == CONTROLLER:
            result.packet_ins.append(PacketIn(pkt.in_port, frame, rule.table_id, rule.cookie))
        elif port == FLOOD:
            for p in self.physical_ports():
                if p != pkt.in_port:
                    result.outputs.append((p, frame))
        elif self.gtp_port is not None and port == self.gtp_port:
            if pkt.tunnel is None or pkt.tun_dst is None:
                result.drops.append(Drop("no tunnel destination for GTP port output", frame))
                return
            try:
                outer = self.gtp_encap(frame.payload, pkt.tun_dst, pkt.tun_teid, pkt.tunnel)
            except (GtpError, PacketError) as exc:
                result.drops.append(Drop(f"encapsulation failed: {exc}", frame))
                return
            self._recirculate(pkt, outer, LOCAL, queue, result)
        elif port == LOCAL and self.gtp_port is not None:
            try:
                inner, meta = self.gtp_decap(frame)
            except (GtpError, PacketError) as exc:
                result.drops.append(Drop(f"host stack: {exc}", frame))
                return
            self._recirculate(pkt, inner, self.gtp_port, queue, result, tunnel=meta)
        elif port in self.ports:
            result.outputs.append((port, frame))
        else:
            result.drops.append(Drop(f"unknown port {port!r}", frame))
