"""Simulated network elements wrapping the protocol entities."""

from __future__ import annotations

import dataclasses
import struct

from ..controller import Controller, FlowMod, PacketOut
from ..epc import Enb, EpcError, Mme, SpgwInstance, UeProfile
from ..flow import FLOOD, FlowTablePipeline
from ..gtp import GtpError, frame_to_gtpc, frame_to_gtpu, gtpc_frame, gtpu_frame
from ..packets import (BROADCAST_MAC, ETH_TYPE_IPV4, IPPROTO_UDP, EthernetFrame, PacketError,
                       build_ipv4, build_udp, is_unicast_mac, parse_ipv4, parse_udp,
                       udp_ipv4_packet)

ANNOUNCE_PORT = 9
APP_PORT = 7
APP_HEADER = struct.Struct("!15sIQ")     # imsi, seq, send time


class Node:
    kind = "node"

    def __init__(self, name: str):
        self.name = name
        self.links: dict = {}
        self.sim = None

    def attach(self, port, link) -> None:
        if port in self.links:
            raise ValueError(f"{self.name}: port {port!r} already linked")
        self.links[port] = link

    def send(self, port, frame: EthernetFrame) -> None:
        link = self.links.get(port)
        if link is None:
            self.drop(f"port {port!r} not connected", frame)
            return
        link.transmit(self, port, frame)

    def drop(self, reason: str, frame: EthernetFrame | None = None) -> None:
        self.sim.trace.add(self.sim.now, "drop", node=self.name, reason=reason,
                           len=len(frame) if frame is not None else 0)

    def start(self) -> None:
        pass

    def receive(self, port, frame: EthernetFrame) -> None:  # pragma: no cover
        raise NotImplementedError


class Host(Node):
    """Endpoint with one or more addressed interfaces and a static neighbor table."""

    def __init__(self, name: str, interfaces: dict, gateway: str | None = None):
        super().__init__(name)
        self.interfaces = dict(interfaces)       # port -> (ip, mac)
        self.neighbors: dict = {p: {} for p in self.interfaces}
        self.gateway = gateway
        self._ident = 0

    def next_ident(self) -> int:
        self._ident = (self._ident + 1) & 0xFFFF
        return self._ident

    def mac_for(self, port, ip: str) -> str | None:
        table = self.neighbors.get(port, {})
        return table.get(ip) or (table.get(self.gateway) if self.gateway else None)

    def announce(self) -> None:
        for port, (ip, mac) in self.interfaces.items():
            pkt = udp_ipv4_packet(ip, "255.255.255.255", ANNOUNCE_PORT, ANNOUNCE_PORT,
                                  b"announce", ident=self.next_ident())
            self.send(port, EthernetFrame(mac, BROADCAST_MAC, ETH_TYPE_IPV4, pkt))

    def start(self) -> None:
        self.announce()

    def accepts(self, port, frame: EthernetFrame) -> bool:
        mac = self.interfaces[port][1]
        return frame.eth_dst == mac

    def send_ip(self, port, dst_ip: str, packet: bytes) -> None:
        mac = self.mac_for(port, dst_ip)
        frame = EthernetFrame(self.interfaces[port][1], mac or BROADCAST_MAC, ETH_TYPE_IPV4,
                              packet)
        if mac is None:
            self.drop(f"no neighbor entry for {dst_ip}", frame)
            return
        self.send(port, frame)


def app_payload(imsi: str, seq: int, sent_us: int, size: int) -> bytes:
    head = APP_HEADER.pack(imsi.encode(), seq, sent_us)
    return head + bytes((seq + i) & 0xFF for i in range(max(0, size - len(head))))


def parse_app(payload: bytes) -> tuple[str, int, int]:
    imsi, seq, sent = APP_HEADER.unpack(payload[:APP_HEADER.size])
    return imsi.decode(), seq, sent


class MmeNode(Host):
    kind = "mme"

    def __init__(self, name: str, ip: str, mac: str):
        super().__init__(name, {0: (ip, mac)})
        self.mme = Mme(name, ip)
        self.profiles: dict[str, tuple] = {}     # imsi -> (UeProfile, Enb, spgw control ip)

    def register_ue(self, profile: UeProfile, enb: Enb, spgw_ip: str) -> None:
        self.profiles[profile.imsi] = (profile, enb, spgw_ip)

    def _send_gtpc(self, msg) -> None:
        frame = gtpc_frame(msg, self.interfaces[0][1], self.mac_for(0, msg.dst_ip) or
                           BROADCAST_MAC, ident=self.next_ident())
        self.sim.trace.add(self.sim.now, "gtpc", node=self.name, dir="tx",
                           msg=msg.msg_kind.name, seq=msg.seq, src=msg.src_ip, dst=msg.dst_ip,
                           size=len(frame.payload) - 28)
        self.send(0, frame)

    def start_attach(self, imsi: str) -> None:
        profile, enb, spgw_ip = self.profiles[imsi]
        try:
            msg = self.mme.start_attach(profile, enb, spgw_ip)
        except EpcError as exc:
            self.sim.trace.add(self.sim.now, "event", node=self.name, what="attach_rejected",
                               imsi=imsi, detail=str(exc))
            return
        self._send_gtpc(msg)
        self.sim.after(self.sim.timing.attach_timeout_us, "timer", self._check_attach, imsi,
                       msg.seq)

    def _check_attach(self, imsi: str, seq: int) -> None:
        att = self.mme.attaches.get(imsi)
        if att is not None and not att.done:
            self.mme.abort_attach(imsi)
            self.sim.trace.add(self.sim.now, "event", node=self.name, what="attach_timeout",
                               imsi=imsi)

    def start_detach(self, imsi: str) -> None:
        try:
            msg = self.mme.start_detach(imsi)
        except EpcError as exc:
            self.sim.trace.add(self.sim.now, "event", node=self.name, what="detach_rejected",
                               imsi=imsi, detail=str(exc))
            return
        self._send_gtpc(msg)

    def receive(self, port, frame: EthernetFrame) -> None:
        if not self.accepts(port, frame):
            return
        try:
            msg = frame_to_gtpc(frame)
        except GtpError as exc:
            self.drop(f"bad GTP-C: {exc}", frame)
            return
        if msg is None:
            return
        self.sim.trace.add(self.sim.now, "gtpc", node=self.name, dir="rx",
                           msg=msg.msg_kind.name, seq=msg.seq, src=msg.src_ip, dst=msg.dst_ip,
                           size=len(frame.payload) - 28)
        nxt = self.mme.on_response(msg)
        if nxt is not None:
            self._send_gtpc(nxt)
        elif msg.msg_kind.name == "MODIFY_BEARER_RESPONSE" and msg.accepted:
            self.sim.trace.add(self.sim.now, "event", node=self.name, what="attached",
                               imsi=self._imsi_for(msg.peer_s11_teid))

    def _imsi_for(self, mme_teid: int) -> str | None:
        att = self.mme._attach_for(mme_teid)
        return att.ue.imsi if att else None


class EnbNode(Host):
    kind = "enb"

    def __init__(self, name: str, ip: str, mac: str):
        super().__init__(name, {0: (ip, mac)})
        self.enb = Enb(name, ip)
        self.on_app_rx = None

    def uplink(self, imsi: str, inner: bytes) -> bool:
        try:
            pkt = self.enb.uplink(imsi, inner)
        except EpcError as exc:
            self.drop(f"uplink: {exc}")
            return False
        mac = self.mac_for(0, pkt.outer_dst_ip)
        if mac is None:
            self.drop(f"no neighbor entry for {pkt.outer_dst_ip}")
            return False
        self.send(0, gtpu_frame(pkt, self.interfaces[0][1], mac, ident=self.enb.next_ident()))
        return True

    def receive(self, port, frame: EthernetFrame) -> None:
        if not self.accepts(port, frame):
            return
        try:
            pkt = frame_to_gtpu(frame)
        except GtpError as exc:
            self.drop(f"bad GTP-U: {exc}", frame)
            return
        if pkt is None or pkt.outer_dst_ip != self.enb.ip:
            return
        try:
            imsi, inner = self.enb.receive_downlink(pkt)
        except EpcError as exc:
            self.drop(f"downlink: {exc}", frame)
            return
        if self.on_app_rx is not None:
            self.on_app_rx(self, imsi, inner)


class SpgwNode(Host):
    """S/P-GW with S11, S1-U and SGi interfaces and a sequential GTP-C queue."""

    kind = "spgw"

    def __init__(self, name: str, interfaces: dict, pool: str, timing, *,
                 replica_of: str | None = None):
        super().__init__(name, interfaces)
        tm = timing
        self.spgw = SpgwInstance(name, interfaces["s11"][0], interfaces["s1u"][0], pool,
                                 csr_processing_us=tm.csr_processing_us,
                                 mbr_processing_us=tm.mbr_processing_us,
                                 dsr_processing_us=tm.dsr_processing_us)
        self.replica_of = replica_of
        self.deployed = replica_of is None
        self._busy_until = 0
        self.up = True

    def start(self) -> None:
        if self.deployed:
            self.announce()

    def deploy(self) -> None:
        self.deployed = True
        self.announce()

    def receive(self, port, frame: EthernetFrame) -> None:
        if not self.deployed or not self.up:
            if is_unicast_mac(frame.eth_dst) and frame.eth_dst == self.interfaces[port][1]:
                self.drop("S/P-GW not running", frame)
            return
        if not self.accepts(port, frame):
            return
        if port == "s11":
            self._on_control(frame)
        elif port == "s1u":
            self._on_s1u(frame)
        elif port == "sgi":
            self._on_sgi(frame)

    def _on_control(self, frame: EthernetFrame) -> None:
        try:
            msg = frame_to_gtpc(frame)
        except GtpError as exc:
            self.drop(f"bad GTP-C: {exc}", frame)
            return
        if msg is None:
            return
        self.sim.trace.add(self.sim.now, "gtpc", node=self.name, dir="rx",
                           msg=msg.msg_kind.name, seq=msg.seq, src=msg.src_ip, dst=msg.dst_ip,
                           size=len(frame.payload) - 28)
        start = max(self.sim.now, self._busy_until)
        self._busy_until = start + self.spgw.processing_time_us(msg)
        self.sim.schedule(self._busy_until, "process", self._respond, msg)

    def _respond(self, msg) -> None:
        try:
            resp = self.spgw.handle_gtpc(msg)
        except EpcError as exc:
            self.sim.trace.add(self.sim.now, "event", node=self.name, what="gtpc_error",
                               detail=str(exc))
            return
        self.sim.trace.add(self.sim.now, "gtpc", node=self.name, dir="tx",
                           msg=resp.msg_kind.name, seq=resp.seq, src=resp.src_ip,
                           dst=resp.dst_ip, cause=resp.cause)
        mac = self.mac_for("s11", resp.dst_ip)
        self.send("s11", gtpc_frame(resp, self.interfaces["s11"][1], mac or BROADCAST_MAC,
                                    ident=self.next_ident()))

    def _on_s1u(self, frame: EthernetFrame) -> None:
        try:
            pkt = frame_to_gtpu(frame)
            if pkt is None:
                return
            inner = self.spgw.uplink(pkt)
            dst = parse_ipv4(inner).dst
        except (GtpError, EpcError, PacketError) as exc:
            self.drop(f"uplink: {exc}", frame)
            return
        self.send_ip("sgi", dst, inner)

    def _on_sgi(self, frame: EthernetFrame) -> None:
        try:
            ip = parse_ipv4(frame.payload)
            if ip.dst == self.interfaces["sgi"][0]:
                return
            pkt = self.spgw.downlink(ip.dst, frame.payload)
        except (EpcError, PacketError) as exc:
            self.drop(f"downlink: {exc}", frame)
            return
        mac = self.mac_for("s1u", pkt.outer_dst_ip)
        if mac is None:
            self.drop(f"no neighbor entry for {pkt.outer_dst_ip}", frame)
            return
        self.send("s1u", gtpu_frame(pkt, self.interfaces["s1u"][1], mac,
                                    ident=self.next_ident()))


class ServerNode(Host):
    """Application endpoint that echoes UDP/7 datagrams back to their source."""

    kind = "server"

    def __init__(self, name: str, ip: str, mac: str, gateway: str | None):
        super().__init__(name, {0: (ip, mac)}, gateway)
        self.on_app_rx = None

    def receive(self, port, frame: EthernetFrame) -> None:
        if not self.accepts(port, frame):
            return
        try:
            ip = parse_ipv4(frame.payload)
            if ip.proto != IPPROTO_UDP:
                return
            udp = parse_udp(ip.payload)
        except PacketError as exc:
            self.drop(f"server: {exc}", frame)
            return
        if udp.dport != APP_PORT or ip.dst != self.interfaces[0][0]:
            return
        if self.on_app_rx is not None:
            echo = self.on_app_rx(self, ip, udp)
            if not echo:
                return
        seg = build_udp(ip.dst, ip.src, APP_PORT, udp.sport, udp.payload)
        self.send_ip(0, ip.src, build_ipv4(ip.dst, ip.src, IPPROTO_UDP, seg,
                                           ident=self.next_ident()))


class SwitchNode(Node):
    """Flow-table switch; packet-ins travel to the controller node over the control channel."""

    kind = "switch"

    def __init__(self, name: str, pipeline: FlowTablePipeline, controller=None):
        super().__init__(name)
        self.pipeline = pipeline
        self.controller = controller

    def receive(self, port, frame: EthernetFrame) -> None:
        result = self.pipeline.process_frame(port, frame)
        delay = result.recirculations * self.sim.timing.gtp_module_us
        for out_port, out in result.outputs:
            if delay:
                self.sim.after(delay, "switch_out", self.send, out_port, out)
            else:
                self.send(out_port, out)
        for drop in result.drops:
            self.drop(drop.reason, drop.frame)
        for pi in result.packet_ins:
            self.sim.trace.add(self.sim.now, "ctl", what="packet_in", switch=self.name,
                               in_port=pi.in_port, cookie=pi.cookie, len=len(pi.frame))
            if self.controller is None:
                self.drop("no controller for packet-in", pi.frame)
            else:
                self.sim.after(self.sim.timing.controller_one_way_us, "packet_in",
                               self.controller.packet_in, self, pi)

    def apply_flow_mod(self, mod: FlowMod) -> None:
        installs = [dataclasses.replace(r) for r in mod.installs]
        self.pipeline.apply_bundle(mod.removals, installs)
        self.sim.trace.add(self.sim.now, "ctl", what="flow_mod", switch=self.name,
                           removed=len(mod.removals), installed=len(installs),
                           cookies=sorted({r.cookie for r in installs}))

    def packet_out(self, out: PacketOut) -> None:
        self.sim.trace.add(self.sim.now, "ctl", what="packet_out", switch=self.name,
                           port=str(out.port), len=len(out.frame))
        if out.port == FLOOD:
            for p in self.pipeline.physical_ports():
                if p != out.in_port:
                    self.send(p, out.frame)
        else:
            self.send(out.port, out.frame)


class BridgeNode(Node):
    """Standalone self-learning Ethernet bridge (no controller)."""

    kind = "bridge"

    def __init__(self, name: str, ports):
        super().__init__(name)
        self.ports = list(ports)
        self.table: dict[str, object] = {}

    def receive(self, port, frame: EthernetFrame) -> None:
        if is_unicast_mac(frame.eth_src):
            self.table[frame.eth_src] = port
        out = self.table.get(frame.eth_dst) if is_unicast_mac(frame.eth_dst) else None
        if out is None:
            for p in self.ports:
                if p != port and p in self.links:
                    self.send(p, frame)
        elif out != port:
            self.send(out, frame)


class ControllerNode:
    """Delivers packet-ins to the controller and its commands back to switches."""

    def __init__(self, sim, ctl: Controller, switches: dict):
        self.sim = sim
        self.ctl = ctl
        self.switches = switches
        self._seen_events = 0

    def packet_in(self, switch: SwitchNode, pi) -> None:
        self.dispatch(self.ctl.on_packet_in(switch.name, pi, self.sim.now))

    def dispatch(self, cmds, immediate: bool = False) -> None:
        self.flush_events()
        delay = 0 if immediate else self.sim.timing.controller_one_way_us
        for cmd in cmds:
            sw = self.switches[cmd.switch]
            if isinstance(cmd, FlowMod):
                if immediate:
                    sw.apply_flow_mod(cmd)
                else:
                    self.sim.after(delay, "flow_mod", sw.apply_flow_mod, cmd)
            elif isinstance(cmd, PacketOut):
                self.sim.after(delay, "packet_out", sw.packet_out, cmd)

    def flush_events(self) -> None:
        for ev in self.ctl.events[self._seen_events:]:
            detail = {k: v for k, v in ev.items() if k not in ("t", "kind")}
            self.sim.trace.add(self.sim.now, "event", node="controller", what=ev["kind"],
                               **detail)
        self._seen_events = len(self.ctl.events)


__all__ = ["Node", "Host", "MmeNode", "EnbNode", "SpgwNode", "ServerNode", "SwitchNode",
           "BridgeNode", "ControllerNode", "app_payload", "parse_app", "APP_PORT"]
