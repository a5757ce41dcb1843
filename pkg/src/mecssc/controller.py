"""SDN application layer.

The controller is sans-IO: every entry point takes an event plus the current
simulated time and returns commands (`FlowMod`, `PacketOut`) for the caller to
deliver. The simulator feeds it packet-ins over a delayed control channel; the
synchronous helpers at the bottom drive the same state machines directly.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from enum import Enum

from .config import DEFAULT_TIMING, Timing
from .flow import (CONTROLLER, FLOOD, IN_PORT, LOCAL, FlowRule, GotoTable, MatchFields,
                   Output, PacketIn, Priority, SetEthDst, SetInnerDst, SetInnerSrc, SetIpDst,
                   SetIpSrc, SetTunnelDst, SetTunnelTeid)
from .gtp import (GtpControlMessage, GtpError, MsgKind, encode_gtpc, frame_to_gtpc,
                  gtpc_frame, rewrite_s11_teid)
from .packets import (ETH_TYPE_IPV4, GTPC_PORT, GTPU_PORT, IPPROTO_UDP, EthernetFrame,
                      PacketError, is_unicast_mac, parse_ipv4)

DIVERT_RECORD_BYTES = 16

COOKIE_FWD = "fwd"
COOKIE_WIRE = "wire"
COOKIE_INTERCEPT = "gtpc:intercept"
COOKIE_OBSERVE = "gtpc:observe"
COOKIE_SHARED = "divert:shared"


def _absorb_cookie(replica: str) -> str:
    return f"gtpc:absorb:{replica}"


def _ue_cookie(imsi: str) -> str:
    return f"divert:ue:{imsi}"


def _downlink_cookie(replica: str) -> str:
    return f"divert:dl:{replica}"


def _nat_cookie(imsi: str) -> str:
    return f"nat:{imsi}"


class StoreMode(str, Enum):
    NAIVE = "naive"
    SELECTIVE = "selective"


class InterceptMode(str, Enum):
    STORE_AND_FORWARD = "store_and_forward"
    MIRROR = "mirror"


class ControllerError(RuntimeError):
    pass


# -- commands ---------------------------------------------------------------------

@dataclass(frozen=True)
class FlowMod:
    """Atomic bundle: `removals` (remove_rules kwargs) then `installs`."""

    switch: str
    removals: tuple = ()
    installs: tuple = ()


@dataclass(frozen=True)
class PacketOut:
    switch: str
    frame: EthernetFrame
    port: object
    in_port: object = None


# -- message store ------------------------------------------------------------------

@dataclass
class StoredMessage:
    order: int
    mme_id: str
    spgw_id: str
    imsi: str | None
    msg: GtpControlMessage
    wire: bytes
    arrival_us: int
    evicted: bool = False

    @property
    def size(self) -> int:
        return len(self.wire)


class MessageStore:
    """Archive of MME-originated GTP-C keyed by (mme_id, spgw_id, imsi).

    Entries keep their global arrival order, which is the replay order.
    """

    def __init__(self):
        self._log: list[StoredMessage] = []
        self._by_key: dict[tuple, list[StoredMessage]] = {}
        self._order = itertools.count()
        self._bytes = 0
        self.pinned = 0               # running jobs hold cursors into the log

    def add(self, mme_id: str, spgw_id: str, imsi: str | None, msg: GtpControlMessage,
            arrival_us: int, wire: bytes | None = None) -> StoredMessage:
        wire = encode_gtpc(msg) if wire is None else wire
        entry = StoredMessage(next(self._order), mme_id, spgw_id, imsi, msg, wire, arrival_us)
        self._log.append(entry)
        self._by_key.setdefault((mme_id, spgw_id, imsi), []).append(entry)
        self._bytes += entry.size
        return entry

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_key.values())

    @property
    def total_bytes(self) -> int:
        return self._bytes

    def audit(self) -> bool:
        return self._bytes == sum(e.size for v in self._by_key.values() for e in v)

    def keys(self) -> list[tuple]:
        return sorted(self._by_key, key=lambda k: tuple("" if x is None else x for x in k))

    def messages(self, *, mme_id: str | None = None, spgw_id: str | None = None,
                 imsi: str | None = None) -> list[StoredMessage]:
        out = [e for (m, s, i), v in self._by_key.items()
               if (mme_id is None or m == mme_id) and (spgw_id is None or s == spgw_id)
               and (imsi is None or i == imsi) for e in v]
        return sorted(out, key=lambda e: e.order)

    def entry_at(self, index: int) -> StoredMessage | None:
        return self._log[index] if index < len(self._log) else None

    def bytes_for(self, **kw) -> int:
        return sum(e.size for e in self.messages(**kw))

    def evict(self, *, mme_id: str | None = None, spgw_id: str | None = None,
              imsi: str | None = None) -> int:
        if mme_id is None and spgw_id is None and imsi is None:
            raise ValueError("evict needs at least one key component")
        freed = 0
        for key in list(self._by_key):
            m, s, i = key
            if (mme_id is None or m == mme_id) and (spgw_id is None or s == spgw_id) \
                    and (imsi is None or i == imsi):
                for entry in self._by_key.pop(key):
                    entry.evicted = True
                    freed += entry.size
        self._bytes -= freed
        if len(self._log) > 4096 and sum(e.evicted for e in self._log) > len(self._log) // 2:
            self._compact()
        return freed

    def _compact(self) -> None:
        if not self.pinned:
            self._log = [e for e in self._log if not e.evicted]


# -- records and reports ---------------------------------------------------------------

@dataclass
class SpgwInfo:
    name: str
    control_ip: str
    user_ip: str
    control_mac: str | None = None
    user_mac: str | None = None
    replica_of: str | None = None
    sgi: tuple | None = None          # (wire switch, port toward the S/P-GW, far port)
    active: bool = True
    usable: bool = True
    synced: bool = False              # naive replica receiving live duplicates


@dataclass
class MmeInfo:
    name: str
    control_ip: str
    mac: str | None = None
    switch: str | None = None
    uplink_port: object = 1
    active: bool = True


@dataclass
class GtpSwitchInfo:
    name: str
    local_ip: str
    local_mac: str
    gtp_port: int
    enb_ips: tuple = ()


@dataclass
class UeBinding:
    imsi: str
    mme_id: str
    spgw_id: str
    mme_s11_teid: int
    sgw_s11_teid: int | None = None
    sgw_s1u_teid: int | None = None
    ue_ip: str | None = None
    enb_ip: str | None = None
    enb_s1u_teid: int | None = None
    active: bool = False


@dataclass
class DivertRecord:
    imsi: str
    enb_ip: str
    old_spgw_ip: str
    new_spgw_ip: str
    mode: StoreMode
    replica: str = ""
    ue_ip: str | None = None          # address the UE uses toward the eNB
    new_sgw_s1u_teid: int | None = None
    new_sgw_s11_teid: int | None = None
    old_ue_ip: str | None = None
    new_ue_ip: str | None = None
    installed: bool = False

    _EXTRAS = ("new_sgw_s1u_teid", "new_sgw_s11_teid", "old_ue_ip", "new_ue_ip")

    def validate(self) -> None:
        present = [getattr(self, f) is not None for f in self._EXTRAS]
        if self.mode == StoreMode.SELECTIVE and not all(present):
            raise ControllerError(f"selective divert of {self.imsi} lacks replica identifiers")
        if self.mode == StoreMode.NAIVE and any(present):
            raise ControllerError(f"naive divert of {self.imsi} carries selective extras")

    @property
    def accounted_bytes(self) -> int:
        return DIVERT_RECORD_BYTES if self.mode == StoreMode.SELECTIVE else 0


CSV_COLUMNS = ("strategy", "registered", "moved", "stored_bytes", "tx_bytes",
               "elapsed_ms", "downtime_ms")


@dataclass
class ReplicationReport:
    strategy: str
    registered_ues: int
    moved_ues: int
    stored_bytes: int
    transmitted_bytes: int
    elapsed_ms: float
    downtime_ms: float = 0.0
    ok: bool = True
    error: str | None = None
    ue_errors: dict = field(default_factory=dict)
    source: str = ""
    replica: str = ""
    started_us: int = 0
    finished_us: int = 0

    def csv_row(self) -> dict:
        return dict(strategy=self.strategy, registered=self.registered_ues,
                    moved=self.moved_ues, stored_bytes=self.stored_bytes,
                    tx_bytes=self.transmitted_bytes, elapsed_ms=f"{self.elapsed_ms:.3f}",
                    downtime_ms=f"{self.downtime_ms:.3f}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- replication job -----------------------------------------------------------------------

class ReplicationJob:
    """Sequential replay: one request in flight, the next sent when its response returns."""

    def __init__(self, ctl: Controller, strategy: StoreMode, source: SpgwInfo,
                 replica: SpgwInfo, imsis, started_us: int):
        self.ctl = ctl
        self.strategy = strategy
        self.source = source
        self.replica = replica
        self.imsis = list(imsis)
        self.started_us = started_us
        self.registered = ctl.registered_ues(source.name)
        self.awaiting: GtpControlMessage | None = None
        self.awaiting_entry: StoredMessage | None = None
        self.sent: list[GtpControlMessage] = []
        self.transmitted_bytes = 0
        self.ue_errors: dict[str, str] = {}
        self.error: str | None = None
        self.finished_us: int | None = None
        self.records: dict[str, DivertRecord] = {}
        self._cursor = 0
        self._pending = list(self.imsis)
        self._current: str | None = None
        self._extras: dict = {}
        ctl.store.pinned += 1

    @property
    def done(self) -> bool:
        return self.finished_us is not None

    def covers(self, imsi: str) -> bool:
        return self.strategy == StoreMode.NAIVE or imsi in self.imsis

    def _readdress(self, msg: GtpControlMessage) -> GtpControlMessage:
        return dataclasses.replace(msg, dst_ip=self.replica.control_ip)

    def _next_stored(self, imsi: str | None) -> StoredMessage | None:
        store = self.ctl.store
        while (entry := store.entry_at(self._cursor)) is not None:
            self._cursor += 1
            if entry.evicted or entry.spgw_id != self.source.name:
                continue
            if imsi is not None and entry.imsi != imsi:
                continue
            return entry
        return None

    def advance(self, now: int) -> GtpControlMessage | None:
        """Pick the next request to send; None once the job has finished."""
        if self.done or self.awaiting is not None:
            return None
        if self.strategy == StoreMode.NAIVE:
            entry = self._next_stored(None)
            return self._send(entry, self._readdress(entry.msg)) if entry else self._finish(now)
        while True:
            if self._current is None:
                if not self._pending:
                    return self._finish(now)
                self._current = self._pending.pop(0)
                self._cursor = 0
                self._extras = {}
                problem = self.ctl.selective_precondition(self.source.name, self._current)
                if problem:
                    self.ue_errors[self._current] = problem
                    self._current = None
                    continue
            entry = self._next_stored(self._current)
            if entry is None:
                self._complete_ue()
                continue
            msg = self._readdress(entry.msg)
            if msg.msg_kind != MsgKind.CREATE_SESSION_REQUEST:
                if "new_sgw_s11_teid" not in self._extras:
                    self.ue_errors[self._current] = "no replica session to address"
                    self._current = None
                    continue
                new_teid = self._extras["new_sgw_s11_teid"]
                msg = (rewrite_s11_teid(msg, new_teid)
                       if msg.msg_kind == MsgKind.MODIFY_BEARER_REQUEST
                       else dataclasses.replace(msg, peer_s11_teid=new_teid))
            return self._send(entry, msg)

    def _send(self, entry: StoredMessage, msg: GtpControlMessage) -> GtpControlMessage:
        self.awaiting, self.awaiting_entry = msg, entry
        self.sent.append(msg)
        self.transmitted_bytes += len(encode_gtpc(msg))
        return msg

    def _complete_ue(self) -> None:
        imsi, extras = self._current, self._extras
        self._current = None
        if imsi in self.ue_errors:
            return
        if not extras.get("active"):
            self.ue_errors[imsi] = "replica bearer not activated"
            return
        binding = self.ctl.bindings[imsi]
        record = DivertRecord(imsi, binding.enb_ip, self.source.user_ip, self.replica.user_ip,
                              StoreMode.SELECTIVE, self.replica.name, ue_ip=binding.ue_ip,
                              new_sgw_s1u_teid=extras["new_sgw_s1u_teid"],
                              new_sgw_s11_teid=extras["new_sgw_s11_teid"],
                              old_ue_ip=binding.ue_ip, new_ue_ip=extras["new_ue_ip"])
        record.validate()
        self.records[imsi] = record
        self.ctl.divert_records[imsi] = record

    def matches(self, resp: GtpControlMessage) -> bool:
        req = self.awaiting
        return (req is not None and resp.seq == req.seq
                and resp.msg_kind == req.msg_kind + 1 and resp.src_ip == self.replica.control_ip)

    def on_response(self, resp: GtpControlMessage, now: int) -> None:
        req, entry = self.awaiting, self.awaiting_entry
        self.awaiting = self.awaiting_entry = None
        if self.strategy == StoreMode.NAIVE:
            if not resp.accepted:
                self.error = (f"replica rejected {req.msg_kind.name} seq={req.seq} "
                              f"(cause {resp.cause})")
                self.replica.usable = False
                self._finish(now)
            return
        imsi = entry.imsi
        if not resp.accepted:
            self.ue_errors[imsi] = f"replica rejected {req.msg_kind.name} (cause {resp.cause})"
            self._current = None
            return
        if resp.msg_kind == MsgKind.CREATE_SESSION_RESPONSE:
            self._extras.update(new_sgw_s11_teid=resp.sender_s11_teid,
                                new_sgw_s1u_teid=resp.s1u_teid_sgw, new_ue_ip=resp.ue_ip)
        elif resp.msg_kind == MsgKind.MODIFY_BEARER_RESPONSE:
            self._extras["active"] = True

    def _finish(self, now: int) -> None:
        self.finished_us = now if self.sent else self.started_us
        self.ctl.store.pinned -= 1
        if self.strategy == StoreMode.NAIVE and self.error is None:
            self.replica.synced = True
        return None

    def report(self) -> ReplicationReport:
        elapsed = (self.finished_us - self.started_us) / 1000 if self.done else float("nan")
        return ReplicationReport(
            strategy=self.strategy.value, registered_ues=self.registered,
            moved_ues=(len(self.imsis) or self.registered) if self.strategy == StoreMode.NAIVE
            else len(self.records),
            stored_bytes=self.ctl.stored_bytes(),
            transmitted_bytes=self.transmitted_bytes, elapsed_ms=elapsed, downtime_ms=0.0,
            ok=self.error is None and not self.ue_errors, error=self.error,
            ue_errors=dict(self.ue_errors), source=self.source.name, replica=self.replica.name,
            started_us=self.started_us, finished_us=self.finished_us or 0)


# -- rule builders ---------------------------------------------------------------------------

def _gtpu_match(**kw) -> MatchFields:
    return MatchFields(eth_type=ETH_TYPE_IPV4, ip_proto=IPPROTO_UDP, udp_dst=GTPU_PORT, **kw)


def forwarding_defaults() -> list[FlowRule]:
    return [FlowRule(0, Priority.LOW, MatchFields(), [GotoTable(2)], COOKIE_FWD),
            FlowRule(2, Priority.LOW, MatchFields(), [Output(CONTROLLER)], COOKIE_FWD)]


def shared_diverting_rules(sw: GtpSwitchInfo, enb_ip: str, old_spgw_ip: str) -> list[FlowRule]:
    """Rules shared by every diverted UE behind one switch; installed once."""
    # install order fixes the equal-priority listing order: eNB rule before OVS rule
    return [
        FlowRule(0, Priority.HIGH, MatchFields(in_port=sw.gtp_port), [GotoTable(1)],
                 COOKIE_SHARED),
        FlowRule(0, Priority.MEDIUM, _gtpu_match(ipv4_src=enb_ip, ipv4_dst=old_spgw_ip),
                 [SetIpDst(sw.local_ip), SetEthDst(sw.local_mac), Output(LOCAL)],
                 COOKIE_SHARED),
        FlowRule(0, Priority.MEDIUM, _gtpu_match(ipv4_src=sw.local_ip),
                 [SetIpSrc(enb_ip), GotoTable(2)], COOKIE_SHARED),
        FlowRule(1, Priority.LOW, MatchFields(),
                 [SetTunnelDst(old_spgw_ip), Output(IN_PORT)], COOKIE_SHARED),
    ]


def ue_diverting_rules(record: DivertRecord) -> list[FlowRule]:
    """Per-UE table-1 rule; selective mode adds TEID/address rewrites both ways."""
    actions = [SetTunnelDst(record.new_spgw_ip)]
    if record.mode == StoreMode.SELECTIVE:
        actions += [SetTunnelTeid(record.new_sgw_s1u_teid), SetInnerSrc(record.new_ue_ip)]
    actions.append(Output(IN_PORT))
    rules = [FlowRule(1, Priority.HIGH, MatchFields(eth_type=ETH_TYPE_IPV4, ipv4_src=record.ue_ip),
                      actions, _ue_cookie(record.imsi))]
    if record.mode == StoreMode.SELECTIVE:
        rules.append(FlowRule(1, Priority.HIGH,
                              MatchFields(eth_type=ETH_TYPE_IPV4, ipv4_dst=record.new_ue_ip),
                              [SetInnerDst(record.old_ue_ip), SetTunnelDst(record.enb_ip),
                               Output(IN_PORT)], _ue_cookie(record.imsi)))
    return rules


def downlink_diverting_rules(sw: GtpSwitchInfo, record: DivertRecord) -> list[FlowRule]:
    """Selective downlink: terminate replica tunnels at the switch, re-source toward the eNB."""
    return [
        FlowRule(0, Priority.MEDIUM, _gtpu_match(ipv4_src=record.new_spgw_ip,
                                                 ipv4_dst=record.enb_ip),
                 [SetIpDst(sw.local_ip), SetEthDst(sw.local_mac), Output(LOCAL)],
                 _downlink_cookie(record.replica)),
        FlowRule(0, Priority.HIGH, _gtpu_match(ipv4_src=sw.local_ip, ipv4_dst=record.enb_ip),
                 [SetIpSrc(record.new_spgw_ip), GotoTable(2)], _downlink_cookie(record.replica)),
    ]


def sgi_nat_rules(record: DivertRecord, spgw_port, far_port) -> list[FlowRule]:
    """Keep the correspondent's view of the UE address stable behind the replica."""
    cookie = _nat_cookie(record.imsi)
    return [
        FlowRule(0, Priority.HIGH, MatchFields(in_port=spgw_port, eth_type=ETH_TYPE_IPV4,
                                               ipv4_src=record.new_ue_ip),
                 [SetIpSrc(record.old_ue_ip), Output(far_port)], cookie),
        FlowRule(0, Priority.HIGH, MatchFields(in_port=far_port, eth_type=ETH_TYPE_IPV4,
                                               ipv4_dst=record.old_ue_ip),
                 [SetIpDst(record.new_ue_ip), Output(spgw_port)], cookie),
    ]


# -- forwarding application ------------------------------------------------------------------

class LearningApp:
    """Reactive MAC learning over table 2; frames from LOCAL/GTP ports are not learned."""

    def __init__(self):
        self.mac_tables: dict[str, dict[str, object]] = {}
        self.hosts: dict[str, str] = {}          # ip -> mac
        self.skip_ports: dict[str, set] = {}
        self.ports: dict[str, list] = {}

    def add_switch(self, name: str, ports, skip=()) -> FlowMod:
        self.mac_tables[name] = {}
        self.ports[name] = list(ports)
        self.skip_ports[name] = {LOCAL, *skip}
        return FlowMod(name, installs=tuple(forwarding_defaults()))

    @staticmethod
    def path_rule(src_mac: str, dst_mac: str, port) -> FlowRule:
        return FlowRule(2, Priority.MEDIUM, MatchFields(eth_src=src_mac, eth_dst=dst_mac),
                        [Output(port)], COOKIE_FWD)

    def packet_in(self, switch: str, event: PacketIn) -> list:
        frame, in_port = event.frame, event.in_port
        table = self.mac_tables[switch]
        cmds = []
        if in_port not in self.skip_ports[switch] and is_unicast_mac(frame.eth_src):
            known = table.get(frame.eth_src)
            if known is not None and known != in_port:
                mac = frame.eth_src
                cmds.append(FlowMod(switch, removals=(
                    dict(table_id=2, cookie=COOKIE_FWD,
                         predicate=lambda r, m=mac: m in (r.match.eth_src, r.match.eth_dst)),)))
            table[frame.eth_src] = in_port
            if frame.eth_type == ETH_TYPE_IPV4:
                try:
                    self.hosts[parse_ipv4(frame.payload).src] = frame.eth_src
                except PacketError:
                    pass
        out = table.get(frame.eth_dst) if is_unicast_mac(frame.eth_dst) else None
        if out is None:
            cmds.append(PacketOut(switch, frame, FLOOD, in_port))
        elif out != in_port:
            cmds.append(FlowMod(switch, installs=(self.path_rule(frame.eth_src, frame.eth_dst,
                                                                 out),)))
            cmds.append(PacketOut(switch, frame, out, in_port))
        return cmds

    def ensure_path(self, switch: str, ip_a: str, ip_b: str) -> FlowMod | None:
        """Pre-install both directions between two known hosts (make-before-break)."""
        mac_a, mac_b = self.hosts.get(ip_a), self.hosts.get(ip_b)
        table = self.mac_tables.get(switch, {})
        if mac_a is None or mac_b is None or mac_a not in table or mac_b not in table:
            return None
        return FlowMod(switch, installs=(self.path_rule(mac_a, mac_b, table[mac_b]),
                                         self.path_rule(mac_b, mac_a, table[mac_a])))


# -- controller ----------------------------------------------------------------------------------

class Controller:
    """Single logical controller hosting forwarding, interception, replication and diverting."""

    def __init__(self, store_mode: StoreMode | str = StoreMode.NAIVE,
                 intercept: InterceptMode | str = InterceptMode.STORE_AND_FORWARD,
                 timing: Timing = DEFAULT_TIMING):
        self.store_mode = StoreMode(store_mode)
        self.intercept = InterceptMode(intercept)
        self.timing = timing
        self.store = MessageStore()
        self.forwarding = LearningApp()
        self.mmes: dict[str, MmeInfo] = {}
        self.spgws: dict[str, SpgwInfo] = {}
        self.gtp_switches: dict[str, GtpSwitchInfo] = {}
        self.mme_switches: dict[str, str] = {}        # switch -> mme name
        self.bindings: dict[str, UeBinding] = {}
        self._by_sgw_teid: dict[tuple, str] = {}
        self._by_mme_teid: dict[tuple, str] = {}
        self.divert_records: dict[str, DivertRecord] = {}
        self.diverted: dict[str, str] = {}            # imsi -> gtp switch
        self.jobs: list[ReplicationJob] = []
        self.reports: list[ReplicationReport] = []
        self.events: list[dict] = []
        self._pending_diverts: list[str] = []
        self._pending_cmds: list = []

    def log(self, now: int, kind: str, **detail) -> None:
        self.events.append(dict(t=now, kind=kind, **detail))

    # -- registration

    def register_switch(self, name: str, ports) -> list:
        return [self.forwarding.add_switch(name, ports)]

    def register_gtp_switch(self, name: str, ports, *, local_ip: str, local_mac: str,
                            gtp_port: int, enb_ips=()) -> list:
        self.gtp_switches[name] = GtpSwitchInfo(name, local_ip, local_mac, gtp_port,
                                                tuple(enb_ips))
        return [self.forwarding.add_switch(name, ports, skip=(gtp_port,))]

    def register_wire_switch(self, name: str, port_a, port_b) -> list:
        rules = (FlowRule(0, Priority.LOW, MatchFields(in_port=port_a), [Output(port_b)],
                          COOKIE_WIRE),
                 FlowRule(0, Priority.LOW, MatchFields(in_port=port_b), [Output(port_a)],
                          COOKIE_WIRE))
        return [FlowMod(name, installs=rules)]

    def register_mme(self, name: str, control_ip: str, mac: str | None = None) -> None:
        self.mmes[name] = MmeInfo(name, control_ip, mac)

    def register_mme_switch(self, name: str, mme: str, uplink_port=1) -> list:
        """The MME's switch: LOCAL faces the MME, `uplink_port` the S11 network."""
        info = self.mmes[mme]
        info.switch, info.uplink_port = name, uplink_port
        self.mme_switches[name] = mme
        up = uplink_port
        if self.intercept == InterceptMode.STORE_AND_FORWARD:
            intercept = [Output(CONTROLLER)]
        else:
            intercept = [Output(up), Output(CONTROLLER)]
        gtpc = dict(eth_type=ETH_TYPE_IPV4, ip_proto=IPPROTO_UDP)
        rules = [
            FlowRule(0, Priority.LOW, MatchFields(in_port=LOCAL), [Output(up)], COOKIE_WIRE),
            FlowRule(0, Priority.LOW, MatchFields(in_port=up), [Output(LOCAL)], COOKIE_WIRE),
            FlowRule(0, Priority.HIGH, MatchFields(in_port=LOCAL, udp_dst=GTPC_PORT, **gtpc),
                     intercept, COOKIE_INTERCEPT),
            FlowRule(0, Priority.MEDIUM, MatchFields(in_port=up, udp_src=GTPC_PORT, **gtpc),
                     [Output(LOCAL), Output(CONTROLLER)], COOKIE_OBSERVE),
        ]
        for spgw in self.spgws.values():
            if spgw.replica_of is not None:
                rules.append(self._absorb_rule(spgw, up))
        return [FlowMod(name, installs=tuple(rules))]

    def register_spgw(self, name: str, control_ip: str, user_ip: str, *,
                      control_mac: str | None = None, user_mac: str | None = None) -> None:
        self.spgws[name] = SpgwInfo(name, control_ip, user_ip, control_mac, user_mac)
        if user_mac:
            self.forwarding.hosts[user_ip] = user_mac

    @staticmethod
    def _absorb_rule(spgw: SpgwInfo, uplink_port) -> FlowRule:
        return FlowRule(0, Priority.HIGH,
                        MatchFields(in_port=uplink_port, eth_type=ETH_TYPE_IPV4,
                                    ipv4_src=spgw.control_ip, ip_proto=IPPROTO_UDP,
                                    udp_src=GTPC_PORT),
                        [Output(CONTROLLER)], _absorb_cookie(spgw.name))

    def deploy_replica(self, name: str, source: str, control_ip: str, user_ip: str, *,
                       control_mac: str | None = None, user_mac: str | None = None,
                       sgi: tuple | None = None, now: int = 0) -> list:
        if source not in self.spgws:
            raise ControllerError(f"unknown S/P-GW {source!r}")
        info = SpgwInfo(name, control_ip, user_ip, control_mac, user_mac, replica_of=source,
                        sgi=sgi)
        self.spgws[name] = info
        if user_mac:
            self.forwarding.hosts[user_ip] = user_mac
        self.log(now, "replica_deployed", replica=name, source=source)
        return [FlowMod(sw, installs=(self._absorb_rule(info, self.mmes[m].uplink_port),))
                for sw, m in sorted(self.mme_switches.items())]

    def _spgw_by_control_ip(self, ip: str) -> SpgwInfo | None:
        for info in self.spgws.values():
            if info.control_ip == ip:
                return info
        return None

    def _mme_by_ip(self, ip: str) -> MmeInfo | None:
        for info in self.mmes.values():
            if info.control_ip == ip:
                return info
        return None

    # -- queries

    def registered_ues(self, spgw: str) -> int:
        return sum(1 for b in self.bindings.values() if b.spgw_id == spgw and b.active)

    def stored_bytes(self) -> int:
        return self.store.total_bytes + sum(r.accounted_bytes
                                            for r in self.divert_records.values())

    def selective_precondition(self, spgw: str, imsi: str) -> str | None:
        binding = self.bindings.get(imsi)
        if binding is None or binding.spgw_id != spgw:
            return f"UE {imsi} has no session on {spgw}"
        if not binding.active:
            return f"UE {imsi} is not Active"
        return None

    # -- packet-in dispatch

    def on_packet_in(self, switch: str, event: PacketIn, now: int) -> list:
        cookie = event.cookie
        if cookie == COOKIE_INTERCEPT:
            return self._on_intercept(switch, event, now)
        if cookie == COOKIE_OBSERVE or cookie.startswith("gtpc:absorb:"):
            try:
                msg = frame_to_gtpc(event.frame)
            except GtpError as exc:
                self.log(now, "warning", detail=f"undecodable GTP-C from S11 side: {exc}")
                return []
            return [] if msg is None else self.on_spgw_gtpc(msg, now)
        if switch in self.forwarding.mac_tables:
            return self.forwarding.packet_in(switch, event)
        self.log(now, "warning", detail=f"unexpected packet-in from {switch}")
        return []

    def _on_intercept(self, switch: str, event: PacketIn, now: int) -> list:
        mme = self.mmes[self.mme_switches[switch]]
        cmds = []
        if self.intercept == InterceptMode.STORE_AND_FORWARD:
            cmds.append(PacketOut(switch, event.frame, mme.uplink_port, LOCAL))
        try:
            msg = frame_to_gtpc(event.frame)
        except GtpError as exc:
            self.log(now, "warning", detail=f"GTP-C not stored: {exc}")
            return cmds
        if msg is None:
            return cmds
        for replica, dup in self.intercept_gtpc(msg, now, mme.name):
            cmds.append(self._packet_out_to(replica, dup, mme))
        return cmds + self.take_pending()

    def _packet_out_to(self, replica: SpgwInfo, msg: GtpControlMessage,
                       mme: MmeInfo) -> PacketOut:
        frame = gtpc_frame(msg, mme.mac, replica.control_mac)
        return PacketOut(mme.switch, frame, mme.uplink_port, LOCAL)

    # -- interception and storage

    def intercept_gtpc(self, msg: GtpControlMessage, now: int, mme_id: str | None = None,
                       wire: bytes | None = None) -> list[tuple[SpgwInfo, GtpControlMessage]]:
        """Store one MME-originated message; return live duplicates owed to replicas."""
        mme = self.mmes.get(mme_id) if mme_id else self._mme_by_ip(msg.src_ip)
        spgw = self._spgw_by_control_ip(msg.dst_ip)
        if mme is None or spgw is None or not mme.active or not spgw.active:
            self.log(now, "warning", detail=f"{msg.msg_kind.name} from {msg.src_ip} to "
                     f"{msg.dst_ip} not stored: endpoint unknown or down")
            return []
        imsi = self._learn_request(mme, spgw, msg)
        if imsi is None:
            self.log(now, "warning", detail=f"{msg.msg_kind.name} seq={msg.seq} has no UE binding")
        self.store.add(mme.name, spgw.name, imsi, msg, now, wire)
        self.log(now, "stored", mme=mme.name, spgw=spgw.name, imsi=imsi,
                 msg=msg.msg_kind.name, bytes=len(encode_gtpc(msg)))
        dups = self._live_duplicates(spgw, imsi, msg)
        if msg.msg_kind == MsgKind.DELETE_SESSION_REQUEST and imsi is not None:
            self._pending_detach(imsi, now)
        return dups

    def _learn_request(self, mme: MmeInfo, spgw: SpgwInfo, msg: GtpControlMessage) -> str | None:
        if msg.msg_kind == MsgKind.CREATE_SESSION_REQUEST:
            old = self.bindings.get(msg.imsi)
            if old is not None and old.spgw_id == spgw.name and \
                    old.mme_s11_teid == msg.sender_s11_teid:
                return msg.imsi
            self.bindings[msg.imsi] = UeBinding(msg.imsi, mme.name, spgw.name,
                                                msg.sender_s11_teid)
            self._by_mme_teid[(mme.name, msg.sender_s11_teid)] = msg.imsi
            return msg.imsi
        imsi = self._by_sgw_teid.get((spgw.name, msg.peer_s11_teid))
        if imsi is not None and msg.msg_kind == MsgKind.MODIFY_BEARER_REQUEST:
            b = self.bindings[imsi]
            b.enb_ip, b.enb_s1u_teid = msg.enb_s1u_ip, msg.s1u_teid_enb
        return imsi

    def _live_duplicates(self, spgw: SpgwInfo, imsi: str | None, msg: GtpControlMessage):
        dups = []
        for replica in self.spgws.values():
            if replica.replica_of != spgw.name or not replica.usable or not replica.active:
                continue
            if replica.synced:
                dups.append((replica, dataclasses.replace(msg, dst_ip=replica.control_ip)))
                continue
            record = self.divert_records.get(imsi) if imsi else None
            if record is None or record.replica != replica.name:
                continue
            if msg.msg_kind == MsgKind.CREATE_SESSION_REQUEST:
                continue
            dup = dataclasses.replace(msg, dst_ip=replica.control_ip,
                                      peer_s11_teid=record.new_sgw_s11_teid)
            dups.append((replica, dup))
        return dups

    def on_spgw_gtpc(self, msg: GtpControlMessage, now: int) -> list:
        """A GTP-C message seen on the S11 side of an MME switch."""
        spgw = self._spgw_by_control_ip(msg.src_ip)
        if spgw is None:
            self.log(now, "warning", detail=f"GTP-C from unknown S/P-GW {msg.src_ip}")
            return []
        if spgw.replica_of is not None:
            return self._on_replica_response(spgw, msg, now)
        self._learn_response(spgw, msg)
        return []

    def _learn_response(self, spgw: SpgwInfo, msg: GtpControlMessage) -> None:
        mme = self._mme_by_ip(msg.dst_ip)
        imsi = self._by_mme_teid.get((mme.name, msg.peer_s11_teid)) if mme else None
        binding = self.bindings.get(imsi) if imsi else None
        if binding is None or binding.spgw_id != spgw.name:
            return
        if msg.msg_kind == MsgKind.CREATE_SESSION_RESPONSE and msg.accepted:
            binding.sgw_s11_teid = msg.sender_s11_teid
            binding.sgw_s1u_teid = msg.s1u_teid_sgw
            binding.ue_ip = msg.ue_ip
            self._by_sgw_teid[(spgw.name, msg.sender_s11_teid)] = imsi
        elif msg.msg_kind == MsgKind.MODIFY_BEARER_RESPONSE and msg.accepted:
            binding.active = True
        elif msg.msg_kind == MsgKind.DELETE_SESSION_RESPONSE and msg.accepted:
            self._drop_binding(binding)

    def _drop_binding(self, binding: UeBinding) -> None:
        self.bindings.pop(binding.imsi, None)
        self._by_mme_teid.pop((binding.mme_id, binding.mme_s11_teid), None)
        if binding.sgw_s11_teid is not None:
            self._by_sgw_teid.pop((binding.spgw_id, binding.sgw_s11_teid), None)

    def _on_replica_response(self, replica: SpgwInfo, msg: GtpControlMessage,
                             now: int) -> list:
        self.log(now, "absorbed", replica=replica.name, msg=msg.msg_kind.name, seq=msg.seq)
        for job in self.jobs:
            if not job.done and job.replica is replica and job.matches(msg):
                job.on_response(msg, now)
                return self._pump(job, now)
        return []

    def _pending_detach(self, imsi: str, now: int) -> None:
        # a detach undoes any divert; selective mode also forgets the UE at once
        if self.store_mode == StoreMode.SELECTIVE:
            self._pending_cmds += self.evict("ue_detach", imsi, now)
        elif imsi in self.diverted:
            self._pending_cmds += self.undo_divert(imsi, now)

    def take_pending(self) -> list:
        cmds, self._pending_cmds = self._pending_cmds, []
        return cmds

    # -- eviction

    def evict(self, kind: str, ident: str, now: int = 0) -> list:
        """Handle mme_down / spgw_down / ue_detach; returns rule removals for diverted UEs."""
        cmds = []
        if kind == "mme_down":
            if ident not in self.mmes:
                self.log(now, "warning", detail=f"evict: unknown MME {ident}")
                return []
            self.mmes[ident].active = False
            freed = self.store.evict(mme_id=ident)
        elif kind == "spgw_down":
            if ident not in self.spgws:
                self.log(now, "warning", detail=f"evict: unknown S/P-GW {ident}")
                return []
            self.spgws[ident].active = False
            freed = self.store.evict(spgw_id=ident)
            for job in self.jobs:
                if not job.done and ident in (job.source.name, job.replica.name):
                    job.error = f"S/P-GW {ident} went down during replication"
                    job.replica.usable = False
                    job._finish(now)
                    self._complete(job, now)
        elif kind == "ue_detach":
            if ident not in self.bindings and not self.store.messages(imsi=ident):
                self.log(now, "warning", detail=f"evict: unknown UE {ident}")
                return []
            freed = self.store.evict(imsi=ident)
            if ident in self.diverted:
                cmds += self.undo_divert(ident, now)
            self.divert_records.pop(ident, None)
        else:
            raise ControllerError(f"unknown eviction event {kind!r}")
        self.log(now, "evicted", event=kind, target=ident, bytes=freed)
        return cmds

    # -- replication

    def start_replication(self, strategy: StoreMode | str, source: str, replica: str,
                          imsis=(), now: int = 0) -> tuple[ReplicationJob, list]:
        strategy = StoreMode(strategy)
        if strategy != self.store_mode:
            raise ControllerError(f"store runs in {self.store_mode.value} mode; "
                                  f"cannot replicate {strategy.value}")
        src, rep = self.spgws.get(source), self.spgws.get(replica)
        if src is None or rep is None or rep.replica_of != source:
            raise ControllerError(f"{replica!r} is not a deployed replica of {source!r}")
        if not rep.usable:
            raise ControllerError(f"replica {replica!r} is marked unusable")
        job = ReplicationJob(self, strategy, src, rep, imsis, now)
        self.jobs.append(job)
        self.log(now, "replication_started", strategy=strategy.value, source=source,
                 replica=replica, ues=len(job.imsis))
        return job, self._pump(job, now)

    def _pump(self, job: ReplicationJob, now: int) -> list:
        msg = job.advance(now)
        if msg is not None:
            entry = job.awaiting_entry
            mme = self.mmes[entry.mme_id]
            return [self._packet_out_to(job.replica, msg, mme)]
        return self._complete(job, now)

    def _complete(self, job: ReplicationJob, now: int) -> list:
        report = job.report()
        self.reports.append(report)
        self.log(now, "replication_done", strategy=report.strategy, ok=report.ok,
                 error=report.error, elapsed_ms=report.elapsed_ms,
                 transmitted=report.transmitted_bytes)
        if job.strategy == StoreMode.NAIVE and job.error is None:
            bindings = [b for b in self.bindings.values() if b.spgw_id == job.source.name]
            for b in bindings:
                self.divert_records[b.imsi] = self._naive_record(b, job)
        cmds = []
        waiting, self._pending_diverts = self._pending_diverts, []
        for imsi in waiting:
            cmds += self.divert(imsi, now)
        return cmds

    @staticmethod
    def _naive_record(b: UeBinding, job: ReplicationJob) -> DivertRecord:
        return DivertRecord(b.imsi, b.enb_ip, job.source.user_ip, job.replica.user_ip,
                            StoreMode.NAIVE, job.replica.name, ue_ip=b.ue_ip)

    # -- diverting

    def _switch_for_enb(self, enb_ip: str) -> GtpSwitchInfo | None:
        for sw in self.gtp_switches.values():
            if enb_ip in sw.enb_ips:
                return sw
        return None

    def divert(self, imsi: str, now: int = 0) -> list:
        if any(not j.done and j.covers(imsi) for j in self.jobs):
            self._pending_diverts.append(imsi)
            self.log(now, "divert_deferred", imsi=imsi)
            return []
        record = self.divert_records.get(imsi)
        if record is None:
            if self.store_mode == StoreMode.NAIVE and imsi in self.bindings:
                job = next((j for j in reversed(self.jobs) if j.done and j.error is None
                            and j.source.name == self.bindings[imsi].spgw_id), None)
                if job is not None:
                    record = self.divert_records[imsi] = self._naive_record(
                        self.bindings[imsi], job)
        if record is None:
            self.log(now, "warning", detail=f"divert {imsi}: no completed replication")
            return []
        return self.install_diverting_rules(record, now)

    def install_diverting_rules(self, record: DivertRecord, now: int = 0) -> list:
        sw = self._switch_for_enb(record.enb_ip)
        if sw is None:
            self.log(now, "warning", detail=f"no GTP switch serves eNB {record.enb_ip}")
            return []
        removals = [dict(cookie=_ue_cookie(record.imsi))]
        installs = []
        if self.forwarding.ensure_path(sw.name, record.enb_ip, record.new_spgw_ip) is not None:
            installs += self.forwarding.ensure_path(sw.name, record.enb_ip,
                                                    record.new_spgw_ip).installs
        if not any(s == sw.name for s in self.diverted.values()):
            installs += shared_diverting_rules(sw, record.enb_ip, record.old_spgw_ip)
        installs += ue_diverting_rules(record)
        cmds = []
        if record.mode == StoreMode.SELECTIVE:
            if not any(self.divert_records[i].replica == record.replica
                       for i, s in self.diverted.items() if s == sw.name and i != record.imsi):
                installs += downlink_diverting_rules(sw, record)
            replica = self.spgws[record.replica]
            if replica.sgi is not None:
                nat_sw, spgw_port, far_port = replica.sgi
                cmds.append(FlowMod(nat_sw, removals=(dict(cookie=_nat_cookie(record.imsi)),),
                                    installs=tuple(sgi_nat_rules(record, spgw_port,
                                                                 far_port))))
        record.installed = True
        self.diverted[record.imsi] = sw.name
        self.log(now, "diverted", imsi=record.imsi, switch=sw.name, replica=record.replica)
        return [FlowMod(sw.name, removals=tuple(removals), installs=tuple(installs))] + cmds

    def undo_divert(self, imsi: str, now: int = 0) -> list:
        sw_name = self.diverted.pop(imsi, None)
        if sw_name is None:
            self.log(now, "warning", detail=f"undo divert {imsi}: not diverted")
            return []
        record = self.divert_records[imsi]
        record.installed = False
        removals = [dict(cookie=_ue_cookie(imsi))]
        remaining = [i for i, s in self.diverted.items() if s == sw_name]
        if not any(self.divert_records[i].replica == record.replica for i in remaining):
            removals.append(dict(cookie=_downlink_cookie(record.replica)))
        if not remaining:
            removals.append(dict(cookie=COOKIE_SHARED))
        cmds = [FlowMod(sw_name, removals=tuple(removals))]
        replica = self.spgws.get(record.replica)
        if record.mode == StoreMode.SELECTIVE and replica and replica.sgi is not None:
            cmds.append(FlowMod(replica.sgi[0], removals=(dict(cookie=_nat_cookie(imsi)),)))
        self.log(now, "divert_undone", imsi=imsi, switch=sw_name)
        return cmds

    # -- synchronous route

    def replicate_direct(self, strategy: StoreMode | str, source: str, replica: str,
                         target, imsis=(), now: int = 0, hops: int = 2) -> ReplicationReport:
        """Replay straight into `target` (an SpgwInstance) with analytic path latency.

        Matches the simulated fabric when nothing else contends for the path: each
        request costs a controller round trip, `hops` links each way and the
        replica's processing time.
        """
        job, _ = self.start_replication(strategy, source, replica, imsis, now)
        t = now
        while not job.done:
            req = job.awaiting
            resp = target.handle_gtpc(req)
            t += self.request_latency_us(req, resp, target.processing_time_us(req), hops)
            job.on_response(resp, t)
            self._pump(job, t)
        return self.reports[-1]

    def request_latency_us(self, req: GtpControlMessage, resp: GtpControlMessage,
                           processing_us: int, hops: int = 2) -> int:
        tm = self.timing
        path = 0
        for msg in (req, resp):
            frame_len = 42 + len(encode_gtpc(msg))
            path += hops * (tm.link_latency_us + tm.serialization_us(frame_len))
        return 2 * tm.controller_one_way_us + path + processing_us

    def replicate_naive(self, source: str, replica: str, target, now: int = 0,
                        moved=()) -> ReplicationReport:
        return self.replicate_direct(StoreMode.NAIVE, source, replica, target, moved, now)

    def replicate_selective(self, source: str, replica: str, target, imsis,
                            now: int = 0) -> ReplicationReport:
        return self.replicate_direct(StoreMode.SELECTIVE, source, replica, target, imsis, now)


def attach_through(ctl: Controller, mme, ue, enb, spgw, now: int = 0, replicas=None) -> list:
    """Inline attach with the controller on the S11 path (no fabric, no latency)."""
    replicas = replicas or {}

    def deliver(msg):
        dups = ctl.intercept_gtpc(msg, now)
        for info, dup in dups:
            if info.name in replicas:
                ctl.on_spgw_gtpc(replicas[info.name].handle_gtpc(dup), now)
        resp = spgw.handle_gtpc(msg)
        ctl.on_spgw_gtpc(resp, now)
        return resp

    msg = mme.start_attach(ue, enb, spgw.control_ip)
    while msg is not None:
        msg = mme.on_response(deliver(msg))
    return list(mme.transcripts[ue.imsi])


def detach_through(ctl: Controller, mme, imsi: str, spgw, now: int = 0,
                   replicas=None) -> list:
    """Inline detach; returns the rule commands the detach triggered."""
    replicas = replicas or {}
    msg = mme.start_detach(imsi)
    for info, dup in ctl.intercept_gtpc(msg, now):
        if info.name in replicas:
            ctl.on_spgw_gtpc(replicas[info.name].handle_gtpc(dup), now)
    resp = spgw.handle_gtpc(msg)
    ctl.on_spgw_gtpc(resp, now)
    mme.on_response(resp)
    return ctl.take_pending()
