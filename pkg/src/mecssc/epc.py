"""Emulated MME, eNodeB and S/P-GW endpoints.

The S/P-GW is a reactive state machine: its contexts, TEIDs and UE addresses
are a pure function of the GTP-C messages it has received, which is what makes
replication by message replay possible.
"""

from __future__ import annotations

import ipaddress
import itertools
import json
from dataclasses import asdict, dataclass
from enum import Enum

from .gtp import Cause, GtpControlMessage, GtpUserPacket, MsgKind, encode_gtpc


class EpcError(RuntimeError):
    pass


class NoTunnelError(EpcError):
    pass


class AttachError(EpcError):
    pass


class SessionState(str, Enum):
    PENDING_BEARER = "PendingBearer"
    ACTIVE = "Active"


@dataclass
class SessionContext:
    imsi: str
    mme_s11_teid: int
    sgw_s11_teid: int
    sgw_s1u_teid: int
    ue_ip: str
    mme_ip: str = "0.0.0.0"
    enb_s1u_teid: int | None = None
    enb_ip: str | None = None
    ebi: int = 5
    state: SessionState = SessionState.PENDING_BEARER

    def as_dict(self) -> dict:
        d = asdict(self)
        d["state"] = self.state.value
        return d


@dataclass
class UeProfile:
    imsi: str
    enb_id: str
    original_ue_ip: str | None = None
    diverted: bool = False
    new_ue_ip: str | None = None


class SpgwInstance:
    """Combined S/P-GW with deterministic TEID and address allocation."""

    def __init__(self, name: str, control_ip: str, user_ip: str,
                 ip_pool: str = "10.45.0.0/16", *, teid_base: int = 0x100,
                 csr_processing_us: int = 10_000, mbr_processing_us: int = 1_000,
                 dsr_processing_us: int = 1_000):
        self.name = name
        self.control_ip = control_ip
        self.user_ip = user_ip
        self.ip_pool = ipaddress.IPv4Network(ip_pool)
        self.teid_base = teid_base
        self._next_teid = teid_base
        self._used_ips: set[str] = set()
        self.sessions: dict[str, SessionContext] = {}
        self._index: dict[str, dict] = {"s11": {}, "s1u": {}, "ue_ip": {}}
        self.processing_us = {
            MsgKind.CREATE_SESSION_REQUEST: csr_processing_us,
            MsgKind.MODIFY_BEARER_REQUEST: mbr_processing_us,
            MsgKind.DELETE_SESSION_REQUEST: dsr_processing_us,
        }
        self.received: list[GtpControlMessage] = []

    def _allocate_teid(self) -> int:
        teid = self._next_teid
        self._next_teid += 1
        return teid

    def _allocate_ip(self) -> str | None:
        """Lowest free host address of the pool."""
        for ip in itertools.islice(self.ip_pool.hosts(), len(self._used_ips) + 1):
            ip = str(ip)
            if ip not in self._used_ips:
                self._used_ips.add(ip)
                return ip
        return None

    def _by_s11(self, teid: int) -> SessionContext | None:
        return self.sessions.get(self._index["s11"].get(teid))

    def session_by_s1u(self, teid: int) -> SessionContext | None:
        return self.sessions.get(self._index["s1u"].get(teid))

    def session_by_ue_ip(self, ue_ip: str) -> SessionContext | None:
        return self.sessions.get(self._index["ue_ip"].get(ue_ip))

    def _add(self, ctx: SessionContext) -> None:
        self.sessions[ctx.imsi] = ctx
        self._index["s11"][ctx.sgw_s11_teid] = ctx.imsi
        self._index["s1u"][ctx.sgw_s1u_teid] = ctx.imsi
        self._index["ue_ip"][ctx.ue_ip] = ctx.imsi

    def _remove(self, ctx: SessionContext) -> None:
        del self.sessions[ctx.imsi]
        del self._index["s11"][ctx.sgw_s11_teid]
        del self._index["s1u"][ctx.sgw_s1u_teid]
        del self._index["ue_ip"][ctx.ue_ip]
        self._used_ips.discard(ctx.ue_ip)

    def processing_time_us(self, msg: GtpControlMessage) -> int:
        return self.processing_us.get(msg.msg_kind, 0)

    def handle_gtpc(self, msg: GtpControlMessage) -> GtpControlMessage:
        """Apply one MME request and return the response to send back."""
        self.received.append(msg)
        reply = dict(seq=msg.seq, src_ip=self.control_ip, dst_ip=msg.src_ip)
        kind = msg.msg_kind
        if kind == MsgKind.CREATE_SESSION_REQUEST:
            ctx = self.sessions.get(msg.imsi)
            if ctx is None:
                ue_ip = self._allocate_ip()
                if ue_ip is None:
                    return GtpControlMessage(MsgKind.CREATE_SESSION_RESPONSE,
                                             peer_s11_teid=msg.sender_s11_teid,
                                             cause=Cause.NO_RESOURCES_AVAILABLE, **reply)
                ctx = SessionContext(msg.imsi, msg.sender_s11_teid, self._allocate_teid(),
                                     self._allocate_teid(), ue_ip, mme_ip=msg.src_ip,
                                     ebi=msg.ebi)
                self._add(ctx)
            return GtpControlMessage(MsgKind.CREATE_SESSION_RESPONSE,
                                     peer_s11_teid=ctx.mme_s11_teid,
                                     cause=Cause.REQUEST_ACCEPTED,
                                     sender_s11_teid=ctx.sgw_s11_teid, ue_ip=ctx.ue_ip,
                                     s1u_teid_sgw=ctx.sgw_s1u_teid, sgw_s1u_ip=self.user_ip,
                                     ebi=ctx.ebi, **reply)
        if kind == MsgKind.MODIFY_BEARER_REQUEST:
            ctx = self._by_s11(msg.peer_s11_teid)
            if ctx is None:
                return GtpControlMessage(MsgKind.MODIFY_BEARER_RESPONSE, peer_s11_teid=0,
                                         cause=Cause.CONTEXT_NOT_FOUND, **reply)
            ctx.enb_s1u_teid = msg.s1u_teid_enb
            ctx.enb_ip = msg.enb_s1u_ip
            ctx.state = SessionState.ACTIVE
            return GtpControlMessage(MsgKind.MODIFY_BEARER_RESPONSE,
                                     peer_s11_teid=ctx.mme_s11_teid,
                                     cause=Cause.REQUEST_ACCEPTED, ebi=ctx.ebi, **reply)
        if kind == MsgKind.DELETE_SESSION_REQUEST:
            ctx = self._by_s11(msg.peer_s11_teid)
            if ctx is None:
                return GtpControlMessage(MsgKind.DELETE_SESSION_RESPONSE, peer_s11_teid=0,
                                         cause=Cause.CONTEXT_NOT_FOUND, **reply)
            self._remove(ctx)
            return GtpControlMessage(MsgKind.DELETE_SESSION_RESPONSE,
                                     peer_s11_teid=ctx.mme_s11_teid,
                                     cause=Cause.REQUEST_ACCEPTED, **reply)
        raise EpcError(f"S/P-GW does not handle {kind.name}")

    # -- user plane

    def uplink(self, pkt: GtpUserPacket) -> bytes:
        """Terminate an uplink G-PDU; return the inner packet for the SGi side."""
        ctx = self.session_by_s1u(pkt.teid)
        if ctx is None or ctx.state != SessionState.ACTIVE:
            raise NoTunnelError(f"no active bearer for S1-U TEID 0x{pkt.teid:08x}")
        return pkt.inner

    def downlink(self, ue_ip: str, inner: bytes) -> GtpUserPacket:
        ctx = self.session_by_ue_ip(ue_ip)
        if ctx is None or ctx.state != SessionState.ACTIVE:
            raise NoTunnelError(f"no active bearer for UE {ue_ip}")
        return GtpUserPacket(ctx.enb_s1u_teid, inner, self.user_ip, ctx.enb_ip)

    # -- oracle surface

    def snapshot(self) -> list[dict]:
        return [self.sessions[imsi].as_dict() for imsi in sorted(self.sessions)]

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True, indent=1)


class Enb:
    """eNodeB user-plane endpoint. S1AP is not modeled: the MME calls it directly."""

    def __init__(self, name: str, ip: str, *, teid_base: int = 0x1000):
        self.name = name
        self.ip = ip
        self._next_teid = teid_base
        self.bearers: dict[str, dict] = {}
        self._by_teid: dict[int, str] = {}
        self._ident = 0

    def allocate_bearer(self, imsi: str) -> int:
        teid = self._next_teid
        self._next_teid += 1
        self.bearers[imsi] = dict(enb_s1u_teid=teid, active=False)
        self._by_teid[teid] = imsi
        return teid

    def configure_bearer(self, imsi: str, ue_ip: str, sgw_s1u_teid: int, sgw_ip: str) -> None:
        self.bearers[imsi].update(ue_ip=ue_ip, sgw_s1u_teid=sgw_s1u_teid, sgw_ip=sgw_ip)

    def release_bearer(self, imsi: str) -> None:
        bearer = self.bearers.pop(imsi, None)
        if bearer is not None:
            self._by_teid.pop(bearer["enb_s1u_teid"], None)

    def uplink(self, imsi: str, inner: bytes) -> GtpUserPacket:
        bearer = self.bearers.get(imsi)
        if not bearer or not bearer["active"]:
            raise NoTunnelError(f"UE {imsi} has no active bearer")
        return GtpUserPacket(bearer["sgw_s1u_teid"], inner, self.ip, bearer["sgw_ip"])

    def next_ident(self) -> int:
        self._ident = (self._ident + 1) & 0xFFFF
        return self._ident

    def receive_downlink(self, pkt: GtpUserPacket) -> tuple[str, bytes]:
        imsi = self._by_teid.get(pkt.teid)
        if imsi is not None and self.bearers.get(imsi, {}).get("active"):
            return imsi, pkt.inner
        raise NoTunnelError(f"no bearer for downlink TEID 0x{pkt.teid:08x}")


@dataclass
class _Attach:
    ue: UeProfile
    enb: Enb
    spgw_ip: str
    mme_s11_teid: int
    sgw_s11_teid: int | None = None
    done: bool = False


class Mme:
    """Drives attach/detach signaling on S11. Message-driven; `attach_ue` runs it inline."""

    def __init__(self, name: str, control_ip: str, *, teid_base: int = 0x10):
        self.name = name
        self.control_ip = control_ip
        self._next_teid = teid_base
        self._seq = 0
        self.attaches: dict[str, _Attach] = {}
        self.transcripts: dict[str, list[GtpControlMessage]] = {}
        self.received: list[GtpControlMessage] = []

    def _next_seq(self) -> int:
        self._seq = (self._seq + 1) & 0xFFFFFF
        return self._seq

    def _emit(self, imsi: str, msg: GtpControlMessage) -> GtpControlMessage:
        self.transcripts.setdefault(imsi, []).append(msg)
        return msg

    def is_attached(self, imsi: str) -> bool:
        att = self.attaches.get(imsi)
        return att is not None and att.done

    def start_attach(self, ue: UeProfile, enb: Enb, spgw_ip: str) -> GtpControlMessage:
        if ue.imsi in self.attaches:
            raise AttachError(f"UE {ue.imsi} is already attached or attaching")
        teid = self._next_teid
        self._next_teid += 1
        self.attaches[ue.imsi] = _Attach(ue, enb, spgw_ip, teid)
        return self._emit(ue.imsi, GtpControlMessage(
            MsgKind.CREATE_SESSION_REQUEST, self._next_seq(), peer_s11_teid=0, imsi=ue.imsi,
            sender_s11_teid=teid, src_ip=self.control_ip, dst_ip=spgw_ip))

    def _attach_for(self, mme_teid: int) -> _Attach | None:
        for att in self.attaches.values():
            if att.mme_s11_teid == mme_teid:
                return att
        return None

    def on_response(self, resp: GtpControlMessage) -> GtpControlMessage | None:
        """Consume an S/P-GW response; return the next request, if any."""
        self.received.append(resp)
        att = self._attach_for(resp.peer_s11_teid)
        if att is None:
            return None
        if resp.msg_kind == MsgKind.CREATE_SESSION_RESPONSE:
            if not resp.accepted:
                del self.attaches[att.ue.imsi]
                return None
            att.sgw_s11_teid = resp.sender_s11_teid
            att.ue.original_ue_ip = resp.ue_ip
            enb_teid = att.enb.allocate_bearer(att.ue.imsi)
            att.enb.configure_bearer(att.ue.imsi, resp.ue_ip, resp.s1u_teid_sgw,
                                     resp.sgw_s1u_ip)
            return self._emit(att.ue.imsi, GtpControlMessage(
                MsgKind.MODIFY_BEARER_REQUEST, self._next_seq(), peer_s11_teid=att.sgw_s11_teid,
                s1u_teid_enb=enb_teid, enb_s1u_ip=att.enb.ip, src_ip=self.control_ip,
                dst_ip=att.spgw_ip))
        if resp.msg_kind == MsgKind.MODIFY_BEARER_RESPONSE and resp.accepted:
            att.done = True
            att.enb.bearers[att.ue.imsi]["active"] = True
        elif resp.msg_kind == MsgKind.DELETE_SESSION_RESPONSE:
            att.enb.release_bearer(att.ue.imsi)
            del self.attaches[att.ue.imsi]
        return None

    def start_detach(self, imsi: str) -> GtpControlMessage:
        att = self.attaches.get(imsi)
        if att is None or not att.done:
            raise AttachError(f"UE {imsi} is not attached")
        return self._emit(imsi, GtpControlMessage(
            MsgKind.DELETE_SESSION_REQUEST, self._next_seq(), peer_s11_teid=att.sgw_s11_teid,
            src_ip=self.control_ip, dst_ip=att.spgw_ip))

    def abort_attach(self, imsi: str) -> None:
        att = self.attaches.pop(imsi, None)
        if att is not None:
            att.enb.release_bearer(imsi)

    def attach_ue(self, ue: UeProfile, enb: Enb, spgw: SpgwInstance) -> list[GtpControlMessage]:
        """Run a full attach against `spgw` inline; return the MME-originated transcript."""
        msg = self.start_attach(ue, enb, spgw.control_ip)
        while msg is not None:
            msg = self.on_response(spgw.handle_gtpc(msg))
        if not self.is_attached(ue.imsi):
            self.abort_attach(ue.imsi)
            raise AttachError(f"attach of {ue.imsi} rejected by {spgw.name}")
        return list(self.transcripts[ue.imsi])

    def detach_ue(self, imsi: str, spgw: SpgwInstance) -> GtpControlMessage:
        msg = self.start_detach(imsi)
        self.on_response(spgw.handle_gtpc(msg))
        return msg


def transcript_bytes(transcript) -> int:
    return sum(len(encode_gtpc(m)) for m in transcript)

