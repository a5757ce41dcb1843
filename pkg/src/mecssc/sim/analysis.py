"""Post-processing of traces: latency, delivery gaps, conservation and continuity checks."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

REQUESTS = {"CREATE_SESSION_REQUEST", "MODIFY_BEARER_REQUEST", "DELETE_SESSION_REQUEST"}


def _records(trace):
    return trace.records if hasattr(trace, "records") else list(trace)


def measure_rtt(trace, flow: str) -> np.ndarray:
    """Round-trip times in ms.

    ``gtpc:<mme>`` pairs each request sent by the MME with the response carrying
    the same sequence number; ``app:<ue>`` pairs each UE datagram with its echo.
    Unknown flows give an empty array.
    """
    kind, _, name = flow.partition(":")
    sent: dict = {}
    rtts = []
    for r in _records(trace):
        if kind == "gtpc" and r["ev"] == "gtpc" and r["node"] == name:
            if r["dir"] == "tx" and r["msg"] in REQUESTS:
                sent[r["seq"]] = r["t"]
            elif r["dir"] == "rx" and r["seq"] in sent:
                rtts.append(r["t"] - sent.pop(r["seq"]))
        elif kind == "app" and r.get("ue") == name:
            if r["ev"] == "app_tx":
                sent[r["seq"]] = r["t"]
            elif r["ev"] == "app_rx" and r["dir"] == "dl" and r["seq"] in sent:
                rtts.append(r["t"] - sent.pop(r["seq"]))
    return np.asarray(rtts, dtype=float) / 1000.0


@dataclass
class GapStats:
    ue: str
    direction: str
    sent: int
    delivered: int
    lost: int
    duplicates: int
    max_gap_ms: float | None
    gap_across_ms: float | None
    divert_at_us: int | None
    receivers: dict

    def as_dict(self) -> dict:
        return asdict(self)


def divert_time(trace, imsi: str | None = None) -> int | None:
    for r in _records(trace):
        if r["ev"] == "event" and r.get("what") == "diverted" and \
                (imsi is None or r.get("imsi") == imsi):
            return r["t"]
    return None


def measure_gap(trace, ue: str, at_us: int | None = None, direction: str = "dl",
                settle_us: int = 100_000) -> GapStats:
    """Inter-delivery gaps of one UE's application flow.

    ``gap_across_ms`` is the largest gap between consecutive deliveries whose
    interval overlaps [divert, divert + settle]; the divert instant defaults to
    this UE's "diverted" controller event, else the first one in the trace.
    """
    records = _records(trace)
    if direction == "ul":
        sent = [r["seq"] for r in records if r["ev"] == "app_tx" and r.get("ue") == ue]
    else:
        sent = [r["seq"] for r in records if r["ev"] == "app_rx" and r.get("ue") == ue
                and r["dir"] == "ul"]
    rx = [r for r in records if r["ev"] == "app_rx" and r.get("ue") == ue
          and r["dir"] == direction]
    counts = Counter(r["seq"] for r in rx)
    times = [r["t"] for r in rx]
    gaps = np.diff(np.asarray(times, dtype=np.int64)) if len(times) > 1 else np.array([])
    if at_us is None:
        imsi = None
        for r in records:
            if r["ev"] in ("app_tx", "app_rx") and r.get("ue") == ue:
                imsi = bytes.fromhex(r["payload"])[:15].decode()
                break
        at_us = divert_time(trace, imsi) if imsi else None
        if at_us is None:
            at_us = divert_time(trace)
    across = None
    if at_us is not None and len(times) > 1:
        lo, hi = at_us, at_us + settle_us
        spans = [g for a, b, g in zip(times, times[1:], gaps) if b >= lo and a <= hi]
        across = float(max(spans)) / 1000.0 if spans else None
    unique = set(counts)
    return GapStats(ue=ue, direction=direction, sent=len(sent), delivered=len(rx),
                    lost=len(set(sent) - unique),
                    duplicates=sum(c - 1 for c in counts.values()),
                    max_gap_ms=float(gaps.max()) / 1000.0 if gaps.size else None,
                    gap_across_ms=across, divert_at_us=at_us,
                    receivers=dict(Counter(r["node"] for r in rx)))


def check_conservation(trace, pending: int = 0, latencies: dict | None = None) -> dict:
    """Every transmitted frame is received exactly once, never before it could arrive.

    Frames still in flight when the horizon cut the run are allowed up to the
    number of events left in the queue. Drops after reception are counted with
    their reasons.
    """
    tx, rx = {}, Counter()
    early = 0
    for r in _records(trace):
        if r["ev"] == "tx":
            tx[r["fid"]] = r
        elif r["ev"] == "rx":
            rx[r["fid"]] += 1
            sent = tx.get(r["fid"])
            min_delay = (latencies or {}).get(r["link"], 0)
            if sent is None or r["t"] < sent["t"] + min_delay:
                early += 1
    missing = [f for f in tx if rx[f] == 0]
    duplicated = [f for f, c in rx.items() if c > 1]
    unknown = [f for f in rx if f not in tx]
    drops = Counter(r["reason"] for r in _records(trace) if r["ev"] == "drop")
    ok = not duplicated and not unknown and not early and len(missing) <= pending
    return dict(ok=ok, sent=len(tx), received=sum(rx.values()), in_flight=len(missing),
                duplicated=len(duplicated), unknown=len(unknown), early=early,
                drops=dict(drops))


def transparency_violations(trace, replica_ips: set, mme_nodes) -> list[dict]:
    """GTP-C seen by an MME that a replica sent, or a response it received twice."""
    bad, seen = [], Counter()
    mme_nodes = set(mme_nodes)
    for r in _records(trace):
        if r["ev"] != "gtpc" or r["node"] not in mme_nodes or r["dir"] != "rx":
            continue
        seen[(r["node"], r["seq"], r["msg"])] += 1
        if r["src"] in replica_ips or seen[(r["node"], r["seq"], r["msg"])] > 1:
            bad.append(r)
    return bad


def ssc_check(trace, ue: str, ue_ip: str | None) -> dict:
    """The correspondent always sees the original UE address and the original payloads."""
    records = _records(trace)
    sent = {r["seq"]: r["payload"] for r in records
            if r["ev"] == "app_tx" and r.get("ue") == ue}
    rx = [r for r in records if r["ev"] == "app_rx" and r.get("ue") == ue]
    addr_bad = sum(1 for r in rx if (r["src"] if r["dir"] == "ul" else r["dst"]) != ue_ip)
    payload_bad = sum(1 for r in rx if sent.get(r["seq"]) != r["payload"])
    return dict(ok=bool(rx) and ue_ip is not None and addr_bad == 0 and payload_bad == 0,
                checked=len(rx), address_mismatches=addr_bad, payload_mismatches=payload_bad,
                servers=sorted({r["node"] for r in rx if r["dir"] == "ul"}))
