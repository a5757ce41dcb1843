"""Event loop, links and trace.

Time is integer microseconds. Events are ordered by (time, seq) where seq is
assigned at scheduling, so runs are reproducible bit for bit.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import random
from dataclasses import dataclass, field

from ..config import Timing
from ..packets import EthernetFrame
from ..pcap import write_pcap


@dataclass(order=True)
class SimEvent:
    time: int
    seq: int
    kind: str = field(compare=False)
    action: object = field(compare=False, repr=False)
    args: tuple = field(compare=False, default=(), repr=False)


class Trace:
    """Ordered record of everything that happened; exportable as JSONL and pcap."""

    def __init__(self, keep_bytes: bool = True):
        self.records: list[dict] = []
        self.keep_bytes = keep_bytes
        self._frames: list[tuple[int, bytes]] = []

    def add(self, t: int, ev: str, **data) -> dict:
        rec = dict(t=t, ev=ev, **data)
        self.records.append(rec)
        return rec

    def frame(self, t: int, ev: str, frame_bytes: bytes, **data) -> None:
        if self.keep_bytes:
            data["hex"] = frame_bytes.hex()
            if ev == "tx":
                self._frames.append((t, frame_bytes))
        self.add(t, ev, len=len(frame_bytes), **data)

    def __len__(self) -> int:
        return len(self.records)

    def of(self, *evs: str) -> list[dict]:
        return [r for r in self.records if r["ev"] in evs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, default=str) + "\n" for r in self.records)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    def write_pcap(self, path) -> None:
        write_pcap(path, self._frames)


class Link:
    """Point-to-point full-duplex link, FIFO per direction."""

    def __init__(self, sim: Simulator, name: str, a: tuple, b: tuple, latency_us: int,
                 bandwidth_bps: float | None):
        self.sim = sim
        self.name = name
        self.ends = (a, b)          # (node, port)
        self.latency_us = int(latency_us)
        self.bandwidth_bps = bandwidth_bps
        self._busy_until = {0: 0, 1: 0}
        self._last_delivery = {0: 0, 1: 0}

    def peer(self, node, port) -> tuple:
        a, b = self.ends
        return b if (a[0] is node and a[1] == port) else a

    def _direction(self, node, port) -> int:
        a, _ = self.ends
        return 0 if (a[0] is node and a[1] == port) else 1

    def transmit(self, node, port, frame: EthernetFrame) -> None:
        sim = self.sim
        data = frame.to_bytes()
        d = self._direction(node, port)
        start = max(sim.now, self._busy_until[d])
        ser = 0 if not self.bandwidth_bps else math.ceil(len(data) * 8 * 1_000_000
                                                        / self.bandwidth_bps)
        self._busy_until[d] = start + ser
        deliver = start + ser + self.latency_us
        if sim.timing.jitter_us:
            deliver += sim.rng.randint(0, sim.timing.jitter_us)
        deliver = max(deliver, self._last_delivery[d])
        self._last_delivery[d] = deliver
        fid = next(sim.frame_ids)
        sim.trace.frame(sim.now, "tx", data, node=node.name, port=port, link=self.name,
                        fid=fid)
        dst, dport = self.peer(node, port)
        sim.schedule(deliver, "deliver", self._deliver, dst, dport, frame, fid)

    def _deliver(self, dst, dport, frame: EthernetFrame, fid: int) -> None:
        self.sim.trace.frame(self.sim.now, "rx", frame.to_bytes(), node=dst.name, port=dport,
                             link=self.name, fid=fid)
        dst.receive(dport, frame)


class Simulator:
    def __init__(self, timing: Timing, *, seed: int = 0, horizon_us: int = 60_000_000,
                 keep_bytes: bool = True):
        self.timing = timing
        self.seed = seed
        self.rng = random.Random(seed)
        self.horizon_us = horizon_us
        self.now = 0
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self.frame_ids = itertools.count()
        self.trace = Trace(keep_bytes)
        self.nodes: dict = {}
        self.links: list[Link] = []
        self.processed = 0

    def add_node(self, node) -> None:
        if node.name in self.nodes:
            raise ValueError(f"duplicate node {node.name!r}")
        node.sim = self
        self.nodes[node.name] = node

    def connect(self, a: str, a_port, b: str, b_port, *, latency_us: int | None = None,
                bandwidth_bps: float | None = -1) -> Link:
        na, nb = self.nodes[a], self.nodes[b]
        latency = self.timing.link_latency_us if latency_us is None else latency_us
        bw = self.timing.link_bandwidth_bps if bandwidth_bps == -1 else bandwidth_bps
        link = Link(self, f"{a}:{a_port}-{b}:{b_port}", (na, a_port), (nb, b_port), latency, bw)
        na.attach(a_port, link)
        nb.attach(b_port, link)
        self.links.append(link)
        return link

    def schedule(self, at: int, kind: str, action, *args) -> SimEvent:
        at = int(at)
        if at < self.now:
            raise ValueError(f"cannot schedule {kind} in the past ({at} < {self.now})")
        ev = SimEvent(at, next(self._seq), kind, action, args)
        heapq.heappush(self._queue, ev)
        return ev

    def after(self, delay_us: int, kind: str, action, *args) -> SimEvent:
        return self.schedule(self.now + int(delay_us), kind, action, *args)

    def run(self) -> Trace:
        while self._queue and self._queue[0].time <= self.horizon_us:
            ev = heapq.heappop(self._queue)
            self.now = ev.time
            ev.action(*ev.args)
            self.processed += 1
        return self.trace

    @property
    def pending(self) -> int:
        return len(self._queue)
