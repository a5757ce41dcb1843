"""Latency and cost constants. Every value can be overridden per scenario."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Timing:
    # controller <-> switch, one way; a store-and-forward detour costs two of these
    controller_one_way_us: int = 5_000
    link_latency_us: int = 50
    link_bandwidth_bps: int = 1_000_000_000
    csr_processing_us: int = 10_000
    mbr_processing_us: int = 1_000
    dsr_processing_us: int = 1_000
    # one pass through the switch host stack (decap or encap)
    gtp_module_us: int = 50
    attach_timeout_us: int = 1_000_000
    jitter_us: int = 0
    # RAM-dump replication model
    ram_dump_s: float = 16.5
    ram_restore_s: float = 8.5
    ram_bytes_one_ue: int = 160_000_000
    ram_bytes_1000_ues: int = 2_000_000_000

    def with_overrides(self, overrides: dict) -> Timing:
        known = {f.name: f.type for f in dataclasses.fields(self)}
        values = {}
        for key, raw in overrides.items():
            if key not in known:
                raise KeyError(f"unknown timing constant {key!r}")
            current = getattr(self, key)
            values[key] = type(current)(float(raw)) if isinstance(current, int) else float(raw)
        return dataclasses.replace(self, **values)

    def serialization_us(self, size_bytes: int, bandwidth_bps: int | None = None) -> int:
        bw = bandwidth_bps or self.link_bandwidth_bps
        return math.ceil(size_bytes * 8 * 1_000_000 / bw)


DEFAULT_TIMING = Timing()
