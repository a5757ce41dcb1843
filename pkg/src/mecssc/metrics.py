"""Cost accounting for the replication strategies."""

from __future__ import annotations

import numpy as np

from .config import DEFAULT_TIMING, Timing
from .controller import DIVERT_RECORD_BYTES, Controller, ReplicationReport
from .gtp import PER_UE_CONTROL_BYTES

STRATEGIES = ("naive", "selective", "ram_model")


def expected_stored_bytes(strategy: str, registered: int, moved: int) -> int:
    if strategy == "naive":
        return PER_UE_CONTROL_BYTES * registered
    if strategy == "selective":
        return PER_UE_CONTROL_BYTES * registered + DIVERT_RECORD_BYTES * moved
    if strategy == "ram_model":
        return 0
    raise ValueError(f"unknown strategy {strategy!r}")


def expected_transmitted_bytes(strategy: str, registered: int, moved: int,
                               timing: Timing = DEFAULT_TIMING) -> int:
    if strategy == "naive":
        return PER_UE_CONTROL_BYTES * registered
    if strategy == "selective":
        return PER_UE_CONTROL_BYTES * moved
    if strategy == "ram_model":
        return round(ram_image_bytes(registered, timing))
    raise ValueError(f"unknown strategy {strategy!r}")


def metrics_stored_bytes(ctl: Controller) -> int:
    """Stored messages plus the per-UE divert extras kept in selective mode."""
    return ctl.stored_bytes()


def metrics_overhead_bytes(report: ReplicationReport) -> int:
    return report.transmitted_bytes


def ram_coefficients(timing: Timing = DEFAULT_TIMING) -> tuple[float, float]:
    """(a, b) of S(n) = a + b*n^2 through S(1) and S(1000)."""
    s1, s1000 = timing.ram_bytes_one_ue, timing.ram_bytes_1000_ues
    b = (s1000 - s1) / (1000 ** 2 - 1)
    return s1 - b, b


def ram_image_bytes(n, timing: Timing = DEFAULT_TIMING):
    a, b = ram_coefficients(timing)
    return a + b * np.asarray(n, dtype=float) ** 2 if np.ndim(n) else a + b * float(n) ** 2


def ram_replication_model(registered_ues: int, link_bandwidth_bps: float | None = None,
                          timing: Timing = DEFAULT_TIMING) -> ReplicationReport:
    """Dump, copy and restore a whole VM image; service is down for all of it."""
    if registered_ues < 0:
        raise ValueError("registered_ues must be >= 0")
    bw = link_bandwidth_bps or timing.link_bandwidth_bps
    size = ram_image_bytes(registered_ues, timing)
    elapsed_s = timing.ram_dump_s + size * 8 / bw + timing.ram_restore_s
    return ReplicationReport(strategy="ram_model", registered_ues=registered_ues,
                             moved_ues=registered_ues, stored_bytes=0,
                             transmitted_bytes=round(size), elapsed_ms=elapsed_s * 1000,
                             downtime_ms=elapsed_s * 1000)


def affine_fit(x, y) -> tuple[float, float, float]:
    """Least-squares y = slope*x + intercept; returns (slope, intercept, r2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return float(slope), float(intercept), r2
