"""Grid sweeps over (strategy, registered, moved) for the cost figures."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .config import DEFAULT_TIMING, Timing
from .controller import CSV_COLUMNS, Controller, ReplicationReport, StoreMode, attach_through
from .epc import Enb, Mme, SpgwInstance, UeProfile
from .metrics import STRATEGIES, ram_replication_model

ENGINES = ("sim", "direct")
ERROR_MARK = "ERROR"


class SweepConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepConfig:
    strategies: tuple = STRATEGIES
    registered: tuple = (1, 10, 100, 1000)
    moved: tuple = (0, "half", "all")
    repetitions: int = 1
    constants: dict = field(default_factory=dict)
    out: str | None = None
    engine: str = "sim"
    seed: int = 0

    def __post_init__(self):
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise SweepConfigError(f"unknown strategy {bad[0]!r}; choose from {STRATEGIES}")
        if self.repetitions < 1:
            raise SweepConfigError("repetitions must be >= 1")
        if self.engine not in ENGINES:
            raise SweepConfigError(f"unknown engine {self.engine!r}; choose from {ENGINES}")
        for n in self.registered:
            if not isinstance(n, int) or n < 0:
                raise SweepConfigError(f"registered values must be integers >= 0, got {n!r}")
        for m in self.moved:
            if m not in ("half", "all") and (not isinstance(m, int) or m < 0):
                raise SweepConfigError(f"moved values are integers, 'half' or 'all', got {m!r}")
        try:
            DEFAULT_TIMING.with_overrides(self.constants)
        except (KeyError, ValueError) as exc:
            raise SweepConfigError(str(exc)) from None

    @property
    def timing(self) -> Timing:
        return DEFAULT_TIMING.with_overrides(self.constants)

    def points(self) -> list[tuple]:
        """Grid order: strategy, registered, moved, repetition."""
        return [(s, n, m, r) for s in self.strategies for n in self.registered
                for m in self.moved for r in range(self.repetitions)]


def load_sweep_config(path, overrides: dict | None = None) -> SweepConfig:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise SweepConfigError(f"{path}: cannot read: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise SweepConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise SweepConfigError(f"{path}: top level must be a mapping")
    known = {"strategies", "registered", "moved", "repetitions", "constants", "out", "engine",
             "seed"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise SweepConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    constants = dict(kw.pop("constants", None) or {})
    constants.update(overrides or {})
    return SweepConfig(constants=constants, **kw)


def resolve_moved(moved, registered: int) -> int:
    if moved == "half":
        return registered // 2
    if moved == "all":
        return registered
    return int(moved)


def direct_point(strategy: str, registered: int, moved: int,
                 timing: Timing = DEFAULT_TIMING) -> ReplicationReport:
    """Controller-only route: inline attaches, then replay with analytic path latency."""
    ctl = Controller(strategy, "store_and_forward", timing)
    ctl.register_mme("mme", "172.16.0.100")
    ctl.register_spgw("spgw1", "172.16.0.1", "192.168.1.1")
    mme, enb = Mme("mme", "172.16.0.100"), Enb("enb", "192.168.1.10")
    source = SpgwInstance("spgw1", "172.16.0.1", "192.168.1.1")
    profiles = [UeProfile(str(1010000000001 + i).zfill(15), "enb") for i in range(registered)]
    for ue in profiles:
        attach_through(ctl, mme, ue, enb, source)
    ctl.deploy_replica("spgw2", "spgw1", "172.16.0.2", "192.168.1.2", now=0)
    target = SpgwInstance("spgw2", "172.16.0.2", "192.168.1.2",
                          csr_processing_us=timing.csr_processing_us,
                          mbr_processing_us=timing.mbr_processing_us,
                          dsr_processing_us=timing.dsr_processing_us)
    imsis = [p.imsi for p in profiles[:moved]] if strategy == "selective" else []
    return ctl.replicate_direct(StoreMode(strategy), "spgw1", "spgw2", target, imsis)


def sim_point(strategy: str, registered: int, moved: int, constants: dict,
              seed: int = 0) -> ReplicationReport:
    from .sim.scenario import bench_scenario, run_scenario
    result = run_scenario(bench_scenario(strategy, registered, moved, constants), seed=seed,
                          keep_bytes=False)
    if not result.reports:
        raise RuntimeError("no replication report produced")
    return result.reports[-1]


def run_point(config: SweepConfig, point: tuple) -> dict:
    strategy, registered, moved_spec, rep = point
    row = dict(strategy=strategy, registered=registered, moved=moved_spec)
    try:
        moved = resolve_moved(moved_spec, registered)
        row["moved"] = moved
        if moved > registered:
            raise ValueError(f"moved ({moved}) exceeds registered ({registered})")
        if strategy == "ram_model":
            report = ram_replication_model(registered, timing=config.timing)
            report = replace(report, moved_ues=moved)
        elif config.engine == "direct":
            report = direct_point(strategy, registered, moved, config.timing)
        else:
            report = sim_point(strategy, registered, moved, config.constants, config.seed + rep)
        if not report.ok:
            raise RuntimeError(report.error or "replication failed")
    except Exception as exc:  # noqa: BLE001 - recorded in the error row
        row.update({c: ERROR_MARK for c in CSV_COLUMNS[3:]})
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    row.update(report.csv_row())
    row["strategy"], row["moved"] = strategy, moved
    return row


def run_sweep(config: SweepConfig, jobs: int = 1) -> list[dict]:
    """One row per grid point and repetition, in grid order whatever the completion order."""
    points = config.points()
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_point, [config] * len(points), points))
    return [run_point(config, p) for p in points]


def mean_rows(rows: list[dict]) -> list[dict]:
    """Average repetitions of each grid point; error points stay marked."""
    groups: dict = {}
    for row in rows:
        groups.setdefault((row["strategy"], row["registered"], row["moved"]), []).append(row)
    out = []
    for (strategy, registered, moved), group in groups.items():
        mean = dict(strategy=strategy, registered=registered, moved=moved)
        if any("error" in r for r in group):
            mean.update({c: ERROR_MARK for c in CSV_COLUMNS[3:]})
        else:
            for col in CSV_COLUMNS[3:]:
                values = np.array([float(r[col]) for r in group])
                m = values.mean()
                mean[col] = int(round(m)) if col.endswith("bytes") else f"{m:.3f}"
        out.append(mean)
    return out


def series(rows: list[dict]) -> dict:
    """Plot-ready arrays per strategy and moved setting."""
    out: dict = {}
    for row in mean_rows(rows):
        if row["stored_bytes"] == ERROR_MARK:
            continue
        key = f"{row['strategy']}"
        s = out.setdefault(key, {"registered": [], "moved": [], "stored_bytes": [],
                                 "tx_bytes": [], "elapsed_ms": [], "downtime_ms": []})
        s["registered"].append(row["registered"])
        s["moved"].append(row["moved"])
        s["stored_bytes"].append(int(row["stored_bytes"]))
        s["tx_bytes"].append(int(row["tx_bytes"]))
        s["elapsed_ms"].append(float(row["elapsed_ms"]))
        s["downtime_ms"].append(float(row["downtime_ms"]))
    return out


def write_csv(path, rows: list[dict]) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore",
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_sweep(out_dir, rows: list[dict]) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = dict(rows=out / "sweep.csv", means=out / "sweep_means.csv",
                 series=out / "series.json", errors=out / "errors.json")
    write_csv(paths["rows"], rows)
    write_csv(paths["means"], mean_rows(rows))
    paths["series"].write_text(json.dumps(series(rows), indent=1, sort_keys=True) + "\n")
    errors = [dict(strategy=r["strategy"], registered=r["registered"], moved=r["moved"],
                   error=r["error"]) for r in rows if "error" in r]
    paths["errors"].write_text(json.dumps(errors, indent=1) + "\n")
    return paths
