import copy
import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mecssc.config import DEFAULT_TIMING
from mecssc.gtp import frame_to_gtpu
from mecssc.packets import EthernetFrame
from mecssc.sim import (ScenarioError, Simulator, check_conservation, load_scenario,
                        measure_gap, measure_rtt, parse_scenario, run_scenario,
                        write_artifacts)
from mecssc.sim.analysis import ssc_check, transparency_violations
from mecssc.sim.scenario import load_yaml, packaged_scenario

BASE = {name: load_yaml(packaged_scenario(name).read_text())
        for name in ("canonical_naive", "canonical_selective", "canonical_mirror")}


def variant(name="canonical_naive", commands=None, assertions=None, **top):
    data = copy.deepcopy(BASE[name])
    if commands is not None:
        data["commands"] = commands
    if assertions is not None:
        data["assertions"] = assertions
    data.update(top)
    return parse_scenario(data, f"{name}-variant")


def assertion(result, name):
    return next(a for a in result.assertions if a["name"] == name)


# -- event loop and links

class Stub:
    """Minimal node: records what it receives."""

    def __init__(self, name):
        self.name, self.links, self.sim, self.got = name, {}, None, []

    def attach(self, port, link):
        self.links[port] = link

    def start(self):
        pass

    def receive(self, port, frame):
        self.got.append((self.sim.now, frame))


def _frame(n):
    return EthernetFrame("02:00:00:00:00:01", "02:00:00:00:00:02", 0x0800, bytes(n))


def test_events_run_in_time_then_schedule_order():
    sim = Simulator(DEFAULT_TIMING)
    seen = []
    for at, tag in [(30, "c"), (10, "a"), (30, "d"), (10, "b"), (0, "z")]:
        sim.schedule(at, "timer", seen.append, tag)
    sim.run()
    assert seen == ["z", "a", "b", "c", "d"]
    with pytest.raises(ValueError, match="past"):
        sim.schedule(5, "timer", seen.append, "late")


def test_horizon_stops_the_loop():
    sim = Simulator(DEFAULT_TIMING, horizon_us=100)
    seen = []
    sim.schedule(100, "timer", seen.append, 1)
    sim.schedule(101, "timer", seen.append, 2)
    sim.run()
    assert seen == [1] and sim.pending == 1


@given(st.lists(st.integers(0, 1500), min_size=1, max_size=20),
       st.integers(0, 500), st.sampled_from([10_000_000, 100_000_000, 1_000_000_000]))
def test_link_fifo_and_delivery_time(sizes, latency, bw):
    sim = Simulator(DEFAULT_TIMING)
    a, b = Stub("a"), Stub("b")
    sim.add_node(a)
    sim.add_node(b)
    link = sim.connect("a", 0, "b", 0, latency_us=latency, bandwidth_bps=bw)
    frames = [_frame(n) for n in sizes]
    for f in frames:
        link.transmit(a, 0, f)
    sim.run()
    assert [f for _, f in b.got] == frames
    busy = 0
    for (t, _), f in zip(b.got, frames):
        ser = -(-len(f.to_bytes()) * 8 * 1_000_000 // bw)
        busy += ser
        assert t == busy + latency


def test_jitter_keeps_fifo_and_is_seeded():
    timing = DEFAULT_TIMING.with_overrides({"jitter_us": 400})

    def run(seed):
        sim = Simulator(timing, seed=seed)
        a, b = Stub("a"), Stub("b")
        sim.add_node(a)
        sim.add_node(b)
        link = sim.connect("a", 0, "b", 0)
        frames = [_frame(i + 20) for i in range(50)]
        for f in frames:
            link.transmit(a, 0, f)
        sim.run()
        assert [f for _, f in b.got] == frames
        return [t for t, _ in b.got]

    assert run(3) == run(3)
    assert run(3) != run(4)


# -- scenarios

def test_empty_scenario_gives_empty_trace():
    result = run_scenario(parse_scenario({}))
    assert len(result.trace) == 0
    assert result.reports == [] and result.assertions == []


def test_topology_without_commands_only_brings_links_up():
    result = run_scenario(variant(commands=[], assertions=[]))
    assert {r["ev"] for r in result.trace.records} <= {"tx", "rx", "ctl"}
    assert not result.trace.of("gtpc", "app_tx", "app_rx")


def test_identical_runs_give_identical_traces(naive_run):
    again = run_scenario(load_scenario(packaged_scenario("canonical_naive")))
    assert again.trace.to_jsonl() == naive_run.trace.to_jsonl()
    assert again.rules == naive_run.rules


def test_seed_only_matters_with_jitter():
    sc = variant(commands=BASE["canonical_naive"]["commands"][:2], assertions=[])
    digest = [hashlib.sha256(run_scenario(sc, seed=s).trace.to_jsonl().encode()).hexdigest()
              for s in (1, 2)]
    assert digest[0] == digest[1]
    jit = {"jitter_us": 200}
    a, b, c = (run_scenario(sc, seed=s, overrides=jit).trace.to_jsonl() for s in (1, 1, 2))
    assert a == b and a != c


@pytest.mark.parametrize("fixture", ["naive_run", "selective_run", "mirror_run"])
def test_canonical_scenarios_pass(fixture, request):
    result = request.getfixturevalue(fixture)
    failed = [a["name"] for a in result.assertions if not a["ok"]]
    assert failed == []
    assert len(result.assertions) == 8


def test_conservation_and_causality(naive_run):
    links = {link.name: link for link in naive_run.network.sim.links}
    report = check_conservation(naive_run.trace, naive_run.network.sim.pending,
                                {n: link.latency_us for n, link in links.items()})
    assert report["ok"] and report["duplicated"] == 0 and report["early"] == 0
    tx = {r["fid"]: r for r in naive_run.trace.of("tx")}
    for r in naive_run.trace.of("rx"):
        sent = tx[r["fid"]]
        assert r["t"] >= sent["t"] + links[r["link"]].latency_us
        assert r["len"] == sent["len"]


def test_conservation_flags_a_duplicate():
    trace = [dict(t=0, ev="tx", fid=1, link="l"), dict(t=5, ev="rx", fid=1, link="l"),
             dict(t=6, ev="rx", fid=1, link="l")]
    assert not check_conservation(trace)["ok"]
    early = [dict(t=0, ev="tx", fid=1, link="l"), dict(t=5, ev="rx", fid=1, link="l")]
    assert check_conservation(early, latencies={"l": 10})["early"] == 1


def test_attach_and_ping_use_epc_teids():
    cmds = [{"at_ms": 0, "op": "attach", "ues": ["ue1"]},
            {"at_ms": 100, "op": "traffic", "ues": ["ue1"], "period_ms": 10, "count": 5}]
    result = run_scenario(variant(commands=cmds, assertions=[]))
    ctx = result.network.sim.nodes["spgw1"].spgw.sessions["001010000000001"]
    up, down = [], []
    for r in result.trace.of("tx"):
        if r["link"] != "ovs:2-spgw1:s1u":
            continue
        pkt = frame_to_gtpu(EthernetFrame.from_bytes(bytes.fromhex(r["hex"])))
        if pkt is None:
            continue
        (down if r["node"] == "spgw1" else up).append(pkt)
    assert len(up) == 5 and len(down) == 5
    assert {p.teid for p in up} == {ctx.sgw_s1u_teid}
    assert {p.teid for p in down} == {ctx.enb_s1u_teid}
    assert measure_rtt(result.trace, "app:ue1").size == 5


def _attach_rtts(name):
    """CSR and MBR round trips with attaches spread out so the S/P-GW never queues."""
    cmds = [{"at_ms": 0, "op": "attach", "ues": "all", "spacing_ms": 100}]
    result = run_scenario(variant(name, commands=cmds, assertions=[]))
    rtts = measure_rtt(result.trace, "gtpc:mme")
    assert rtts.size == 8
    return rtts


def test_store_and_forward_adds_one_controller_round_trip():
    extra = _attach_rtts("canonical_naive") - _attach_rtts("canonical_mirror")
    round_trip = 2 * DEFAULT_TIMING.controller_one_way_us / 1000
    assert np.allclose(extra, round_trip, atol=1e-9)


def test_mirror_adds_no_control_latency():
    rtts = _attach_rtts("canonical_mirror")
    csr, mbr = rtts[0::2], rtts[1::2]
    # what is left beyond processing is only wire time
    assert np.all(csr - DEFAULT_TIMING.csr_processing_us / 1000 < 0.5)
    assert np.all(mbr - DEFAULT_TIMING.mbr_processing_us / 1000 < 0.5)


def test_unknown_flow_gives_empty_result(naive_run):
    assert measure_rtt(naive_run.trace, "gtpc:nobody").size == 0
    assert measure_rtt(naive_run.trace, "bogus").size == 0
    stats = measure_gap(naive_run.trace, "ue9")
    assert stats.sent == 0 and stats.delivered == 0 and stats.max_gap_ms is None


@pytest.mark.parametrize("fixture", ["naive_run", "selective_run", "mirror_run"])
def test_gap_across_divert(fixture, request):
    result = request.getfixturevalue(fixture)
    for ue in ("ue1", "ue2"):
        for direction in ("ul", "dl"):
            s = measure_gap(result.trace, ue, direction=direction)
            assert s.sent == 300 and s.delivered == 300
            assert s.lost == 0 and s.duplicates == 0
            assert s.gap_across_ms is not None and s.gap_across_ms <= 20


def test_diverted_traffic_reaches_the_edge(naive_run):
    ul1 = measure_gap(naive_run.trace, "ue1", direction="ul").receivers
    ul2 = measure_gap(naive_run.trace, "ue2", direction="ul").receivers
    assert ul1["core"] > 0 and ul1["edge"] > 0
    assert set(ul2) == {"core"}


def test_selective_ssc_holds_at_both_servers(selective_run):
    check = ssc_check(selective_run.trace, "ue1", "10.45.0.1")
    assert check["ok"] and check["servers"] == ["core", "edge"]
    assert check["address_mismatches"] == check["payload_mismatches"] == 0
    [record] = selective_run.controller.divert_records.values()
    assert record.new_ue_ip != record.old_ue_ip
    assert "UE1_EDGE_IP" in selective_run.rules


def test_mme_never_hears_the_replica(naive_run):
    replica = {"172.16.0.2"}
    assert transparency_violations(naive_run.trace, replica, ["mme"]) == []
    absorbed = [e for e in naive_run.trace.of("event") if e.get("what") == "absorbed"]
    assert len(absorbed) == 8


def test_divert_during_replication_is_deferred():
    cmds = copy.deepcopy(BASE["canonical_naive"]["commands"])
    cmds[-1]["at_ms"] = 605
    result = run_scenario(variant(commands=cmds))
    events = [e["what"] for e in result.trace.of("event") if e.get("node") == "controller"]
    assert events.index("divert_deferred") < events.index("replication_done") \
        < events.index("diverted")
    assert result.ok


def test_failing_continuity_is_reported():
    asserts = [{"kind": "continuity", "ues": ["ue1"], "max_gap_ms": 1, "name": "tight"}]
    result = run_scenario(variant(assertions=asserts))
    assert not result.ok and not assertion(result, "tight")["ok"]


def test_mme_down_evicts_and_late_replication_is_empty():
    cmds = [{"at_ms": 0, "op": "attach", "ues": "all", "spacing_ms": 20},
            {"at_ms": 300, "op": "mme_down", "mme": "mme"}]
    asserts = [{"kind": "stored_bytes", "equals": 0}]
    result = run_scenario(variant(commands=cmds, assertions=asserts))
    assert result.ok
    evicted = [e for e in result.trace.of("event") if e.get("what") == "evicted"]
    assert evicted[0]["bytes"] == 4 * 189


def test_timing_override_changes_replication_time():
    slow = run_scenario(load_scenario(packaged_scenario("canonical_naive")),
                        overrides={"csr_processing_us": 20_000})
    assert slow.reports[0].elapsed_ms == pytest.approx(125.64 + 4 * 10, abs=0.01)


def test_artifacts_written(naive_run, tmp_path):
    scapy = pytest.importorskip("scapy.all")
    paths = write_artifacts(naive_run, tmp_path)
    assert sorted(p.name for p in paths.values()) == [
        "assertions.json", "reports.csv", "rules.txt", "snapshots.json", "trace.jsonl",
        "trace.pcap"]
    packets = scapy.rdpcap(str(paths["pcap"]))
    assert len(packets) == len(naive_run.trace.of("tx"))
    lines = paths["trace"].read_text().splitlines()
    assert len(lines) == len(naive_run.trace)


# -- validation

def _write(tmp_path, text):
    path = tmp_path / "s.yaml"
    path.write_text(text)
    return path


NODE_A = '  - {name: a, kind: server, ip: 10.0.0.1, mac: "02:00:00:00:00:01"}\n'


@pytest.mark.parametrize("body,line,needle", [
    ("nodes:\n" + NODE_A + "  - {name: b, kind: router}\n", 3, "unknown node kind"),
    ("nodes:\n" + NODE_A + "links:\n  - {a: \"a:0\", b: \"ghost:1\"}\n", 4,
     "dangling node reference 'ghost'"),
    ("nodes:\n" + NODE_A + "links:\n  - {a: \"a:7\", b: \"a:0\"}\n", 4, "has no port"),
    ("nodes:\n" + NODE_A + NODE_A, 3, "duplicate node"),
    ("nodes:\n" + NODE_A + "commands:\n  - {at_ms: 1, op: fly}\n", 4, "unknown command"),
    ("nodes:\n" + NODE_A + "assertions:\n  - {kind: vibes}\n", 4, "unknown assertion"),
])
def test_validation_errors_carry_location(tmp_path, body, line, needle):
    path = _write(tmp_path, "name: bad\n" + body)
    with pytest.raises(ScenarioError) as err:
        load_scenario(path)
    assert str(err.value).startswith(f"{path}:{line + 1}:")
    assert needle in str(err.value)


def test_unknown_ue_in_command_rejected():
    data = copy.deepcopy(BASE["canonical_naive"])
    data["commands"].append({"at_ms": 5, "op": "divert", "ues": ["ue99"]})
    with pytest.raises(ScenarioError, match="ue99"):
        parse_scenario(data)


def test_bad_imsi_rejected():
    data = copy.deepcopy(BASE["canonical_naive"])
    data["ues"] = [{"name": "x", "imsi": "123", "enb": "enb", "mme": "mme", "spgw": "spgw1"}]
    with pytest.raises(ScenarioError, match="15 digits"):
        parse_scenario(data)


def test_unknown_constant_rejected():
    sc = variant(constants={"warp_factor": 9})
    with pytest.raises(ScenarioError, match="warp_factor"):
        run_scenario(sc)


def test_commands_sorted_stably():
    cmds = [{"at_ms": 10, "op": "deploy_replica", "replica": "spgw2"},
            {"at_ms": 0, "op": "attach", "ues": ["ue2"]},
            {"at_ms": 0, "op": "attach", "ues": ["ue1"]}]
    sc = variant(commands=cmds)
    assert [(c["op"], c.get("ues")) for c in sc.commands] == [
        ("attach", ["ue2"]), ("attach", ["ue1"]), ("deploy_replica", None)]
