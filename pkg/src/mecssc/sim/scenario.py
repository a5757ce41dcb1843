"""Declarative scenarios: parse, validate, build the network, run, check assertions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..config import DEFAULT_TIMING, Timing
from ..controller import Controller, ControllerError, ReplicationReport
from ..epc import UeProfile
from ..flow import LOCAL, FlowTablePipeline
from ..metrics import expected_stored_bytes
from ..packets import IPPROTO_UDP, build_ipv4, build_udp
from .analysis import check_conservation, measure_gap, ssc_check, transparency_violations
from .core import Simulator
from .nodes import (APP_PORT, BridgeNode, ControllerNode, EnbNode, MmeNode, ServerNode,
                    SpgwNode, SwitchNode, app_payload, parse_app)

UE_APP_SPORT = 40000
DEFAULT_APP_IP = "10.99.0.1"


class ScenarioError(ValueError):
    def __init__(self, message: str, location: str = ""):
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location


# -- YAML with line numbers ---------------------------------------------------------

class _Map(dict):
    line = 0


class _Loader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    out = _Map(loader.construct_mapping(node, deep=True))
    out.line = node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)


def load_yaml(text: str, source: str = "<scenario>") -> dict:
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ScenarioError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", where) \
            from None
    if not isinstance(data, dict):
        raise ScenarioError("top level must be a mapping", source)
    return data


# -- scenario model -----------------------------------------------------------------------

NODE_KINDS = {
    "mme": {"ip", "mac"},
    "mme_switch": {"mme"},
    "bridge": {"ports"},
    "switch": {"ports"},
    "wire_switch": {"ports"},
    "gtp_switch": {"ports", "local_ip", "local_mac"},
    "spgw": {"s11", "s1u", "sgi"},
    "enb": {"ip", "mac"},
    "server": {"ip", "mac"},
}
SWITCH_KINDS = {"mme_switch", "bridge", "switch", "wire_switch", "gtp_switch"}
COMMANDS = {
    "attach": {"ues"}, "detach": {"ues"}, "traffic": {"ues"},
    "deploy_replica": {"replica"}, "replicate": {"from", "to", "strategy"},
    "divert": {"ues"}, "undo_divert": {"ues"}, "mme_down": {"mme"}, "spgw_down": {"spgw"},
}
ASSERTIONS = {"continuity", "zero_loss", "snapshot_equal", "transparency", "stored_bytes",
              "conservation", "replication_time", "ssc"}


@dataclass
class UeSpec:
    name: str
    imsi: str
    enb: str
    mme: str
    spgw: str


@dataclass
class Scenario:
    name: str
    source: str
    horizon_us: int
    seed: int
    constants: dict
    intercept: str
    store: str
    nodes: dict
    links: list
    ues: dict
    commands: list
    assertions: list
    aliases: dict = field(default_factory=dict)

    def timing(self, overrides: dict | None = None) -> Timing:
        merged = dict(self.constants)
        merged.update(overrides or {})
        try:
            return DEFAULT_TIMING.with_overrides(merged)
        except (KeyError, ValueError) as exc:
            raise ScenarioError(exc.args[0] if exc.args else str(exc),
                                f"{self.source}: constants") from None


def _loc(source: str, item, path: str) -> str:
    line = getattr(item, "line", 0)
    return f"{source}:{line}: {path}" if line else f"{source}: {path}"


def _need(item, keys, source, path) -> None:
    if not isinstance(item, dict):
        raise ScenarioError("expected a mapping", _loc(source, item, path))
    missing = sorted(k for k in keys if k not in item)
    if missing:
        raise ScenarioError(f"missing field(s) {', '.join(missing)}", _loc(source, item, path))


def _endpoint(text, source, item, path) -> tuple[str, object]:
    if not isinstance(text, str) or ":" not in text:
        raise ScenarioError(f"endpoint {text!r} must look like node:port", _loc(source, item, path))
    node, port = text.rsplit(":", 1)
    return node, int(port) if port.isdigit() else port


def _node_ports(spec: dict) -> list:
    kind = spec["kind"]
    if kind in ("mme", "enb", "server"):
        return [0]
    if kind == "spgw":
        return ["s11", "s1u", "sgi"]
    if kind == "mme_switch":
        return [LOCAL, 1]
    ports = list(spec["ports"])
    if kind == "gtp_switch":
        ports.append(LOCAL)
    return ports


def _expand_ues(raw, source) -> dict[str, UeSpec]:
    ues: dict[str, UeSpec] = {}
    for i, item in enumerate(raw or []):
        path = f"ues[{i}]"
        if "count" in item:
            _need(item, {"count", "imsi_start", "enb", "mme", "spgw"}, source, path)
            prefix = item.get("prefix", "ue")
            start = str(item["imsi_start"])
            for k in range(int(item["count"])):
                imsi = str(int(start) + k).zfill(len(start))
                name = f"{prefix}{k + int(item.get('first_index', 1))}"
                ues[name] = UeSpec(name, imsi, item["enb"], item["mme"], item["spgw"])
        else:
            _need(item, {"name", "imsi", "enb", "mme", "spgw"}, source, path)
            if item["name"] in ues:
                raise ScenarioError(f"duplicate UE {item['name']!r}", _loc(source, item, path))
            ues[item["name"]] = UeSpec(item["name"], str(item["imsi"]), item["enb"],
                                       item["mme"], item["spgw"])
    imsis = [u.imsi for u in ues.values()]
    if len(set(imsis)) != len(imsis):
        raise ScenarioError("duplicate IMSI among UEs", f"{source}: ues")
    for u in ues.values():
        if len(u.imsi) != 15 or not u.imsi.isdigit():
            raise ScenarioError(f"IMSI {u.imsi!r} of {u.name} must be 15 digits",
                                f"{source}: ues")
    return ues


def _ue_list(value, ues: dict, source, item, path) -> list[str]:
    if value == "all":
        return list(ues)
    names = [value] if isinstance(value, str) else list(value or [])
    for n in names:
        if n not in ues:
            raise ScenarioError(f"unknown UE {n!r}", _loc(source, item, path))
    return names


def parse_scenario(data: dict, source: str = "<scenario>") -> Scenario:
    """Validate a loaded scenario mapping; every reference must resolve."""
    nodes: dict[str, dict] = {}
    for i, item in enumerate(data.get("nodes") or []):
        path = f"nodes[{i}]"
        _need(item, {"name", "kind"}, source, path)
        kind = item["kind"]
        if kind not in NODE_KINDS:
            raise ScenarioError(f"unknown node kind {kind!r}", _loc(source, item, path + ".kind"))
        _need(item, NODE_KINDS[kind], source, path)
        if item["name"] in nodes:
            raise ScenarioError(f"duplicate node {item['name']!r}", _loc(source, item, path))
        nodes[item["name"]] = item
    for name, spec in nodes.items():
        path = f"node {name}"
        if spec["kind"] == "mme_switch" and nodes.get(spec["mme"], {}).get("kind") != "mme":
            raise ScenarioError(f"mme_switch refers to unknown MME {spec['mme']!r}",
                                _loc(source, spec, path))
        if spec["kind"] == "spgw":
            for port in ("s11", "s1u", "sgi"):
                _need(spec[port], {"ip", "mac"}, source, f"{path}.{port}")
            if spec.get("replica_of") and nodes.get(spec["replica_of"], {}).get("kind") != "spgw":
                raise ScenarioError(f"replica_of refers to unknown S/P-GW {spec['replica_of']!r}",
                                    _loc(source, spec, path))
            if spec.get("sgi_switch") and \
                    nodes.get(spec["sgi_switch"], {}).get("kind") != "wire_switch":
                raise ScenarioError(f"sgi_switch {spec['sgi_switch']!r} is not a wire_switch",
                                    _loc(source, spec, path))
        if spec["kind"] == "gtp_switch":
            for enb in spec.get("enbs", []):
                if nodes.get(enb, {}).get("kind") != "enb":
                    raise ScenarioError(f"unknown eNB {enb!r}", _loc(source, spec, path))
        if spec["kind"] == "wire_switch" and len(spec["ports"]) != 2:
            raise ScenarioError("a wire_switch has exactly two ports", _loc(source, spec, path))

    links = []
    used = set()
    for i, item in enumerate(data.get("links") or []):
        path = f"links[{i}]"
        _need(item, {"a", "b"}, source, path)
        ends = []
        for key in ("a", "b"):
            node, port = _endpoint(item[key], source, item, f"{path}.{key}")
            if node not in nodes:
                raise ScenarioError(f"dangling node reference {node!r}",
                                    _loc(source, item, f"{path}.{key}"))
            ports = _node_ports(nodes[node])
            if port not in ports:
                raise ScenarioError(f"node {node!r} has no port {port!r} (ports: {ports})",
                                    _loc(source, item, f"{path}.{key}"))
            if (node, port) in used:
                raise ScenarioError(f"port {node}:{port} linked twice",
                                    _loc(source, item, f"{path}.{key}"))
            used.add((node, port))
            ends.append((node, port))
        links.append(dict(a=ends[0], b=ends[1], latency_us=item.get("latency_us"),
                          bandwidth_bps=item.get("bandwidth_bps", -1)))

    ues = _expand_ues(data.get("ues"), source)
    for u in ues.values():
        for ref, kind in ((u.enb, "enb"), (u.mme, "mme"), (u.spgw, "spgw")):
            if nodes.get(ref, {}).get("kind") != kind:
                raise ScenarioError(f"UE {u.name} refers to unknown {kind} {ref!r}",
                                    f"{source}: ues")

    commands = []
    for i, item in enumerate(data.get("commands") or []):
        path = f"commands[{i}]"
        _need(item, {"op"}, source, path)
        op = item["op"]
        if op not in COMMANDS:
            raise ScenarioError(f"unknown command {op!r}", _loc(source, item, path + ".op"))
        _need(item, COMMANDS[op], source, path)
        at_us = int(round(float(item.get("at_ms", 0)) * 1000))
        cmd = dict(item)
        cmd["at_us"] = at_us
        if "ues" in item:
            cmd["ues"] = _ue_list(item["ues"], ues, source, item, path + ".ues")
        for key in ("replica", "from", "to", "spgw"):
            if key in item and nodes.get(item[key], {}).get("kind") != "spgw":
                raise ScenarioError(f"unknown S/P-GW {item[key]!r}", _loc(source, item, path))
        if "mme" in item and nodes.get(item["mme"], {}).get("kind") != "mme":
            raise ScenarioError(f"unknown MME {item['mme']!r}", _loc(source, item, path))
        if op == "replicate" and item["strategy"] not in ("naive", "selective"):
            raise ScenarioError(f"unknown strategy {item['strategy']!r}",
                                _loc(source, item, path))
        commands.append(cmd)
    commands.sort(key=lambda c: c["at_us"])  # stable: file order breaks ties

    assertions = []
    for i, item in enumerate(data.get("assertions") or []):
        path = f"assertions[{i}]"
        _need(item, {"kind"}, source, path)
        if item["kind"] not in ASSERTIONS:
            raise ScenarioError(f"unknown assertion {item['kind']!r}", _loc(source, item, path))
        a = dict(item)
        if "ues" in item:
            a["ues"] = _ue_list(item["ues"], ues, source, item, path + ".ues")
        assertions.append(a)

    ctl = data.get("controller") or {}
    intercept = ctl.get("intercept", "store_and_forward")
    store = ctl.get("store", "naive")
    if intercept not in ("store_and_forward", "mirror"):
        raise ScenarioError(f"unknown intercept mode {intercept!r}", f"{source}: controller")
    if store not in ("naive", "selective"):
        raise ScenarioError(f"unknown store mode {store!r}", f"{source}: controller")
    return Scenario(name=str(data.get("name", Path(source).stem)), source=source,
                    horizon_us=int(float(data.get("horizon_s", 60)) * 1_000_000),
                    seed=int(data.get("seed", 0)), constants=dict(data.get("constants") or {}),
                    intercept=intercept, store=store, nodes=nodes, links=links, ues=ues,
                    commands=commands, assertions=assertions,
                    aliases=dict(data.get("aliases") or {}))


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", str(path)) from None
    return parse_scenario(load_yaml(text, str(path)), str(path))


# -- network ---------------------------------------------------------------------------------

@dataclass
class ScenarioResult:
    scenario: Scenario
    trace: object
    reports: list[ReplicationReport]
    assertions: list[dict]
    snapshots: dict
    rules: str
    controller: Controller
    network: object

    @property
    def ok(self) -> bool:
        return all(a["ok"] for a in self.assertions)


class Network:
    def __init__(self, scenario: Scenario, *, seed: int | None = None,
                 overrides: dict | None = None, keep_bytes: bool = True):
        self.scenario = scenario
        self.timing = scenario.timing(overrides)
        self.sim = Simulator(self.timing, seed=scenario.seed if seed is None else seed,
                             horizon_us=scenario.horizon_us, keep_bytes=keep_bytes)
        self.ctl = Controller(scenario.store, scenario.intercept, self.timing)
        self.switches: dict[str, SwitchNode] = {}
        self.ctl_node = ControllerNode(self.sim, self.ctl, self.switches)
        self.ue_by_imsi: dict[str, str] = {}
        self.profiles: dict[str, UeProfile] = {}
        self.app_sent: dict[str, int] = {}
        self._build()

    # -- construction

    def _build(self) -> None:
        sc, sim, tm = self.scenario, self.sim, self.timing
        for name, spec in sc.nodes.items():
            kind = spec["kind"]
            if kind == "mme":
                node = MmeNode(name, spec["ip"], spec["mac"])
            elif kind == "enb":
                node = EnbNode(name, spec["ip"], spec["mac"])
                node.on_app_rx = self._ue_rx
            elif kind == "server":
                node = ServerNode(name, spec["ip"], spec["mac"], spec.get("gateway"))
                node.on_app_rx = self._server_rx
            elif kind == "spgw":
                ifaces = {p: (spec[p]["ip"], spec[p]["mac"]) for p in ("s11", "s1u", "sgi")}
                node = SpgwNode(name, ifaces, spec.get("pool", "10.45.0.0/16"), tm,
                                replica_of=spec.get("replica_of"))
            elif kind == "bridge":
                node = BridgeNode(name, spec["ports"])
            else:
                node = SwitchNode(name, self._pipeline(name, spec), self.ctl_node)
                self.switches[name] = node
            sim.add_node(node)
        for link in sc.links:
            (a, ap), (b, bp) = link["a"], link["b"]
            sim.connect(a, ap, b, bp, latency_us=link["latency_us"],
                        bandwidth_bps=link["bandwidth_bps"])
        self._neighbors()
        self._register()
        for ue in sc.ues.values():
            profile = UeProfile(ue.imsi, ue.enb)
            self.profiles[ue.name] = profile
            self.ue_by_imsi[ue.imsi] = ue.name
            spgw = sc.nodes[ue.spgw]["s11"]["ip"]
            sim.nodes[ue.mme].register_ue(profile, sim.nodes[ue.enb].enb, spgw)

    def _pipeline(self, name: str, spec: dict) -> FlowTablePipeline:
        kind = spec["kind"]
        if kind == "mme_switch":
            return FlowTablePipeline([LOCAL, 1], name=name)
        if kind == "gtp_switch":
            return FlowTablePipeline(list(spec["ports"]) + [LOCAL, spec.get("gtp_port", 100)],
                                     name=name, local_ip=spec["local_ip"],
                                     local_mac=spec["local_mac"],
                                     gtp_port=spec.get("gtp_port", 100))
        return FlowTablePipeline(spec["ports"], name=name)

    def _neighbors(self) -> None:
        """Static ARP: every addressed interface knows its L2 segment."""
        parent: dict = {}

        def find(x):
            while parent.setdefault(x, x) != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        def union(a, b):
            parent[find(a)] = find(b)

        for link in self.scenario.links:
            union(link["a"], link["b"])
        for name, spec in self.scenario.nodes.items():
            if spec["kind"] in SWITCH_KINDS:
                ports = _node_ports(spec)
                for p in ports[1:]:
                    union((name, ports[0]), (name, p))
        segments: dict = {}
        owners: dict = {}
        for name, node in self.sim.nodes.items():
            for port, (ip, mac) in getattr(node, "interfaces", {}).items():
                seg = segments.setdefault(find((name, port)), {})
                if ip in seg and seg[ip] != mac:
                    raise ScenarioError(f"address {ip} used twice on one segment "
                                        f"({owners[(find((name, port)), ip)]} and {name})",
                                        self.scenario.source)
                seg[ip] = mac
                owners[(find((name, port)), ip)] = name
        for name, spec in self.scenario.nodes.items():
            if spec["kind"] == "gtp_switch":
                seg = segments.get(find((name, spec["ports"][0])), {})
                self.switches[name].pipeline.neighbors = dict(seg)
        for name, node in self.sim.nodes.items():
            for port in getattr(node, "interfaces", {}):
                node.neighbors[port] = dict(segments.get(find((name, port)), {}))

    def _register(self) -> None:
        sc, ctl = self.scenario, self.ctl
        cmds = []
        for name, spec in sc.nodes.items():
            if spec["kind"] == "mme":
                ctl.register_mme(name, spec["ip"], spec["mac"])
            elif spec["kind"] == "spgw" and not spec.get("replica_of"):
                ctl.register_spgw(name, spec["s11"]["ip"], spec["s1u"]["ip"],
                                  control_mac=spec["s11"]["mac"], user_mac=spec["s1u"]["mac"])
        for name, spec in sc.nodes.items():
            kind = spec["kind"]
            if kind == "mme_switch":
                cmds += ctl.register_mme_switch(name, spec["mme"], 1)
            elif kind == "gtp_switch":
                enb_ips = [sc.nodes[e]["ip"] for e in spec.get("enbs", [])]
                cmds += ctl.register_gtp_switch(name, spec["ports"], local_ip=spec["local_ip"],
                                                local_mac=spec["local_mac"],
                                                gtp_port=spec.get("gtp_port", 100),
                                                enb_ips=enb_ips)
            elif kind == "wire_switch":
                cmds += ctl.register_wire_switch(name, *spec["ports"])
            elif kind == "switch":
                cmds += ctl.register_switch(name, spec["ports"])
        self.ctl_node.dispatch(cmds, immediate=True)

    def _sgi_attachment(self, spgw: str) -> tuple | None:
        sw = self.scenario.nodes[spgw].get("sgi_switch")
        if not sw:
            return None
        ports = list(self.scenario.nodes[sw]["ports"])
        for link in self.scenario.links:
            for near, far in ((link["a"], link["b"]), (link["b"], link["a"])):
                if near == (spgw, "sgi") and far[0] == sw:
                    other = ports[1] if far[1] == ports[0] else ports[0]
                    return (sw, far[1], other)
        raise ScenarioError(f"{spgw}:sgi is not linked to {sw}", self.scenario.source)

    # -- applications

    def _ue_rx(self, enb, imsi: str, inner: bytes) -> None:
        from ..packets import parse_ipv4, parse_udp
        ip = parse_ipv4(inner)
        if ip.proto != IPPROTO_UDP:
            return
        udp = parse_udp(ip.payload)
        try:
            _, seq, _ = parse_app(udp.payload)
        except Exception:
            return
        self.sim.trace.add(self.sim.now, "app_rx", node=enb.name,
                           ue=self.ue_by_imsi.get(imsi, imsi), seq=seq, dir="dl",
                           src=ip.src, dst=ip.dst, payload=udp.payload.hex())

    def _server_rx(self, server, ip, udp) -> bool:
        try:
            imsi, seq, _ = parse_app(udp.payload)
        except Exception:
            return False
        self.sim.trace.add(self.sim.now, "app_rx", node=server.name,
                           ue=self.ue_by_imsi.get(imsi, imsi), seq=seq, dir="ul",
                           src=ip.src, dst=ip.dst, payload=udp.payload.hex())
        return True

    def _send_app(self, ue: str, seq: int, size: int, dst_ip: str) -> None:
        spec = self.scenario.ues[ue]
        enb = self.sim.nodes[spec.enb]
        profile = self.profiles[ue]
        payload = app_payload(profile.imsi, seq, self.sim.now, size)
        self.sim.trace.add(self.sim.now, "app_tx", node=spec.enb, ue=ue, seq=seq, dir="ul",
                           payload=payload.hex())
        if profile.original_ue_ip is None:
            self.sim.trace.add(self.sim.now, "drop", node=spec.enb, reason="UE not attached",
                               ue=ue, seq=seq, len=0)
            return
        seg = build_udp(profile.original_ue_ip, dst_ip, UE_APP_SPORT, APP_PORT, payload)
        inner = build_ipv4(profile.original_ue_ip, dst_ip, IPPROTO_UDP, seg,
                           ident=seq & 0xFFFF)
        enb.uplink(profile.imsi, inner)

    # -- commands

    def _schedule_commands(self) -> None:
        for cmd in self.scenario.commands:
            self.sim.schedule(cmd["at_us"], "command", self._run_command, cmd)

    def _event(self, what: str, **detail) -> None:
        self.sim.trace.add(self.sim.now, "event", node="scenario", what=what, **detail)

    def _run_command(self, cmd: dict) -> None:
        op, sim, ctl, now = cmd["op"], self.sim, self.ctl, self.sim.now
        self._event("command", op=op)
        sc = self.scenario
        if op in ("attach", "detach"):
            spacing = int(float(cmd.get("spacing_ms", 0)) * 1000)
            for i, ue in enumerate(cmd["ues"]):
                spec = sc.ues[ue]
                mme = sim.nodes[spec.mme]
                fn = mme.start_attach if op == "attach" else mme.start_detach
                sim.after(i * spacing, "command", fn, spec.imsi)
        elif op == "traffic":
            period = int(float(cmd.get("period_ms", 10)) * 1000)
            count = int(cmd.get("count", 100))
            size = int(cmd.get("size", 64))
            dst = cmd.get("dst_ip", DEFAULT_APP_IP)
            for ue in cmd["ues"]:
                first = self.app_sent.get(ue, 0)
                self.app_sent[ue] = first + count
                for k in range(count):
                    sim.after(k * period, "app", self._send_app, ue, first + k, size, dst)
        elif op == "deploy_replica":
            name = cmd["replica"]
            spec = sc.nodes[name]
            if not spec.get("replica_of"):
                self._event("error", detail=f"{name} is not declared as a replica")
                return
            sim.nodes[name].deploy()
            self.ctl_node.dispatch(ctl.deploy_replica(
                name, spec["replica_of"], spec["s11"]["ip"], spec["s1u"]["ip"],
                control_mac=spec["s11"]["mac"], user_mac=spec["s1u"]["mac"],
                sgi=self._sgi_attachment(name), now=now))
        elif op == "replicate":
            imsis = [sc.ues[u].imsi for u in cmd.get("ues", [])]
            try:
                _, cmds = ctl.start_replication(cmd["strategy"], cmd["from"], cmd["to"], imsis,
                                                now)
            except ControllerError as exc:
                self._event("error", detail=str(exc))
                return
            self.ctl_node.dispatch(cmds)
        elif op in ("divert", "undo_divert"):
            fn = ctl.divert if op == "divert" else ctl.undo_divert
            for ue in cmd["ues"]:
                self.ctl_node.dispatch(fn(sc.ues[ue].imsi, now))
        elif op == "mme_down":
            self.ctl_node.dispatch(ctl.evict("mme_down", cmd["mme"], now))
        elif op == "spgw_down":
            sim.nodes[cmd["spgw"]].up = False
            self.ctl_node.dispatch(ctl.evict("spgw_down", cmd["spgw"], now))
        self.ctl_node.flush_events()

    # -- run

    def run(self) -> ScenarioResult:
        for node in self.sim.nodes.values():
            node.start()
        self._schedule_commands()
        self.sim.run()
        self.ctl_node.flush_events()
        snapshots = {n: node.spgw.snapshot() for n, node in self.sim.nodes.items()
                     if isinstance(node, SpgwNode)}
        result = ScenarioResult(self.scenario, self.sim.trace, list(self.ctl.reports), [],
                                snapshots, self.rules_dump(), self.ctl, self)
        result.assertions = [self._check(a, result) for a in self.scenario.assertions]
        return result

    def rules_dump(self) -> str:
        aliases = dict(self.scenario.aliases)
        for name, profile in self.profiles.items():
            if profile.original_ue_ip:
                aliases.setdefault(profile.original_ue_ip, f"{name.upper()}_IP")
            record = self.ctl.divert_records.get(profile.imsi)
            if record is not None and record.new_ue_ip:
                aliases.setdefault(record.new_ue_ip, f"{name.upper()}_EDGE_IP")
        out = []
        for name in sorted(self.switches):
            pipe = self.switches[name].pipeline
            local = dict(aliases)
            if pipe.gtp_port is not None:
                local.setdefault(pipe.gtp_port, "GTP")
            out.append(f"# {name}\n" + pipe.dump(aliases=local))
        return "\n".join(out)

    # -- assertions

    def _check(self, a: dict, result: ScenarioResult) -> dict:
        kind, trace = a["kind"], result.trace
        sc = self.scenario
        ok, detail = True, {}
        if kind in ("continuity", "zero_loss"):
            ues = a.get("ues") or sorted(self.app_sent)
            limit = float(a.get("max_gap_ms", 20))
            for ue in ues:
                stats = {d: measure_gap(trace, ue, direction=d) for d in ("ul", "dl")}
                detail[ue] = {d: s.as_dict() for d, s in stats.items()}
                for s in stats.values():
                    if kind == "continuity" and not (s.gap_across_ms is not None
                                                     and s.gap_across_ms <= limit):
                        ok = False
                    if s.sent == 0 or s.lost or s.duplicates:
                        ok = False
        elif kind == "snapshot_equal":
            a_snap, b_snap = result.snapshots[a["a"]], result.snapshots[a["b"]]
            fields = a.get("fields")
            if fields:
                a_snap = [{k: c[k] for k in fields} for c in a_snap]
                b_snap = [{k: c[k] for k in fields} for c in b_snap]
            if a.get("ues"):
                imsis = {sc.ues[u].imsi for u in a["ues"]}
                a_snap = [c for c in a_snap if c["imsi"] in imsis]
                b_snap = [c for c in b_snap if c["imsi"] in imsis]
            ok = a_snap == b_snap and len(a_snap) > 0
            detail = dict(contexts=len(a_snap), other=len(b_snap))
        elif kind == "transparency":
            bad = transparency_violations(trace, self._replica_ips(), self._mme_nodes())
            ok, detail = not bad, dict(violations=len(bad))
        elif kind == "stored_bytes":
            actual = self.ctl.stored_bytes()
            if a.get("equals") == "formula" or "equals" not in a:
                report = result.reports[-1] if result.reports else None
                registered = a.get("registered", report.registered_ues if report else 0)
                moved = a.get("moved", report.moved_ues if report else 0)
                want = expected_stored_bytes(sc.store, registered,
                                             moved if sc.store == "selective" else 0)
            else:
                want = int(a["equals"])
            ok = actual == want and self.ctl.store.audit()
            detail = dict(actual=actual, expected=want)
        elif kind == "conservation":
            latencies = {link.name: link.latency_us for link in self.sim.links}
            detail = check_conservation(trace, pending=self.sim.pending, latencies=latencies)
            ok = detail["ok"]
        elif kind == "replication_time":
            limit = float(a.get("max_ms", 50))
            times = [r.elapsed_ms for r in result.reports]
            ok = bool(times) and all(r.ok for r in result.reports) and max(times) <= limit
            detail = dict(elapsed_ms=times, limit_ms=limit)
        elif kind == "ssc":
            ues = a.get("ues") or sorted(self.app_sent)
            for ue in ues:
                detail[ue] = ssc_check(trace, ue, self.profiles[ue].original_ue_ip)
                ok = ok and detail[ue]["ok"]
        name = a.get("name", kind)
        return dict(name=name, kind=kind, ok=bool(ok), detail=detail)

    def _replica_ips(self) -> set:
        return {s["s11"]["ip"] for s in self.scenario.nodes.values()
                if s["kind"] == "spgw" and s.get("replica_of")}

    def _mme_nodes(self) -> list:
        return [n for n, s in self.scenario.nodes.items() if s["kind"] == "mme"]


def run_scenario(scenario: Scenario, *, seed: int | None = None, overrides: dict | None = None,
                 keep_bytes: bool = True) -> ScenarioResult:
    return Network(scenario, seed=seed, overrides=overrides, keep_bytes=keep_bytes).run()


def packaged_scenario(name: str) -> Path:
    """Path of a scenario shipped with the package (``canonical_naive`` etc.)."""
    path = Path(__file__).resolve().parent.parent / "scenarios" / f"{name}.yaml"
    if not path.exists():
        raise ScenarioError(f"no packaged scenario {name!r}")
    return path


BENCH_SPACING_MS = 12


def bench_scenario(strategy: str, registered: int, moved: int = 0,
                   constants: dict | None = None) -> Scenario:
    """Canonical topology with `registered` attached UEs and one replication run.

    No user traffic and no divert: the run only measures the replication itself.
    """
    if moved > registered:
        raise ScenarioError(f"moved ({moved}) exceeds registered ({registered})")
    source = packaged_scenario(f"canonical_{strategy}")
    data = load_yaml(source.read_text(), str(source))
    data["name"] = f"bench-{strategy}-{registered}-{moved}"
    data["constants"] = dict(constants or {})
    data["ues"] = [dict(count=registered, prefix="ue", imsi_start="001010000000001",
                        enb="enb", mme="mme", spgw="spgw1")] if registered else []
    attach_end = registered * BENCH_SPACING_MS + 200
    cmds = [dict(at_ms=0, op="attach", ues="all", spacing_ms=BENCH_SPACING_MS)] \
        if registered else []
    cmds.append(dict(at_ms=attach_end, op="deploy_replica", replica="spgw2"))
    rep = {"at_ms": attach_end + 100, "op": "replicate", "strategy": strategy,
           "from": "spgw1", "to": "spgw2"}
    if strategy == "selective":
        rep["ues"] = [f"ue{i + 1}" for i in range(moved)]
    cmds.append(rep)
    data["commands"] = cmds
    data["assertions"] = [dict(kind="stored_bytes", equals="formula", registered=registered,
                               moved=moved)]
    per_ue_ms = 100 + 4 * (constants or {}).get("controller_one_way_us", 5000) / 1000
    data["horizon_s"] = (attach_end + 100 + per_ue_ms * max(registered, 1) + 1000) / 1000
    return parse_scenario(data, f"<{data['name']}>")


def write_artifacts(result: ScenarioResult, out_dir) -> dict:
    """trace.jsonl, trace.pcap, reports.csv, assertions.json, rules.txt, snapshots.json."""
    import csv

    from ..controller import CSV_COLUMNS
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in dict(
        trace="trace.jsonl", pcap="trace.pcap", reports="reports.csv",
        assertions="assertions.json", rules="rules.txt", snapshots="snapshots.json").items()}
    result.trace.write_jsonl(paths["trace"])
    result.trace.write_pcap(paths["pcap"])
    with open(paths["reports"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in result.reports:
            writer.writerow(r.csv_row())
    paths["assertions"].write_text(json.dumps(result.assertions, indent=1, sort_keys=True,
                                              default=str) + "\n")
    paths["rules"].write_text(result.rules)
    paths["snapshots"].write_text(json.dumps(result.snapshots, indent=1, sort_keys=True) + "\n")
    return paths


__all__ = ["Scenario", "ScenarioError", "ScenarioResult", "Network", "bench_scenario",
           "load_scenario", "load_yaml", "packaged_scenario", "parse_scenario", "run_scenario",
           "write_artifacts"]
