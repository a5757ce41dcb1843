import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from mecssc.packets import IPPROTO_UDP, build_ipv4, build_udp
from mecssc.sim import load_scenario, run_scenario
from mecssc.sim.scenario import packaged_scenario

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ipv4_addrs = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))
teids = st.integers(0, 0xFFFFFFFF)
imsis = st.text("0123456789", min_size=15, max_size=15)


@st.composite
def inner_packets(draw, src=None):
    """A well-formed IPv4/UDP packet with random addressing and payload."""
    s = src or draw(ipv4_addrs)
    d = draw(ipv4_addrs)
    payload = draw(st.binary(max_size=64))
    seg = build_udp(s, d, draw(st.integers(1, 65535)), draw(st.integers(1, 65535)), payload)
    return build_ipv4(s, d, IPPROTO_UDP, seg, ident=draw(st.integers(0, 0xFFFF)),
                      ttl=draw(st.integers(1, 255)))


def udp_packet(src="10.45.0.1", dst="10.99.0.1", payload=b"hello", sport=40000, dport=7):
    return build_ipv4(src, dst, IPPROTO_UDP, build_udp(src, dst, sport, dport, payload))


@pytest.fixture(scope="session")
def naive_run():
    return run_scenario(load_scenario(packaged_scenario("canonical_naive")))


@pytest.fixture(scope="session")
def selective_run():
    return run_scenario(load_scenario(packaged_scenario("canonical_selective")))


@pytest.fixture(scope="session")
def mirror_run():
    return run_scenario(load_scenario(packaged_scenario("canonical_mirror")))


# -- a GTP switch wired like the edge deployment: eNB on 1, core gateway on 2, edge on 3

OVS_IP, OVS_MAC = "192.168.1.250", "02:00:00:00:00:fa"
ENB_IP, ENB_MAC = "192.168.1.10", "02:00:00:00:00:0a"
SGW1_IP, SGW1_MAC = "192.168.1.1", "02:00:00:00:01:01"
SGW2_IP, SGW2_MAC = "192.168.1.2", "02:00:00:00:02:01"
GTP_PORT = 100
UE1_IP = "10.45.0.1"
HOSTS = [(ENB_IP, ENB_MAC, 1), (SGW1_IP, SGW1_MAC, 2), (SGW2_IP, SGW2_MAC, 3)]
TABLE1_ALIASES = {ENB_IP: "ENB_IP", SGW1_IP: "S/P-GW1_IP", SGW2_IP: "S/P-GW2_IP",
                  OVS_IP: "OVS_IP", OVS_MAC: "OVS_ETH", UE1_IP: "UE1_IP", GTP_PORT: "GTP"}


def apply_cmds(pipe, cmds) -> list:
    """Apply FlowMods addressed to `pipe`; return (port, frame) pairs from PacketOuts."""
    from dataclasses import replace

    from mecssc.controller import FlowMod, PacketOut
    from mecssc.flow import FLOOD
    outputs = []
    for cmd in cmds:
        if cmd.switch != pipe.name:
            continue
        if isinstance(cmd, FlowMod):
            pipe.apply_bundle(cmd.removals, [replace(r) for r in cmd.installs])
        elif isinstance(cmd, PacketOut):
            ports = [p for p in pipe.physical_ports() if p != cmd.in_port] \
                if cmd.port == FLOOD else [cmd.port]
            outputs += [(p, cmd.frame) for p in ports]
    return outputs


def switch_round(pipe, ctl, port, frame) -> list:
    """Process one frame with the controller answering packet-ins synchronously."""
    res = pipe.process_frame(port, frame)
    outputs = list(res.outputs)
    for pi in res.packet_ins:
        outputs += apply_cmds(pipe, ctl.on_packet_in(pipe.name, pi, 0))
    return outputs


def announce(ip, mac):
    from mecssc.packets import BROADCAST_MAC, ETH_TYPE_IPV4, EthernetFrame, udp_ipv4_packet
    return EthernetFrame(mac, BROADCAST_MAC, ETH_TYPE_IPV4,
                         udp_ipv4_packet(ip, "255.255.255.255", 9, 9, b"announce"))


def gtp_switch(divert=None):
    """(pipeline, controller) with forwarding learned; `divert` is a DivertRecord or None."""
    from mecssc.controller import Controller
    from mecssc.flow import LOCAL, FlowTablePipeline
    ctl = Controller("naive")
    pipe = FlowTablePipeline([1, 2, 3, LOCAL, GTP_PORT], name="ovs", local_ip=OVS_IP,
                             local_mac=OVS_MAC, gtp_port=GTP_PORT,
                             neighbors={ip: mac for ip, mac, _ in HOSTS})
    apply_cmds(pipe, ctl.register_gtp_switch("ovs", [1, 2, 3], local_ip=OVS_IP,
                                             local_mac=OVS_MAC, gtp_port=GTP_PORT,
                                             enb_ips=[ENB_IP]))
    for ip, mac, port in HOSTS:
        switch_round(pipe, ctl, port, announce(ip, mac))
    apply_cmds(pipe, [ctl.forwarding.ensure_path("ovs", ENB_IP, SGW1_IP)])
    if divert is not None:
        apply_cmds(pipe, ctl.install_diverting_rules(divert))
    return pipe, ctl


def naive_record(ue_ip=UE1_IP, imsi="001010000000001"):
    from mecssc.controller import DivertRecord, StoreMode
    return DivertRecord(imsi, ENB_IP, SGW1_IP, SGW2_IP, StoreMode.NAIVE, "spgw2", ue_ip=ue_ip)


def uplink_frame(ue_ip, teid, payload=b"x", ident=1, dst_ip="10.99.0.1"):
    from mecssc.gtp import GtpUserPacket, gtpu_frame
    inner = udp_packet(ue_ip, dst_ip, payload)
    return gtpu_frame(GtpUserPacket(teid, inner, ENB_IP, SGW1_IP), ENB_MAC, SGW1_MAC,
                      ident=ident)


# -- acceptance summary: one PASS/FAIL line per criterion at the end of the run

ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, note = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title}{note}")
