# Walk one uplink packet through the GTP-aware switch before and after UE1 is
# diverted to the edge S/P-GW.

# %%
from mecssc.controller import Controller, DivertRecord, StoreMode
from mecssc.flow import LOCAL, FlowTablePipeline
from mecssc.gtp import GtpUserPacket, frame_to_gtpu, gtpu_frame
from mecssc.packets import IPPROTO_UDP, build_ipv4, build_udp

OVS_IP, OVS_MAC = "192.168.1.250", "02:00:00:00:00:fa"
ENB = ("192.168.1.10", "02:00:00:00:00:0a")
SGW1 = ("192.168.1.1", "02:00:00:00:01:01")
SGW2 = ("192.168.1.2", "02:00:00:00:02:01")

# %%
ctl = Controller("naive")
pipe = FlowTablePipeline([1, 2, 3, LOCAL, 100], name="ovs", local_ip=OVS_IP,
                         local_mac=OVS_MAC, gtp_port=100,
                         neighbors=dict([ENB, SGW1, SGW2]))
for cmd in ctl.register_gtp_switch("ovs", [1, 2, 3], local_ip=OVS_IP, local_mac=OVS_MAC,
                                   gtp_port=100, enb_ips=[ENB[0]]):
    pipe.apply_bundle(cmd.removals, cmd.installs)
for port, (ip, mac) in ((1, ENB), (2, SGW1), (3, SGW2)):
    ctl.forwarding.hosts[ip] = mac
    ctl.forwarding.mac_tables.setdefault("ovs", {})[mac] = port
for peer in (SGW1, SGW2):
    fm = ctl.forwarding.ensure_path("ovs", ENB[0], peer[0])
    pipe.apply_bundle(fm.removals, fm.installs)
print(pipe.dump())

# %%
def uplink(ue_ip, teid=0x100):
    inner = build_ipv4(ue_ip, "10.99.0.1", IPPROTO_UDP,
                       build_udp(ue_ip, "10.99.0.1", 40000, 7, b"hello"))
    return gtpu_frame(GtpUserPacket(teid, inner, ENB[0], SGW1[0]), ENB[1], SGW1[1])


def show(frame):
    res = pipe.process_frame(1, frame)
    for port, out in res.outputs:
        pkt = frame_to_gtpu(out)
        print(f"port {port}: {pkt.outer_src_ip} -> {pkt.outer_dst_ip} teid={pkt.teid:#x} "
              f"(recirculations {res.recirculations})")


show(uplink("10.45.0.1"))

# %%
record = DivertRecord("001010000000001", ENB[0], SGW1[0], SGW2[0], StoreMode.NAIVE, "spgw2",
                      ue_ip="10.45.0.1")
for cmd in ctl.install_diverting_rules(record):
    pipe.apply_bundle(cmd.removals, cmd.installs)
print(pipe.listing(tables=(0, 1)))

# %%
show(uplink("10.45.0.1"))
show(uplink("10.45.0.2"))
