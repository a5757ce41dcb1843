# Attach four UEs, deploy an edge S/P-GW, replicate and divert UE1 while its
# traffic keeps flowing. Inspect what happened from the trace.

# %%
from mecssc.sim import load_scenario, measure_gap, measure_rtt, run_scenario
from mecssc.sim.analysis import ssc_check
from mecssc.sim.scenario import packaged_scenario

# %%
result = run_scenario(load_scenario(packaged_scenario("canonical_selective")))
for a in result.assertions:
    print("PASS" if a["ok"] else "FAIL", a["name"])
print(result.reports[0])

# %%
for ue in ("ue1", "ue2"):
    for d in ("ul", "dl"):
        g = measure_gap(result.trace, ue, direction=d)
        print(ue, d, g.delivered, "delivered, gap across divert", g.gap_across_ms, "ms,",
              g.receivers)

# %%
rtt = measure_rtt(result.trace, "gtpc:mme")
print("GTP-C round trips (ms):", rtt.round(3))

# %%
# the correspondent keeps seeing the original UE address
print(ssc_check(result.trace, "ue1", "10.45.0.1"))

# %%
print(result.rules)

# %%
# same scenario with the controller mirroring instead of holding GTP-C
mirror = run_scenario(load_scenario(packaged_scenario("canonical_mirror")))
print(measure_rtt(mirror.trace, "gtpc:mme")[:8].round(3))
