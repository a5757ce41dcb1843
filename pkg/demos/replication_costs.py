# Storage, network and time cost of moving control state to an edge S/P-GW.
#
# Run cell by cell in an editor that understands `# %%`, or top to bottom with
#   python3 demos/replication_costs.py

# %%
import numpy as np

from mecssc.bench import SweepConfig, direct_point, run_sweep
from mecssc.metrics import affine_fit, ram_image_bytes, ram_replication_model

# %% [markdown]
# Message replication keeps every MME-originated GTP-C message. The RAM model
# copies a whole VM image instead.

# %%
config = SweepConfig(strategies=("naive", "selective", "ram_model"),
                     registered=(1, 10, 100, 1000), moved=(0, "half", "all"), engine="direct")
rows = run_sweep(config)
for r in rows:
    print(f"{r['strategy']:>9} n={r['registered']:>4} m={r['moved']:>4} "
          f"stored={r['stored_bytes']:>7} tx={r['tx_bytes']:>10} "
          f"elapsed={float(r['elapsed_ms']):>9.2f} ms")

# %%
naive = [r for r in rows if r["strategy"] == "naive" and r["moved"] == r["registered"]]
n = np.array([r["registered"] for r in naive])
t = np.array([float(r["elapsed_ms"]) for r in naive])
slope, intercept, r2 = affine_fit(n, t)
print(f"naive: {slope:.2f} ms per UE + {intercept:.2f} ms, R2={r2:.6f}")

# %%
# a single move out of a thousand registered UEs
print(direct_point("selective", 1000, 1))

# %%
n = np.array([0, 1, 10, 100, 500, 1000])
print(np.round(ram_image_bytes(n) / 1e6, 1), "MB")
print(ram_replication_model(1).elapsed_ms / 1000, "s for one UE")
