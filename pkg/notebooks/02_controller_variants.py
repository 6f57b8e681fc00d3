# coding: utf-8

# # Three controllers on the same traffic
#
# * M2: sequencing with the full objective, plus delay compensation
# * M1: sequencing on spacing and speed only, no compensation
# * M3: first come first served on each merge axis, no sequencing
#
# Same seed means the same arrivals, so differences come from the controllers.

# In[1]:

from roundabout_dmpc.engine import run
from roundabout_dmpc.harness import preset_experiment1, scaled, variant_configs


# In[2]:

base = scaled(preset_experiment1(0.6), 40, 400.0)
reports = {c.controller.variant: run(c) for c in variant_configs(base)}


# In[3]:

print("      " + "".join(f"{v:>22s}" for v in reports))
for j, name in enumerate("ABC"):
    cells = []
    for rep in reports.values():
        s = rep.stats(j)
        cells.append(f"{s.avg_travel:8.2f}s / {s.obj(0.1):7.2f}")
    print(f"  {name}  " + "".join(f"{c:>22s}" for c in cells))


# Conflict ratio: share of crossing pairs whose post-encroachment time is below
# the threshold, normalised to M3.

# In[4]:

base_cr = [reports["M3"].conflict_ratio(j)[0] for j in range(3)]
for v, rep in reports.items():
    cr = [rep.conflict_ratio(j)[0] for j in range(3)]
    print(v, [round(a / b, 2) if b else None for a, b in zip(cr, base_cr)])


# How busy was the sequencer?  M3 never calls it.

# In[5]:

from roundabout_dmpc.engine import Simulation

for c in variant_configs(scaled(base, 20, 120.0)):
    sim = Simulation(c)
    sim.run()
    print(c.controller.variant, "sequencer calls:", sim.sequencer_calls)
