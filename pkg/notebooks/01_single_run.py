# coding: utf-8

# # A single roundabout run
#
# Three legs, one lane on the ring, 60 m ramps.  Connected vehicles (CAVs) share
# their state over a lossy, delayed link and are driven by a distributed MPC;
# human-driven vehicles follow a simple gap rule.  Here we run one short scenario
# and look at what comes out.

# In[1]:

import numpy as np

from roundabout_dmpc.config import ScenarioConfig
from roundabout_dmpc.engine import run
from roundabout_dmpc.metrics import eta


# The default scenario is the light-load setup with 60% CAVs.  We cut it down to
# 30 vehicles and two minutes so it finishes in a few seconds.

# In[2]:

cfg = ScenarioConfig().replace(traffic__max_vehicles=30, sim__K=1200, sim__seed=1)
rep = run(cfg)
print(rep.spawned, "spawned,", len(rep.completed), "completed,", rep.in_system, "still driving")


# Per-entry averages.  obj folds travel time and control effort together, with
# eta(lambda) setting the exchange rate.

# In[3]:

for j, name in enumerate("ABC"):
    s = rep.stats(j)
    print(f"{name}: n={s.n_completed:3d} travel={s.avg_travel:6.2f}s "
          f"energy={s.avg_energy:6.2f} obj(0.1)={s.obj(0.1):6.2f}")
print("eta(0.1) =", round(eta(0.1), 4))


# Safety bookkeeping: the smallest realised spacing slack and the worst
# excursion outside the ring lane (negative means inside).

# In[4]:

print("min spacing slack", round(rep.min_spacing_residual, 3), "m")
print("annulus excursion", rep.annulus_violation)
print("collision:", rep.collision)


# Density on the three ring segments over time.

# In[5]:

rho = np.array([r for _, _, r in rep.density]).reshape(-1, 3)
print("mean density per segment (veh/m):", rho.mean(axis=0).round(4))
print("peak:", rho.max(axis=0).round(4))
