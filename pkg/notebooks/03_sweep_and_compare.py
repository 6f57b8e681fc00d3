# coding: utf-8

# # Sweeps from the command line
#
# The same work the CLI does, driven from Python.  `sweep` runs the cartesian
# product of penetrations, variants and seeds, writes one folder per run and a
# pair of comparison tables.

# In[1]:

import csv
import tempfile
from pathlib import Path

from roundabout_dmpc.harness import main

out = Path(tempfile.mkdtemp())


# In[2]:

rc = main(["sweep", "--preset", "exp1", "--out", str(out), "--vehicles", "10",
           "--seconds", "120", "--penetrations", "0.4,0.8", "--seeds", "0,1"])
print("exit code", rc)
print(sorted(p.name for p in out.iterdir())[:4], "...")


# compare.csv has one row per (intersection, attribute) and one column per
# penetration and variant, averaged over seeds.

# In[3]:

rows = list(csv.DictReader(open(out / "compare.csv")))
cols = [c for c in rows[0] if c.startswith("p")]
print("attribute".ljust(28), *(c.rjust(9) for c in cols))
for r in rows[:4]:
    print(r["attribute"].ljust(28), *(f"{float(r[c]):9.2f}" for c in cols))


# Re-running `compare` on the folder rebuilds the tables from the stored
# summaries.  Mixing runs from different scenarios is refused.

# In[4]:

print(main(["compare", "--out", str(out)]))
