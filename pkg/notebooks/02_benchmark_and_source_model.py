"""The synthetic benchmark and the frozen source model.

Shows the five domains, how far each drifts from the source style, and how
the source model degrades under each shift with and without BN calibration.
"""

# %%
from pathlib import Path

import numpy as np

from mgipt import bench, experiments, training, viz

OUT = Path("notebook_output")
OUT.mkdir(exist_ok=True)

# %% [markdown]
# Every domain is rendered from the same scenes, so masks are shared and
# only intensities differ. One row per domain is written as a pixmap.

# %%
sets = bench.generate_benchmark(20, seed=3)
strip = np.concatenate([sets[d].images[0] for d in bench.DOMAINS], axis=1)
viz.write_ppm(OUT / "domains.ppm", strip)
for d in bench.DOMAINS:
    dev = np.abs(sets[d].images - sets["A"].images).mean()
    print(f"{d}: mean |pixel - A| = {dev:.4f}")

# %% [markdown]
# The cached source model. The first call trains it (about two minutes on
# one core) and stores it under ~/.cache/mgipt.

# %%
net = experiments.source_model()
_, (held_x, held_y) = experiments.source_split()
print(f"held-out A DSC: {training.evaluate(net, held_x, held_y):.3f}")

# %% [markdown]
# Source statistics, calibrated statistics (lambda = 0.8) and pure test
# statistics on each domain.

# %%
print("domain  source  lam=0.8  lam=0.0")
for d in bench.DOMAINS:
    s = [training.evaluate(net, sets[d].images, sets[d].masks, m) for m in ("source", 0.8, 0.0)]
    print(f"{d}       {s[0]:.3f}   {s[1]:.3f}    {s[2]:.3f}")
