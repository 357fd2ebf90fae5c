"""Three passes over the stream, then sweeps over the EMA decay and lambda.

The degradation figure is round-1 average minus the overall average; values
near zero mean the persistent prompt bank does not drift or forget.
"""

# %%
from mgipt import experiments
from mgipt.runtime import RunConfig

net = experiments.source_model()

# %%
s = experiments.run(net, RunConfig(rounds=3), seed=0)
print("per-round averages:", [round(v, 2) for v in s["per_round_avg"]])
print(f"degradation: {s['pd']:.3f}   weights unchanged: {s['weights_unchanged']}")

# %% [markdown]
# Sensitivity. The EMA decay barely matters; lambda does, because pure test
# statistics mis-normalize scenes whose structures are absent.

# %%
for key, grid in (("ema_decay", experiments.E_GRID), ("lam", experiments.LAMBDA_GRID)):
    res = experiments.sweep(net, key, grid)
    print(key, "  ".join(f"{v}:{d:.2f}" for v, d in res.items()))
