"""The five aggregation rules on a toy set of gradients with two outliers."""

# %%
import numpy as np

from peerlace.aggregation import ZenoConfig, average, geomed, marmed, meamed, zeno
from peerlace.tensor import ModelParams, compute_gradient, make_two_gaussians

rng = np.random.default_rng(0)
honest = rng.normal([1.0, -0.5], 0.1, size=(5, 2))
grads = np.vstack([honest, [[40.0, 40.0], [-30.0, 25.0]]])

# %%
print("honest mean  ", honest.mean(axis=0).round(3))
print("average      ", np.round(average(grads), 3))
print("marmed       ", np.round(marmed(grads), 3))
print("meamed (b=2) ", np.round(meamed(grads, 2), 3))
print("geomed       ", np.round(geomed(grads), 3))

# %% [markdown]
# Zeno scores each candidate by how much one step along it lowers the loss
# on a small trusted batch, then averages the best ``n - b``.

# %%
data = make_two_gaussians(400, 2, 4.0, rng)
params = ModelParams(np.zeros(2), 0.0)
g = compute_gradient(params, data.take(0, 200))
cands = np.vstack([g + rng.normal(0, 0.01, (3, g.size)), -10 * g])  # last one is sign-flipped
cfg = ZenoConfig(data.take(200, 264), learning_rate=0.5)
print("zeno (b=1)   ", np.round(zeno(cands, params, cfg, 1), 3), " honest", np.round(g, 3))
