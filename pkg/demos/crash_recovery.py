"""Rank 2 of four dies right after answering its heartbeat in epoch 2."""

# %%
from peerlace.faults import FaultEvent
from peerlace.scenario import DatasetSpec, Scenario
from peerlace.simulation import run_scenario
from peerlace.tensor import TrainingConfig

base = Scenario(
    n_peers=4,
    dataset=DatasetSpec(n_samples=1500, dim=8),
    training=TrainingConfig(batch_size=20, max_epochs=30),
    crypto="fake",
    seed=11,
)
clean = run_scenario(base)
crashed = run_scenario(base.with_overrides(faults=(FaultEvent("crash", 2, 2),)))

# %%
for epoch in (1, 2, 3, 4, 5):
    rows = [r for r in crashed.rows if r.epoch == epoch]
    shards = {r: c.parallelism for r, c in crashed.trace.configs[epoch].items()}
    events = {r.peer: r.event for r in rows if r.event}
    print(f"epoch {epoch}: shards per peer {shards}  events {events}")

# %%
s = crashed.summary
print("detected:", s["detection_epoch"], " consensus:", s["consensus_epoch"], " recovered:", s["recovery_epoch"])
print(f"final accuracy {s['final_accuracy']:.4f} vs {clean.summary['final_accuracy']:.4f} without the crash")

# %% [markdown]
# In epoch 2 the others wait out the barrier timeout. In epoch 3 every
# survivor's heartbeat misses rank 2, they agree unanimously, and its 15
# shards are split five apiece, giving 20 each from epoch 4 on.
