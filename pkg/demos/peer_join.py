"""A fifth peer joins after epoch 5 and takes over part of everyone's shards."""

# %%
from peerlace.faults import FaultEvent
from peerlace.scenario import DatasetSpec, Scenario
from peerlace.simulation import Simulation
from peerlace.tensor import TrainingConfig

sim = Simulation(
    Scenario(
        n_peers=4,
        dataset=DatasetSpec(n_samples=1500, dim=8),
        training=TrainingConfig(batch_size=20, max_epochs=8),
        crypto="rsa",
        seed=13,
        faults=(FaultEvent("join", 4, 5),),
    )
)
m = sim.run()

# %%
for epoch in (5, 6):
    shards = {r: c.parallelism for r, c in m.trace.configs[epoch].items()}
    print(f"epoch {epoch}: active={len(shards)} shards per peer {shards}")

# %%
newcomer = sim.peers[4].member
print("newcomer trusts:", sorted(newcomer.trusted))
print("trusted by all:", all(4 in p.member.trusted for r, p in sim.peers.items() if r != 4))
print("passwords match:", all(newcomer.password_for(r) == sim.peers[r].member.own_password() for r in range(4)))
print("one model in epoch 6:", len({v.tobytes() for v in m.trace.models[6].values()}) == 1)
