"""Work per peer as peers and batch size vary.

Wall-clock speed-ups are not measured. The grid reports how many shards each
peer handles per epoch and how many bytes cross the stores.
"""

# %%
from peerlace.studies import scaling_study

rows = scaling_study([4, 6, 8], [8, 16, 32])

# %%
print(f"{'peers':>5} {'batch':>5} {'shards/peer':>11} {'total grads':>11} {'bytes/epoch':>11} {'acc':>6}")
for r, _ in rows:
    print(
        f"{r.n_peers:5d} {r.batch_size:5d} {max(r.shards_per_peer):11d} {r.gradient_computations:11d}"
        f" {r.bytes_per_epoch:11d} {r.final_accuracy:6.3f}"
    )

# %% [markdown]
# Total gradient work depends only on the batch size. Adding peers divides
# it, and per-peer shard count is the stand-in for epoch time.
