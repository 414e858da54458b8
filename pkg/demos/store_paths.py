"""Bytes moved when the SGD update and the gradient average run inside the store.

The alternative pulls every tensor out, does the arithmetic client-side and
writes the result back. Both paths must give the same floats.
"""

# %%
from peerlace.studies import compare_store_paths

# %%
for length in (10, 1000, 100_000):
    c = compare_store_paths(length, n_grads=10, repetitions=5)
    print(
        f"len={length:>7}  update {c.update.external:>9} -> {c.update.instore:>3} B ({c.update.reduction:.4%})"
        f"  average {c.average.external:>9} -> {c.average.instore:>3} B ({c.average.reduction:.4%})"
        f"  identical={c.identical}"
    )

# %% [markdown]
# An in-store command is charged a fixed overhead, so the saving grows with
# the model length. Ledger bytes stand in for wall-clock transfer time.
