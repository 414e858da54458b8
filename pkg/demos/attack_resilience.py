"""Accuracy of three aggregation rules with one Byzantine peer out of four.

Run with ``python demos/attack_resilience.py``. Takes around ten seconds.
"""

# %%
from peerlace.studies import attack_study

EPOCHS = 200

# %% [markdown]
# Rank 3 publishes either ``-10 * g`` (sign flip) or ``g + N(0, 1)`` noise
# instead of its honest local average. Plain averaging has no defence.

# %%
print(f"{'rule':8} {'attack':9} {'accuracy':>8} {'first loss':>11} {'final loss':>11}")
for rule in ("average", "zeno", "meamed"):
    for attack in ("none", "signflip", "noise"):
        r = attack_study(rule, attack, max_epochs=EPOCHS)
        d = r.to_dict()
        print(f"{rule:8} {attack:9} {d['final_accuracy']:8.3f} {d['first_loss']:11.4f} {d['final_loss']:11.4f}")

# %% [markdown]
# Expect averaging under sign flip to blow the loss up, while Zeno and the
# mean-around-median rule stay close to their clean accuracy.
