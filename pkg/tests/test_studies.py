import math

import pytest

from peerlace.studies import (
    attack_scenario,
    attack_study,
    centralized_baseline,
    compare_store_paths,
    scaling_base,
    scaling_study,
)
from peerlace.tensor import TrainingConfig


def test_store_paths_bytes_and_identity():
    c = compare_store_paths(1000, 10, repetitions=20)
    assert c.identical and c.mismatches == 0
    # external update moves the model and the average out, the new model back in
    assert c.update.external == 3 * 1000 * 8
    assert c.average.external == 11 * 1000 * 8
    assert c.update.instore == c.average.instore == 64
    assert c.update.reduction > 0.99 and c.average.reduction > 0.99


@pytest.mark.parametrize("length,grads", [(1, 1), (7, 3), (257, 5)])
def test_store_paths_small_shapes(length, grads):
    c = compare_store_paths(length, grads, repetitions=5, seed=length)
    assert c.identical
    assert c.average.external == (grads + 1) * length * 8
    assert c.average.instore == 64


def test_store_paths_rejects_bad_sizes():
    with pytest.raises(ValueError):
        compare_store_paths(0, 3)


@pytest.fixture(scope="module")
def grid():
    base = scaling_base().with_overrides(training=TrainingConfig(max_epochs=2))
    return scaling_study([4, 6, 8], [8, 16], base)


def test_scaling_grid_shape(grid):
    assert [(r.n_peers, r.batch_size) for r, _ in grid] == [(n, b) for n in (4, 6, 8) for b in (8, 16)]


def test_scaling_parallelism_is_rows_over_batch(grid):
    rows = scaling_base().dataset.n_train
    assert rows == 1536
    for r, _ in grid:
        assert r.shards_per_peer == (math.ceil(rows / r.n_peers / r.batch_size),) * r.n_peers


def test_scaling_total_work_independent_of_peers(grid):
    by_batch = {}
    for r, _ in grid:
        by_batch.setdefault(r.batch_size, set()).add(r.gradient_computations)
    assert by_batch == {8: {192}, 16: {96}}


def test_scaling_more_peers_fewer_shards_each(grid):
    for b in (8, 16):
        per_peer = [max(r.shards_per_peer) for r, _ in grid if r.batch_size == b]
        assert per_peer == sorted(per_peer, reverse=True)


def test_attack_scenario_defaults():
    s = attack_scenario("zeno", "signflip")
    assert s.n_peers == 4 and s.attack.malicious_ranks == {3} and s.attack.epsilon == 10.0
    assert attack_scenario("average").attack.malicious_ranks == frozenset()


def test_signflip_breaks_average_but_not_meamed():
    broken = attack_study("average", "signflip", max_epochs=40)
    robust = attack_study("meamed", "signflip", max_epochs=40)
    assert broken.loss_non_decreasing
    assert robust.final_accuracy >= 0.9
    assert broken.final_accuracy < 0.5
    assert set(broken.to_dict()) >= {"rule", "final_accuracy", "loss_non_decreasing"}


def test_centralized_baseline_matches_average_network():
    s = attack_scenario("average", max_epochs=25)
    curve, acc = centralized_baseline(s)
    result = attack_study("average", "none", max_epochs=25)
    assert abs(acc - result.final_accuracy) <= 0.02
    assert curve[-1] == pytest.approx(result.loss_curve[-1], rel=1e-9)
