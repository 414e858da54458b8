import base64
import copy
import csv
import io
import json

import numpy as np
import pytest

from invariants import all_invariants, model_equality, random_scenario, shard_conservation
from oracles import sgd_reference
from peerlace.faults import AttackSpec, FaultEvent
from peerlace.runtime import MODEL_KEY
from peerlace.scenario import DatasetSpec, Scenario
from peerlace.simulation import CSV_COLUMNS, Clock, Scheduler, Simulation, emit, run_scenario
from peerlace.tensor import TrainingConfig


def small(**kw):
    base = dict(
        n_peers=4,
        dataset=DatasetSpec(n_samples=1500, dim=8),
        training=TrainingConfig(batch_size=20, max_epochs=6),
        crypto="fake",
        seed=2,
    )
    base.update(kw)
    return Scenario(**base)


def parallelism(m):
    return {e: {r: c.parallelism for r, c in v.items()} for e, v in m.trace.configs.items()}


# -- scheduler -------------------------------------------------------------------------


def test_scheduler_round_robin_and_results():
    order = []

    def task(r, steps):
        for i in range(steps):
            order.append((r, i))
            yield "tick"
        return r * 10

    clock = Clock()
    out = Scheduler(clock).run({1: task(1, 2), 0: task(0, 3)})
    assert out == {0: 0, 1: 10}
    assert order == [(0, 0), (1, 0), (0, 1), (1, 1), (0, 2)]
    assert clock.now == 4  # the step that returns also costs a tick


def test_scheduler_halts_task_from_hook():
    def task():
        yield "heartbeat"
        raise AssertionError("should have been halted")

    out = Scheduler(Clock()).run({0: task()}, lambda r, marker: marker == "heartbeat")
    assert out == {}


def test_scheduler_concurrent_matches():
    def task(r):
        total = 0
        for i in range(5):
            total += i * r
            yield "t"
        return total

    sched = Scheduler(Clock(), "concurrent")
    try:
        assert sched.run({r: task(r) for r in range(6)}) == {r: 10 * r for r in range(6)}
    finally:
        sched.close()


# -- failure and join timelines ------------------------------------------------------------


@pytest.mark.parametrize("crypto", ["fake", "rsa"])
def test_crash_post_heartbeat_timeline(crypto):
    m = run_scenario(small(faults=(FaultEvent("crash", 2, 2),), crypto=crypto))
    assert m.summary["detection_epoch"] == 3
    assert m.summary["consensus_epoch"] == 3
    par = parallelism(m)
    assert par[3] == {0: 15, 1: 15, 3: 15}
    assert par[4] == {0: 20, 1: 20, 3: 20}
    ep2 = {r.peer: r for r in m.rows if r.epoch == 2}
    assert ep2[2].event == "crashed"
    assert "barrier_timeout=2" in ep2[0].event
    assert all(o.consensus == {2} for o in m.trace.outcomes[3].values())
    assert all(2 not in m.trace.outcomes[3][r].heartbeat.active for r in (0, 1, 3))
    assert not all_invariants(m, 100)


def test_crash_at_epoch_start_detected_same_epoch():
    m = run_scenario(small(faults=(FaultEvent("crash", 1, 2, "epoch_start"),)))
    assert m.summary["detection_epoch"] == 2 and m.summary["consensus_epoch"] == 2
    assert parallelism(m)[3] == {0: 20, 2: 20, 3: 20}
    assert all(o.barrier.complete for o in m.trace.outcomes[2].values())


@pytest.mark.parametrize("crypto", ["fake", "rsa"])
def test_join_after_epoch_five(crypto):
    sim = Simulation(
        small(faults=(FaultEvent("join", 4, 5),), crypto=crypto, training=TrainingConfig(batch_size=20, max_epochs=7))
    )
    m = sim.run()
    active = {e: {r.peer: r.active_count for r in m.rows if r.epoch == e} for e in (5, 6)}
    assert set(active[5].values()) == {4}
    assert set(active[6].values()) == {5}
    assert parallelism(m)[6] == {r: 12 for r in range(5)}
    members = {r: p.member for r, p in sim.peers.items()}
    for r, mem in members.items():
        assert set(mem.trusted) == set(members) - {r}
        for o in mem.trusted:
            assert mem.password_for(o) == members[o].own_password()
            assert r in members[o].trusted
    assert not all_invariants(m, 100)
    assert m.summary["join_epochs"] == [5]


def test_join_while_crash_pending_still_reaches_consensus():
    m = run_scenario(
        small(
            faults=(FaultEvent("crash", 1, 3), FaultEvent("join", 4, 3)),
            training=TrainingConfig(batch_size=20, max_epochs=6),
        )
    )
    assert m.summary["consensus_epoch"] == 4
    assert set(m.trace.configs[5]) == {0, 2, 3, 4}
    assert not all_invariants(m, 100)


def test_crash_of_joined_peer():
    m = run_scenario(
        small(
            faults=(FaultEvent("join", 4, 2), FaultEvent("crash", 4, 4)),
            training=TrainingConfig(batch_size=20, max_epochs=6),
        )
    )
    assert m.summary["final_active"] == [0, 1, 2, 3]
    assert not all_invariants(m, 100)


def test_single_peer_runs():
    m = run_scenario(small(n_peers=1, training=TrainingConfig(batch_size=50, max_epochs=3)))
    assert [r.active_count for r in m.rows] == [1, 1, 1]


# -- training quality --------------------------------------------------------------------


def test_average_network_matches_single_process_oracle():
    s = small(training=TrainingConfig(max_epochs=50), dataset=DatasetSpec(n_samples=2000, dim=8))
    sim = Simulation(s)
    shards = [[(sim.catalog[i].features, sim.catalog[i].labels) for i in sim.peers[r].state.assigned_shards] for r in range(4)]
    w_ref = sgd_reference(shards, sim.params0.flatten(), s.training.learning_rate, s.training.max_epochs)
    m = sim.run()
    w = sim.peers[0].store.inspect(sim.peers[0].member.own_password(), MODEL_KEY)
    np.testing.assert_allclose(w, w_ref, rtol=1e-9, atol=1e-12)
    Xv, yv = sim.validation.features, sim.validation.labels
    ref_acc = float(np.mean(((Xv @ w_ref[:-1] + w_ref[-1]) > 0) == (yv > 0.5)))
    assert m.summary["final_accuracy"] >= 0.9
    assert abs(m.summary["final_accuracy"] - ref_acc) <= 0.02


def test_attack_none_leaves_models_untouched():
    plain = run_scenario(small())
    zero_noise = run_scenario(small(attack=AttackSpec("noise", sigma=0.0, malicious_ranks={3})))
    assert [r.train_loss for r in plain.rows] == [r.train_loss for r in zero_noise.rows]
    assert [r.val_accuracy for r in plain.rows] == [r.val_accuracy for r in zero_noise.rows]


def test_stop_on_convergence():
    s = small(
        training=TrainingConfig(batch_size=20, max_epochs=60, convergence_interval=5, convergence_tolerance=0.05),
        stop_on_convergence=True,
    )
    m = run_scenario(s)
    assert m.summary["converged_epoch"] is not None
    assert m.summary["epochs_run"] == m.summary["converged_epoch"] < 60
    assert m.summary["converged_epoch"] % 5 == 0


# -- determinism and output ------------------------------------------------------------------


def test_same_scenario_same_bytes():
    s = small(faults=(FaultEvent("crash", 3, 2),), order="random", max_compute_delay=4)
    assert run_scenario(s).to_csv() == run_scenario(s).to_csv()
    assert run_scenario(s).to_csv() != run_scenario(s.with_overrides(seed=99)).to_csv()


def test_concurrent_mode_invariants_hold():
    s = small(faults=(FaultEvent("crash", 3, 2),), mode="concurrent", max_compute_delay=3, order="random")
    m = run_scenario(s)
    assert not all_invariants(m, s.barrier_timeout)


def test_rows_one_per_peer_epoch_and_monotone():
    m = run_scenario(small(faults=(FaultEvent("crash", 0, 3),)))
    epochs = [r.epoch for r in m.rows]
    assert epochs == sorted(epochs)
    assert len([r for r in m.rows if r.epoch == 3]) == 4
    assert len([r for r in m.rows if r.epoch == 4]) == 3


def test_csv_header_and_parse(tmp_path):
    m = run_scenario(small())
    path = emit(m, "csv", tmp_path / "m.csv")
    text = path.read_text()
    assert text.splitlines()[0] == "epoch,peer,active_count,train_loss,val_accuracy,bytes_in,bytes_out,event"
    rows = list(csv.DictReader(io.StringIO(text)))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert float(rows[-1]["train_loss"]) == m.rows[-1].train_loss


def test_json_round_trip(tmp_path):
    m = run_scenario(small(faults=(FaultEvent("crash", 2, 2),)))
    doc = json.loads(emit(m, "json", tmp_path / "m.json").read_text())
    assert doc["summary"]["detection_epoch"] == 2 + 1
    assert len(doc["rows"]) == len(m.rows)
    assert set(doc["ledgers"]) == {"0", "1", "2", "3"}
    assert doc["scenario"]["faults"][0]["rank"] == 2


def test_emit_errors(tmp_path):
    m = run_scenario(small(training=TrainingConfig(batch_size=50, max_epochs=1)))
    with pytest.raises(OSError):
        emit(m, "csv", tmp_path / "missing-dir" / "m.csv")
    with pytest.raises(ValueError):
        emit(m, "xml", tmp_path / "m.xml")


def test_invalid_scenario_fails_before_any_epoch():
    from peerlace.scenario import ConfigError

    with pytest.raises(ConfigError):
        run_scenario(Scenario(n_peers=0))


# -- the invariant checkers themselves ------------------------------------------------------


def test_checkers_catch_planted_violations():
    m = run_scenario(small(training=TrainingConfig(batch_size=20, max_epochs=2)))
    assert not all_invariants(m, 100)
    broken = copy.deepcopy(m)
    first = broken.trace.models[1][0]
    broken.trace.models[1][0] = np.nextafter(first, np.inf)
    assert model_equality(broken)
    broken = copy.deepcopy(m)
    own = broken.trace.ownership[1][0]
    own[0] = own[0][1:]
    assert shard_conservation(broken)


@pytest.mark.parametrize("seed", range(8))
def test_random_scenarios_keep_invariants(seed):
    s = random_scenario(100 + seed)
    assert not all_invariants(run_scenario(s), s.barrier_timeout)


# -- shipped scenario files ------------------------------------------------------------

SCENARIO_DIR = __import__("pathlib").Path(__file__).resolve().parent.parent / "scenarios"


@pytest.mark.parametrize("path", sorted(SCENARIO_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_scenarios_run_fast_and_clean(path):
    import time

    from peerlace.scenario import load_scenario

    s = load_scenario(path, env={})
    t0 = time.perf_counter()
    m = run_scenario(s)
    assert time.perf_counter() - t0 < 60
    assert not all_invariants(m, s.barrier_timeout)


def test_outputs_carry_no_secrets(tmp_path):
    s = small(crypto="rsa", faults=(FaultEvent("join", 4, 1),), training=TrainingConfig(batch_size=20, max_epochs=2))
    sim = Simulation(s)
    m = sim.run()
    text = emit(m, "csv", tmp_path / "m.csv").read_text() + emit(m, "json", tmp_path / "m.json").read_text()
    assert sim._passwords
    for pw in sim._passwords.values():
        assert pw not in text
    assert "PRIVATE KEY" not in text
    for peer in sim.peers.values():
        secret = peer.member._private_key()
        assert base64.b64encode(secret).decode()[:40] not in text
        assert secret.hex()[:40] not in text
