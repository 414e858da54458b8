import numpy as np
import pytest

from peerlace.faults import (
    AttackSpec,
    FaultConfigError,
    FaultEvent,
    FaultInjector,
    apply_faults,
    gaussian_noise,
    sign_flip,
)
from peerlace.tensor import ContractViolation


def test_sign_flip_examples():
    np.testing.assert_array_equal(sign_flip([1.0, -2.0], 10), [-10.0, 20.0])
    np.testing.assert_array_equal(sign_flip([1.0, -2.0], 1), [-1.0, 2.0])
    g = np.array([0.5, 3.0])
    np.testing.assert_array_equal(sign_flip(sign_flip(g, 10), 10), 100 * g)
    with pytest.raises(ContractViolation):
        sign_flip(g, 0)


def test_noise_identity_and_seeded():
    g = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(gaussian_noise(g, 0.0, np.random.default_rng(0)), g)
    a = gaussian_noise(g, 1.0, np.random.default_rng(3))
    b = gaussian_noise(g, 1.0, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ContractViolation):
        gaussian_noise(g, -1, np.random.default_rng(0))


def test_noise_mean_is_zero():
    sigma = 2.0
    g = np.zeros(10**5)
    eta = gaussian_noise(g, sigma, np.random.default_rng(11)) - g
    assert abs(eta.mean()) <= 3 * sigma / np.sqrt(10**5)
    assert eta.std() == pytest.approx(sigma, rel=0.02)


def test_attack_spec():
    spec = AttackSpec("signflip", epsilon=10, malicious_ranks={3})
    assert spec.targets(3) and not spec.targets(0)
    assert not AttackSpec("none", malicious_ranks={3}).targets(3)
    np.testing.assert_array_equal(spec.apply(np.ones(2), np.random.default_rng(0)), [-10.0, -10.0])
    with pytest.raises(FaultConfigError):
        AttackSpec("krum")
    with pytest.raises(FaultConfigError):
        AttackSpec("signflip", epsilon=-1)


def test_fault_event_validation():
    with pytest.raises(FaultConfigError):
        FaultEvent("crash", 1, 0)
    with pytest.raises(FaultConfigError):
        FaultEvent("explode", 1, 1)
    with pytest.raises(FaultConfigError):
        FaultEvent("crash", 1, 1, "whenever")


def test_injector_queries():
    inj = FaultInjector(
        [FaultEvent("crash", 2, 2), FaultEvent("crash", 1, 2, "epoch_start"), FaultEvent("join", 4, 5)], range(4)
    )
    assert inj.crashes(2, "post_heartbeat") == [2]
    assert inj.crashes(2, "epoch_start") == [1]
    assert inj.crashes(3, "post_heartbeat") == []
    assert inj.joins_after(5) == [4]


def test_injector_rejects_unknown_and_colliding_ranks():
    with pytest.raises(FaultConfigError):
        FaultInjector([FaultEvent("crash", 9, 2)], range(4))
    with pytest.raises(FaultConfigError):
        FaultInjector([FaultEvent("join", 2, 2)], range(4))
    FaultInjector([FaultEvent("join", 4, 2), FaultEvent("crash", 4, 3)], range(4))


def test_apply_faults_installs_injector():
    class Sim:
        initial_ranks = [0, 1]

    sim = Sim()
    inj = apply_faults([FaultEvent("crash", 1, 1)], sim)
    assert sim.injector is inj
    with pytest.raises(FaultConfigError):
        apply_faults([FaultEvent("crash", 5, 1)], sim)
