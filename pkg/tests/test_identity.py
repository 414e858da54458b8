import base64

import numpy as np
import pytest

from peerlace.identity import (
    DecryptionError,
    IntegrityError,
    JoinAnnouncement,
    KmsKey,
    RankCollisionError,
    canonical,
    generate_keypair,
    get_provider,
    init_network,
    join_network,
    kms_unwrap,
    kms_wrap,
    provision_members,
    unwrap_private,
)
from peerlace.msgqueue import QueueService
from peerlace.peerstore import PeerStore, StoreAddress

PROVIDERS = ["rsa", "fake"]


def rng(*label):
    return np.random.default_rng([ord(c) for c in repr(label)])


def make_members(ranks, provider, prefix="pw"):
    stores = {r: PeerStore(StoreAddress(f"10.0.0.{r + 10}", 6379), f"{prefix}-{r}") for r in ranks}
    passwords = {r: f"{prefix}-{r}" for r in ranks}
    return provision_members(ranks, stores, passwords, lambda r, label: rng(prefix, r, label), get_provider(provider))


def network(ranks, provider):
    members = make_members(ranks, provider)
    queues = QueueService()
    report = init_network(members.values(), queues)
    return members, queues, report


def newcomer(rank, existing, provider):
    m = make_members([rank], provider)[rank]
    m.introductions = {r: (e.public_key, e.join_queue) for r, e in existing.items()}
    return m


# -- primitives --------------------------------------------------------------------


def test_kms_round_trip_and_fresh_nonce():
    kms = KmsKey.create("k", rng("kms"))
    a, b = kms_wrap(kms, b"secret"), kms_wrap(kms, b"secret")
    assert a != b
    assert kms_unwrap(kms, a) == kms_unwrap(kms, b) == b"secret"


def test_kms_tamper_and_wrong_key():
    kms = KmsKey.create("k", rng("kms"))
    blob = bytearray(kms_wrap(kms, b"secret"))
    blob[20] ^= 1
    with pytest.raises(IntegrityError):
        kms_unwrap(kms, bytes(blob))
    with pytest.raises(IntegrityError):
        kms_unwrap(KmsKey.create("k2", rng("other")), kms_wrap(kms, b"secret"))
    with pytest.raises(IntegrityError):
        kms_unwrap(kms, b"short")


def test_kms_secret_not_in_repr():
    kms = KmsKey.create("k", rng("kms"))
    assert kms.secret.hex() not in repr(kms)


@pytest.mark.parametrize("name", PROVIDERS)
def test_sign_verify(name):
    p = get_provider(name)
    kms = KmsKey.create("k", rng("kms"))
    kp = generate_keypair(kms, rng("keys"), p)
    other = generate_keypair(kms, rng("keys2"), p)
    priv = unwrap_private(kp, kms)
    sig = p.sign(priv, b"message")
    assert p.verify(kp.public_key, b"message", sig)
    assert not p.verify(kp.public_key, b"messagf", sig)
    assert not p.verify(other.public_key, b"message", sig)
    assert not p.verify(kp.public_key, b"message", b"\x00" * len(sig))


@pytest.mark.parametrize("name", PROVIDERS)
def test_keypair_deterministic_and_wrapped(name):
    p = get_provider(name)
    kms = KmsKey.create("k", rng("kms"))
    a = generate_keypair(kms, rng("same"), p)
    b = generate_keypair(kms, rng("same"), p)
    assert a.public_key == b.public_key
    assert unwrap_private(a, kms) == unwrap_private(b, kms)
    assert unwrap_private(a, kms) not in a.private_key_wrapped
    with pytest.raises(IntegrityError):
        unwrap_private(a, KmsKey.create("k", rng("wrong")))


@pytest.mark.parametrize("name", PROVIDERS)
def test_encrypt_decrypt(name):
    p = get_provider(name)
    kms = KmsKey.create("k", rng("kms"))
    kp = generate_keypair(kms, rng("a"), p)
    other = generate_keypair(kms, rng("b"), p)
    ct = p.encrypt(kp.public_key, b"store password")
    assert p.decrypt(unwrap_private(kp, kms), ct) == b"store password"
    with pytest.raises(DecryptionError):
        p.decrypt(unwrap_private(other, kms), ct)
    bad = bytearray(ct)
    bad[-1] ^= 1
    with pytest.raises(DecryptionError):
        p.decrypt(unwrap_private(kp, kms), bytes(bad))


def test_rsa_key_size():
    from cryptography.hazmat.primitives import serialization

    kp = generate_keypair(KmsKey.create("k", rng("kms")), rng("size"), get_provider("rsa"))
    assert serialization.load_der_public_key(kp.public_key).key_size == 2048


def test_unknown_provider():
    with pytest.raises(ValueError):
        get_provider("dsa")


# -- announcements -----------------------------------------------------------------


@pytest.mark.parametrize("name", PROVIDERS)
def test_announcement_schema_and_canonical_signature(name):
    m = make_members([0], name)[0]
    ann = m.announcement()
    doc = ann.to_json()
    assert set(doc) == {"rank", "public_key", "store_host", "store_port", "passwords_queue", "join_queue", "sig"}
    assert isinstance(doc["rank"], int) and isinstance(doc["store_port"], int)
    assert ann.encode() == canonical(doc)
    assert JoinAnnouncement.decode(ann.encode()).verify(m.provider)
    tampered = dict(doc, store_port=1)
    assert not JoinAnnouncement.decode(canonical(tampered)).verify(m.provider)
    with_pw = m.announcement(recipient_public_key=m.public_key).to_json()
    assert "enc_password" in with_pw


def test_malformed_announcement():
    with pytest.raises(ValueError):
        JoinAnnouncement.decode(b"{not json")
    with pytest.raises(ValueError):
        JoinAnnouncement.decode(canonical({"rank": 1}))


# -- init_network ------------------------------------------------------------------


@pytest.mark.parametrize("name", PROVIDERS)
def test_two_peer_init(name):
    members, _, report = network([0, 1], name)
    assert report.ok
    assert set(members[0].trusted) == {1} and set(members[1].trusted) == {0}
    # mutual store access with the exchanged password
    other = members[1].trusted[0]
    assert other.store_address == members[0].address
    members[0].store.put_tensor(members[0].own_password(), "x", [1.0])
    np.testing.assert_array_equal(members[0].store.get_tensor(members[1].password_for(0), "x"), [1.0])


@pytest.mark.parametrize("name", PROVIDERS)
def test_four_peer_init_closure(name):
    members, _, report = network([0, 1, 2, 3], name)
    assert report.ok
    for r, m in members.items():
        assert set(m.trusted) == {0, 1, 2, 3} - {r}
        for o in m.trusted:
            assert r in members[o].trusted
            assert m.password_for(o) == members[o].own_password()
            rec = m.store.get_record(m.own_password(), f"peers/{o}")
            assert rec["rank"] == o


@pytest.mark.parametrize("name", PROVIDERS)
def test_corrupt_signature_excluded(name):
    members = make_members([0, 1, 2], name)
    bad = members[2]
    bad.sign = lambda message: b"\x01" * 256
    report = init_network(members.values(), QueueService())
    assert not report.ok and 2 in report.rejected
    for r in (0, 1):
        assert 2 not in members[r].trusted
        assert set(members[r].trusted) == {0, 1} - {r}
    assert bad.trusted == {}


def test_init_needs_two_peers_and_unique_ranks():
    members = make_members([0], "fake")
    with pytest.raises(ValueError):
        init_network(members.values(), QueueService())
    a = make_members([0], "fake")[0]
    b = make_members([0], "fake")[0]
    with pytest.raises(RankCollisionError):
        init_network([a, b], QueueService())


# -- join_network ------------------------------------------------------------------


@pytest.mark.parametrize("name", PROVIDERS)
def test_join_two_plus_one(name):
    members, queues, _ = network([0, 1], name)
    new = newcomer(2, members, name)
    report = join_network(new, members.values(), queues)
    assert report.accepted and report.latency_ticks > 0
    everyone = {**members, 2: new}
    for r, m in everyone.items():
        assert set(m.trusted) == {0, 1, 2} - {r}
        for o in m.trusted:
            assert m.password_for(o) == everyone[o].own_password()


@pytest.mark.parametrize("name", PROVIDERS)
def test_join_bad_signature_changes_nothing(name):
    members, queues, _ = network([0, 1], name)
    new = newcomer(2, members, name)
    new.sign = lambda message: b"\x02" * 256
    before = {r: dict(m.trusted) for r, m in members.items()}
    report = join_network(new, members.values(), queues)
    assert not report.accepted
    assert {r: dict(m.trusted) for r, m in members.items()} == before
    assert new.trusted == {}
    assert all(queues[m.join_queue].count() == 0 for m in members.values())


def test_join_is_idempotent():
    members, queues, _ = network([0, 1], "fake")
    new = newcomer(2, members, "fake")
    assert join_network(new, members.values(), queues).accepted
    snapshot = {r: sorted(m.trusted) for r, m in members.items()}
    again = join_network(new, members.values(), queues)
    assert again.accepted and again.already_member
    assert {r: sorted(m.trusted) for r, m in members.items()} == snapshot


def test_join_rank_collision():
    members, queues, _ = network([0, 1], "fake")
    impostor = make_members([1], "fake", prefix="other")[1]
    impostor.introductions = {0: (members[0].public_key, members[0].join_queue)}
    with pytest.raises(RankCollisionError):
        join_network(impostor, [members[0]], queues)


def test_join_requires_introductions():
    members, queues, _ = network([0, 1], "fake")
    new = make_members([2], "fake")[2]
    with pytest.raises(ValueError):
        join_network(new, members.values(), queues)


def test_forget_drops_peer():
    members, _, _ = network([0, 1, 2], "fake")
    members[0].forget([2])
    assert set(members[0].trusted) == {1}
    with pytest.raises(KeyError):
        members[0].password_for(2)


# -- secrets never leak --------------------------------------------------------------


@pytest.mark.parametrize("name", PROVIDERS)
def test_private_material_not_exposed(name, caplog):
    caplog.set_level("DEBUG")
    members, queues, _ = network([0, 1, 2], name)
    blobs = []
    for m in members.values():
        blobs.append(repr(m).encode())
        for key in m.store.record_keys(m.own_password()):
            blobs.append(canonical(m.store.get_record(m.own_password(), key)))
        for o in m.trusted:
            blobs.append(repr(m.trusted[o]).encode())
            blobs.append(canonical(m.trusted[o].to_json()))
    blobs.append(caplog.text.encode())
    haystack = b"\n".join(blobs)
    for m in members.values():
        assert m.own_password().encode() not in haystack
        assert m._private_key() not in haystack
        assert m.kms.secret not in haystack
        assert base64.b64encode(m._private_key()) not in haystack
