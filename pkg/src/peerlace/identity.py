"""Peer identity, envelope encryption and the two membership protocols.

Network initialization (every configured peer at once) and new-peer
integration both run over queue messages only. Announcements are canonical
JSON (sorted keys, no whitespace) signed over their UTF-8 bytes; store
passwords always travel encrypted under the recipient's public key.

Two crypto providers ship: :class:`RsaProvider` (RSA-2048, PSS signatures,
OAEP encryption, deterministic key generation from a seeded rng) and
:class:`FakeProvider`, a fast hash-based stand-in for protocol tests.
"""

from __future__ import annotations

import base64
import functools
import hashlib
import hmac
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Protocol

import gmpy2
import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .msgqueue import QueueService
from .peerstore import PeerStore, StoreAddress


class IntegrityError(Exception):
    """Wrapped data failed authentication (wrong KMS key or tampering)."""


class DecryptionError(Exception):
    pass


class RankCollisionError(ValueError):
    pass


def canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


# -- KMS analog ----------------------------------------------------------------


@dataclass(frozen=True)
class KmsKey:
    key_id: str
    secret: bytes = field(repr=False)

    @classmethod
    def create(cls, key_id: str, rng: np.random.Generator) -> "KmsKey":
        return cls(key_id, rng.bytes(32))


def kms_wrap(kms: KmsKey, plaintext: bytes) -> bytes:
    nonce = os.urandom(12)
    return nonce + AESGCM(kms.secret).encrypt(nonce, plaintext, kms.key_id.encode())


def kms_unwrap(kms: KmsKey, ciphertext: bytes) -> bytes:
    if len(ciphertext) < 12 + 16:
        raise IntegrityError("wrapped blob too short")
    try:
        return AESGCM(kms.secret).decrypt(ciphertext[:12], ciphertext[12:], kms.key_id.encode())
    except InvalidTag:
        raise IntegrityError(f"cannot unwrap with KMS key {kms.key_id!r}") from None


# -- crypto providers ------------------------------------------------------------


class CryptoProvider(Protocol):
    name: str

    def generate(self, rng: np.random.Generator) -> tuple[bytes, bytes]:
        """Return ``(private_key_bytes, public_key_bytes)``."""

    def sign(self, private_key: bytes, message: bytes) -> bytes: ...

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool: ...

    def encrypt(self, public_key: bytes, message: bytes) -> bytes: ...

    def decrypt(self, private_key: bytes, ciphertext: bytes) -> bytes: ...


def _random_prime(rng: np.random.Generator, bits: int, e: int) -> int:
    while True:
        candidate = int.from_bytes(rng.bytes(bits // 8), "big")
        # top two bits set so the product of two such primes has exactly 2*bits bits
        candidate |= (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(candidate))
        if p.bit_length() == bits and gmpy2.gcd(e, p - 1) == 1:
            return p


@functools.lru_cache(maxsize=256)
def _load_private(der: bytes):
    return serialization.load_der_private_key(der, password=None)


@functools.lru_cache(maxsize=256)
def _load_public(der: bytes):
    return serialization.load_der_public_key(der)


class RsaProvider:
    name = "rsa"
    bits = 2048
    public_exponent = 65537

    _pss = padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=padding.PSS.MAX_LENGTH)
    _oaep = padding.OAEP(mgf=padding.MGF1(hashes.SHA256()), algorithm=hashes.SHA256(), label=None)

    def generate(self, rng):
        e = self.public_exponent
        half = self.bits // 2
        p = _random_prime(rng, half, e)
        q = _random_prime(rng, half, e)
        while q == p:
            q = _random_prime(rng, half, e)
        d = pow(e, -1, (p - 1) * (q - 1))
        numbers = rsa.RSAPrivateNumbers(
            p=p, q=q, d=d,
            dmp1=rsa.rsa_crt_dmp1(d, p),
            dmq1=rsa.rsa_crt_dmq1(d, q),
            iqmp=rsa.rsa_crt_iqmp(p, q),
            public_numbers=rsa.RSAPublicNumbers(e, p * q),
        )
        key = numbers.private_key()
        private = key.private_bytes(
            serialization.Encoding.DER, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
        )
        public = key.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        )
        return private, public

    def sign(self, private_key, message):
        return _load_private(private_key).sign(message, self._pss, hashes.SHA256())

    def verify(self, public_key, message, signature):
        try:
            _load_public(public_key).verify(signature, message, self._pss, hashes.SHA256())
        except (InvalidSignature, ValueError):
            return False
        return True

    def encrypt(self, public_key, message):
        return _load_public(public_key).encrypt(message, self._oaep)

    def decrypt(self, private_key, ciphertext):
        try:
            return _load_private(private_key).decrypt(ciphertext, self._oaep)
        except ValueError:
            raise DecryptionError("RSA-OAEP decryption failed") from None


class FakeProvider:
    """Hash-based stand-in with the same interface. Offers no real security."""

    name = "fake"
    _prefix = b"fake-pub:"

    def _public_of(self, private_key: bytes) -> bytes:
        return self._prefix + hashlib.sha256(private_key).digest()

    def _keystream(self, public_key: bytes, nonce: bytes, length: int) -> bytes:
        out = b""
        counter = 0
        while len(out) < length:
            out += hashlib.sha256(public_key + nonce + counter.to_bytes(4, "big")).digest()
            counter += 1
        return out[:length]

    def generate(self, rng):
        private = rng.bytes(32)
        return private, self._public_of(private)

    def sign(self, private_key, message):
        return hmac.new(self._public_of(private_key), message, hashlib.sha256).digest()

    def verify(self, public_key, message, signature):
        expected = hmac.new(public_key, message, hashlib.sha256).digest()
        return hmac.compare_digest(expected, signature)

    def encrypt(self, public_key, message):
        nonce = os.urandom(16)
        body = bytes(a ^ b for a, b in zip(message, self._keystream(public_key, nonce, len(message))))
        tag = hmac.new(public_key, nonce + body, hashlib.sha256).digest()
        return nonce + tag + body

    def decrypt(self, private_key, ciphertext):
        if len(ciphertext) < 48:
            raise DecryptionError("ciphertext too short")
        public = self._public_of(private_key)
        nonce, tag, body = ciphertext[:16], ciphertext[16:48], ciphertext[48:]
        if not hmac.compare_digest(tag, hmac.new(public, nonce + body, hashlib.sha256).digest()):
            raise DecryptionError("authentication tag mismatch")
        return bytes(a ^ b for a, b in zip(body, self._keystream(public, nonce, len(body))))


PROVIDERS = {"rsa": RsaProvider, "fake": FakeProvider}


def get_provider(name: str) -> CryptoProvider:
    try:
        return PROVIDERS[name]()
    except KeyError:
        raise ValueError(f"unknown crypto provider {name!r}; choose from {sorted(PROVIDERS)}") from None


# -- key pairs -------------------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key_wrapped: bytes = field(repr=False)
    kms_key_id: str = ""


def generate_keypair(kms: KmsKey, rng: np.random.Generator, provider: CryptoProvider) -> KeyPair:
    private, public = provider.generate(rng)
    return KeyPair(public, kms_wrap(kms, private), kms.key_id)


def unwrap_private(keypair: KeyPair, kms: KmsKey) -> bytes:
    return kms_unwrap(kms, keypair.private_key_wrapped)


def sign(provider: CryptoProvider, private_key: bytes, message: bytes) -> bytes:
    return provider.sign(private_key, message)


def verify(provider: CryptoProvider, public_key: bytes, message: bytes, signature: bytes) -> bool:
    return provider.verify(public_key, message, signature)


def encrypt_for(provider: CryptoProvider, public_key: bytes, message: bytes) -> bytes:
    return provider.encrypt(public_key, message)


def decrypt(provider: CryptoProvider, private_key: bytes, ciphertext: bytes) -> bytes:
    return provider.decrypt(private_key, ciphertext)


# -- records and announcements -------------------------------------------------


@dataclass(frozen=True)
class PeerRecord:
    rank: int
    store_address: StoreAddress
    public_key: bytes
    encrypted_store_password: bytes = field(repr=False)
    passwords_queue_name: str
    join_queue_name: str

    def to_json(self) -> dict:
        return {
            "rank": self.rank,
            "store_host": self.store_address.host,
            "store_port": self.store_address.port,
            "public_key": b64(self.public_key),
            "enc_password": b64(self.encrypted_store_password),
            "passwords_queue": self.passwords_queue_name,
            "join_queue": self.join_queue_name,
        }


ANNOUNCEMENT_FIELDS = ("rank", "public_key", "store_host", "store_port", "passwords_queue", "join_queue")


@dataclass(frozen=True)
class JoinAnnouncement:
    sender_rank: int
    public_key: bytes
    store_address: StoreAddress
    passwords_queue_name: str
    join_queue_name: str
    signature: bytes
    encrypted_password: bytes | None = None

    def signed_part(self) -> dict:
        return {
            "rank": self.sender_rank,
            "public_key": b64(self.public_key),
            "store_host": self.store_address.host,
            "store_port": self.store_address.port,
            "passwords_queue": self.passwords_queue_name,
            "join_queue": self.join_queue_name,
        }

    def to_json(self) -> dict:
        doc = self.signed_part()
        doc["sig"] = b64(self.signature)
        if self.encrypted_password is not None:
            doc["enc_password"] = b64(self.encrypted_password)
        return doc

    def encode(self) -> bytes:
        return canonical(self.to_json())

    @classmethod
    def decode(cls, payload: bytes) -> "JoinAnnouncement":
        doc = json.loads(payload.decode("utf-8"))
        allowed = set(ANNOUNCEMENT_FIELDS) | {"sig", "enc_password"}
        if set(doc) - allowed or not set(ANNOUNCEMENT_FIELDS) | {"sig"} <= set(doc):
            raise ValueError(f"malformed announcement fields: {sorted(doc)}")
        enc = doc.get("enc_password")
        return cls(
            sender_rank=int(doc["rank"]),
            public_key=unb64(doc["public_key"]),
            store_address=StoreAddress(str(doc["store_host"]), int(doc["store_port"])),
            passwords_queue_name=str(doc["passwords_queue"]),
            join_queue_name=str(doc["join_queue"]),
            signature=unb64(doc["sig"]),
            encrypted_password=unb64(enc) if enc is not None else None,
        )

    def verify(self, provider: CryptoProvider) -> bool:
        return provider.verify(self.public_key, canonical(self.signed_part()), self.signature)


def _password_reply(member: "Member", recipient_rank: int, recipient_public_key: bytes) -> bytes:
    """Signed reply carrying the sender's details and its password encrypted for the recipient."""
    enc = member.provider.encrypt(recipient_public_key, member.own_password().encode())
    body = {**member.announcement_core().signed_part(), "to": recipient_rank, "enc_password": b64(enc)}
    return canonical({**body, "sig": b64(member.sign(canonical(body)))})


def _open_reply(
    provider: CryptoProvider, payload: bytes, public_key: bytes, recipient_rank: int
) -> tuple[JoinAnnouncement, bytes] | None:
    doc = json.loads(payload.decode("utf-8"))
    try:
        body = {k: doc[k] for k in (*ANNOUNCEMENT_FIELDS, "to", "enc_password")}
        sig = unb64(doc["sig"])
    except KeyError:
        return None
    if unb64(body["public_key"]) != public_key or body["to"] != recipient_rank:
        return None
    if not provider.verify(public_key, canonical(body), sig):
        return None
    ann = JoinAnnouncement(
        int(body["rank"]),
        public_key,
        StoreAddress(str(body["store_host"]), int(body["store_port"])),
        str(body["passwords_queue"]),
        str(body["join_queue"]),
        sig,
    )
    return ann, unb64(body["enc_password"])


# -- peers -----------------------------------------------------------------------


class Member:
    """A peer's identity: keys, store credentials and its trusted-peer table.

    The private key and the store password only exist wrapped under the
    peer's KMS key; they are unwrapped on demand and never logged.
    """

    def __init__(
        self,
        rank: int,
        store: PeerStore,
        password: str,
        kms: KmsKey,
        rng: np.random.Generator,
        provider: CryptoProvider,
    ):
        self.rank = rank
        self.store = store
        self.kms = kms
        self.provider = provider
        self.keypair = generate_keypair(kms, rng, provider)
        self._password_wrapped = kms_wrap(kms, password.encode())
        self.join_queue = f"join-requests-{rank}"
        self.passwords_queue = f"db-passwords-{rank}"
        self.trusted: dict[int, PeerRecord] = {}
        # provisioned by the admin for the join flow: rank -> (public key, join queue)
        self.introductions: dict[int, tuple[bytes, str]] = {}
        self._verified: dict[int, JoinAnnouncement] = {}
        self._password_cache: dict[int, str] = {}
        store.put_record(password, "identity/public_key", b64(self.keypair.public_key))
        store.put_record(password, "identity/private_key_wrapped", b64(self.keypair.private_key_wrapped))

    def __repr__(self) -> str:
        return f"Member(rank={self.rank}, trusted={sorted(self.trusted)})"

    @property
    def address(self) -> StoreAddress:
        return self.store.address

    @property
    def public_key(self) -> bytes:
        return self.keypair.public_key

    def own_password(self) -> str:
        return kms_unwrap(self.kms, self._password_wrapped).decode()

    def _private_key(self) -> bytes:
        return unwrap_private(self.keypair, self.kms)

    def sign(self, message: bytes) -> bytes:
        return self.provider.sign(self._private_key(), message)

    def decrypt(self, ciphertext: bytes) -> bytes:
        return self.provider.decrypt(self._private_key(), ciphertext)

    def password_for(self, rank: int) -> str:
        if rank == self.rank:
            return self.own_password()
        if rank not in self._password_cache:
            record = self.trusted[rank]
            self._password_cache[rank] = self.decrypt(record.encrypted_store_password).decode()
        return self._password_cache[rank]

    def announcement_core(self) -> JoinAnnouncement:
        return JoinAnnouncement(self.rank, self.public_key, self.address, self.passwords_queue, self.join_queue, b"")

    def announcement(self, recipient_public_key: bytes | None = None) -> JoinAnnouncement:
        unsigned = self.announcement_core()
        enc = None
        if recipient_public_key is not None:
            enc = self.provider.encrypt(recipient_public_key, self.own_password().encode())
        return JoinAnnouncement(
            unsigned.sender_rank,
            unsigned.public_key,
            unsigned.store_address,
            unsigned.passwords_queue_name,
            unsigned.join_queue_name,
            self.sign(canonical(unsigned.signed_part())),
            enc,
        )

    def trust(self, ann: JoinAnnouncement, encrypted_password: bytes) -> None:
        record = PeerRecord(
            ann.sender_rank,
            ann.store_address,
            ann.public_key,
            encrypted_password,
            ann.passwords_queue_name,
            ann.join_queue_name,
        )
        self.trusted[ann.sender_rank] = record
        self._password_cache.pop(ann.sender_rank, None)
        self.store.put_record(self.own_password(), f"peers/{ann.sender_rank}", record.to_json())

    def forget(self, ranks: Iterable[int]) -> None:
        for r in ranks:
            self.trusted.pop(r, None)
            self._password_cache.pop(r, None)


def provision_members(
    ranks: Iterable[int],
    stores: dict[int, PeerStore],
    passwords: dict[int, str],
    rng_for,
    provider: CryptoProvider,
) -> dict[int, Member]:
    """Admin step 1: hand every peer its KMS key, rank and store; each generates its key pair.

    ``rng_for(rank, label)`` returns an independent seeded generator.
    """
    members = {}
    for r in ranks:
        kms = KmsKey.create(f"kms-{r}", rng_for(r, "kms"))
        members[r] = Member(r, stores[r], passwords[r], kms, rng_for(r, "keys"), provider)
    return members


@dataclass
class InitReport:
    rejected: dict[int, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.rejected


def init_network(members: Iterable[Member], queues: QueueService) -> InitReport:
    """Mutual authentication of all configured peers.

    Each peer broadcasts a signed announcement into every other peer's
    join-requests queue, verifies what it receives, then exchanges encrypted
    store passwords with every peer it verified. A peer is trusted once both
    its announcement and its password reply have been verified.
    """
    members = list(members)
    if len(members) < 2:
        raise ValueError("network initialization needs at least two peers")
    ranks = [m.rank for m in members]
    if len(set(ranks)) != len(ranks):
        raise RankCollisionError(f"duplicate ranks in configuration: {sorted(ranks)}")
    report = InitReport()

    for m in members:
        payload = m.announcement().encode()
        for other in members:
            if other is not m:
                queues[other.join_queue].send(m.rank, payload)

    for m in members:
        for msg in queues[m.join_queue].drain():
            try:
                ann = JoinAnnouncement.decode(msg.payload)
            except ValueError as exc:
                report.rejected[msg.sender_rank] = f"malformed announcement: {exc}"
                continue
            if ann.verify(m.provider) and ann.sender_rank == msg.sender_rank:
                m._verified[ann.sender_rank] = ann
            else:
                report.rejected[msg.sender_rank] = f"signature check failed at peer {m.rank}"

    for m in members:
        for r, ann in sorted(m._verified.items()):
            queues[ann.passwords_queue_name].send(m.rank, _password_reply(m, r, ann.public_key))

    for m in members:
        for msg in queues[m.passwords_queue].drain():
            ann = m._verified.get(msg.sender_rank)
            if ann is None:
                continue
            opened = _open_reply(m.provider, msg.payload, ann.public_key, m.rank)
            if opened is None or opened[0].sender_rank != msg.sender_rank:
                report.rejected.setdefault(msg.sender_rank, f"password reply rejected by peer {m.rank}")
                continue
            m.trust(ann, opened[1])
    return report


@dataclass
class JoinReport:
    accepted: bool
    latency_ticks: int = 0
    reason: str = ""
    already_member: bool = False


JOIN_ROUNDS = 4  # announce, validate, reply, record


def join_network(new: Member, existing: Iterable[Member], queues: QueueService) -> JoinReport:
    """Integrate ``new`` into a running network of ``existing`` peers.

    ``new.introductions`` must hold the admin-provisioned public key and
    join queue of every existing peer. Validation verdicts from all
    existing peers are collected before anyone commits, so a rejected
    newcomer is added nowhere.
    """
    existing = [m for m in existing if m is not new]
    missing = [m.rank for m in existing if m.rank not in new.introductions]
    if missing:
        raise ValueError(f"new peer {new.rank} was not provisioned with ranks {missing}")

    # step 2: signed announcement, password encrypted for each recipient
    for m in existing:
        pub, join_q = new.introductions[m.rank]
        queues[join_q].send(new.rank, new.announcement(recipient_public_key=pub).encode())

    # step 3: every existing peer validates before anyone commits
    verdicts: list[tuple[Member, JoinAnnouncement]] = []
    duplicates = 0
    for m in existing:
        for msg in queues[m.join_queue].drain():
            ann = JoinAnnouncement.decode(msg.payload)
            if not ann.verify(m.provider) or ann.encrypted_password is None:
                for other in existing:
                    queues[other.join_queue].purge()
                return JoinReport(False, reason=f"peer {m.rank} rejected the signature of rank {ann.sender_rank}")
            known = m.trusted.get(ann.sender_rank)
            if known is not None and known.public_key == ann.public_key:
                duplicates += 1
                continue
            if ann.sender_rank == m.rank or known is not None:
                raise RankCollisionError(f"rank {ann.sender_rank} is already taken in the network")
            verdicts.append((m, ann))
    if duplicates == len(existing):
        return JoinReport(True, reason="already a member", already_member=True)

    # step 4: replies into the newcomer's passwords queue; existing peers record the newcomer
    for m, ann in verdicts:
        queues[new.passwords_queue].send(m.rank, _password_reply(m, new.rank, new.public_key))
        m.trust(ann, ann.encrypted_password)

    # step 5: the newcomer validates the replies and records its new neighbours
    for msg in queues[new.passwords_queue].drain():
        intro = new.introductions.get(msg.sender_rank)
        opened = None if intro is None else _open_reply(new.provider, msg.payload, intro[0], new.rank)
        if opened is None or opened[0].sender_rank != msg.sender_rank:
            continue
        new.trust(*opened)
    return JoinReport(True, JOIN_ROUNDS)
