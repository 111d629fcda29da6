"""Participants: rotatable key pairs, signatures, balances, reputation.

Identity is two-layered on purpose. Internally every participant has a
stable handle (pid); on the ledger only public keys appear. The Directory
maps every key ever activated back to its owner, so signature checks and
"same owner?" questions survive key rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from random import Random
from typing import Optional

from . import toycrypto
from .currency import Money, money

ROLES = ("provider", "consumer", "idp", "broker")

INITIAL_REPUTATION = Fraction(1)

# Fixed linear reputation rule; results are clamped to [0, 1].
REPUTATION_RULES = {
    "dispute_lodged": Fraction(-1, 10),
    "dispute_at_fault": Fraction(-1, 5),
    "contract_completed": Fraction(1, 50),
}


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes
    created_at: int


@dataclass(frozen=True)
class Participant:
    pid: str
    role: str
    keyring: tuple[KeyPair, ...]
    active_index: int
    balance: Money
    reputation: Fraction
    home_broker: Optional[str] = None
    location: Optional[tuple[float, float]] = None

    @property
    def active_key(self) -> KeyPair:
        return self.keyring[self.active_index]

    @property
    def public_key(self) -> bytes:
        return self.active_key.public_key


def sign(key: KeyPair, payload: bytes) -> bytes:
    return toycrypto.sign(key.private_key, payload)


def verify(public_key: bytes, payload: bytes, signature: bytes) -> bool:
    return toycrypto.verify(public_key, payload, signature)


def adjust_reputation(p: Participant, event: str) -> Participant:
    if event not in REPUTATION_RULES:
        raise ValueError(f"unknown reputation event {event!r}")
    raw = p.reputation + REPUTATION_RULES[event]
    clamped = min(Fraction(1), max(Fraction(0), raw))
    return replace(p, reputation=clamped)


class Directory:
    """Registry of participants and of every public key they ever used."""

    def __init__(self, rng: Random):
        self._rng = rng
        self._serial = 0
        self.participants: dict[str, Participant] = {}
        self.by_pubkey: dict[bytes, str] = {}

    def _fresh_keypair(self, now: int) -> KeyPair:
        private, public = toycrypto.generate_keypair(self._rng)
        # The toy scheme makes distinct privates give distinct publics, but
        # the RNG could in principle repeat; identity must stay unambiguous.
        while public in self.by_pubkey:
            private, public = toycrypto.generate_keypair(self._rng)
        return KeyPair(public_key=public, private_key=private, created_at=now)

    def create_participant(
        self,
        role: str,
        initial_balance,
        pid: Optional[str] = None,
        location: Optional[tuple[float, float]] = None,
        now: int = 0,
    ) -> Participant:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        balance = money(initial_balance)
        if balance < 0:
            raise ValueError("initial balance must be non-negative")
        if pid is None:
            self._serial += 1
            pid = f"p{self._serial:03d}"
        if pid in self.participants:
            raise ValueError(f"duplicate participant id {pid!r}")
        key = self._fresh_keypair(now)
        participant = Participant(
            pid=pid,
            role=role,
            keyring=(key,),
            active_index=0,
            balance=balance,
            reputation=INITIAL_REPUTATION,
            home_broker=None,
            location=location,
        )
        self.participants[pid] = participant
        self.by_pubkey[key.public_key] = pid
        return participant

    def rotate_key(self, pid: str, now: int = 0) -> Participant:
        p = self.participants[pid]
        key = self._fresh_keypair(now)
        rotated = replace(p, keyring=p.keyring + (key,), active_index=len(p.keyring))
        self.participants[pid] = rotated
        self.by_pubkey[key.public_key] = pid
        return rotated

    def update(self, p: Participant) -> Participant:
        assert p.pid in self.participants
        self.participants[p.pid] = p
        return p

    def adjust_reputation(self, pid: str, event: str) -> Participant:
        return self.update(adjust_reputation(self.participants[pid], event))

    def get(self, pid: str) -> Participant:
        return self.participants[pid]

    def owner_of(self, public_key: bytes) -> Optional[str]:
        return self.by_pubkey.get(public_key)

    def same_owner(self, pk_a: bytes, pk_b: bytes) -> bool:
        owner = self.by_pubkey.get(pk_a)
        return owner is not None and owner == self.by_pubkey.get(pk_b)

    def identities_snapshot(self) -> dict[str, str]:
        """Hex public key -> pid, for chain export and replay."""
        return {pk.hex(): pid for pk, pid in sorted(self.by_pubkey.items())}
