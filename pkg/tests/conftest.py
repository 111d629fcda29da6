"""Shared fixtures: a small on-ledger world for contract and ledger tests.

The World helper wires a key directory and a ledger together the same way the
harness does, but with hand-picked ids so tests can submit individual signed
calls and inspect single execution records.

This file also collects the outcome of every test_criterion_NN test and
prints one PASS/FAIL line per criterion at the end of the session.
"""

import random
import re

import pytest

from iotmarket import contracts, identity
from iotmarket.ledger import DEPLOY_TARGET, Ledger, contract_address, make_transaction

CRITERION_TITLES = {
    1: "month-long lifecycle settles 1488 units exactly and refunds deposits",
    2: "tampered counter in window k pays k-1 windows then freezes escrow",
    3: "broker match output equals the brute-force predicate scan",
    4: "funds conserve to zero every tick across a 50-contract fault mix",
    5: "crashing 1 of 3 brokers mid-run leaves contract outcomes unchanged",
    6: "repeated runs produce byte-identical chains and metrics",
    7: "exported chains replay to the recorded state digests",
    8: "doctored match rounds are flagged on chain in the same round",
    9: "negotiations terminate within bounds at admissible prices",
}

_criterion_results = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    num = int(m.group(1))
    if report.failed:
        _criterion_results[num] = "FAIL"
    elif report.when == "call" and report.passed:
        # a parametrized case that already failed keeps its FAIL mark
        _criterion_results.setdefault(num, "PASS")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    seen = [n for n in sorted(CRITERION_TITLES) if n in _criterion_results]
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for num in seen:
        outcome = _criterion_results[num]
        terminalreporter.write_line(f"criterion {num}: {outcome} - {CRITERION_TITLES[num]}")

# One month of minute ticks, 30-minute sampling, settled every 100 units.
TERMS = {
    "device_id": 1,
    "data_type": "Temperature",
    "start_time": 60,
    "end_time": 44700,
    "measurement_frequency": 30,
    "cost": "0.02",
    "payment_granularity_n": 100,
}

DEPOSIT = "2.1"  # floor for TERMS with the default 0.1 broker fee


class World:
    def __init__(self, balances=None, total_brokers=1, seed=2024):
        self.directory = identity.Directory(random.Random(seed))
        if balances is None:
            balances = {
                "prov": ("provider", "10"),
                "cons": ("consumer", "100"),
                "b1": ("broker", "0"),
            }
        self.roles = {pid: role for pid, (role, _) in balances.items()}
        for pid, (role, bal) in balances.items():
            self.directory.create_participant(role, bal, pid=pid)
        self.ledger = Ledger(
            {pid: bal for pid, (_, bal) in balances.items()},
            self.directory.identities_snapshot(),
            total_brokers,
        )

    def key(self, pid):
        return self.directory.get(pid).active_key

    def pk_hex(self, pid):
        return self.key(pid).public_key.hex()

    def tx(self, pid, target, abi, args, t=0, nonce=None):
        key = self.key(pid)
        if nonce is None:
            nonce = self.ledger.next_nonce(key.public_key)
        return make_transaction(key, target, abi, args, nonce, t)

    def submit(self, pid, target, abi, args, t=0, nonce=None):
        return self.ledger.submit_transaction(self.tx(pid, target, abi, args, t, nonce))

    def seal(self, t=0, live=("b1",), hook=None):
        return self.ledger.seal_block(list(live), t, challenge_hook=hook)

    def call(self, pid, target, abi, args, t=0):
        """Submit one call and seal immediately; returns its ExecRecord."""
        receipt = self.submit(pid, target, abi, args, t)
        assert receipt.accepted, f"submission rejected: {receipt.reason}"
        block, records = self.seal(t)
        assert block is not None, "seal deferred below quorum"
        return records[-1]


@pytest.fixture
def world():
    return World()


def deploy_dsc(world, window=3000, fee="0.1", t=0, provider="prov", consumer="cons"):
    prov_pk = world.key(provider).public_key
    expected = contract_address(prov_pk, world.ledger.next_nonce(prov_pk))
    args = [world.pk_hex(provider), world.pk_hex(consumer), "b1", fee, window]
    rec = world.call(provider, DEPLOY_TARGET, "dsc", args, t)
    assert rec.status == "ok", rec.reason
    assert rec.value["address"] == expected
    return rec.value["address"]


def cosign(world, address, terms, dep_p, dep_c, consumer="cons"):
    payload = contracts.cosign_payload(address, terms, dep_p, dep_c)
    return identity.sign(world.key(consumer), payload).hex()


def create_sub(world, address, terms=None, deposits=(DEPOSIT, DEPOSIT), t=0):
    terms = dict(TERMS) if terms is None else terms
    sig = cosign(world, address, terms, deposits[0], deposits[1])
    return world.call("prov", address, "CreateContract", [terms, deposits[0], deposits[1], sig], t)


def activate_sub(world, address, sub_index=0, t=60, key_hex="ab" * 16):
    return world.call("prov", address, "ExecuteContract", [sub_index, key_hex], t)
