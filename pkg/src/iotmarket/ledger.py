"""Permissioned replicated log with native contract state machines.

One sequencer per run: transactions are queued, ordered by
(sim_time, sender_pk, nonce), and sealed into a block only when a quorum
(strict majority of all brokers) is live to re-validate. Contract calls
are atomic per transaction; a failed call is recorded but leaves no
observable state change. The whole chain exports to line-delimited JSON
from which an independent replay must reproduce every state digest.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Any, Callable, Optional

from . import contracts, toycrypto
from .currency import Money, ZERO, money
from .encoding import canon_json, digest, sha256_hex

DEPLOY_TARGET = "DEPLOY"
GENESIS_DIGEST = "0" * 64


class LedgerError(Exception):
    pass


def signing_payload(target: str, abi_name: str, args: list, nonce: int) -> bytes:
    return canon_json(["tx", target, abi_name, args, nonce]).encode("utf-8")


def contract_address(deployer_pk: bytes, nonce: int) -> str:
    raw = sha256_hex(deployer_pk + nonce.to_bytes(8, "big"))
    return "0X" + raw.upper()[:40]


def _args_wire_safe(value: Any) -> bool:
    """Transaction args must be plain JSON data: no floats, no bytes."""
    if value is None or isinstance(value, (bool, int, str)):
        return True
    if isinstance(value, (list, tuple)):
        return all(_args_wire_safe(v) for v in value)
    if isinstance(value, dict):
        return all(isinstance(k, str) and _args_wire_safe(v) for k, v in value.items())
    return False


@dataclass(frozen=True)
class Transaction:
    sender_pk: bytes
    target: str
    abi_name: str
    args: list
    nonce: int
    signature: bytes
    sim_time: int

    def txid(self) -> str:
        return digest(
            ["txid", self.sender_pk, self.target, self.abi_name, self.args, self.nonce, self.sim_time]
        )


def make_transaction(key, target: str, abi_name: str, args: list, nonce: int, sim_time: int) -> Transaction:
    """Build and sign a transaction with an identity.KeyPair-shaped key."""
    sig = toycrypto.sign(key.private_key, signing_payload(target, abi_name, list(args), nonce))
    return Transaction(key.public_key, target, abi_name, list(args), nonce, sig, sim_time)


@dataclass(frozen=True)
class Receipt:
    accepted: bool
    reason: Optional[str] = None
    txid: Optional[str] = None


@dataclass
class ExecRecord:
    tx: Transaction
    status: str  # "ok" | "failed"
    reason: Optional[str]
    value: Any
    events: list


@dataclass
class Block:
    height: int
    sim_time: int
    prev_digest: str
    transactions: list
    validator_set: list
    digest: str
    state_digest: str


@dataclass
class ContractInstance:
    address: str
    kind: str
    abi_names: tuple
    state: dict


class ExecContext:
    """Execution view handed to contract code.

    Account and fee mutations are buffered and applied only on success,
    which is what makes a failing call side-effect free.
    """

    def __init__(self, ledger: "Ledger", tx: Transaction):
        self._ledger = ledger
        self.tx = tx
        self._account_deltas: dict[str, Money] = {}
        self._fee_deltas: dict[str, Money] = {}

    @property
    def sim_time(self) -> int:
        return self.tx.sim_time

    def sender_hex(self) -> str:
        return self.tx.sender_pk.hex()

    def pid_for(self, pk_hex: str) -> Optional[str]:
        return self._ledger.identities.get(pk_hex)

    def sender_pid(self) -> Optional[str]:
        return self.pid_for(self.sender_hex())

    def balance(self, pid: str) -> Money:
        return self._ledger.accounts.get(pid, ZERO) + self._account_deltas.get(pid, ZERO)

    def debit(self, pid: str, amount: Money, reason: str = "insufficient_funds") -> None:
        if amount < 0:
            raise contracts.ContractError("negative_amount")
        if self.balance(pid) < amount:
            raise contracts.ContractError(reason)
        self._account_deltas[pid] = self._account_deltas.get(pid, ZERO) - amount

    def credit(self, pid: str, amount: Money) -> None:
        if amount < 0:
            raise contracts.ContractError("negative_amount")
        self._account_deltas[pid] = self._account_deltas.get(pid, ZERO) + amount

    def credit_fee(self, broker_id: str, amount: Money) -> None:
        if amount < 0:
            raise contracts.ContractError("negative_amount")
        self._fee_deltas[broker_id] = self._fee_deltas.get(broker_id, ZERO) + amount

    def contract_exists(self, address: str) -> bool:
        return address in self._ledger.contracts

    def commit(self) -> None:
        for pid, delta in self._account_deltas.items():
            balance = self._ledger.accounts.get(pid, ZERO) + delta
            assert balance >= 0, f"account {pid} driven negative"
            self._ledger.accounts[pid] = balance
        for broker_id, delta in self._fee_deltas.items():
            self._ledger.fee_accounts[broker_id] = self._ledger.fee_accounts.get(broker_id, ZERO) + delta


class Ledger:
    def __init__(self, initial_accounts: dict[str, Any], identities: dict[str, str], total_brokers: int):
        self.accounts: dict[str, Money] = {pid: money(v) for pid, v in initial_accounts.items()}
        for pid, balance in self.accounts.items():
            if balance < 0:
                raise LedgerError(f"negative initial balance for {pid}")
        self.fee_accounts: dict[str, Money] = {}
        self.identities: dict[str, str] = dict(identities)
        self.total_brokers = total_brokers
        self.contracts: dict[str, ContractInstance] = {}
        self.nonces: dict[str, int] = {}
        self.pending: list[Transaction] = []
        self.blocks: list[Block] = []
        self.exec_log: list[list[ExecRecord]] = []
        self._initial_accounts = {pid: money(v) for pid, v in initial_accounts.items()}

    # -- identity plumbing ------------------------------------------------

    def register_identity(self, pk_hex: str, pid: str) -> None:
        self.identities[pk_hex] = pid

    def add_broker(self) -> None:
        """An admitted broker joins the validator population at next seal."""
        self.total_brokers += 1

    def next_nonce(self, sender_pk: bytes) -> int:
        return self.nonces.get(sender_pk.hex(), 0) + 1

    # -- submission -------------------------------------------------------

    def _validate(self, tx: Transaction) -> Optional[str]:
        if not _args_wire_safe(tx.args):
            return "malformed_args"
        if tx.sender_pk.hex() not in self.identities:
            return "unknown_sender"
        payload = signing_payload(tx.target, tx.abi_name, tx.args, tx.nonce)
        if not toycrypto.verify(tx.sender_pk, payload, tx.signature):
            return "bad_signature"
        if tx.nonce != self.next_nonce(tx.sender_pk):
            return "stale_nonce"
        if tx.target == DEPLOY_TARGET:
            if tx.abi_name not in contracts.KINDS:
                return "unknown_abi"
        else:
            instance = self.contracts.get(tx.target)
            if instance is not None:
                abi_names = instance.abi_names
            else:
                # a queued deploy may create the target within this very
                # block; admit the call and let execution order decide
                kind = self._pending_deploy_kind(tx.target)
                if kind is None:
                    return "unknown_target"
                abi_names = contracts.abis_for(kind)
            if tx.abi_name not in abi_names:
                return "unknown_abi"
        return None

    def _pending_deploy_kind(self, address: str) -> Optional[str]:
        for queued in self.pending:
            if queued.target != DEPLOY_TARGET:
                continue
            if contract_address(queued.sender_pk, queued.nonce) == address:
                return queued.abi_name
        return None

    def submit_transaction(self, tx: Transaction) -> Receipt:
        reason = self._validate(tx)
        if reason is not None:
            return Receipt(accepted=False, reason=reason)
        self.nonces[tx.sender_pk.hex()] = tx.nonce
        self.pending.append(tx)
        return Receipt(accepted=True, txid=tx.txid())

    # -- sealing ----------------------------------------------------------

    def quorum(self) -> int:
        return self.total_brokers // 2 + 1

    def seal_block(
        self,
        live_brokers: list[str],
        sim_time: int,
        challenge_hook: Optional[Callable[[list[Transaction]], list[Transaction]]] = None,
    ) -> tuple[Optional[Block], list[ExecRecord]]:
        """Seal all pending transactions into the next block.

        Returns (None, []) and retains the queue when fewer than a quorum
        of brokers are live to validate.
        """
        validators = sorted(live_brokers)
        if len(validators) < self.quorum():
            return None, []
        ordered = sorted(self.pending, key=lambda t: (t.sim_time, t.sender_pk, t.nonce))
        self.pending = []
        if challenge_hook is not None:
            for extra in challenge_hook(list(ordered)):
                reason = self._validate(extra)
                if reason is not None:
                    raise LedgerError(f"synthesized challenge rejected: {reason}")
                self.nonces[extra.sender_pk.hex()] = extra.nonce
                ordered.append(extra)
        records = [self._apply_tx(tx) for tx in ordered]
        height = len(self.blocks)
        prev = self.blocks[-1].digest if self.blocks else GENESIS_DIGEST
        block_digest = digest(
            ["block", height, prev, [tx.txid() for tx in ordered], validators, sim_time]
        )
        block = Block(
            height=height,
            sim_time=sim_time,
            prev_digest=prev,
            transactions=ordered,
            validator_set=validators,
            digest=block_digest,
            state_digest=self.state_digest(),
        )
        self.blocks.append(block)
        self.exec_log.append(records)
        return block, records

    def _apply_tx(self, tx: Transaction) -> ExecRecord:
        try:
            if tx.target == DEPLOY_TARGET:
                address = contract_address(tx.sender_pk, tx.nonce)
                assert address not in self.contracts, "address collision"
                ctx = ExecContext(self, tx)
                state = contracts.init_contract(tx.abi_name, tx.args, ctx)
                ctx.commit()
                self.contracts[address] = ContractInstance(
                    address=address,
                    kind=tx.abi_name,
                    abi_names=contracts.abis_for(tx.abi_name),
                    state=state,
                )
                events = [{"kind": "deployed", "address": address, "contract_kind": tx.abi_name}]
                return ExecRecord(tx, "ok", None, {"address": address}, events)
            instance = self.contracts.get(tx.target)
            if instance is None:
                # the deploy this call depended on failed earlier in the block
                raise contracts.ContractError("unknown_target")
            snapshot = copy.deepcopy(instance.state)
            ctx = ExecContext(self, tx)
            try:
                result = contracts.apply_call(instance.kind, instance.state, tx.abi_name, tx.args, ctx)
            except contracts.ContractError:
                instance.state = snapshot
                raise
            ctx.commit()
            return ExecRecord(tx, "ok", None, result.get("value"), result.get("events", []))
        except contracts.ContractError as err:
            return ExecRecord(tx, "failed", err.reason, None, [])

    # -- reads ------------------------------------------------------------

    def get_contract_state(self, address: str) -> dict:
        if address not in self.contracts:
            raise LedgerError(f"unknown contract address {address}")
        return copy.deepcopy(self.contracts[address].state)

    def state_digest(self) -> str:
        view = {
            "accounts": self.accounts,
            "fees": self.fee_accounts,
            "contracts": {
                addr: {"kind": inst.kind, "abis": list(inst.abi_names), "state": inst.state}
                for addr, inst in self.contracts.items()
            },
        }
        return digest(view)

    def money_in_contracts(self) -> Money:
        total = ZERO
        for inst in self.contracts.values():
            if inst.kind != contracts.DSC_KIND:
                continue
            total += inst.state["frozen"]
            for sub in inst.state["subs"]:
                total += sub["escrow"]["provider_deposit"] + sub["escrow"]["consumer_deposit"]
        return total

    def total_money(self) -> Money:
        return (
            sum(self.accounts.values(), ZERO)
            + sum(self.fee_accounts.values(), ZERO)
            + self.money_in_contracts()
        )

    # -- export and replay --------------------------------------------------

    def audit_lines(self) -> list[str]:
        return [
            f"{b.height}|{b.digest}|{len(b.transactions)}|{','.join(b.validator_set)}"
            for b in self.blocks
        ]

    def export_jsonl(self, genesis_extra: Optional[dict] = None) -> str:
        genesis = {
            "initial_accounts": {pid: str(v) for pid, v in sorted(self._initial_accounts.items())},
            "identities": dict(sorted(self.identities.items())),
            "total_brokers": self.total_brokers,
        }
        if genesis_extra:
            genesis.update(genesis_extra)
        lines = [json.dumps({"genesis": genesis}, sort_keys=True, separators=(",", ":"))]
        for block, records in zip(self.blocks, self.exec_log):
            txs = []
            for record in records:
                tx = record.tx
                txs.append(
                    {
                        "sender_pk": tx.sender_pk.hex(),
                        "target": tx.target,
                        "abi": tx.abi_name,
                        "args": tx.args,
                        "nonce": tx.nonce,
                        "signature": tx.signature.hex(),
                        "sim_time": tx.sim_time,
                        "exec_status": record.status,
                        "exec_reason": record.reason,
                    }
                )
            lines.append(
                json.dumps(
                    {
                        "block": {
                            "height": block.height,
                            "sim_time": block.sim_time,
                            "prev_digest": block.prev_digest,
                            "digest": block.digest,
                            "state_digest": block.state_digest,
                            "validators": block.validator_set,
                            "txs": txs,
                        }
                    },
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def replay_jsonl(cls, text: str) -> tuple["Ledger", list[str]]:
        """Re-execute an exported chain from scratch.

        Raises LedgerError on any divergence: bad signature, nonce gap,
        block digest mismatch, or execution outcome mismatch.
        """
        lines = [line for line in text.splitlines() if line.strip()]
        genesis = json.loads(lines[0])["genesis"]
        led = cls(
            initial_accounts={pid: money(v) for pid, v in genesis["initial_accounts"].items()},
            identities=genesis["identities"],
            total_brokers=genesis["total_brokers"],
        )
        state_digests: list[str] = []
        for line in lines[1:]:
            blk = json.loads(line)["block"]
            txs = []
            for t in blk["txs"]:
                tx = Transaction(
                    sender_pk=bytes.fromhex(t["sender_pk"]),
                    target=t["target"],
                    abi_name=t["abi"],
                    args=t["args"],
                    nonce=t["nonce"],
                    signature=bytes.fromhex(t["signature"]),
                    sim_time=t["sim_time"],
                )
                reason = led._validate(tx)
                if reason is not None:
                    raise LedgerError(f"replay: tx invalid at height {blk['height']}: {reason}")
                led.nonces[tx.sender_pk.hex()] = tx.nonce
                record = led._apply_tx(tx)
                if record.status != t["exec_status"]:
                    raise LedgerError(
                        f"replay: execution diverged at height {blk['height']}: "
                        f"{record.status} vs {t['exec_status']}"
                    )
                txs.append(tx)
            height = len(led.blocks)
            prev = led.blocks[-1].digest if led.blocks else GENESIS_DIGEST
            block_digest = digest(
                ["block", height, prev, [tx.txid() for tx in txs], blk["validators"], blk["sim_time"]]
            )
            if block_digest != blk["digest"]:
                raise LedgerError(f"replay: block digest mismatch at height {height}")
            led.blocks.append(
                Block(
                    height=height,
                    sim_time=blk["sim_time"],
                    prev_digest=prev,
                    transactions=txs,
                    validator_set=blk["validators"],
                    digest=block_digest,
                    state_digest=led.state_digest(),
                )
            )
            led.exec_log.append([])
            state_digests.append(led.blocks[-1].state_digest)
        return led, state_digests
