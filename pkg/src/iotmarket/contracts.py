"""The two contract state machines hosted by the ledger.

Register: singleton lookup table mapping contract names to addresses and
ABI lists, plus per-round match-digest anchors and challenges (the
tamper-evidence path for biased brokers).

DSC (data subscription contract): one instance per provider-consumer
pair, holding the subscription table, escrowed deposits, two-phase
counter settlement, dispute freezing, and removal with broker fee.

Contract code never touches the ledger directly; every money move goes
through the buffered ExecContext so a failed call has no effect.
"""

from __future__ import annotations

from datetime import datetime, timedelta
from typing import Any, Optional

from . import toycrypto
from .currency import Money, ZERO, fmt_money, money
from .encoding import canon_json

REGISTER_KIND = "register"
DSC_KIND = "dsc"
KINDS = (REGISTER_KIND, DSC_KIND)

REGISTER_ABIS = ("RegisterContract", "GetContract", "AnchorMatchRound", "ChallengeMatchRound")
DSC_ABIS = ("CreateContract", "ExecuteContract", "Settlement", "RemoveSubscription", "LodgeDispute")

# every lookup entry must export at least the core subscription lifecycle
REQUIRED_LOOKUP_ABIS = frozenset(
    {"CreateContract", "ExecuteContract", "Settlement", "RemoveSubscription"}
)

SESSION_KEY_HEX_LEN = 2 * toycrypto.SESSION_KEY_BYTES


class ContractError(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def abis_for(kind: str) -> tuple:
    if kind == REGISTER_KIND:
        return REGISTER_ABIS
    if kind == DSC_KIND:
        return DSC_ABIS
    raise ContractError("unknown_kind")


def scheduled_units(start_time: int, end_time: int, frequency: int) -> int:
    """Number of sample instants on the start-inclusive, end-exclusive grid."""
    if end_time <= start_time:
        return 0
    return (end_time - start_time - 1) // frequency + 1


def deposit_floor(n: int, cost: Money, fee: Money) -> Money:
    """Minimum deposit: one settlement window's charge plus the broker fee."""
    return n * cost + fee


def cosign_payload(dsc_address: str, terms: dict, provider_deposit: str, consumer_deposit: str) -> bytes:
    """Bytes the consumer co-signs to approve subscription terms and deposits."""
    return canon_json(["subscription", dsc_address, terms, provider_deposit, consumer_deposit]).encode("utf-8")


def _as_int(value: Any, reason: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ContractError(reason)
    return value


def _as_money(value: Any, reason: str) -> Money:
    try:
        return money(value)
    except (TypeError, ValueError):
        raise ContractError(reason)


def _validate_terms(terms: Any) -> dict:
    if not isinstance(terms, dict):
        raise ContractError("bad_terms")
    try:
        device_id = _as_int(terms["device_id"], "bad_device")
        data_type = terms["data_type"]
        start_time = _as_int(terms["start_time"], "bad_times")
        frequency = _as_int(terms["measurement_frequency"], "bad_frequency")
        cost = _as_money(terms["cost"], "bad_cost")
        end_time = _as_int(terms["end_time"], "bad_times")
        n = _as_int(terms["payment_granularity_n"], "bad_granularity")
    except KeyError:
        raise ContractError("bad_terms")
    if not isinstance(data_type, str) or not data_type:
        raise ContractError("bad_terms")
    if end_time <= start_time:
        raise ContractError("bad_times")
    if frequency < 1:
        raise ContractError("bad_frequency")
    if n < 1:
        raise ContractError("bad_granularity")
    if cost < 0:
        raise ContractError("bad_cost")
    return {
        "device_id": device_id,
        "data_type": data_type,
        "start_time": start_time,
        "measurement_frequency": frequency,
        "cost": cost,
        "end_time": end_time,
        "payment_granularity_n": n,
    }


# -- construction ----------------------------------------------------------


def init_contract(kind: str, args: list, ctx) -> dict:
    if kind == REGISTER_KIND:
        return _init_register(args, ctx)
    if kind == DSC_KIND:
        return _init_dsc(args, ctx)
    raise ContractError("unknown_kind")


def _init_register(args: list, ctx) -> dict:
    if args:
        raise ContractError("bad_init_args")
    return {"lookup": {}, "anchors": {}, "challenges": {}, "flagged_rounds": []}


def _init_dsc(args: list, ctx) -> dict:
    if len(args) not in (5, 6):
        raise ContractError("bad_init_args")
    provider_pk, consumer_pk, broker_id, fee_raw, dispute_window = args[:5]
    provider_pid = ctx.pid_for(provider_pk)
    consumer_pid = ctx.pid_for(consumer_pk)
    if provider_pid is None or consumer_pid is None:
        raise ContractError("unknown_party")
    if ctx.sender_pid() != provider_pid:
        raise ContractError("wrong_caller")
    if not isinstance(broker_id, str) or not broker_id:
        raise ContractError("bad_broker")
    fee = _as_money(fee_raw, "bad_fee")
    if fee < 0:
        raise ContractError("bad_fee")
    window = _as_int(dispute_window, "bad_dispute_window")
    if window < 0:
        raise ContractError("bad_dispute_window")
    if len(args) == 6 and args[5] is not None:
        # constructors may carry the intended first subscription's terms
        # for early validation; the binding append happens in CreateContract
        _validate_terms(args[5])
    return {
        "provider_pk": provider_pk,
        "consumer_pk": consumer_pk,
        "broker_id": broker_id,
        "fee": fee,
        "dispute_window": window,
        "subs": [],
        "frozen": ZERO,
    }


# -- dispatch ----------------------------------------------------------------


def apply_call(kind: str, state: dict, abi: str, args: list, ctx) -> dict:
    if kind == REGISTER_KIND:
        handlers = {
            "RegisterContract": _register_contract,
            "GetContract": _get_contract,
            "AnchorMatchRound": _anchor_match_round,
            "ChallengeMatchRound": _challenge_match_round,
        }
    elif kind == DSC_KIND:
        handlers = {
            "CreateContract": _create_contract,
            "ExecuteContract": _execute_contract,
            "Settlement": _settlement,
            "RemoveSubscription": _remove_subscription,
            "LodgeDispute": _lodge_dispute,
        }
    else:
        raise ContractError("unknown_kind")
    if abi not in handlers:
        raise ContractError("unknown_abi")
    return handlers[abi](state, args, ctx)


# -- register contract -------------------------------------------------------


def _register_contract(state: dict, args: list, ctx) -> dict:
    if len(args) != 5:
        raise ContractError("bad_args")
    name, provider_pk, consumer_pk, address, abis = args
    if not isinstance(name, str) or not name:
        raise ContractError("bad_name")
    caller = ctx.sender_pid()
    if caller is None or caller not in (ctx.pid_for(provider_pk), ctx.pid_for(consumer_pk)):
        raise ContractError("wrong_caller")
    if name in state["lookup"]:
        raise ContractError("duplicate_name")
    if not ctx.contract_exists(address):
        raise ContractError("dangling_address")
    if not isinstance(abis, list) or not REQUIRED_LOOKUP_ABIS.issubset(abis):
        raise ContractError("missing_abis")
    state["lookup"][name] = {
        "provider_pk": provider_pk,
        "consumer_pk": consumer_pk,
        "address": address,
        "abis": list(abis),
    }
    return {
        "value": {"registered": name},
        "events": [{"kind": "lookup_registered", "name": name, "address": address}],
    }


def _get_contract(state: dict, args: list, ctx) -> dict:
    if len(args) != 1:
        raise ContractError("bad_args")
    name = args[0]
    entry = state["lookup"].get(name)
    if entry is None:
        raise ContractError("unknown_name")
    return {"value": {"address": entry["address"], "abis": list(entry["abis"])}, "events": []}


def _anchor_match_round(state: dict, args: list, ctx) -> dict:
    if len(args) != 5:
        raise ContractError("bad_args")
    round_no, broker_id, book_digest, match_digest, pair_count = args
    round_no = _as_int(round_no, "bad_round")
    if ctx.sender_pid() != broker_id:
        raise ContractError("wrong_caller")
    key = f"{round_no}:{broker_id}"
    if key in state["anchors"]:
        raise ContractError("duplicate_anchor")
    state["anchors"][key] = {
        "round": round_no,
        "broker_id": broker_id,
        "book_digest": book_digest,
        "match_digest": match_digest,
        "pair_count": _as_int(pair_count, "bad_pair_count"),
    }
    return {"value": {"anchored": key}, "events": []}


def _challenge_match_round(state: dict, args: list, ctx) -> dict:
    if len(args) != 4:
        raise ContractError("bad_args")
    round_no, broker_id, expected_digest, actual_digest = args
    round_no = _as_int(round_no, "bad_round")
    challenger = ctx.sender_pid()
    if challenger is None:
        raise ContractError("wrong_caller")
    if challenger == broker_id:
        raise ContractError("self_challenge")
    key = f"{round_no}:{broker_id}"
    if key in state["challenges"]:
        raise ContractError("duplicate_challenge")
    state["challenges"][key] = {
        "round": round_no,
        "broker_id": broker_id,
        "challenger": challenger,
        "expected_digest": expected_digest,
        "actual_digest": actual_digest,
    }
    if round_no not in state["flagged_rounds"]:
        state["flagged_rounds"].append(round_no)
        state["flagged_rounds"].sort()
    return {
        "value": {"flagged": key},
        "events": [{"kind": "round_flagged", "round": round_no, "broker_id": broker_id}],
    }


# -- data subscription contract ----------------------------------------------


def _party_role(state: dict, ctx) -> str:
    caller = ctx.sender_pid()
    if caller is None:
        raise ContractError("non_party")
    if caller == ctx.pid_for(state["provider_pk"]):
        return "provider"
    if caller == ctx.pid_for(state["consumer_pk"]):
        return "consumer"
    raise ContractError("non_party")


def _get_sub(state: dict, args: list, index_pos: int = 0) -> tuple[int, dict]:
    if len(args) <= index_pos:
        raise ContractError("bad_args")
    idx = _as_int(args[index_pos], "unknown_sub")
    if not 0 <= idx < len(state["subs"]):
        raise ContractError("unknown_sub")
    return idx, state["subs"][idx]


def _units(sub: dict) -> int:
    return scheduled_units(sub["start_time"], sub["end_time"], sub["measurement_frequency"])


def _create_contract(state: dict, args: list, ctx) -> dict:
    if len(args) != 4:
        raise ContractError("bad_args")
    terms_raw, provider_dep_raw, consumer_dep_raw, cosig_hex = args
    if _party_role(state, ctx) != "provider":
        raise ContractError("wrong_caller")
    terms = _validate_terms(terms_raw)
    provider_dep = _as_money(provider_dep_raw, "bad_deposit")
    consumer_dep = _as_money(consumer_dep_raw, "bad_deposit")
    floor = deposit_floor(terms["payment_granularity_n"], terms["cost"], state["fee"])
    if provider_dep < floor or consumer_dep < floor:
        raise ContractError("deposit_too_small")
    payload = cosign_payload(ctx.tx.target, terms_raw, provider_dep_raw, consumer_dep_raw)
    try:
        cosig = bytes.fromhex(cosig_hex)
    except (TypeError, ValueError):
        raise ContractError("missing_cosig")
    if not toycrypto.verify(bytes.fromhex(state["consumer_pk"]), payload, cosig):
        raise ContractError("missing_cosig")
    provider_pid = ctx.pid_for(state["provider_pk"])
    consumer_pid = ctx.pid_for(state["consumer_pk"])
    ctx.debit(provider_pid, provider_dep)
    ctx.debit(consumer_pid, consumer_dep)
    lock_margin = terms["payment_granularity_n"] * terms["measurement_frequency"]
    sub = dict(terms)
    sub.update(
        {
            "session_key": "",
            "status": "created",
            "provider_counter": None,
            "consumer_counter": None,
            "settled_units": 0,
            "windows_settled": 0,
            "dispute_tick": None,
            "outcome": None,
            "escrow": {
                "provider_deposit": provider_dep,
                "consumer_deposit": consumer_dep,
                "provider_initial": provider_dep,
                "consumer_initial": consumer_dep,
                "locked_until": terms["end_time"] + lock_margin,
                "pending_invoice": ZERO,
            },
        }
    )
    state["subs"].append(sub)
    index = len(state["subs"]) - 1
    return {
        "value": {"sub_index": index},
        "events": [
            {
                "kind": "subscription_created",
                "address": ctx.tx.target,
                "sub_index": index,
                "provider_pk": state["provider_pk"],
                "consumer_pk": state["consumer_pk"],
                "start_time": sub["start_time"],
                "end_time": sub["end_time"],
            }
        ],
    }


def _execute_contract(state: dict, args: list, ctx) -> dict:
    if len(args) != 2:
        raise ContractError("bad_args")
    idx, sub = _get_sub(state, args)
    session_key = args[1]
    if _party_role(state, ctx) != "provider":
        raise ContractError("wrong_caller")
    if sub["status"] != "created":
        raise ContractError("wrong_status")
    if ctx.sim_time < sub["start_time"]:
        raise ContractError("too_early")
    if not isinstance(session_key, str) or len(session_key) != SESSION_KEY_HEX_LEN:
        raise ContractError("bad_session_key")
    try:
        bytes.fromhex(session_key)
    except ValueError:
        raise ContractError("bad_session_key")
    sub["status"] = "active"
    sub["session_key"] = session_key
    notification = {
        "device_id": sub["device_id"],
        "data_type": sub["data_type"],
        "start_time": sub["start_time"],
        "measurement_frequency": sub["measurement_frequency"],
        "end_time": sub["end_time"],
        "payment_granularity_n": sub["payment_granularity_n"],
    }
    return {
        "value": {"session_key": session_key, "notification": notification},
        "events": [
            {
                "kind": "subscription_activated",
                "address": ctx.tx.target,
                "sub_index": idx,
                "session_key": session_key,
                "provider_pk": state["provider_pk"],
                "consumer_pk": state["consumer_pk"],
                "broker_id": state["broker_id"],
                "start_time": sub["start_time"],
                "end_time": sub["end_time"],
                "measurement_frequency": sub["measurement_frequency"],
                "payment_granularity_n": sub["payment_granularity_n"],
                "data_type": sub["data_type"],
            }
        ],
    }


def _mark_disputed(state: dict, sub: dict, idx: int, ctx, reason: str, detail: dict) -> dict:
    sub["status"] = "disputed"
    sub["dispute_tick"] = ctx.sim_time
    sub["outcome"] = "disputed"
    sub["escrow"]["pending_invoice"] = ZERO
    event = {
        "kind": "subscription_disputed",
        "address": ctx.tx.target,
        "sub_index": idx,
        "reason": reason,
        "provider_pk": state["provider_pk"],
        "consumer_pk": state["consumer_pk"],
        "dispute_tick": ctx.sim_time,
    }
    event.update(detail)
    return {"value": {"outcome": "dispute", "reason": reason}, "events": [event]}


def _settlement(state: dict, args: list, ctx) -> dict:
    if len(args) != 2:
        raise ContractError("bad_args")
    idx, sub = _get_sub(state, args)
    role = _party_role(state, ctx)
    if sub["status"] != "active":
        raise ContractError("not_active")
    counter = _as_int(args[1], "zero_counter")
    if counter < 1:
        raise ContractError("zero_counter")
    own_field = f"{role}_counter"
    other_field = "consumer_counter" if role == "provider" else "provider_counter"
    if sub[other_field] is None:
        if sub[own_field] is not None:
            raise ContractError("already_reported")
        sub[own_field] = counter
        sub["escrow"]["pending_invoice"] = counter * sub["cost"]
        return {
            "value": {"outcome": "waiting"},
            "events": [
                {
                    "kind": "settlement_waiting",
                    "address": ctx.tx.target,
                    "sub_index": idx,
                    "party": role,
                    "counter": counter,
                }
            ],
        }
    other_value = sub[other_field]
    sub[own_field] = None
    sub[other_field] = None
    sub["escrow"]["pending_invoice"] = ZERO
    detail = {
        "provider_counter": counter if role == "provider" else other_value,
        "consumer_counter": counter if role == "consumer" else other_value,
    }
    if other_value != counter:
        return _mark_disputed(state, sub, idx, ctx, "counter_mismatch", detail)
    n = sub["payment_granularity_n"]
    if ctx.sim_time < sub["end_time"]:
        required = n
    else:
        required = min(n, _units(sub) - sub["settled_units"])
    if counter != required:
        detail["required"] = required
        return _mark_disputed(state, sub, idx, ctx, "schedule_mismatch", detail)
    invoice = counter * sub["cost"]
    escrow = sub["escrow"]
    if escrow["consumer_deposit"] < invoice:
        return _mark_disputed(state, sub, idx, ctx, "escrow_shortfall", detail)
    provider_pid = ctx.pid_for(state["provider_pk"])
    consumer_pid = ctx.pid_for(state["consumer_pk"])
    escrow["consumer_deposit"] -= invoice
    ctx.credit(provider_pid, invoice)
    top_up = min(escrow["consumer_initial"] - escrow["consumer_deposit"], ctx.balance(consumer_pid))
    if top_up > 0:
        ctx.debit(consumer_pid, top_up)
        escrow["consumer_deposit"] += top_up
    sub["settled_units"] += counter
    sub["windows_settled"] += 1
    return {
        "value": {"outcome": "invoice", "amount": invoice},
        "events": [
            {
                "kind": "settlement_paid",
                "address": ctx.tx.target,
                "sub_index": idx,
                "invoice": invoice,
                "counter": counter,
                "window_index": sub["windows_settled"],
                "settled_units": sub["settled_units"],
                "provider_pk": state["provider_pk"],
                "consumer_pk": state["consumer_pk"],
            }
        ],
    }


def _remove_subscription(state: dict, args: list, ctx) -> dict:
    if len(args) != 1:
        raise ContractError("bad_args")
    idx, sub = _get_sub(state, args)
    _party_role(state, ctx)
    status = sub["status"]
    if status == "removed":
        raise ContractError("already_removed")
    escrow = sub["escrow"]
    if status == "disputed":
        if ctx.sim_time < sub["dispute_tick"] + state["dispute_window"]:
            raise ContractError("too_early")
    else:
        if ctx.sim_time < sub["end_time"]:
            raise ContractError("too_early")
        if (
            status == "active"
            and sub["settled_units"] < _units(sub)
            and ctx.sim_time < escrow["locked_until"]
        ):
            # grace period: late settlement transactions may still land
            raise ContractError("too_early")
    fee = state["fee"]
    fee_provider = min(fee, escrow["provider_deposit"])
    fee_consumer = min(fee, escrow["consumer_deposit"])
    escrow["provider_deposit"] -= fee_provider
    escrow["consumer_deposit"] -= fee_consumer
    ctx.credit_fee(state["broker_id"], fee_provider + fee_consumer)
    provider_pid = ctx.pid_for(state["provider_pk"])
    consumer_pid = ctx.pid_for(state["consumer_pk"])
    refund_provider = ZERO
    refund_consumer = ZERO
    frozen_amount = ZERO
    if status == "disputed":
        outcome = "disputed"
        frozen_amount = escrow["provider_deposit"] + escrow["consumer_deposit"]
        state["frozen"] += frozen_amount
    else:
        outcome = "completed" if status == "active" else "lapsed"
        refund_provider = escrow["provider_deposit"]
        refund_consumer = escrow["consumer_deposit"]
        ctx.credit(provider_pid, refund_provider)
        ctx.credit(consumer_pid, refund_consumer)
    escrow["provider_deposit"] = ZERO
    escrow["consumer_deposit"] = ZERO
    sub["status"] = "removed"
    sub["outcome"] = outcome
    report = {
        "outcome": outcome,
        "refund_provider": refund_provider,
        "refund_consumer": refund_consumer,
        "broker_fee": fee_provider + fee_consumer,
        "frozen": frozen_amount,
        "settled_units": sub["settled_units"],
    }
    return {
        "value": report,
        "events": [
            {
                "kind": "subscription_removed",
                "address": ctx.tx.target,
                "sub_index": idx,
                "outcome": outcome,
                "broker_id": state["broker_id"],
                "broker_fee": fee_provider + fee_consumer,
                "refund_provider": refund_provider,
                "refund_consumer": refund_consumer,
                "frozen": frozen_amount,
                "provider_pk": state["provider_pk"],
                "consumer_pk": state["consumer_pk"],
            }
        ],
    }


def _lodge_dispute(state: dict, args: list, ctx) -> dict:
    if len(args) != 2:
        raise ContractError("bad_args")
    idx, sub = _get_sub(state, args)
    role = _party_role(state, ctx)
    reason = args[1]
    if not isinstance(reason, str) or not reason:
        raise ContractError("bad_reason")
    if sub["status"] == "disputed":
        return {"value": {"outcome": "already_disputed"}, "events": []}
    if sub["status"] == "removed":
        raise ContractError("already_removed")
    if sub["status"] != "active":
        raise ContractError("not_active")
    sub["provider_counter"] = None
    sub["consumer_counter"] = None
    return _mark_disputed(state, sub, idx, ctx, f"lodged_by_{role}:{reason}", {})


# -- table dumps ---------------------------------------------------------------

SUBSCRIPTION_TABLE_COLUMNS = (
    "Device id",
    "Data type",
    "Start Time",
    "Measurement frequency",
    "Session_key",
    "cost",
    "End time",
    "Payment granularity",
)

LOOKUP_TABLE_COLUMNS = (
    "Contract name",
    "Provider public key",
    "Consumer public key",
    "Contract address",
    "Contract ABI",
)


def _format_tick(tick: int, epoch: Optional[datetime], tick_minutes: int) -> str:
    if epoch is None:
        return str(tick)
    return (epoch + timedelta(minutes=tick * tick_minutes)).strftime("%d/%m/%Y %H:%M")


def _format_session_key(key_hex: str) -> str:
    if not key_hex:
        return ""
    return "".join(f"{byte:08b}" for byte in bytes.fromhex(key_hex))


def subscription_table(dsc_state: dict, epoch: Optional[datetime] = None, tick_minutes: int = 1) -> list[list[str]]:
    rows = [list(SUBSCRIPTION_TABLE_COLUMNS)]
    for sub in dsc_state["subs"]:
        rows.append(
            [
                str(sub["device_id"]),
                sub["data_type"],
                _format_tick(sub["start_time"], epoch, tick_minutes),
                f"{sub['measurement_frequency'] * tick_minutes}mins",
                _format_session_key(sub["session_key"]),
                fmt_money(sub["cost"]),
                _format_tick(sub["end_time"], epoch, tick_minutes),
                str(sub["payment_granularity_n"]),
            ]
        )
    return rows


def _format_pk(pk_hex: str) -> str:
    return "0X" + pk_hex.upper()


def lookup_table(register_state: dict) -> list[list[str]]:
    rows = [list(LOOKUP_TABLE_COLUMNS)]
    for name in sorted(register_state["lookup"]):
        entry = register_state["lookup"][name]
        rows.append(
            [
                name,
                _format_pk(entry["provider_pk"]),
                _format_pk(entry["consumer_pk"]),
                entry["address"],
                ", ".join(f"{abi}()" for abi in entry["abis"]),
            ]
        )
    return rows


def dump_table(rows: list[list[str]]) -> str:
    return "\n".join("|".join(row) for row in rows) + "\n"
