"""Deterministic simulation harness for the marketplace.

Ties the protocol modules together behind a discrete-event kernel:
scenario files describe brokers, participants, device listings, data
queries and fault injections; the harness turns them into a totally
ordered event schedule, drives intake -> multicast -> match ->
negotiate -> contract -> deliver -> settle -> remove lifecycles, and
audits money conservation every tick.

Time is integer ticks (one simulated minute by default).  Within a
tick, events run in fixed phases so that fault injection always
precedes intake, matching precedes transaction submission, block
sealing precedes data delivery, and the audit runs last.  Every event
carries a unique sequence number, so heap ordering is total and runs
with the same scenario and seed replay byte for byte.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from dataclasses import dataclass, field, replace
from datetime import datetime
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Optional

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import broker as brokermod
from . import contracts, identity, ledger as ledgermod, trading, toycrypto
from .currency import Money, ZERO, fmt_money, money
from .encoding import digest

log = logging.getLogger("iotmarket.harness")

# Intra-tick phases, lowest runs first.
PHASE_FAULT = 0
PHASE_INTAKE = 1
PHASE_MULTICAST = 2
PHASE_MATCH = 3
PHASE_CONTROL = 4
PHASE_SEAL = 5
PHASE_DATA = 6
PHASE_AUDIT = 7

_SEQ_STRIDE = 1_000_000_000

FAULT_KINDS = (
    "broker_crash",
    "broker_recover",
    "counter_tamper",
    "payment_refusal",
    "delivery_stall",
    "eavesdrop",
    "broker_collusion_bias",
)


class ScenarioError(Exception):
    """A scenario file failed to parse or validate."""


class InvariantViolation(Exception):
    """A conservation or consistency check failed mid-run."""


@dataclass(frozen=True)
class SimEvent:
    time: int
    seq: int
    target: str
    payload: dict

    def order_key(self) -> tuple[int, int]:
        return (self.time, self.seq)


class Kernel:
    """Minimal deterministic event loop."""

    def __init__(self) -> None:
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._counter = 0
        self.now = 0
        self.phase = PHASE_FAULT
        self.processed = 0

    def schedule(self, time: int, phase: int, target: str, payload: Optional[dict] = None) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule into the past: {time} < {self.now}")
        self._counter += 1
        seq = phase * _SEQ_STRIDE + self._counter
        event = SimEvent(time, seq, target, payload or {})
        heapq.heappush(self._heap, (time, seq, event))

    def run(self, dispatch: Callable[[SimEvent], None], horizon: int) -> None:
        while self._heap and self._heap[0][0] < horizon:
            _, seq, event = heapq.heappop(self._heap)
            self.now = event.time
            self.phase = seq // _SEQ_STRIDE
            dispatch(event)
            self.processed += 1


# ---------------------------------------------------------------------------
# Scenario model


@dataclass(frozen=True)
class BrokerSpec:
    id: str
    location: tuple[float, float]


@dataclass(frozen=True)
class ParticipantSpec:
    id: str
    role: str
    balance: Money
    location: Optional[tuple[float, float]] = None
    rotate_key_on_completion: bool = False


@dataclass(frozen=True)
class ListingSpec:
    provider: str
    device_id: int
    data_type: str
    unit_cost: Money
    sampling_frequency: int
    duration_offered: int
    location: Optional[tuple[float, float]]
    archived: bool
    min_price: Money
    submit_tick: int


@dataclass(frozen=True)
class QuerySpec:
    consumer: str
    data_type: str
    data_age: str
    location: Optional[tuple[float, float]]
    radius: Optional[float]
    budget: Money
    frequency_required: int
    submit_tick: int
    start_tick: int
    end_tick: int
    payment_granularity: int


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    target: str
    at_tick: int
    params: dict


@dataclass(frozen=True)
class Economics:
    broker_fee: Money = Fraction(1, 10)
    dispute_window_ticks: Optional[int] = None  # None: N * frequency per subscription
    settlement_timeout_ticks: Optional[int] = None  # None: 3 * frequency
    delivery_timeout_slots: int = 3
    negotiation_max_rounds: int = trading.DEFAULT_MAX_ROUNDS


@dataclass(frozen=True)
class Scenario:
    name: str
    duration_ticks: int
    tick_minutes: int
    epoch: Optional[datetime]
    requester_role: str
    economics: Economics
    brokers: tuple[BrokerSpec, ...]
    participants: tuple[ParticipantSpec, ...]
    listings: tuple[ListingSpec, ...]
    queries: tuple[QuerySpec, ...]
    faults: tuple[FaultSpec, ...]


def _req(table: dict, key: str, ctx: str):
    if key not in table:
        raise ScenarioError(f"{ctx}: missing required key '{key}'")
    return table[key]


def _as_int(value, ctx: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(f"{ctx}: expected an integer, got {type(value).__name__}")
    return value


def _as_money(value, ctx: str) -> Money:
    if isinstance(value, float):
        raise ScenarioError(f"{ctx}: write amounts as quoted decimal strings, not floats")
    try:
        return money(value)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{ctx}: {exc}") from None


def _as_point(value, ctx: str) -> tuple[float, float]:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in value)
    ):
        raise ScenarioError(f"{ctx}: location must be a [x, y] pair of numbers")
    return (float(value[0]), float(value[1]))


def load_scenario(text: str, source: str = "<scenario>") -> Scenario:
    """Parse and validate a scenario document (TOML)."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{source}: invalid TOML: {exc}") from None

    meta = doc.get("scenario", {})
    if not isinstance(meta, dict):
        raise ScenarioError("[scenario] must be a table")
    name = meta.get("name", "unnamed")
    if not isinstance(name, str) or not name:
        raise ScenarioError("[scenario].name must be a non-empty string")
    duration = _as_int(_req(meta, "duration_ticks", "[scenario]"), "[scenario].duration_ticks")
    if duration <= 0:
        raise ScenarioError("[scenario].duration_ticks must be positive")
    tick_minutes = _as_int(meta.get("tick_minutes", 1), "[scenario].tick_minutes")
    if tick_minutes <= 0:
        raise ScenarioError("[scenario].tick_minutes must be positive")
    epoch = None
    if "epoch" in meta:
        if not isinstance(meta["epoch"], str):
            raise ScenarioError("[scenario].epoch must be a 'YYYY-MM-DD HH:MM' string")
        try:
            epoch = datetime.strptime(meta["epoch"], "%Y-%m-%d %H:%M")
        except ValueError as exc:
            raise ScenarioError(f"[scenario].epoch: {exc}") from None
    requester_role = meta.get("requester_role", "consumer")
    if requester_role not in ("consumer", "provider"):
        raise ScenarioError("[scenario].requester_role must be 'consumer' or 'provider'")

    econ_tbl = doc.get("economics", {})
    if not isinstance(econ_tbl, dict):
        raise ScenarioError("[economics] must be a table")
    econ = Economics(
        broker_fee=_as_money(econ_tbl.get("broker_fee", "0.1"), "[economics].broker_fee"),
        dispute_window_ticks=(
            _as_int(econ_tbl["dispute_window_ticks"], "[economics].dispute_window_ticks")
            if "dispute_window_ticks" in econ_tbl
            else None
        ),
        settlement_timeout_ticks=(
            _as_int(econ_tbl["settlement_timeout_ticks"], "[economics].settlement_timeout_ticks")
            if "settlement_timeout_ticks" in econ_tbl
            else None
        ),
        delivery_timeout_slots=_as_int(
            econ_tbl.get("delivery_timeout_slots", 3), "[economics].delivery_timeout_slots"
        ),
        negotiation_max_rounds=_as_int(
            econ_tbl.get("negotiation_max_rounds", trading.DEFAULT_MAX_ROUNDS),
            "[economics].negotiation_max_rounds",
        ),
    )
    if econ.broker_fee < 0:
        raise ScenarioError("[economics].broker_fee must not be negative")
    if econ.delivery_timeout_slots < 1:
        raise ScenarioError("[economics].delivery_timeout_slots must be at least 1")
    if econ.negotiation_max_rounds < 1:
        raise ScenarioError("[economics].negotiation_max_rounds must be at least 1")

    brokers: list[BrokerSpec] = []
    seen_ids: set[str] = set()
    for i, tbl in enumerate(doc.get("brokers", [])):
        ctx = f"[[brokers]] #{i + 1}"
        bid = _req(tbl, "id", ctx)
        if not isinstance(bid, str) or not bid:
            raise ScenarioError(f"{ctx}: id must be a non-empty string")
        if bid in seen_ids:
            raise ScenarioError(f"{ctx}: duplicate id '{bid}'")
        seen_ids.add(bid)
        brokers.append(BrokerSpec(id=bid, location=_as_point(_req(tbl, "location", ctx), ctx)))
    if not brokers:
        raise ScenarioError("at least one [[brokers]] entry is required")

    participants: list[ParticipantSpec] = []
    roles: dict[str, str] = {}
    for i, tbl in enumerate(doc.get("participants", [])):
        ctx = f"[[participants]] #{i + 1}"
        pid = _req(tbl, "id", ctx)
        if not isinstance(pid, str) or not pid:
            raise ScenarioError(f"{ctx}: id must be a non-empty string")
        if pid in seen_ids:
            raise ScenarioError(f"{ctx}: duplicate id '{pid}'")
        seen_ids.add(pid)
        role = _req(tbl, "role", ctx)
        if role not in ("provider", "consumer", "idp"):
            raise ScenarioError(f"{ctx}: role must be provider, consumer or idp")
        location = _as_point(tbl["location"], ctx) if "location" in tbl else None
        rotate = tbl.get("rotate_key_on_completion", False)
        if not isinstance(rotate, bool):
            raise ScenarioError(f"{ctx}: rotate_key_on_completion must be a boolean")
        participants.append(
            ParticipantSpec(
                id=pid,
                role=role,
                balance=_as_money(_req(tbl, "balance", ctx), f"{ctx}.balance"),
                location=location,
                rotate_key_on_completion=rotate,
            )
        )
        roles[pid] = role

    def _owner(pid, ctx, wanted):
        if pid not in roles:
            raise ScenarioError(f"{ctx}: unknown participant '{pid}'")
        if roles[pid] not in wanted:
            raise ScenarioError(f"{ctx}: participant '{pid}' has role {roles[pid]}, expected one of {wanted}")

    listings: list[ListingSpec] = []
    for i, tbl in enumerate(doc.get("listings", [])):
        ctx = f"[[listings]] #{i + 1}"
        provider = _req(tbl, "provider", ctx)
        _owner(provider, ctx, ("provider", "idp"))
        freq = _as_int(_req(tbl, "sampling_frequency", ctx), f"{ctx}.sampling_frequency")
        if freq <= 0:
            raise ScenarioError(f"{ctx}: sampling_frequency must be positive")
        cost = _as_money(_req(tbl, "unit_cost", ctx), f"{ctx}.unit_cost")
        if cost <= 0:
            raise ScenarioError(f"{ctx}: unit_cost must be positive")
        min_price = _as_money(tbl.get("min_price", cost), f"{ctx}.min_price")
        if min_price > cost:
            raise ScenarioError(f"{ctx}: min_price must not exceed unit_cost")
        submit = _as_int(tbl.get("submit_tick", 0), f"{ctx}.submit_tick")
        if not 0 <= submit < duration:
            raise ScenarioError(f"{ctx}: submit_tick out of range")
        duration_offered = _as_int(
            tbl.get("duration_offered", duration), f"{ctx}.duration_offered"
        )
        data_type = _req(tbl, "data_type", ctx)
        if not isinstance(data_type, str) or not data_type:
            raise ScenarioError(f"{ctx}: data_type must be a non-empty string")
        archived = tbl.get("archived", False)
        if not isinstance(archived, bool):
            raise ScenarioError(f"{ctx}: archived must be a boolean")
        listings.append(
            ListingSpec(
                provider=provider,
                device_id=_as_int(_req(tbl, "device_id", ctx), f"{ctx}.device_id"),
                data_type=data_type,
                unit_cost=cost,
                sampling_frequency=freq,
                duration_offered=duration_offered,
                location=_as_point(tbl["location"], ctx) if "location" in tbl else None,
                archived=archived,
                min_price=min_price,
                submit_tick=submit,
            )
        )

    queries: list[QuerySpec] = []
    for i, tbl in enumerate(doc.get("queries", [])):
        ctx = f"[[queries]] #{i + 1}"
        consumer = _req(tbl, "consumer", ctx)
        _owner(consumer, ctx, ("consumer", "idp"))
        submit = _as_int(tbl.get("submit_tick", 0), f"{ctx}.submit_tick")
        start = _as_int(_req(tbl, "start_tick", ctx), f"{ctx}.start_tick")
        end = _as_int(_req(tbl, "end_tick", ctx), f"{ctx}.end_tick")
        gran = _as_int(_req(tbl, "payment_granularity", ctx), f"{ctx}.payment_granularity")
        freq = _as_int(_req(tbl, "frequency_required", ctx), f"{ctx}.frequency_required")
        if freq <= 0:
            raise ScenarioError(f"{ctx}: frequency_required must be positive")
        if gran <= 0:
            raise ScenarioError(f"{ctx}: payment_granularity must be positive")
        if not 0 <= submit < duration:
            raise ScenarioError(f"{ctx}: submit_tick out of range")
        if start <= submit:
            raise ScenarioError(f"{ctx}: start_tick must be after submit_tick")
        if end <= start:
            raise ScenarioError(f"{ctx}: end_tick must be after start_tick")
        if end + 2 > duration:
            raise ScenarioError(
                f"{ctx}: end_tick + 2 must be <= duration_ticks "
                f"(the run needs room to settle and remove the subscription)"
            )
        data_age = tbl.get("data_age", "real_time")
        if data_age not in ("real_time", "archived"):
            raise ScenarioError(f"{ctx}: data_age must be 'real_time' or 'archived'")
        radius = tbl.get("radius")
        if radius is not None:
            if isinstance(radius, bool) or not isinstance(radius, (int, float)):
                raise ScenarioError(f"{ctx}: radius must be a number")
            radius = float(radius)
            if radius < 0:
                raise ScenarioError(f"{ctx}: radius must not be negative")
        data_type = _req(tbl, "data_type", ctx)
        if not isinstance(data_type, str) or not data_type:
            raise ScenarioError(f"{ctx}: data_type must be a non-empty string")
        queries.append(
            QuerySpec(
                consumer=consumer,
                data_type=data_type,
                data_age=data_age,
                location=_as_point(tbl["location"], ctx) if "location" in tbl else None,
                radius=radius,
                budget=_as_money(_req(tbl, "budget", ctx), f"{ctx}.budget"),
                frequency_required=freq,
                submit_tick=submit,
                start_tick=start,
                end_tick=end,
                payment_granularity=gran,
            )
        )

    faults: list[FaultSpec] = []
    broker_ids = {b.id for b in brokers}
    for i, tbl in enumerate(doc.get("faults", [])):
        ctx = f"[[faults]] #{i + 1}"
        kind = _req(tbl, "kind", ctx)
        if kind not in FAULT_KINDS:
            raise ScenarioError(f"{ctx}: unknown fault kind '{kind}'")
        target = _req(tbl, "target", ctx)
        at_tick = _as_int(_req(tbl, "at_tick", ctx), f"{ctx}.at_tick")
        if not 0 <= at_tick < duration:
            raise ScenarioError(f"{ctx}: at_tick out of range")
        if kind in ("broker_crash", "broker_recover", "broker_collusion_bias"):
            if target not in broker_ids:
                raise ScenarioError(f"{ctx}: target '{target}' is not a broker")
        else:
            if target not in roles:
                raise ScenarioError(f"{ctx}: target '{target}' is not a participant")
        params = tbl.get("params", {})
        if not isinstance(params, dict):
            raise ScenarioError(f"{ctx}: params must be a table")
        faults.append(FaultSpec(kind=kind, target=target, at_tick=at_tick, params=dict(params)))

    return Scenario(
        name=name,
        duration_ticks=duration,
        tick_minutes=tick_minutes,
        epoch=epoch,
        requester_role=requester_role,
        economics=econ,
        brokers=tuple(brokers),
        participants=tuple(participants),
        listings=tuple(listings),
        queries=tuple(queries),
        faults=tuple(faults),
    )


def load_scenario_file(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {p}: {exc}") from None
    return load_scenario(text, source=str(p))


# ---------------------------------------------------------------------------
# Per-participant simulation state


@dataclass
class AgentState:
    pid: str
    rng: random.Random
    # tick -> list of planned transactions [{"target","abi","args"}, ...]
    plans: dict[int, list[dict]] = field(default_factory=dict)
    meters: dict[tuple[str, int], trading.MeteringCounter] = field(default_factory=dict)
    channels: dict[tuple[str, int], trading.OffchainChannel] = field(default_factory=dict)
    # how many settlement reports this agent has filed per subscription
    report_counts: dict[tuple[str, int], int] = field(default_factory=dict)
    stall_from: Optional[int] = None
    refuse_from: Optional[int] = None
    tamper_window: Optional[int] = None
    tamper_delta: int = 0


@dataclass
class SubRecord:
    """Harness-side view of one subscription on one contract."""

    address: str
    sub_index: int
    name: str
    provider: str
    consumer: str
    broker_id: str
    qsid: str
    lsid: str
    start: int
    end: int
    frequency: int
    granularity: int
    unit_cost: Money
    expected_units: int
    status: str = "created"
    session_key: bytes = b""
    transfers: int = 0
    settlements_full: int = 0
    settlements_partial: int = 0
    revenue: Money = ZERO
    disputes: int = 0
    dispute_tick: Optional[int] = None
    dispute_reason: Optional[str] = None
    outcome: Optional[str] = None
    refund_provider: Money = ZERO
    refund_consumer: Money = ZERO
    frozen: Money = ZERO
    fees: Money = ZERO
    missed_slots: int = 0
    dispute_lodged: bool = False
    window_marker: int = 0
    removal_tx_pending: bool = False
    accounts_at_dispute: Optional[dict[str, str]] = None

    def key(self) -> tuple[str, int]:
        return (self.address, self.sub_index)

    def identity_key(self) -> str:
        # stable across runs even when chain addresses differ
        return f"{self.provider}|{self.consumer}|{self.qsid}|{self.lsid}"


@dataclass
class EavesdropTap:
    target: str
    frames_seen: int = 0
    plaintexts_recovered: int = 0
    decrypt_failures: int = 0


class RunReport:
    """Condensed outcome of one simulation run."""

    def __init__(self, payload: dict):
        self.payload = payload

    def to_dict(self) -> dict:
        return self.payload

    def digest(self) -> str:
        return digest(self.payload)

    @property
    def contracts(self) -> dict:
        return self.payload["contracts"]

    @property
    def globals(self) -> dict:
        return self.payload["globals"]

    @property
    def brokers(self) -> dict:
        return self.payload["brokers"]

    @property
    def accounts(self) -> dict:
        return self.payload["accounts"]


class Simulation:
    """One deterministic run of a scenario under a seed."""

    def __init__(self, scenario: Scenario, seed: int, trace: bool = False):
        self.scenario = scenario
        self.seed = seed
        self.trace_enabled = trace
        self.kernel = Kernel()
        self.econ = scenario.economics

        self.directory = identity.Directory(self._rng("keys"))
        initial_accounts: dict[str, Money] = {}
        for bspec in scenario.brokers:
            self.directory.create_participant(
                "broker", ZERO, pid=bspec.id, location=bspec.location
            )
            initial_accounts[bspec.id] = ZERO
        for pspec in scenario.participants:
            self.directory.create_participant(
                pspec.role, pspec.balance, pid=pspec.id, location=pspec.location
            )
            initial_accounts[pspec.id] = pspec.balance

        self.network = brokermod.BrokerNetwork([(b.id, b.location) for b in scenario.brokers])
        self.ledger = ledgermod.Ledger(
            initial_accounts,
            self.directory.identities_snapshot(),
            total_brokers=len(scenario.brokers),
        )
        self.initial_total = sum(initial_accounts.values(), ZERO)

        self.agents: dict[str, AgentState] = {}
        for bspec in scenario.brokers:
            self.agents[bspec.id] = AgentState(bspec.id, self._rng(f"agent:{bspec.id}"))
        for pspec in scenario.participants:
            self.agents[pspec.id] = AgentState(pspec.id, self._rng(f"agent:{pspec.id}"))

        # submission registries, keyed by submission id
        self.listing_specs: dict[str, dict] = {}
        self.query_specs: dict[str, dict] = {}
        self.claimed_listings: set[str] = set()
        self.claimed_queries: set[str] = set()
        self.failed_pairs: set[tuple[str, str]] = set()

        self.register_address: Optional[str] = None
        self.subs: dict[tuple[str, int], SubRecord] = {}
        self.pair_to_dsc: dict[tuple[str, str], str] = {}
        self.dsc_names: dict[str, str] = {}
        # DSC addr -> queue of SubRecord templates awaiting on-chain creation
        self.pending_creates: dict[str, list[SubRecord]] = {}
        self.dsc_counter = 0

        self.honest_digests: dict[tuple[int, str], str] = {}
        self.bias_once: dict[str, bool] = {}
        self.taps: list[EavesdropTap] = []

        self.trace_lines: list[str] = []
        self.match_audit: list[str] = []
        self.negotiation_stats = {"sessions": 0, "accepted": 0, "failed": 0, "rounds": 0}
        self.residual_checks = 0
        self._scheduled: set[tuple[int, str]] = set()

        self._bootstrap()

    # -- infrastructure ----------------------------------------------------

    def _rng(self, name: str) -> random.Random:
        material = hashlib.sha256(f"{self.seed}:{name}".encode()).digest()
        return random.Random(int.from_bytes(material, "big"))

    def _trace(self, kind: str, detail: str, dsc: str = "-", sub: str = "-", party: str = "-") -> None:
        line = f"{self.kernel.now}|{kind}|{dsc}|{sub}|{party}|{detail}"
        if self.trace_enabled:
            self.trace_lines.append(line)
        log.debug("%s", line)

    def _schedule_once(self, time: int, phase: int, target: str, payload: Optional[dict] = None) -> None:
        key = (time, target)
        if key in self._scheduled:
            return
        self._scheduled.add(key)
        self.kernel.schedule(time, phase, target, payload)

    def _ensure_seal(self) -> None:
        tick = self.kernel.now
        if self.kernel.phase >= PHASE_SEAL:
            tick += 1
        self._schedule_once(tick, PHASE_SEAL, "seal")

    def _ensure_match_pipeline(self) -> None:
        """Run multicast + match later in the current tick."""
        tick = self.kernel.now
        if self.kernel.phase >= PHASE_MULTICAST:
            tick += 1
        self._schedule_once(tick, PHASE_MULTICAST, "multicast")

    def _bootstrap(self) -> None:
        # Genesis block: the first broker deploys the register contract
        # before the clock starts, so lookups and anchors have a target
        # from tick zero.
        deployer = self.scenario.brokers[0].id
        key = self.directory.get(deployer).active_key
        tx = ledgermod.make_transaction(
            key,
            ledgermod.DEPLOY_TARGET,
            contracts.REGISTER_KIND,
            [],
            self.ledger.next_nonce(key.public_key),
            0,
        )
        receipt = self.ledger.submit_transaction(tx)
        if not receipt.accepted:  # pragma: no cover - construction bug guard
            raise InvariantViolation(f"register deploy rejected: {receipt.reason}")
        block, records = self.ledger.seal_block(self.network.live_ids(), 0)
        if block is None or records[0].status != "ok":  # pragma: no cover
            raise InvariantViolation("genesis block failed to seal")
        self.register_address = records[0].value["address"]

        self.kernel.schedule(0, PHASE_INTAKE, "register_participants")
        for i, lspec in enumerate(self.scenario.listings):
            self.kernel.schedule(lspec.submit_tick, PHASE_INTAKE, "intake_listing", {"index": i})
        for i, qspec in enumerate(self.scenario.queries):
            self.kernel.schedule(qspec.submit_tick, PHASE_INTAKE, "intake_query", {"index": i})
        for i, fspec in enumerate(self.scenario.faults):
            self.kernel.schedule(fspec.at_tick, PHASE_FAULT, "fault", {"index": i})
        self.kernel.schedule(0, PHASE_AUDIT, "audit")

    # -- event dispatch ----------------------------------------------------

    def _dispatch(self, event: SimEvent) -> None:
        handler = getattr(self, f"_on_{event.target}")
        handler(**event.payload)

    def run(self, until: Optional[int] = None) -> RunReport:
        horizon = self.scenario.duration_ticks
        if until is not None:
            horizon = min(horizon, until)
        self.kernel.run(self._dispatch, horizon)
        return self._build_report()

    # -- phase handlers ----------------------------------------------------

    def _on_register_participants(self) -> None:
        for pspec in self.scenario.participants:
            bid = self.network.register_participant(pspec.id, pspec.location)
            p = self.directory.get(pspec.id)
            self.directory.update(replace(p, home_broker=bid))
            self._trace("registered", f"home={bid}", party=pspec.id)

    def _on_intake_listing(self, index: int) -> None:
        lspec = self.scenario.listings[index]
        sid = f"L{index + 1:04d}"
        p = self.directory.get(lspec.provider)
        location = lspec.location if lspec.location is not None else p.location
        listing = brokermod.Listing(
            provider_pk=p.public_key.hex(),
            device_id=lspec.device_id,
            data_type=lspec.data_type,
            unit_cost=lspec.unit_cost,
            sampling_frequency=lspec.sampling_frequency,
            duration_offered=lspec.duration_offered,
            location=location,
            archived=lspec.archived,
            submission_id=sid,
        )
        home = self.network.home_of(lspec.provider)
        if home is None:
            self._trace("intake_dropped", "no live home broker", party=lspec.provider)
            return
        self.network.submit_listing(home, listing)
        self.listing_specs[sid] = {"spec": lspec, "owner": lspec.provider, "obj": listing}
        self._trace("listing", f"{sid} type={lspec.data_type} at {home}", party=lspec.provider)
        self._ensure_match_pipeline()

    def _on_intake_query(self, index: int) -> None:
        qspec = self.scenario.queries[index]
        sid = f"Q{index + 1:04d}"
        p = self.directory.get(qspec.consumer)
        location = qspec.location if qspec.location is not None else p.location
        query = brokermod.Query(
            consumer_pk=p.public_key.hex(),
            data_type=qspec.data_type,
            data_age=qspec.data_age,
            location=location,
            radius=qspec.radius,
            budget=qspec.budget,
            frequency_required=qspec.frequency_required,
            submission_id=sid,
        )
        home = self.network.home_of(qspec.consumer)
        if home is None:
            self._trace("intake_dropped", "no live home broker", party=qspec.consumer)
            return
        self.network.submit_query(home, query)
        self.query_specs[sid] = {"spec": qspec, "owner": qspec.consumer, "obj": query}
        self._trace("query", f"{sid} type={qspec.data_type} at {home}", party=qspec.consumer)
        self._ensure_match_pipeline()

    def _on_multicast(self) -> None:
        sent = self.network.multicast_all()
        if sent:
            self._trace("multicast", f"messages={sent}")
        tick = self.kernel.now
        if any(bid in self.network.dirty for bid in self.network.live_ids()):
            self._schedule_once(tick, PHASE_MATCH, "match")

    def _on_match(self) -> None:
        tick = self.kernel.now
        ready = [bid for bid in self.network.live_ids() if bid in self.network.dirty]
        for bid in ready:
            round_no = tick
            mr = self.network.match(bid, round_no, self.scenario.requester_role)
            self.honest_digests[(round_no, bid)] = self.network.honest_match_digest(bid)
            self.match_audit.append(mr.audit_line())
            if self.bias_once.get(bid):
                self.network.set_bias(bid, False)
                self.network.dirty.discard(bid)
                self.bias_once.pop(bid)
            self._submit_anchor(bid, mr)
            if mr.pair_count:
                self._trace("match_round", f"broker={bid} round={round_no} pairs={mr.pair_count}")
            self._negotiate_results(bid, mr)

    def _submit_anchor(self, bid: str, mr: brokermod.MatchRound) -> None:
        key = self.directory.get(bid).active_key
        tx = ledgermod.make_transaction(
            key,
            self.register_address,
            "AnchorMatchRound",
            [mr.round, mr.broker_id, mr.book_digest, mr.match_digest, mr.pair_count],
            self.ledger.next_nonce(key.public_key),
            self.kernel.now,
        )
        receipt = self.ledger.submit_transaction(tx)
        if not receipt.accepted:  # pragma: no cover - construction bug guard
            self._trace("anchor_rejected", receipt.reason or "?", party=bid)
        self._ensure_seal()

    def _negotiate_results(self, bid: str, mr: brokermod.MatchRound) -> None:
        requester_role = self.scenario.requester_role
        for result in mr.results:
            requester_pid = self.directory.owner_of(bytes.fromhex(result.requester_pk))
            if self.network.home_of(requester_pid) != bid:
                continue  # another replica negotiates for this requester
            if requester_role == "consumer":
                req_sid = result.pair_refs[0][0]
                if req_sid in self.claimed_queries:
                    continue
                rider = self.query_specs[req_sid]["spec"]
                reservation = rider.budget
            else:
                req_sid = result.pair_refs[0][1]
                if req_sid in self.claimed_listings:
                    continue
                reservation = self.listing_specs[req_sid]["spec"].min_price

            counterparts = []
            for (qsid, lsid), (cpk, _dtype, quote) in zip(result.pair_refs, result.counterpart_list):
                if requester_role == "consumer":
                    cid = lsid
                    if lsid in self.claimed_listings or (qsid, lsid) in self.failed_pairs:
                        continue
                    c_reservation = self.listing_specs[lsid]["spec"].min_price
                else:
                    cid = qsid
                    if qsid in self.claimed_queries or (qsid, lsid) in self.failed_pairs:
                        continue
                    c_reservation = self.query_specs[qsid]["spec"].budget
                counterparts.append((cid, cpk, quote, c_reservation))
            if not counterparts:
                continue

            session = trading.start_negotiation(
                result.requester_pk,
                requester_role,
                reservation,
                counterparts,
                max_rounds=self.econ.negotiation_max_rounds,
            )
            trading.run_negotiation(session)
            self.negotiation_stats["sessions"] += 1
            self.negotiation_stats["rounds"] += session.round
            if session.state != "accepted":
                self.negotiation_stats["failed"] += 1
                for cid, _, _, _ in counterparts:
                    pair = (req_sid, cid) if requester_role == "consumer" else (cid, req_sid)
                    self.failed_pairs.add(pair)
                self._trace("negotiation_failed", f"requester={requester_pid}")
                continue
            self.negotiation_stats["accepted"] += 1
            if requester_role == "consumer":
                qsid, lsid = req_sid, session.accepted_counterpart
            else:
                qsid, lsid = session.accepted_counterpart, req_sid
            self._trace(
                "negotiation_accepted",
                f"q={qsid} l={lsid} price={fmt_money(session.accepted_price)} rounds={session.round}",
                party=requester_pid,
            )
            self._plan_contract(bid, qsid, lsid, session.accepted_price)

    def _plan_contract(self, bid: str, qsid: str, lsid: str, price: Money) -> None:
        lmeta = self.listing_specs[lsid]
        qmeta = self.query_specs[qsid]
        provider_pid = lmeta["owner"]
        consumer_pid = qmeta["owner"]
        provider = self.directory.get(provider_pid)
        consumer = self.directory.get(consumer_pid)
        qspec: QuerySpec = qmeta["spec"]
        lspec: ListingSpec = lmeta["spec"]

        self.claimed_listings.add(lsid)
        self.claimed_queries.add(qsid)

        terms = {
            "device_id": lspec.device_id,
            "data_type": lspec.data_type,
            "start_time": qspec.start_tick,
            "end_time": qspec.end_tick,
            "measurement_frequency": lspec.sampling_frequency,
            "cost": fmt_money(price),
            "payment_granularity_n": qspec.payment_granularity,
        }
        n = qspec.payment_granularity
        window = (
            self.econ.dispute_window_ticks
            if self.econ.dispute_window_ticks is not None
            else n * lspec.sampling_frequency
        )
        floor = contracts.deposit_floor(n, price, self.econ.broker_fee)
        dep = fmt_money(floor)

        pair = (provider_pid, consumer_pid)
        existing = self.pair_to_dsc.get(pair)
        if existing is None:
            self.dsc_counter += 1
            name = f"DSC{self.dsc_counter}"
            pk = provider.public_key
            deploy_nonce = self.ledger.next_nonce(pk)
            address = ledgermod.contract_address(pk, deploy_nonce)
            self.pair_to_dsc[pair] = address
            self.dsc_names[address] = name
            self._submit_now(
                provider_pid,
                ledgermod.DEPLOY_TARGET,
                contracts.DSC_KIND,
                [
                    provider.public_key.hex(),
                    consumer.public_key.hex(),
                    bid,
                    fmt_money(self.econ.broker_fee),
                    window,
                ],
            )
            self._submit_now(
                provider_pid,
                self.register_address,
                "RegisterContract",
                [
                    name,
                    provider.public_key.hex(),
                    consumer.public_key.hex(),
                    address,
                    list(contracts.DSC_ABIS),
                ],
            )
        else:
            address = existing
            name = self.dsc_names[address]
        cosig = identity.sign(
            consumer.active_key, contracts.cosign_payload(address, terms, dep, dep)
        )
        self._submit_now(
            provider_pid, address, "CreateContract", [terms, dep, dep, cosig.hex()]
        )
        record = SubRecord(
            address=address,
            sub_index=-1,  # assigned when the chain confirms creation
            name=name,
            provider=provider_pid,
            consumer=consumer_pid,
            broker_id=bid,
            qsid=qsid,
            lsid=lsid,
            start=qspec.start_tick,
            end=qspec.end_tick,
            frequency=lspec.sampling_frequency,
            granularity=n,
            unit_cost=price,
            expected_units=contracts.scheduled_units(
                qspec.start_tick, qspec.end_tick, lspec.sampling_frequency
            ),
        )
        self.pending_creates.setdefault(address, []).append(record)
        self._ensure_seal()

    def _on_control(self) -> None:
        tick = self.kernel.now
        for pid in sorted(self.agents):
            agent = self.agents[pid]
            plans = agent.plans.pop(tick, None)
            if not plans:
                continue
            key = self.directory.get(pid).active_key
            for plan in plans:
                nonce = self.ledger.next_nonce(key.public_key)
                tx = ledgermod.make_transaction(
                    key, plan["target"], plan["abi"], plan["args"], nonce, tick
                )
                receipt = self.ledger.submit_transaction(tx)
                if not receipt.accepted:
                    self._trace(
                        "tx_rejected", f"{plan['abi']}: {receipt.reason}", party=pid
                    )
        self._ensure_seal()

    def _on_seal(self) -> None:
        tick = self.kernel.now
        if not self.ledger.pending:
            return
        block, records = self.ledger.seal_block(
            self.network.live_ids(), tick, challenge_hook=self._challenge_hook
        )
        if block is None:
            self._trace("seal_deferred", "quorum unavailable")
            self._schedule_once(tick + 1, PHASE_SEAL, "seal")
            return
        self._trace("block", f"height={block.height} txs={len(block.transactions)}")
        for record in records:
            self._process_record(record)

    def _challenge_hook(self, ordered: list) -> list:
        extras = []
        used_nonces: dict[bytes, int] = {}
        for tx in ordered:
            if tx.target != self.register_address or tx.abi_name != "AnchorMatchRound":
                continue
            round_no, anchor_bid, _book_d, match_d, _count = tx.args
            honest = self.honest_digests.get((round_no, anchor_bid))
            if honest is None or honest == match_d:
                continue
            challengers = [b for b in self.network.live_ids() if b != anchor_bid]
            if not challengers:
                self._trace("challenge_skipped", f"no live challenger for {anchor_bid}")
                continue
            challenger = challengers[0]
            key = self.directory.get(challenger).active_key
            pk = key.public_key
            nonce = self.ledger.next_nonce(pk) + used_nonces.get(pk, 0)
            used_nonces[pk] = used_nonces.get(pk, 0) + 1
            extras.append(
                ledgermod.make_transaction(
                    key,
                    self.register_address,
                    "ChallengeMatchRound",
                    [round_no, anchor_bid, honest, match_d],
                    nonce,
                    self.kernel.now,
                )
            )
        return extras

    # -- receipt processing --------------------------------------------------

    def _process_record(self, record: ledgermod.ExecRecord) -> None:
        tx = record.tx
        if record.status != "ok":
            self._trace("tx_failed", f"{tx.abi_name}: {record.reason}")
            if tx.abi_name == "CreateContract":
                self._abandon_create(tx.target)
            elif tx.abi_name == "RemoveSubscription":
                self._retry_removal(tx.target, tx.args[0], record.reason)
            return
        for event in record.events:
            kind = event.get("kind")
            if kind == "lookup_registered":
                self._trace("registered_lookup", f"{event['name']} -> {event['address']}")
            elif kind == "subscription_created":
                self._confirm_create(tx.target, event)
            elif kind == "subscription_activated":
                self._activate_sub(tx.target, event, record)
            elif kind == "settlement_waiting":
                self._settlement_waiting(tx.target, event)
            elif kind == "settlement_paid":
                self._settlement_paid(tx.target, event)
            elif kind == "subscription_disputed":
                self._sub_disputed(tx.target, event)
            elif kind == "subscription_removed":
                self._sub_removed(tx.target, event)
            elif kind == "round_flagged":
                self._trace(
                    "round_flagged", f"round={event['round']} broker={event['broker_id']}"
                )

    def _abandon_create(self, address: str) -> None:
        queue = self.pending_creates.get(address)
        if not queue:
            return
        record = queue.pop(0)
        self.claimed_listings.discard(record.lsid)
        self.claimed_queries.discard(record.qsid)
        self._trace("create_abandoned", f"{record.name} q={record.qsid} l={record.lsid}")

    def _confirm_create(self, address: str, event: dict) -> None:
        queue = self.pending_creates.get(address)
        if not queue:  # pragma: no cover - pairing bug guard
            raise InvariantViolation(f"unexpected subscription_created on {address}")
        record = queue.pop(0)
        record.sub_index = event["sub_index"]
        self.subs[record.key()] = record
        # matched entries leave every replica's books once the chain
        # holds the subscription
        lkey = self.listing_specs[record.lsid]["obj"].key
        qkey = self.query_specs[record.qsid]["obj"].key
        self.network.remove_matched(lkey, qkey)
        self._trace(
            "subscription_created",
            f"units={record.expected_units} n={record.granularity}",
            dsc=record.name,
            sub=str(record.sub_index),
        )
        # the provider activates the subscription at its start tick with
        # a fresh session key
        session_key = self.agents[record.provider].rng.randbytes(toycrypto.SESSION_KEY_BYTES)
        plans = self.agents[record.provider].plans.setdefault(record.start, [])
        plans.append(
            {
                "target": address,
                "abi": "ExecuteContract",
                "args": [record.sub_index, session_key.hex()],
            }
        )
        self._schedule_once(record.start, PHASE_CONTROL, "control")
        self.kernel.schedule(
            record.end + 1,
            PHASE_CONTROL,
            "removal",
            {"address": address, "sub_index": record.sub_index},
        )

    def _activate_sub(self, address: str, event: dict, record_exec: ledgermod.ExecRecord) -> None:
        key = (address, event["sub_index"])
        record = self.subs[key]
        record.status = "active"
        record.session_key = bytes.fromhex(record_exec.value["session_key"])
        try:
            self.network.award_fee_token(record.broker_id, address)
            self._trace("fee_token", f"broker={record.broker_id}", dsc=record.name)
        except brokermod.BrokerError:
            pass  # one token per contract, later subscriptions reuse it
        provider = self.directory.get(record.provider)
        consumer = self.directory.get(record.consumer)
        payload = trading.handshake_payload(
            provider.public_key.hex(), consumer.public_key.hex(), record.session_key
        )
        channel = trading.open_channel(
            provider.public_key.hex(),
            consumer.public_key.hex(),
            record.session_key,
            record_exec.value["session_key"],
            identity.sign(provider.active_key, payload),
            identity.sign(consumer.active_key, payload),
        )
        for pid in (record.provider, record.consumer):
            agent = self.agents[pid]
            agent.channels[key] = channel
            agent.meters[key] = trading.MeteringCounter(
                owner_pk=self.directory.get(pid).public_key.hex(),
                dsc_address=address,
                sub_index=record.sub_index,
            )
            agent.report_counts[key] = 0
        self._trace(
            "subscription_active",
            f"start={record.start} end={record.end} freq={record.frequency}",
            dsc=record.name,
            sub=str(record.sub_index),
        )
        self.kernel.schedule(
            record.start,
            PHASE_DATA,
            "delivery",
            {"address": address, "sub_index": record.sub_index, "slot": record.start},
        )
        self.kernel.schedule(
            record.end,
            PHASE_CONTROL,
            "expiry",
            {"address": address, "sub_index": record.sub_index},
        )

    def _settlement_waiting(self, address: str, event: dict) -> None:
        key = (address, event["sub_index"])
        record = self.subs[key]
        record.window_marker += 1
        marker = record.window_marker
        timeout = (
            self.econ.settlement_timeout_ticks
            if self.econ.settlement_timeout_ticks is not None
            else 3 * record.frequency
        )
        reporter = record.provider if event["party"] == "provider" else record.consumer
        other = record.consumer if reporter == record.provider else record.provider
        self.kernel.schedule(
            self.kernel.now + timeout,
            PHASE_DATA,
            "settlement_timeout",
            {
                "address": address,
                "sub_index": record.sub_index,
                "marker": marker,
                "reporter": reporter,
                "counterparty": other,
            },
        )
        self._trace(
            "settlement_waiting",
            f"counter={event['counter']} reporter={reporter}",
            dsc=record.name,
            sub=str(record.sub_index),
        )

    def _settlement_paid(self, address: str, event: dict) -> None:
        key = (address, event["sub_index"])
        record = self.subs[key]
        record.window_marker += 1  # resolved; outstanding timeout checks go stale
        invoice = money(event["invoice"])
        record.revenue += invoice
        counter = event["counter"]
        if counter == record.granularity:
            record.settlements_full += 1
        else:
            record.settlements_partial += 1
        for pid in (record.provider, record.consumer):
            meter = self.agents[pid].meters.get(key)
            if meter is not None and meter.window_count >= counter:
                trading.settle_window(meter, counter)
        self._trace(
            "settlement_paid",
            f"counter={counter} invoice={fmt_money(invoice)} settled={event['settled_units']}",
            dsc=record.name,
            sub=str(record.sub_index),
        )

    def _sub_disputed(self, address: str, event: dict) -> None:
        key = (address, event["sub_index"])
        record = self.subs[key]
        record.status = "disputed"
        record.disputes += 1
        record.dispute_tick = self.kernel.now
        record.dispute_reason = event["reason"]
        record.window_marker += 1
        record.accounts_at_dispute = {
            pid: fmt_money(bal) for pid, bal in sorted(self.ledger.accounts.items())
        }
        for pid in (record.provider, record.consumer):
            self.directory.adjust_reputation(pid, "dispute_lodged")
        self._trace(
            "disputed", event["reason"], dsc=record.name, sub=str(record.sub_index)
        )
        window = self.ledger.get_contract_state(address)["dispute_window"]
        self.kernel.schedule(
            self.kernel.now + window,
            PHASE_CONTROL,
            "removal",
            {"address": address, "sub_index": record.sub_index},
        )

    def _sub_removed(self, address: str, event: dict) -> None:
        key = (address, event["sub_index"])
        record = self.subs[key]
        record.status = "removed"
        record.removal_tx_pending = False
        record.outcome = event["outcome"]
        record.refund_provider = money(event["refund_provider"])
        record.refund_consumer = money(event["refund_consumer"])
        record.frozen = money(event["frozen"])
        record.fees = money(event["broker_fee"])
        if event["outcome"] == "completed":
            for pid in (record.provider, record.consumer):
                self.directory.adjust_reputation(pid, "contract_completed")
                pspec = next(
                    (s for s in self.scenario.participants if s.id == pid), None
                )
                if pspec is not None and pspec.rotate_key_on_completion:
                    rotated = self.directory.rotate_key(pid, now=self.kernel.now)
                    self.ledger.register_identity(rotated.public_key.hex(), pid)
                    self._trace("key_rotated", "rotated active key", party=pid)
        self._trace(
            "subscription_removed",
            f"outcome={event['outcome']} fees={fmt_money(record.fees)}",
            dsc=record.name,
            sub=str(record.sub_index),
        )

    def _on_removal(self, address: str, sub_index: int) -> None:
        key = (address, sub_index)
        record = self.subs.get(key)
        if record is None or record.status == "removed" or record.removal_tx_pending:
            return
        record.removal_tx_pending = True
        self._submit_now(
            record.provider, address, "RemoveSubscription", [sub_index]
        )

    def _retry_removal(self, address: str, sub_index, reason: Optional[str]) -> None:
        key = (address, sub_index)
        record = self.subs.get(key)
        if record is None:
            return
        record.removal_tx_pending = False
        if reason != "too_early":
            return
        state = self.ledger.get_contract_state(address)
        sub = state["subs"][sub_index]
        if sub["status"] == "disputed":
            retry = sub["dispute_tick"] + state["dispute_window"]
        else:
            retry = max(sub["end_time"], sub["escrow"]["locked_until"])
        retry = max(retry, self.kernel.now + 1)
        if retry < self.scenario.duration_ticks:
            self.kernel.schedule(
                retry, PHASE_CONTROL, "removal", {"address": address, "sub_index": sub_index}
            )

    # -- data plane ----------------------------------------------------------

    def _on_delivery(self, address: str, sub_index: int, slot: int) -> None:
        key = (address, sub_index)
        record = self.subs.get(key)
        if record is None or record.status != "active":
            return
        provider_agent = self.agents[record.provider]
        consumer_agent = self.agents[record.consumer]
        stalled = provider_agent.stall_from is not None and slot >= provider_agent.stall_from
        if stalled:
            record.missed_slots += 1
            self._trace(
                "delivery_missed",
                f"slot={slot} missed={record.missed_slots}",
                dsc=record.name,
                sub=str(sub_index),
            )
            if (
                record.missed_slots >= self.econ.delivery_timeout_slots
                and not record.dispute_lodged
            ):
                self._lodge_dispute(record.consumer, record, "delivery_stalled")
        else:
            record.missed_slots = 0
            channel = provider_agent.channels[key]
            unit_hex = provider_agent.rng.randbytes(8).hex()
            status = trading.transfer_data_unit(
                channel,
                address,
                sub_index,
                self.kernel.now,
                self.listing_specs[record.lsid]["obj"].data_type,
                unit_hex,
                provider_agent.meters[key],
                consumer_agent.meters[key],
                expected_time=slot,
            )
            if status != "ack":  # pragma: no cover - transport bug guard
                raise InvariantViolation(f"data unit rejected on {record.name}")
            record.transfers += 1
            self._observe_taps(record, channel)
            meter = provider_agent.meters[key]
            if trading.check_settlement_due(meter, record.granularity) == "due":
                self._file_settlements(record)
        next_slot = slot + record.frequency
        if next_slot < record.end:
            self.kernel.schedule(
                next_slot,
                PHASE_DATA,
                "delivery",
                {"address": address, "sub_index": sub_index, "slot": next_slot},
            )

    def _observe_taps(self, record: SubRecord, channel: trading.OffchainChannel) -> None:
        if not self.taps:
            return
        frame = channel.transcript[-1]
        for tap in self.taps:
            if tap.target not in (record.provider, record.consumer):
                continue
            tap.frames_seen += 1
            # the tap holds no session key; a guessed key must fail the tag
            try:
                toycrypto.decrypt(bytes(toycrypto.KEY_BYTES), frame.nonce, frame.ciphertext)
                tap.plaintexts_recovered += 1  # pragma: no cover - cipher broken
            except toycrypto.CipherError:
                tap.decrypt_failures += 1

    def _file_settlements(self, record: SubRecord) -> None:
        key = record.key()
        for pid in sorted((record.provider, record.consumer)):
            agent = self.agents[pid]
            if agent.refuse_from is not None and self.kernel.now >= agent.refuse_from:
                self._trace(
                    "settlement_withheld", f"by={pid}", dsc=record.name, sub=str(record.sub_index)
                )
                continue
            counter = agent.meters[key].window_count
            agent.report_counts[key] += 1
            if (
                agent.tamper_window is not None
                and agent.report_counts[key] == agent.tamper_window
            ):
                tampered = counter + agent.tamper_delta
                self._trace(
                    "counter_tampered",
                    f"by={pid} true={counter} reported={tampered}",
                    dsc=record.name,
                    sub=str(record.sub_index),
                )
                counter = tampered
            self._submit_now(pid, record.address, "Settlement", [record.sub_index, counter])
        self._ensure_seal()

    def _submit_now(self, pid: str, target: str, abi: str, args: list) -> None:
        keypair = self.directory.get(pid).active_key
        tx = ledgermod.make_transaction(
            keypair, target, abi, args, self.ledger.next_nonce(keypair.public_key), self.kernel.now
        )
        receipt = self.ledger.submit_transaction(tx)
        if not receipt.accepted:
            self._trace("tx_rejected", f"{abi}: {receipt.reason}", party=pid)
        self._ensure_seal()

    def _lodge_dispute(self, pid: str, record: SubRecord, reason: str) -> None:
        record.dispute_lodged = True
        self._trace(
            "dispute_lodged", f"by={pid}: {reason}", dsc=record.name, sub=str(record.sub_index)
        )
        self._submit_now(pid, record.address, "LodgeDispute", [record.sub_index, reason])

    def _on_settlement_timeout(
        self, address: str, sub_index: int, marker: int, reporter: str, counterparty: str
    ) -> None:
        key = (address, sub_index)
        record = self.subs.get(key)
        if record is None or record.status != "active":
            return
        if record.window_marker != marker or record.dispute_lodged:
            return  # the window settled (or escalated) in the meantime
        self._lodge_dispute(reporter, record, f"settlement_timeout:{counterparty}")

    def _on_expiry(self, address: str, sub_index: int) -> None:
        key = (address, sub_index)
        record = self.subs.get(key)
        if record is None or record.status != "active":
            return
        meter = self.agents[record.provider].meters[key]
        if meter.window_count > 0:
            self._file_settlements(record)

    # -- faults ----------------------------------------------------------------

    def _on_fault(self, index: int) -> None:
        fspec = self.scenario.faults[index]
        kind, target, params = fspec.kind, fspec.target, fspec.params
        self._trace("fault", f"{kind} target={target}")
        if kind == "broker_crash":
            self.network.crash_broker(target)
            report = self.network.handle_broker_failure(
                target, locator=lambda pid: self.directory.get(pid).location
            )
            for pid, new_home in sorted(report["moved"].items()):
                p = self.directory.get(pid)
                self.directory.update(replace(p, home_broker=new_home))
                self._trace("rehomed", f"{pid} -> {new_home}")
            for pid in report["unassigned"]:
                self._trace("unassigned", pid)
            self._ensure_match_pipeline()
        elif kind == "broker_recover":
            self.network.recover_broker(target)
            self._ensure_match_pipeline()
        elif kind == "counter_tamper":
            agent = self.agents[target]
            agent.tamper_window = int(params.get("window", 1))
            agent.tamper_delta = int(params.get("delta", -1))
        elif kind == "payment_refusal":
            self.agents[target].refuse_from = fspec.at_tick
        elif kind == "delivery_stall":
            self.agents[target].stall_from = fspec.at_tick
        elif kind == "eavesdrop":
            self.taps.append(EavesdropTap(target=target))
        elif kind == "broker_collusion_bias":
            self.network.set_bias(target, True)
            if params.get("once", True):
                self.bias_once[target] = True
            self._ensure_match_pipeline()

    # -- audit -------------------------------------------------------------------

    def _on_audit(self) -> None:
        total = self.ledger.total_money()
        residual = total - self.initial_total
        if residual != 0:
            raise InvariantViolation(
                f"conservation violated at tick {self.kernel.now}: residual {fmt_money(residual)}"
            )
        self.residual_checks += 1
        nxt = self.kernel.now + 1
        if nxt < self.scenario.duration_ticks:
            self.kernel.schedule(nxt, PHASE_AUDIT, "audit")

    # -- reporting ---------------------------------------------------------------

    def _build_report(self) -> RunReport:
        contracts_out: dict[str, dict] = {}
        disputes_total = 0
        transfers_total = 0
        revenue_total = ZERO
        for key in sorted(self.subs):
            rec = self.subs[key]
            state = self.ledger.get_contract_state(rec.address)
            sub_state = state["subs"][rec.sub_index]
            disputes_total += rec.disputes
            transfers_total += rec.transfers
            revenue_total += rec.revenue
            contracts_out[rec.identity_key()] = {
                "name": rec.name,
                "broker": rec.broker_id,
                "transfers": rec.transfers,
                "settlements_full": rec.settlements_full,
                "settlements_partial": rec.settlements_partial,
                "revenue": fmt_money(rec.revenue),
                "expected_units": rec.expected_units,
                "settled_units": sub_state["settled_units"],
                "disputes": rec.disputes,
                "dispute_reason": rec.dispute_reason,
                "status": sub_state["status"],
                "outcome": sub_state["outcome"],
                "refund_provider": fmt_money(rec.refund_provider),
                "refund_consumer": fmt_money(rec.refund_consumer),
                "frozen": fmt_money(rec.frozen),
                "fees": fmt_money(rec.fees),
                "unit_cost": fmt_money(rec.unit_cost),
            }
        brokers_out: dict[str, dict] = {}
        for bid in sorted(self.network.brokers):
            bstate = self.network.brokers[bid]
            brokers_out[bid] = {
                "live": bstate.live,
                "fee_tokens": bstate.fee_tokens,
                "fee_account": fmt_money(self.ledger.fee_accounts.get(bid, ZERO)),
                "registered": len(bstate.registered_participants),
            }
        flagged = []
        if self.register_address is not None:
            flagged = list(self.ledger.get_contract_state(self.register_address)["flagged_rounds"])
        residual = self.ledger.total_money() - self.initial_total
        payload = {
            "scenario": self.scenario.name,
            "seed": self.seed,
            "ticks": self.kernel.now,
            "contracts": contracts_out,
            "brokers": brokers_out,
            "accounts": {
                pid: fmt_money(bal) for pid, bal in sorted(self.ledger.accounts.items())
            },
            "reputations": {
                pid: fmt_money(self.directory.get(pid).reputation)
                for pid in sorted(self.agents)
            },
            "globals": {
                "blocks": len(self.ledger.blocks),
                "multicast_messages": self.network.multicast_messages,
                "conservation_residual": fmt_money(residual),
                "residual_checks": self.residual_checks,
                "disputes": disputes_total,
                "transfers": transfers_total,
                "revenue": fmt_money(revenue_total),
                "flagged_rounds": flagged,
                "negotiation": dict(self.negotiation_stats),
                "eavesdrop": {
                    "taps": len(self.taps),
                    "frames_seen": sum(t.frames_seen for t in self.taps),
                    "plaintexts_recovered": sum(t.plaintexts_recovered for t in self.taps),
                },
            },
        }
        return RunReport(payload)


# ---------------------------------------------------------------------------
# Output files


METRICS_HEADER = "row_type\tkey\tmetric\tvalue"


def metrics_rows(report: RunReport) -> list[tuple[str, str, str, str]]:
    rows: list[tuple[str, str, str, str]] = []
    for key, stats in report.contracts.items():
        for metric in sorted(stats):
            value = stats[metric]
            rows.append(("contract", key, metric, "" if value is None else str(value)))
    for bid, stats in report.brokers.items():
        for metric in sorted(stats):
            rows.append(("broker", bid, metric, str(stats[metric])))
    for pid, balance in report.accounts.items():
        rows.append(("account", pid, "balance", balance))
    for pid, rep in report.payload["reputations"].items():
        rows.append(("reputation", pid, "score", rep))
    g = report.globals
    for metric in ("blocks", "multicast_messages", "conservation_residual",
                   "residual_checks", "disputes", "transfers", "revenue"):
        rows.append(("global", "run", metric, str(g[metric])))
    rows.append(
        ("global", "run", "flagged_rounds", ";".join(str(r) for r in g["flagged_rounds"]) or "none")
    )
    for metric in sorted(g["negotiation"]):
        rows.append(("negotiation", "run", metric, str(g["negotiation"][metric])))
    for metric in sorted(g["eavesdrop"]):
        rows.append(("eavesdrop", "run", metric, str(g["eavesdrop"][metric])))
    return rows


def emit_metrics(sim: Simulation, report: RunReport, outdir: str | Path) -> list[Path]:
    """Write metrics, audit streams and contract table dumps to a directory."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    metrics_path = out / "metrics.tsv"
    lines = [METRICS_HEADER]
    lines += ["\t".join(row) for row in metrics_rows(report)]
    metrics_path.write_text("\n".join(lines) + "\n")
    written.append(metrics_path)

    chain_path = out / "chain_audit.txt"
    chain_path.write_text("\n".join(sim.ledger.audit_lines()) + "\n")
    written.append(chain_path)

    match_path = out / "match_audit.txt"
    match_path.write_text("\n".join(sim.match_audit) + ("\n" if sim.match_audit else ""))
    written.append(match_path)

    tables: list[str] = []
    if sim.register_address is not None:
        reg_state = sim.ledger.get_contract_state(sim.register_address)
        tables.append("# lookup table")
        tables.append(contracts.dump_table(contracts.lookup_table(reg_state)))
    seen_addr: set[str] = set()
    for key in sorted(sim.subs):
        rec = sim.subs[key]
        if rec.address in seen_addr:
            continue
        seen_addr.add(rec.address)
        dsc_state = sim.ledger.get_contract_state(rec.address)
        tables.append(f"# subscription table {rec.name} at {rec.address}")
        tables.append(
            contracts.dump_table(
                contracts.subscription_table(
                    dsc_state,
                    epoch=sim.scenario.epoch,
                    tick_minutes=sim.scenario.tick_minutes,
                )
            )
        )
    tables_path = out / "contract_tables.txt"
    tables_path.write_text("\n\n".join(tables) + ("\n" if tables else ""))
    written.append(tables_path)

    if sim.trace_enabled:
        trace_path = out / "trace.txt"
        trace_path.write_text("\n".join(sim.trace_lines) + ("\n" if sim.trace_lines else ""))
        written.append(trace_path)
    return written


def export_chain(sim: Simulation, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    extra = {"scenario": sim.scenario.name, "seed": sim.seed}
    p.write_text(sim.ledger.export_jsonl(genesis_extra=extra))
    return p
