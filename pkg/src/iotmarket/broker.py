"""The trust-less broker tier.

Brokers register participants by geographic proximity, absorb listings
and queries into replicated books (multicast keeps every live broker's
merged view identical), run the deterministic match predicate, and
anchor a digest of each round's books and output on-chain via the harness.
Failover moves orphaned participants to the nearest survivor; books are
already replicated so no match is ever lost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .currency import Money
from .encoding import digest


class BrokerError(Exception):
    pass


@dataclass(frozen=True)
class Listing:
    provider_pk: str
    device_id: int
    data_type: str
    unit_cost: Money
    sampling_frequency: int
    duration_offered: int
    location: Optional[tuple[float, float]]
    archived: bool
    submission_id: str

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.provider_pk, self.data_type, self.submission_id)

    def snapshot(self) -> dict:
        return {
            "provider_pk": self.provider_pk,
            "device_id": self.device_id,
            "data_type": self.data_type,
            "unit_cost": self.unit_cost,
            "sampling_frequency": self.sampling_frequency,
            "duration_offered": self.duration_offered,
            "location": list(self.location) if self.location else None,
            "archived": self.archived,
            "submission_id": self.submission_id,
        }


@dataclass(frozen=True)
class Query:
    consumer_pk: str
    data_type: str
    data_age: str  # "archived" | "real_time"
    location: Optional[tuple[float, float]]
    radius: Optional[float]  # None means unbounded
    budget: Money
    frequency_required: int
    submission_id: str

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.consumer_pk, self.data_type, self.submission_id)

    def snapshot(self) -> dict:
        return {
            "consumer_pk": self.consumer_pk,
            "data_type": self.data_type,
            "data_age": self.data_age,
            "location": list(self.location) if self.location else None,
            "radius": self.radius,
            "budget": self.budget,
            "frequency_required": self.frequency_required,
            "submission_id": self.submission_id,
        }


@dataclass
class MatchResult:
    requester_pk: str
    counterpart_list: list  # of (counterpart_pk, data_type, quoted_price)
    broker_id: str
    round: int
    pair_refs: list  # of (query_submission_id, listing_submission_id), parallel


@dataclass
class MatchRound:
    broker_id: str
    round: int
    pairs: list
    results: list
    book_digest: str
    match_digest: str

    @property
    def pair_count(self) -> int:
        return len(self.pairs)

    def audit_line(self) -> str:
        return f"{self.round}|{self.broker_id}|{self.book_digest}|{self.match_digest}|{self.pair_count}"


@dataclass
class BrokerState:
    id: str
    location: tuple[float, float]
    live: bool = True
    registered_participants: set = field(default_factory=set)
    listing_book: dict = field(default_factory=dict)
    query_book: dict = field(default_factory=dict)
    pending_delta: list = field(default_factory=list)
    fee_tokens: int = 0
    awarded_dscs: set = field(default_factory=set)
    biased: bool = False


def _dist_sq(a: Optional[tuple[float, float]], b: tuple[float, float]) -> float:
    ax, ay = a if a is not None else (0.0, 0.0)
    return (ax - b[0]) ** 2 + (ay - b[1]) ** 2


def _matches(query: Query, listing: Listing) -> bool:
    if query.data_type != listing.data_type:
        return False
    if query.location is not None and query.radius is not None:
        if listing.location is None:
            return False
        if _dist_sq(query.location, listing.location) > query.radius**2:
            return False
    if listing.unit_cost > query.budget:
        return False
    if listing.sampling_frequency > query.frequency_required:
        return False
    if (query.data_age == "archived") != listing.archived:
        return False
    return True


class BrokerNetwork:
    def __init__(self, brokers: list[tuple[str, tuple[float, float]]]):
        self.brokers: dict[str, BrokerState] = {}
        for broker_id, location in brokers:
            self.add_broker(broker_id, location)
        self.dirty: set[str] = set()
        self.multicast_messages = 0

    def add_broker(self, broker_id: str, location: tuple[float, float]) -> BrokerState:
        if broker_id in self.brokers:
            raise BrokerError(f"duplicate broker id {broker_id}")
        state = BrokerState(id=broker_id, location=tuple(location))
        self.brokers[broker_id] = state
        return state

    def live_ids(self) -> list[str]:
        return sorted(b.id for b in self.brokers.values() if b.live)

    # -- registration ---------------------------------------------------------

    def nearest_live(self, location: Optional[tuple[float, float]]) -> str:
        live = [b for b in self.brokers.values() if b.live]
        if not live:
            raise BrokerError("no_broker")
        return min(live, key=lambda b: (_dist_sq(location, b.location), b.id)).id

    def register_participant(self, pid: str, location: Optional[tuple[float, float]]) -> str:
        broker_id = self.nearest_live(location)
        for state in self.brokers.values():
            state.registered_participants.discard(pid)
        self.brokers[broker_id].registered_participants.add(pid)
        return broker_id

    def home_of(self, pid: str) -> Optional[str]:
        for state in self.brokers.values():
            if pid in state.registered_participants:
                return state.id
        return None

    # -- books and multicast ----------------------------------------------------

    def submit_listing(self, home_broker: str, listing: Listing) -> None:
        state = self.brokers[home_broker]
        if listing.key in state.listing_book:
            raise BrokerError("duplicate_listing")
        state.listing_book[listing.key] = listing
        state.pending_delta.append(("listing", listing))
        self.dirty.add(home_broker)

    def submit_query(self, home_broker: str, query: Query) -> None:
        state = self.brokers[home_broker]
        if query.key in state.query_book:
            raise BrokerError("duplicate_query")
        state.query_book[query.key] = query
        state.pending_delta.append(("query", query))
        self.dirty.add(home_broker)

    def multicast_lists(self, origin_id: str) -> int:
        origin = self.brokers[origin_id]
        if not origin.live:
            raise BrokerError("broker_not_live")
        delivered = 0
        peers = [b for bid, b in sorted(self.brokers.items()) if bid != origin_id and b.live]
        for kind, item in origin.pending_delta:
            for peer in peers:
                book = peer.listing_book if kind == "listing" else peer.query_book
                if item.key not in book:
                    book[item.key] = item
                self.dirty.add(peer.id)
                delivered += 1
        origin.pending_delta = []
        self.multicast_messages += delivered
        return delivered

    def multicast_all(self) -> int:
        total = 0
        for broker_id in sorted(self.brokers):
            state = self.brokers[broker_id]
            if state.live and state.pending_delta:
                total += self.multicast_lists(broker_id)
        return total

    def resync_books(self, broker_id: str) -> None:
        peers = [bid for bid in self.live_ids() if bid != broker_id]
        if not peers:
            return
        source = self.brokers[peers[0]]
        target = self.brokers[broker_id]
        for key, item in source.listing_book.items():
            target.listing_book.setdefault(key, item)
        for key, item in source.query_book.items():
            target.query_book.setdefault(key, item)
        self.dirty.add(broker_id)

    def remove_matched(self, listing_key: tuple, query_key: tuple) -> None:
        """Drop a consumed pair from every replica once its DSC is registered."""
        for state in self.brokers.values():
            state.listing_book.pop(listing_key, None)
            state.query_book.pop(query_key, None)
            state.pending_delta = [
                (kind, item) for kind, item in state.pending_delta if item.key not in (listing_key, query_key)
            ]

    # -- matching -----------------------------------------------------------------

    def _pairs_for(self, state: BrokerState) -> list[tuple]:
        by_type: dict[str, list[Listing]] = {}
        for listing in state.listing_book.values():
            by_type.setdefault(listing.data_type, []).append(listing)
        pairs = []
        for query in state.query_book.values():
            for listing in by_type.get(query.data_type, ()):
                if _matches(query, listing):
                    pairs.append(
                        (
                            query.submission_id,
                            listing.submission_id,
                            query.consumer_pk,
                            listing.provider_pk,
                            listing.data_type,
                            listing.unit_cost,
                            query.budget,
                        )
                    )
        pairs.sort(key=lambda p: (p[0], p[1]))
        return pairs

    @staticmethod
    def _bias(pairs: list[tuple]) -> list[tuple]:
        """A colluding broker's doctored output: only the last-sorted listing
        per query survives, steering every requester to a chosen provider."""
        best: dict[str, tuple] = {}
        for pair in pairs:
            best[pair[0]] = pair
        return [best[qsid] for qsid in sorted(best)]

    def _book_digest(self, state: BrokerState) -> str:
        listings = [state.listing_book[k].snapshot() for k in sorted(state.listing_book)]
        queries = [state.query_book[k].snapshot() for k in sorted(state.query_book)]
        return digest({"listings": listings, "queries": queries})

    @staticmethod
    def _match_digest(pairs: list[tuple]) -> str:
        return digest([list(p[:6]) for p in pairs])

    def match(self, broker_id: str, round_no: int, requester_role: str = "consumer") -> MatchRound:
        state = self.brokers[broker_id]
        if not state.live:
            raise BrokerError("broker_not_live")
        pairs = self._pairs_for(state)
        if state.biased:
            pairs = self._bias(pairs)
        results = self._group(pairs, broker_id, round_no, requester_role)
        self.dirty.discard(broker_id)
        return MatchRound(
            broker_id=broker_id,
            round=round_no,
            pairs=pairs,
            results=results,
            book_digest=self._book_digest(state),
            match_digest=self._match_digest(pairs),
        )

    def honest_match_digest(self, broker_id: str) -> str:
        return self._match_digest(self._pairs_for(self.brokers[broker_id]))

    @staticmethod
    def _group(pairs: list[tuple], broker_id: str, round_no: int, requester_role: str) -> list[MatchResult]:
        grouped: dict[str, MatchResult] = {}
        for qsid, lsid, consumer_pk, provider_pk, data_type, unit_cost, budget in pairs:
            if requester_role == "consumer":
                requester, counterpart, quote = consumer_pk, provider_pk, unit_cost
                group_key = qsid
            else:
                requester, counterpart, quote = provider_pk, consumer_pk, budget
                group_key = lsid
            result = grouped.get(group_key)
            if result is None:
                result = MatchResult(
                    requester_pk=requester,
                    counterpart_list=[],
                    broker_id=broker_id,
                    round=round_no,
                    pair_refs=[],
                )
                grouped[group_key] = result
            result.counterpart_list.append((counterpart, data_type, quote))
            result.pair_refs.append((qsid, lsid))
        return [grouped[k] for k in sorted(grouped)]

    # -- failover ------------------------------------------------------------------

    def crash_broker(self, broker_id: str) -> None:
        self.brokers[broker_id].live = False
        self.dirty.discard(broker_id)

    def handle_broker_failure(self, failed_id: str, locator=None) -> dict:
        """Re-register a dead broker's participants with the nearest survivor.

        locator maps pid -> (x, y); the network itself does not track
        participant geography.
        """
        failed = self.brokers[failed_id]
        if failed.live:
            raise BrokerError("broker_still_live")
        moved: dict[str, str] = {}
        unassigned: list[str] = []
        orphans = sorted(failed.registered_participants)
        any_live = any(b.live for b in self.brokers.values())
        for pid in orphans:
            if not any_live:
                unassigned.append(pid)
                continue
            failed.registered_participants.discard(pid)
            location = locator(pid) if locator is not None else None
            moved[pid] = self.register_participant(pid, location)
        for bid in self.live_ids():
            self.dirty.add(bid)
        return {"failed": failed_id, "moved": moved, "unassigned": unassigned}

    def recover_broker(self, broker_id: str) -> None:
        state = self.brokers[broker_id]
        state.live = True
        self.resync_books(broker_id)

    # -- fee tokens and admission ------------------------------------------------------

    def award_fee_token(self, broker_id: str, dsc_address: str) -> BrokerState:
        state = self.brokers[broker_id]
        if dsc_address in state.awarded_dscs:
            raise BrokerError("duplicate_award")
        state.awarded_dscs.add(dsc_address)
        state.fee_tokens += 1
        return state

    def vote_broker_admission(
        self,
        candidate_id: str,
        location: tuple[float, float],
        votes: dict[str, str],
    ) -> tuple[str, list[str]]:
        if candidate_id in self.brokers:
            raise BrokerError("already_broker")
        warnings = []
        accept_weight = 0
        total_weight = 0
        for voter_id in sorted(votes):
            choice = votes[voter_id]
            voter = self.brokers.get(voter_id)
            if voter is None or voter.fee_tokens < 1:
                warnings.append(f"vote from {voter_id} ignored: no fee tokens")
                continue
            total_weight += voter.fee_tokens
            if choice == "accept":
                accept_weight += voter.fee_tokens
        if total_weight == 0 or accept_weight * 2 <= total_weight:
            return "rejected", warnings
        state = self.add_broker(candidate_id, location)
        self.resync_books(candidate_id)
        state.live = True
        return "admitted", warnings

    def set_bias(self, broker_id: str, enabled: bool) -> None:
        self.brokers[broker_id].biased = enabled
        if enabled:
            self.dirty.add(broker_id)
