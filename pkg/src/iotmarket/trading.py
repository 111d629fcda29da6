"""Off-chain requester/requestee protocol.

Covers the bid/counter-bid negotiation that follows a match, the
session-key encrypted channel that carries data units, and the metering
counters both parties keep so that settlement windows line up. Nothing
in this module touches the ledger; agents react to its outcomes by
submitting transactions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from . import toycrypto
from .currency import Money
from .encoding import canon_json, sha256_hex
from .toycrypto import CipherError

DEFAULT_MAX_ROUNDS = 5


class TradingError(Exception):
    pass


# -- negotiation ------------------------------------------------------------


@dataclass
class NegotiationSession:
    requester_pk: str
    requester_role: str  # "consumer" | "provider"
    requester_reservation: Money  # budget for a consumer, minimum price for a provider
    counterpart_ids: list  # opaque stable ids (one per counterpart thread)
    counterpart_pks: dict  # id -> pk
    reservations: dict  # id -> counterpart's private reservation
    quotes: dict  # id -> price quoted in the match list
    round: int = 0
    max_rounds: int = DEFAULT_MAX_ROUNDS
    bids: dict = field(default_factory=dict)  # id -> [(price, origin)]
    state: str = "open"  # "open" | "accepted" | "failed"
    accepted_counterpart: Optional[str] = None
    accepted_price: Optional[Money] = None
    current_offer: Optional[Money] = None

    def is_admissible(self, price: Money) -> bool:
        if self.requester_role == "consumer":
            return price <= self.requester_reservation
        return price >= self.requester_reservation


def _accept(session: NegotiationSession, counterpart_id: str, price: Money) -> NegotiationSession:
    session.state = "accepted"
    session.accepted_counterpart = counterpart_id
    session.accepted_price = price
    return session


def start_negotiation(
    requester_pk: str,
    requester_role: str,
    requester_reservation: Money,
    counterparts: list,  # of (counterpart_id, counterpart_pk, quote, counterpart_reservation)
    max_rounds: int = DEFAULT_MAX_ROUNDS,
) -> NegotiationSession:
    if not counterparts:
        raise TradingError("empty_counterpart_list")
    session = NegotiationSession(
        requester_pk=requester_pk,
        requester_role=requester_role,
        requester_reservation=requester_reservation,
        counterpart_ids=[c[0] for c in counterparts],
        counterpart_pks={c[0]: c[1] for c in counterparts},
        quotes={c[0]: c[2] for c in counterparts},
        reservations={c[0]: c[3] for c in counterparts},
        max_rounds=max_rounds,
    )
    for cid, _, quote, _ in counterparts:
        session.bids[cid] = [(quote, "requestee")]
    if len(counterparts) == 1:
        # a single counterpart is accepted at its quote when admissible
        cid = session.counterpart_ids[0]
        quote = session.quotes[cid]
        if session.is_admissible(quote):
            return _accept(session, cid, quote)
        session.state = "failed"
    return session


def _requester_bid(session: NegotiationSession) -> Money:
    reservation = session.requester_reservation
    if session.current_offer is None:
        # open at the reservation value shaded by a 10% margin
        if session.requester_role == "consumer":
            offer = reservation * 9 / 10
        else:
            offer = reservation * 11 / 10
    else:
        # concede halfway toward the reservation each round
        offer = (session.current_offer + reservation) / 2
    session.current_offer = offer
    return offer


def _counter_bid(session: NegotiationSession, counterpart_id: str, offer: Money) -> Money:
    reservation = session.reservations[counterpart_id]
    midpoint = (reservation + offer) / 2
    if session.requester_role == "consumer":
        # the counterpart is a provider and never goes below its minimum
        return max(reservation, midpoint)
    # the counterpart is a consumer and never exceeds its budget
    return min(reservation, midpoint)


def negotiate_round(session: NegotiationSession) -> NegotiationSession:
    if session.state != "open":
        raise TradingError("session_not_open")
    offer = _requester_bid(session)
    counters = []
    for cid in session.counterpart_ids:
        session.bids[cid].append((offer, "requester"))
        counter = _counter_bid(session, cid, offer)
        session.bids[cid].append((counter, "requestee"))
        counters.append((counter, cid))
    admissible = [(price, cid) for price, cid in counters if session.is_admissible(price)]
    if admissible:
        if session.requester_role == "consumer":
            best = min(price for price, _ in admissible)
        else:
            best = max(price for price, _ in admissible)
        cid = min(c for p, c in admissible if p == best)
        return _accept(session, cid, best)
    session.round += 1
    if session.round >= session.max_rounds:
        session.state = "failed"
    return session


def run_negotiation(session: NegotiationSession) -> NegotiationSession:
    while session.state == "open":
        negotiate_round(session)
    return session


# -- off-chain channel ---------------------------------------------------------


@dataclass
class Frame:
    seq: int
    sim_time: int
    nonce: bytes
    ciphertext: bytes


@dataclass
class OffchainChannel:
    endpoints: tuple
    session_key: bytes
    transcript: list = field(default_factory=list)
    open: bool = True
    _seq: int = 0


def handshake_payload(a_pk: str, b_pk: str, session_key: bytes) -> bytes:
    return canon_json(["channel-open", a_pk, b_pk, sha256_hex(session_key)]).encode("utf-8")


def open_channel(
    a_pk: str,
    b_pk: str,
    session_key: bytes,
    issued_key_hex: str,
    sig_a: bytes,
    sig_b: bytes,
) -> OffchainChannel:
    """Open an encrypted channel keyed by the DSC-issued session key.

    Both endpoints sign the channel-open handshake, and the key offered
    must be exactly the one ExecuteContract recorded for this pair.
    """
    if session_key.hex() != issued_key_hex:
        raise TradingError("foreign_session_key")
    payload = handshake_payload(a_pk, b_pk, session_key)
    if not toycrypto.verify(bytes.fromhex(a_pk), payload, sig_a):
        raise TradingError("bad_handshake")
    if not toycrypto.verify(bytes.fromhex(b_pk), payload, sig_b):
        raise TradingError("bad_handshake")
    return OffchainChannel(endpoints=(a_pk, b_pk), session_key=session_key)


def channel_send(channel: OffchainChannel, sim_time: int, payload: dict) -> Frame:
    if not channel.open:
        raise TradingError("channel_closed")
    nonce = channel._seq.to_bytes(16, "big")
    plaintext = canon_json(payload).encode("utf-8")
    frame = Frame(
        seq=channel._seq,
        sim_time=sim_time,
        nonce=nonce,
        ciphertext=toycrypto.encrypt(channel.session_key, nonce, plaintext),
    )
    channel._seq += 1
    channel.transcript.append(frame)
    return frame


def channel_recv(channel: OffchainChannel, frame: Frame) -> dict:
    plaintext = toycrypto.decrypt(channel.session_key, frame.nonce, frame.ciphertext)
    return json.loads(plaintext.decode("utf-8"))


# -- metering and delivery -----------------------------------------------------


@dataclass
class MeteringCounter:
    owner_pk: str
    dsc_address: str
    sub_index: int
    window_count: int = 0
    total_count: int = 0


def record_delivery(meter: MeteringCounter) -> MeteringCounter:
    meter.window_count += 1
    meter.total_count += 1
    return meter


def settle_window(meter: MeteringCounter, counter: int) -> MeteringCounter:
    meter.window_count -= counter
    assert meter.window_count >= 0, "settled more units than metered"
    return meter


def check_settlement_due(meter: MeteringCounter, n: int) -> str:
    return "due" if meter.window_count >= n else "not_due"


def transfer_data_unit(
    channel: OffchainChannel,
    dsc_address: str,
    sub_index: int,
    sim_time: int,
    data_type: str,
    unit_hex: str,
    provider_meter: MeteringCounter,
    consumer_meter: MeteringCounter,
    expected_time: int,
) -> str:
    """Honest-path delivery: encrypt, send, verify, ack, meter both sides.

    Returns "ack" or "nack". Honest parties count only acknowledged
    deliveries, which is what keeps their counters synchronized.
    """
    frame = channel_send(
        channel,
        sim_time,
        {
            "dsc": dsc_address,
            "sub": sub_index,
            "t": sim_time,
            "data_type": data_type,
            "unit": unit_hex,
        },
    )
    try:
        seen = channel_recv(channel, frame)
    except CipherError:
        return "nack"
    if seen["dsc"] != dsc_address or seen["sub"] != sub_index:
        return "nack"
    if seen["data_type"] != data_type or seen["t"] != expected_time:
        return "nack"
    record_delivery(provider_meter)
    record_delivery(consumer_meter)
    return "ack"
