"""Chain-traversing reputation indexer.

Reputation is reconstructed entirely from public chain data: a counted
voucher's fee increments the score of the service marker it tags and of
the producer who sold it. Detection is structural:

  payment  = non-coinbase tx whose second of exactly three outputs is a
             zero-valued marker and whose first output pays a key hash;
  funding  = tx spending some payment's price output (output 0);
  voucher  = tx spending a 2-of-2 output of a funding, carrying a
             zero-valued marker equal to the payment's, with fee > 0.

Only the first qualifying voucher per payment counts (the price output is
spendable once, so this closes fee-recycling loopholes). Scores never
decrease; reorgs are out of scope.

Two traversal routes are provided: the incremental `index_block` state
machine and the batch `full_rescan` pipeline. They are implemented
independently and must agree at every height; the test suite uses the
batch route as the oracle for the incremental one.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple, Union

from . import codec, ledger
from .errors import InvalidWeightConfigError, OutOfOrderBlockError


@dataclass(frozen=True)
class ScoringMode:
    """unweighted: every counted vote fee scores at face value.
    weighted: a vote contributes floor(w * fee) with w = r / (r + c),
    where r is the voter's own producer score as of the previous block."""

    kind: str = "unweighted"
    constant: int = 0

    def __post_init__(self):
        if self.kind not in ("unweighted", "weighted"):
            raise InvalidWeightConfigError(f"unknown scoring mode {self.kind!r}")
        if self.kind == "weighted" and self.constant <= 0:
            raise InvalidWeightConfigError("weighting constant must be positive")


UNWEIGHTED = ScoringMode()


def weighted(constant: int) -> ScoringMode:
    return ScoringMode("weighted", constant)


def weight(voter_score: int, constant: int) -> float:
    """Vote weight in [0, 1): w = r / (r + c).

    Zero-score voters carry no weight, so fresh identities cannot mint
    reputation for anyone; weight grows monotonically with the voter's own
    standing and never reaches 1.
    """
    if constant <= 0:
        raise InvalidWeightConfigError("weighting constant must be positive")
    if voter_score < 0:
        raise InvalidWeightConfigError("voter score cannot be negative")
    return voter_score / (voter_score + constant)


def weighted_contribution(voter_score: int, constant: int, vote_fee: int) -> int:
    """floor(w * fee), computed with exact integer arithmetic."""
    if constant <= 0:
        raise InvalidWeightConfigError("weighting constant must be positive")
    return (voter_score * vote_fee) // (voter_score + constant)


@dataclass(frozen=True)
class ReputationEvent:
    """One counted voucher: who voted for which service, and for how much."""

    marker: bytes          # 20-byte service marker payload
    producer: bytes        # key hash paid by the payment's price output
    voter: bytes           # key hash that signed the payment's first input
    vote_fee: int
    contribution: int      # what the fee scored under the index's mode
    height: int
    payment_txid: bytes
    voucher_txid: bytes


@dataclass(frozen=True)
class PaymentRecord:
    txid: bytes
    marker: bytes
    producer: bytes
    voter: bytes
    price: int
    height: int


@dataclass
class ProducerReport:
    total: int
    breakdown: List[Tuple[bytes, int]]  # (marker payload, score), sorted


def _detect_payment(tx: ledger.Transaction, height: int) -> Optional[PaymentRecord]:
    if tx.is_coinbase or len(tx.outputs) != 3:
        return None
    out1, out2 = tx.outputs[0], tx.outputs[1]
    if not isinstance(out1.lock, ledger.PayToKeyHash):
        return None
    if not isinstance(out2.lock, ledger.Marker) or out2.amount != 0:
        return None
    if not tx.inputs or not tx.inputs[0].signatures:
        return None
    first_pub = sorted(tx.inputs[0].signatures)[0][0]
    return PaymentRecord(
        txid=tx.txid,
        marker=out2.lock.payload,
        producer=out1.lock.keyhash,
        voter=codec.hash160(first_pub),
        price=out1.amount,
        height=height,
    )


def _marker_payloads(tx: ledger.Transaction) -> set:
    return {out.lock.payload for out in tx.outputs
            if isinstance(out.lock, ledger.Marker) and out.amount == 0}


def resolve_marker(service: Union[str, bytes, codec.Address]) -> bytes:
    """Normalize a service reference (URL, marker address text, Address,
    or raw payload) to the 20-byte marker payload."""
    if isinstance(service, codec.Address):
        return service.payload
    if isinstance(service, bytes):
        return service
    info = codec.validate_address(service)
    if info.kind == "key-hash":
        return info.payload
    return codec.derive_service_address(service).payload


class ReputationIndex:
    """Incremental per-block index of reputation events and scores."""

    def __init__(self, mode: ScoringMode = UNWEIGHTED):
        self.mode = mode
        self.height = -1  # last indexed block height
        self.service_scores: Dict[bytes, int] = {}
        self.producer_scores: Dict[bytes, int] = {}
        self.producer_services: Dict[bytes, Dict[bytes, int]] = {}
        self.events: List[ReputationEvent] = []
        self.service_last_height: Dict[bytes, int] = {}
        # linkage state
        self._payments: Dict[bytes, PaymentRecord] = {}
        self._counted: set = set()
        # funding txid -> (payment txid, {output index: escrow amount})
        self._fundings: Dict[bytes, Tuple[bytes, Dict[int, int]]] = {}
        # outpoint -> amount, for outputs a voucher might consume
        self._amounts: Dict[Tuple[bytes, int], int] = {}

    # -- indexing ---------------------------------------------------------

    def index_block(self, block: ledger.Block) -> "ReputationIndex":
        if block.height != self.height + 1:
            raise OutOfOrderBlockError(
                f"got block {block.height}, index is at {self.height}"
            )
        # Weighting reads voter scores frozen at the previous block, which
        # makes scoring independent of event order inside the block.
        prior_scores = dict(self.producer_scores)

        for tx in block.txs:
            payment = _detect_payment(tx, block.height)
            if payment is not None:
                self._register_payment(payment)
            self._register_funding(tx)
            event = self._detect_voucher(tx, block.height)
            if event is not None:
                self._apply_event(event, prior_scores)
            for i, out in enumerate(tx.outputs):
                self._amounts[(tx.txid, i)] = out.amount
        for i, out in enumerate(block.coinbase.outputs):
            self._amounts[(block.coinbase.txid, i)] = out.amount

        self.height = block.height
        return self

    def _register_payment(self, payment: PaymentRecord) -> None:
        self._payments[payment.txid] = payment
        self.producer_services.setdefault(payment.producer, {}).setdefault(payment.marker, 0)
        self.service_scores.setdefault(payment.marker, 0)

    def _register_funding(self, tx: ledger.Transaction) -> None:
        if tx.is_coinbase:
            return
        for inp in tx.inputs:
            if inp.index == 0 and inp.txid in self._payments:
                escrows = {
                    i: out.amount for i, out in enumerate(tx.outputs)
                    if isinstance(out.lock, ledger.PayToMultisig2of2)
                }
                if escrows:
                    self._fundings[tx.txid] = (inp.txid, escrows)
                return

    def _detect_voucher(self, tx: ledger.Transaction,
                        height: int) -> Optional[ReputationEvent]:
        if tx.is_coinbase:
            return None
        markers = _marker_payloads(tx)
        if not markers:
            return None
        for inp in tx.inputs:
            funding = self._fundings.get(inp.txid)
            if funding is None or inp.index not in funding[1]:
                continue
            payment = self._payments[funding[0]]
            if payment.txid in self._counted:
                continue
            if payment.marker not in markers:
                continue
            fee = self._fee_of(tx)
            if fee is None or fee <= 0:
                continue
            return ReputationEvent(
                marker=payment.marker,
                producer=payment.producer,
                voter=payment.voter,
                vote_fee=fee,
                contribution=0,  # filled by _apply_event
                height=height,
                payment_txid=payment.txid,
                voucher_txid=tx.txid,
            )
        return None

    def _fee_of(self, tx: ledger.Transaction) -> Optional[int]:
        total_in = 0
        for inp in tx.inputs:
            amount = self._amounts.get(inp.outpoint)
            if amount is None:
                return None
            total_in += amount
        return total_in - sum(out.amount for out in tx.outputs)

    def _apply_event(self, event: ReputationEvent,
                     prior_scores: Dict[bytes, int]) -> None:
        if self.mode.kind == "weighted":
            voter_score = prior_scores.get(event.voter, 0)
            contribution = weighted_contribution(
                voter_score, self.mode.constant, event.vote_fee
            )
        else:
            contribution = event.vote_fee
        event = ReputationEvent(
            marker=event.marker, producer=event.producer, voter=event.voter,
            vote_fee=event.vote_fee, contribution=contribution,
            height=event.height, payment_txid=event.payment_txid,
            voucher_txid=event.voucher_txid,
        )
        self._counted.add(event.payment_txid)
        self.events.append(event)
        self.service_scores[event.marker] = (
            self.service_scores.get(event.marker, 0) + contribution
        )
        self.producer_scores[event.producer] = (
            self.producer_scores.get(event.producer, 0) + contribution
        )
        services = self.producer_services.setdefault(event.producer, {})
        services[event.marker] = services.get(event.marker, 0) + contribution
        self.service_last_height[event.marker] = event.height

    # -- queries ------------------------------------------------------------

    def reputation_of_service(self, service: Union[str, bytes, codec.Address]) -> int:
        """Current score for a service given its URL, marker address, or
        marker payload; unknown services score 0."""
        return self.service_scores.get(resolve_marker(service), 0)

    def reputation_of_producer(self, producer: Union[str, bytes, codec.Address]) -> ProducerReport:
        """Total producer score with the per-service breakdown, including
        zero entries for services that sold but never scored."""
        if isinstance(producer, codec.Address):
            keyhash = producer.payload
        elif isinstance(producer, bytes):
            keyhash = producer
        else:
            keyhash = codec.Address.from_text(producer).payload
        services = self.producer_services.get(keyhash, {})
        breakdown = sorted(services.items())
        return ProducerReport(total=sum(services.values()), breakdown=breakdown)

    def state(self) -> tuple:
        """Canonical snapshot for equality checks between index routes."""
        return (
            self.height,
            tuple(sorted(self.service_scores.items())),
            tuple(sorted(self.producer_scores.items())),
            tuple(sorted(
                (p, tuple(sorted(s.items())))
                for p, s in self.producer_services.items()
            )),
            tuple(self.events),
        )


# --- Batch rescan (independent route) -------------------------------------


def full_rescan(chain: ledger.Chain, mode: ScoringMode = UNWEIGHTED,
                up_to_height: Optional[int] = None) -> ReputationIndex:
    """Rebuild an index from genesis in one batch pass over the chain.

    Deliberately not implemented on top of `index_block`: payments,
    fundings, and vouchers are collected in separate passes over a global
    transaction ordering, then scored block group by block group. Serves
    as the oracle for the incremental route.
    """
    limit = chain.height if up_to_height is None else min(up_to_height, chain.height)

    ordered: List[Tuple[int, int, ledger.Transaction]] = []
    amounts: Dict[Tuple[bytes, int], int] = {}
    position: Dict[bytes, int] = {}
    pos = 0
    for block in chain.blocks:
        if block.height > limit:
            break
        for tx in block.all_transactions():
            ordered.append((block.height, pos, tx))
            position[tx.txid] = pos
            for i, out in enumerate(tx.outputs):
                amounts[(tx.txid, i)] = out.amount
            pos += 1

    # Pass 1: payments.
    payments: Dict[bytes, PaymentRecord] = {}
    for height, _, tx in ordered:
        record = _detect_payment(tx, height)
        if record is not None:
            payments[record.txid] = record

    # Pass 2: fundings, constrained to spend a payment created earlier.
    fundings: Dict[bytes, Tuple[bytes, set]] = {}
    for _, pos, tx in ordered:
        if tx.is_coinbase:
            continue
        for inp in tx.inputs:
            if inp.index != 0 or inp.txid not in payments:
                continue
            if position[inp.txid] >= pos:
                continue
            escrow_indices = {
                i for i, out in enumerate(tx.outputs)
                if isinstance(out.lock, ledger.PayToMultisig2of2)
            }
            if escrow_indices:
                fundings[tx.txid] = (inp.txid, escrow_indices)
            break

    # Pass 3: vouchers, first per payment in global order.
    raw_events: List[ReputationEvent] = []
    counted: set = set()
    for height, pos, tx in ordered:
        if tx.is_coinbase:
            continue
        markers = _marker_payloads(tx)
        if not markers:
            continue
        for inp in tx.inputs:
            funding = fundings.get(inp.txid)
            if funding is None or inp.index not in funding[1]:
                continue
            if position[inp.txid] >= pos:
                continue
            payment = payments[funding[0]]
            if payment.txid in counted or payment.marker not in markers:
                continue
            total_in = sum(amounts[i.outpoint] for i in tx.inputs
                           if i.outpoint in amounts)
            if any(i.outpoint not in amounts for i in tx.inputs):
                continue
            fee = total_in - sum(out.amount for out in tx.outputs)
            if fee <= 0:
                continue
            counted.add(payment.txid)
            raw_events.append(ReputationEvent(
                marker=payment.marker, producer=payment.producer,
                voter=payment.voter, vote_fee=fee, contribution=0,
                height=height, payment_txid=payment.txid, voucher_txid=tx.txid,
            ))
            break

    # Scoring: process events grouped by height so weighted mode reads
    # voter scores as of the previous block.
    index = ReputationIndex(mode)
    index.height = limit if chain.blocks else -1
    for record in payments.values():
        index._register_payment(record)

    by_height: Dict[int, List[ReputationEvent]] = {}
    for event in raw_events:
        by_height.setdefault(event.height, []).append(event)
    for height in sorted(by_height):
        prior = dict(index.producer_scores)
        for event in by_height[height]:
            index._apply_event(event, prior)
    # Internal linkage state is not rebuilt beyond what queries need;
    # rescan results are read-only snapshots.
    index._payments = dict(payments)
    return index


# --- Reports ------------------------------------------------------------------

REPORT_COLUMNS = ("marker", "url", "score", "events", "last_height")


def report_rows(index: ReputationIndex,
                known_urls: Iterable[str] = ()) -> List[dict]:
    """Rows for every known service, sorted by marker address text.

    Markers hash one way, so URL display needs the caller to supply
    candidate URLs; unknown markers get an empty url column.
    """
    url_by_marker = {
        codec.derive_service_address(url).payload: url for url in known_urls
    }
    counts: Dict[bytes, int] = {}
    for event in index.events:
        counts[event.marker] = counts.get(event.marker, 0) + 1

    rows = []
    for marker, score in index.service_scores.items():
        rows.append({
            "marker": codec.key_address(marker).text,
            "url": url_by_marker.get(marker, ""),
            "score": score,
            "events": counts.get(marker, 0),
            "last_height": index.service_last_height.get(marker, -1),
        })
    rows.sort(key=lambda r: r["marker"])
    return rows


def report_csv(index: ReputationIndex, known_urls: Iterable[str] = ()) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(report_rows(index, known_urls))
    return buf.getvalue()


def report_text(index: ReputationIndex, known_urls: Iterable[str] = ()) -> str:
    rows = report_rows(index, known_urls)
    header = f"{'marker':<36} {'url':<28} {'score':>14} {'events':>7} {'last_height':>11}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['marker']:<36} {row['url']:<28} {row['score']:>14} "
            f"{row['events']:>7} {row['last_height']:>11}"
        )
    return "\n".join(lines) + "\n"
