"""Payment and voucher construction, and the purchase workflow state machine.

A payment binds a purchase to a service identity with three fixed-order
outputs: price to the producer, a zero-valued tag to the service marker
S*, and change back to the consumer. The producer then funds a 2-of-2
escrow from the price output and drafts a voucher spending it; the voucher
pays the consumer an optional incentive, repeats the marker tag, and
deliberately leaves the vote fee unassigned so a miner collects it. The
consumer's co-signature is what turns the draft into a broadcastable vote.

Linkage is verifiable by one-step input ancestry: voucher input -> funding
transaction -> payment's price output, plus matching markers on both ends.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, Union

from . import codec, ledger
from .errors import (
    AlreadyCosignedError,
    IllegalTransitionError,
    IncentiveTooLargeError,
    InsufficientFundsError,
    InvalidOfferError,
    InvalidRateError,
    InvalidServiceError,
    Out1SpentError,
    PaymentNotFoundError,
    VoteFeeTooSmallError,
    WrongKeyError,
)


@dataclass(frozen=True)
class ServiceDescriptor:
    """A service identity: its URL, the derived marker address S*, and an
    optional opaque SLA document digest (carried as metadata only)."""

    url: str
    marker: codec.Address
    sla_digest: Optional[bytes] = None

    @classmethod
    def for_url(cls, url: str, sla_digest: Optional[bytes] = None) -> "ServiceDescriptor":
        return cls(url=url, marker=codec.derive_service_address(url),
                   sla_digest=sla_digest)


@dataclass(frozen=True)
class ProtocolConfig:
    """min_vote_fee: offers whose vote fee falls below this are rejected.
    The default of one base unit rules out zero-fee vouchers (which could
    never score); set 0 to waive the minimum for free services."""

    min_vote_fee: int = 1


RateLike = Union[Fraction, str, float, int]


def as_rate(rate: RateLike) -> Fraction:
    """Normalize a vote-fee rate to an exact Fraction in (0, 1].

    Floats go through their decimal repr, so 0.03 means exactly 3/100.
    """
    try:
        if isinstance(rate, float):
            frac = Fraction(str(rate))
        else:
            frac = Fraction(rate)
    except (ValueError, ZeroDivisionError) as exc:
        raise InvalidRateError(f"unparseable rate: {rate!r}") from exc
    if not 0 < frac <= 1:
        raise InvalidRateError(f"rate must be in (0, 1], got {frac}")
    return frac


def vote_fee_for(price: int, rate: RateLike) -> int:
    """The voucher's unassigned amount: floor(rate * price) in base units."""
    frac = as_rate(rate)
    return price * frac.numerator // frac.denominator


# --- Payment ----------------------------------------------------------------


@dataclass
class PaymentTx:
    """A confirmed-or-built payment with its parsed roles."""

    tx: ledger.Transaction
    service_marker: bytes   # 20-byte marker payload
    producer: bytes         # key hash paid by the price output
    consumer: bytes         # key hash that signed the first input
    price: int
    change: int

    @property
    def txid(self) -> bytes:
        return self.tx.txid

    @classmethod
    def from_transaction(cls, tx: ledger.Transaction) -> "PaymentTx":
        """Parse a transaction into payment roles, or raise PaymentNotFoundError
        if it does not have the fixed three-output payment shape."""
        if tx.is_coinbase or len(tx.outputs) != 3:
            raise PaymentNotFoundError("not a three-output payment transaction")
        out1, out2, out3 = tx.outputs
        if not isinstance(out1.lock, ledger.PayToKeyHash):
            raise PaymentNotFoundError("price output is not pay-to-key-hash")
        if not isinstance(out2.lock, ledger.Marker) or out2.amount != 0:
            raise PaymentNotFoundError("second output is not a zero-valued marker")
        if not tx.inputs or not tx.inputs[0].signatures:
            raise PaymentNotFoundError("payment carries no consumer signature")
        first_pub = sorted(tx.inputs[0].signatures)[0][0]
        return cls(
            tx=tx,
            service_marker=out2.lock.payload,
            producer=out1.lock.keyhash,
            consumer=codec.hash160(first_pub),
            price=out1.amount,
            change=out3.amount,
        )


def build_payment(wallet: ledger.Wallet, chain: ledger.Chain,
                  producer: Union[bytes, codec.Address],
                  service: ServiceDescriptor, price: int,
                  miner_fee: int = 0, key_name: Optional[str] = None,
                  exclude=()) -> PaymentTx:
    """Build and sign a service-bound payment from the wallet.

    Outputs are fixed as (price -> producer, 0 -> S*, change -> consumer)
    so detection needs no heuristics; the change output is present even
    when zero. `exclude` lists outpoints reserved by unmined transactions.
    """
    if isinstance(producer, codec.Address):
        producer = producer.payload
    if price < 0 or miner_fee < 0:
        raise ValueError("price and miner_fee must be non-negative")
    if not service.url or service.marker != codec.derive_service_address(service.url):
        raise InvalidServiceError("service descriptor marker does not match its url")

    consumer_key = wallet.key(key_name)
    needed = price + miner_fee
    selected = []
    total = 0
    for owned in wallet.spendable(exclude=exclude):
        selected.append(owned)
        total += owned.amount
        if total >= needed:
            break
    if total < needed:
        raise InsufficientFundsError(
            f"need {needed} base units, wallet holds {total} spendable"
        )

    change = total - needed
    tx = ledger.Transaction(
        inputs=[ledger.TxInput(o.outpoint[0], o.outpoint[1]) for o in selected],
        outputs=[
            ledger.TxOutput(price, ledger.PayToKeyHash(producer)),
            ledger.TxOutput(0, ledger.Marker(service.marker.payload)),
            ledger.TxOutput(change, ledger.PayToKeyHash(consumer_key.id)),
        ],
    )
    for i, owned in enumerate(selected):
        signer = wallet.key(owned.key_name)
        ledger.sign_input(tx, i, signer, ledger.PayToKeyHash(signer.id))
    return PaymentTx(
        tx=tx,
        service_marker=service.marker.payload,
        producer=producer,
        consumer=consumer_key.id,
        price=price,
        change=change,
    )


# --- Voucher offer -------------------------------------------------------------


@dataclass
class VoucherOffer:
    """Producer-signed funding plus the draft voucher awaiting co-signature.

    funding spends the payment's price output into a single 2-of-2 escrow
    of (incentive + vote fee) plus producer change; draft spends the escrow,
    pays the incentive to the consumer, repeats the marker, and leaves
    exactly the vote fee unassigned.
    """

    payment_txid: bytes
    funding: ledger.Transaction
    draft: ledger.Transaction
    vote_fee: int
    incentive: int

    @property
    def escrow_lock(self) -> ledger.PayToMultisig2of2:
        lock = self.funding.outputs[0].lock
        if not isinstance(lock, ledger.PayToMultisig2of2):
            raise InvalidOfferError("funding's first output is not a 2-of-2 escrow")
        return lock

    @property
    def marker_payload(self) -> bytes:
        for out in self.draft.outputs:
            if isinstance(out.lock, ledger.Marker):
                return out.lock.payload
        raise InvalidOfferError("draft voucher carries no marker output")

    def to_json(self) -> dict:
        return {
            "kind": "voucher-offer",
            "payment_txid": self.payment_txid.hex(),
            "vote_fee": self.vote_fee,
            "incentive": self.incentive,
            "funding": ledger.tx_to_json(self.funding),
            "voucher_draft": ledger.tx_to_json(self.draft),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VoucherOffer":
        try:
            if obj.get("kind") != "voucher-offer":
                raise InvalidOfferError("not a voucher-offer document")
            offer = cls(
                payment_txid=bytes.fromhex(obj["payment_txid"]),
                funding=ledger.tx_from_json(obj["funding"]),
                draft=ledger.tx_from_json(obj["voucher_draft"]),
                vote_fee=int(obj["vote_fee"]),
                incentive=int(obj["incentive"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidOfferError(f"bad offer document: {exc}") from exc
        offer.validate_structure()
        return offer

    def validate_structure(self) -> None:
        if not self.funding.inputs or self.funding.inputs[0].outpoint != (self.payment_txid, 0):
            raise InvalidOfferError("funding does not spend the payment's price output")
        if not self.draft.inputs or self.draft.inputs[0].outpoint != (self.funding.txid, 0):
            raise InvalidOfferError("draft voucher does not spend the funding escrow")
        self.escrow_lock
        self.marker_payload
        escrow = self.funding.outputs[0].amount
        paid_out = sum(out.amount for out in self.draft.outputs)
        if escrow - paid_out != self.vote_fee:
            raise InvalidOfferError("draft fee does not equal the declared vote fee")

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    @classmethod
    def loads(cls, text: str) -> "VoucherOffer":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidOfferError(f"offer is not valid JSON: {exc}") from exc
        return cls.from_json(obj)


def build_voucher_offer(chain: ledger.Chain, payment_txid: bytes,
                        producer_wallet: ledger.Wallet, rate: RateLike,
                        incentive: int = 0, funding_miner_fee: int = 0,
                        config: ProtocolConfig = ProtocolConfig()) -> VoucherOffer:
    """Build the producer side of a voucher for a confirmed payment.

    The escrow is funded entirely from the payment's price output, so
    incentive + vote fee + funding fee can never exceed the price.
    """
    found = chain.transaction(payment_txid)
    if found is None:
        raise PaymentNotFoundError(f"payment {payment_txid.hex()} not found in chain")
    payment = PaymentTx.from_transaction(found[0])

    if chain.utxo((payment_txid, 0)) is None:
        raise Out1SpentError(
            f"price output of payment {payment_txid.hex()} is already spent"
        )

    producer_key = producer_wallet.key_by_hash(payment.producer)
    if producer_key is None:
        raise WrongKeyError("producer wallet does not hold the key paid by this payment")

    rate_frac = as_rate(rate)
    vote_fee = payment.price * rate_frac.numerator // rate_frac.denominator
    if vote_fee < config.min_vote_fee:
        raise VoteFeeTooSmallError(
            f"vote fee {vote_fee} below configured minimum {config.min_vote_fee}"
        )
    if incentive < 0 or funding_miner_fee < 0:
        raise ValueError("incentive and funding_miner_fee must be non-negative")
    if incentive + vote_fee + funding_miner_fee > payment.price:
        raise IncentiveTooLargeError(
            f"incentive {incentive} + vote fee {vote_fee} + funding fee "
            f"{funding_miner_fee} exceeds price {payment.price}"
        )

    escrow = incentive + vote_fee
    producer_change = payment.price - escrow - funding_miner_fee
    escrow_lock = ledger.PayToMultisig2of2(payment.consumer, payment.producer)

    funding = ledger.Transaction(
        inputs=[ledger.TxInput(payment_txid, 0)],
        outputs=[
            ledger.TxOutput(escrow, escrow_lock),
            ledger.TxOutput(producer_change, ledger.PayToKeyHash(payment.producer)),
        ],
    )
    ledger.sign_input(funding, 0, producer_key, ledger.PayToKeyHash(payment.producer))

    outputs = []
    if incentive > 0:
        outputs.append(ledger.TxOutput(incentive, ledger.PayToKeyHash(payment.consumer)))
    outputs.append(ledger.TxOutput(0, ledger.Marker(payment.service_marker)))
    draft = ledger.Transaction(
        inputs=[ledger.TxInput(funding.txid, 0)],
        outputs=outputs,
    )
    ledger.sign_input(draft, 0, producer_key, escrow_lock)

    return VoucherOffer(
        payment_txid=payment_txid,
        funding=funding,
        draft=draft,
        vote_fee=vote_fee,
        incentive=incentive,
    )


def cosign_voucher(offer: VoucherOffer, consumer_key: ledger.KeyPair) -> ledger.Transaction:
    """Add the consumer's signature, completing the 2-of-2 voucher.

    Co-signing validates the deal: once mined, the voucher is the
    timestamped success acknowledgement that scores reputation.
    """
    offer.validate_structure()
    lock = offer.escrow_lock
    if consumer_key.id not in (lock.keyhash_a, lock.keyhash_b):
        raise WrongKeyError("key does not match the escrow's 2-of-2 lock")

    body = offer.draft.body_bytes()
    producer_hash = lock.keyhash_b if consumer_key.id == lock.keyhash_a else lock.keyhash_a
    producer_signed = False
    for public, signature in offer.draft.inputs[0].signatures:
        keyhash = codec.hash160(public)
        if keyhash == consumer_key.id:
            raise AlreadyCosignedError("voucher already carries this key's signature")
        if keyhash == producer_hash and ledger.verify_signature(public, signature, body):
            producer_signed = True
    if not producer_signed:
        raise InvalidOfferError("draft voucher is missing the producer's signature")

    ledger.sign_input(offer.draft, 0, consumer_key, lock)
    return offer.draft


# --- Deal workflow state machine ---------------------------------------------


class DealState(str, Enum):
    ORDERED = "ordered"
    PAID = "paid"
    DELIVERED = "delivered"
    OFFER_SENT = "offer_sent"
    ACCEPTED = "accepted"
    DECLINED = "declined"


class DealEvent(str, Enum):
    ORDER = "order"
    PAY = "pay"
    DELIVER = "deliver"
    SEND_OFFER = "send_offer"
    COSIGN = "cosign"
    DECLINE = "decline"


# Accepted/declined are terminal; co-signing is only possible once an
# offer is in hand.
_TRANSITIONS = {
    (None, DealEvent.ORDER): DealState.ORDERED,
    (DealState.ORDERED, DealEvent.PAY): DealState.PAID,
    (DealState.PAID, DealEvent.DELIVER): DealState.DELIVERED,
    (DealState.DELIVERED, DealEvent.SEND_OFFER): DealState.OFFER_SENT,
    (DealState.OFFER_SENT, DealEvent.COSIGN): DealState.ACCEPTED,
    (DealState.OFFER_SENT, DealEvent.DECLINE): DealState.DECLINED,
}


def advance(state: Optional[DealState], event: DealEvent) -> DealState:
    """Apply a workflow event; `state=None` means no deal exists yet."""
    key = (state, DealEvent(event))
    if key not in _TRANSITIONS:
        raise IllegalTransitionError(
            f"event {DealEvent(event).value!r} is not legal in state "
            f"{state.value if state else 'none'!r}"
        )
    return _TRANSITIONS[key]
