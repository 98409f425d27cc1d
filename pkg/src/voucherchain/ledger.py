"""UTXO ledger: amounts, keys, output locks, transactions, blocks, and a
deterministic append-only chain.

Proof-of-work is intentionally absent; blocks are produced by explicit
`mine_block` calls with a caller-chosen miner, which is all the reputation
protocol needs (ordering plus fee collection). Signatures are Ed25519 from
32-byte seeds, giving deterministic bytes for reproducible chains.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import codec
from .errors import (
    BadSignatureError,
    ChainFormatError,
    DoubleSpendError,
    MissingCosignatureError,
    MissingUtxoError,
    ValueOverflowError,
    WrongKeyError,
)

# --- Amounts ------------------------------------------------------------

# All value arithmetic is exact integer math in base units.
COIN = 100_000_000

ZERO32 = bytes(32)


def parse_coins(text: str) -> int:
    """Parse a decimal coin amount ("0.003") into base units exactly.

    Rejects more than 8 decimal places and negative amounts.
    """
    text = text.strip()
    if text.startswith("-"):
        raise ValueError("amount must be non-negative")
    whole, _, frac = text.partition(".")
    whole = whole or "0"
    if len(frac) > 8:
        raise ValueError("at most 8 decimal places supported")
    if not whole.isdigit() or (frac and not frac.isdigit()):
        raise ValueError(f"not a decimal amount: {text!r}")
    return int(whole) * COIN + int(frac.ljust(8, "0") or "0")


def format_coins(units: int) -> str:
    """Render base units as a decimal coin string without float artifacts."""
    sign = "-" if units < 0 else ""
    units = abs(units)
    whole, frac = divmod(units, COIN)
    if frac == 0:
        return f"{sign}{whole}"
    return f"{sign}{whole}.{frac:08d}".rstrip("0")


# --- Keys ----------------------------------------------------------------


class KeyPair:
    """Ed25519 signing key with its 20-byte key-hash identity."""

    def __init__(self, seed: bytes):
        if len(seed) != 32:
            raise ValueError("seed must be 32 bytes")
        self.seed = seed
        self._sk = Ed25519PrivateKey.from_private_bytes(seed)
        self.public = self._sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        self.id = codec.hash160(self.public)

    @classmethod
    def generate(cls, rng: random.Random) -> "KeyPair":
        return cls(rng.randbytes(32))

    @property
    def address(self) -> codec.Address:
        return codec.key_address(self.id)

    def sign(self, message: bytes) -> bytes:
        return self._sk.sign(message)

    def __repr__(self) -> str:
        return f"KeyPair({self.address.text})"


def verify_signature(public: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


# --- Output locks ---------------------------------------------------------


@dataclass(frozen=True)
class PayToKeyHash:
    keyhash: bytes
    kind = "p2kh"

    def fields(self) -> Tuple[bytes, ...]:
        return (self.keyhash,)


@dataclass(frozen=True)
class PayToMultisig2of2:
    """Spendable only with signatures from keys hashing to both slots."""

    keyhash_a: bytes
    keyhash_b: bytes
    kind = "p2m2"

    def fields(self) -> Tuple[bytes, ...]:
        return (self.keyhash_a, self.keyhash_b)


@dataclass(frozen=True)
class Marker:
    """Zero-key service tag: the payload is a URL hash, so no known private
    key satisfies it and funds sent here are unspendable."""

    payload: bytes
    kind = "marker"

    def fields(self) -> Tuple[bytes, ...]:
        return (self.payload,)


OutputLock = Union[PayToKeyHash, PayToMultisig2of2, Marker]


# --- Transactions ----------------------------------------------------------


@dataclass
class TxInput:
    txid: bytes
    index: int
    signatures: List[Tuple[bytes, bytes]] = field(default_factory=list)

    @property
    def outpoint(self) -> Tuple[bytes, int]:
        return (self.txid, self.index)


@dataclass(frozen=True)
class TxOutput:
    amount: int
    lock: OutputLock

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError("output amount must be non-negative")


class Transaction:
    """UTXO-consuming record. The txid covers the signature-free body, so
    adding signatures never changes a transaction's identity."""

    def __init__(self, inputs: Sequence[TxInput], outputs: Sequence[TxOutput],
                 is_coinbase: bool = False):
        self.inputs = list(inputs)
        self.outputs = list(outputs)
        self.is_coinbase = is_coinbase
        self._txid: Optional[bytes] = None

    @property
    def txid(self) -> bytes:
        if self._txid is None:
            self._txid = codec.txid(self)
        return self._txid

    def body_bytes(self) -> bytes:
        return codec.canonical_serialize(self)

    def signed_bytes(self) -> bytes:
        return codec.canonical_serialize_signed(self)

    def __repr__(self) -> str:
        return f"Transaction({self.txid.hex()[:12]}…)"


def coinbase_transaction(height: int, outputs: Sequence[TxOutput]) -> Transaction:
    # The height-tagged null input keeps coinbase txids unique per block.
    return Transaction([TxInput(ZERO32, height)], outputs, is_coinbase=True)


def sign_input(tx: Transaction, index: int, keypair: KeyPair,
               lock: OutputLock) -> Transaction:
    """Attach `keypair`'s signature over the tx body to input `index`.

    The key must hash to (one of) the lock's key hashes. Idempotent per
    (input, key).
    """
    if keypair.id not in lock.fields():
        raise WrongKeyError(
            f"key {keypair.address.text} does not match the lock on input {index}"
        )
    inp = tx.inputs[index]
    signature = keypair.sign(tx.body_bytes())
    entry = (keypair.public, signature)
    if entry not in inp.signatures:
        inp.signatures.append(entry)
    return tx


# --- Blocks and the chain ----------------------------------------------------


@dataclass
class Block:
    height: int
    prev_digest: bytes
    coinbase: Transaction
    txs: List[Transaction]

    _digest: Optional[bytes] = field(default=None, repr=False, compare=False)

    @property
    def digest(self) -> bytes:
        if self._digest is None:
            raws = [self.coinbase.signed_bytes()] + [t.signed_bytes() for t in self.txs]
            self._digest = codec.block_digest(self.height, self.prev_digest, raws)
        return self._digest

    def all_transactions(self) -> List[Transaction]:
        return [self.coinbase] + self.txs


@dataclass
class ChainConfig:
    subsidy: int = 50 * COIN
    genesis_allocations: List[Tuple[bytes, int]] = field(default_factory=list)


Outpoint = Tuple[bytes, int]


class UtxoView:
    """Read/apply view over a chain's UTXO set with an in-flight overlay,
    used while assembling a block so later transactions can spend outputs
    created earlier in the same block."""

    def __init__(self, chain: "Chain"):
        self._chain = chain
        self._created: Dict[Outpoint, TxOutput] = {}
        self._spent: set = set()

    def lookup(self, outpoint: Outpoint) -> Optional[TxOutput]:
        if outpoint in self._spent:
            return None
        if outpoint in self._created:
            return self._created[outpoint]
        return self._chain.utxo(outpoint)

    def exists_anywhere(self, outpoint: Outpoint) -> bool:
        return (
            outpoint in self._created
            or self._chain.utxo(outpoint) is not None
            or outpoint in self._spent
            or self._chain.was_spent(outpoint)
        )

    def apply(self, tx: Transaction) -> None:
        for inp in tx.inputs:
            self._spent.add(inp.outpoint)
        for i, out in enumerate(tx.outputs):
            self._created[(tx.txid, i)] = out


class Chain:
    """Append-only block list from genesis, with the derived UTXO set."""

    def __init__(self, config: ChainConfig):
        self.config = config
        self.blocks: List[Block] = []
        self._utxos: Dict[Outpoint, TxOutput] = {}
        self._spent: set = set()
        self._tx_index: Dict[bytes, Tuple[Transaction, int]] = {}

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def tip_digest(self) -> bytes:
        return self.blocks[-1].digest if self.blocks else ZERO32

    def utxo(self, outpoint: Outpoint) -> Optional[TxOutput]:
        return self._utxos.get(outpoint)

    def was_spent(self, outpoint: Outpoint) -> bool:
        return outpoint in self._spent

    def utxos(self) -> Dict[Outpoint, TxOutput]:
        return dict(self._utxos)

    def transaction(self, txid: bytes) -> Optional[Tuple[Transaction, int]]:
        """Look up a confirmed transaction, returning (tx, block height)."""
        return self._tx_index.get(txid)

    def total_supply(self) -> int:
        return sum(out.amount for out in self._utxos.values())

    def _apply_block(self, block: Block) -> None:
        for tx in block.all_transactions():
            for inp in tx.inputs:
                if not tx.is_coinbase:
                    del self._utxos[inp.outpoint]
                    self._spent.add(inp.outpoint)
            for i, out in enumerate(tx.outputs):
                self._utxos[(tx.txid, i)] = out
            self._tx_index[tx.txid] = (tx, block.height)
        self.blocks.append(block)


def new_chain(config: ChainConfig) -> Chain:
    """Create a chain whose genesis coinbase pays the configured allocations."""
    for _, amount in config.genesis_allocations:
        if amount < 0:
            raise ValueError("genesis allocations must be non-negative")
    outputs = [TxOutput(amount, PayToKeyHash(keyhash))
               for keyhash, amount in config.genesis_allocations]
    genesis = Block(0, ZERO32, coinbase_transaction(0, outputs), [])
    chain = Chain(config)
    chain._apply_block(genesis)
    return chain


def transaction_fee(tx: Transaction, view: UtxoView) -> int:
    total_in = 0
    for inp in tx.inputs:
        out = view.lookup(inp.outpoint)
        if out is None:
            raise MissingUtxoError(f"input {inp.txid.hex()}:{inp.index} not found")
        total_in += out.amount
    return total_in - sum(out.amount for out in tx.outputs)


def _lock_satisfied(lock: OutputLock, valid_keyhashes: set) -> Optional[str]:
    """Return None when satisfied, else the failure description."""
    if isinstance(lock, (PayToKeyHash, Marker)):
        needed = lock.fields()[0]
        if needed not in valid_keyhashes:
            return "no valid signature from the lock's key"
        return None
    have_a = lock.keyhash_a in valid_keyhashes
    have_b = lock.keyhash_b in valid_keyhashes
    if have_a and have_b:
        return None
    if have_a or have_b:
        return "only one of two required signatures present"
    return "no valid signature from either key"


def verify_signatures(tx: Transaction, view_or_chain) -> None:
    """Check every input's signatures against the lock it spends.

    Raises MissingUtxoError, BadSignatureError, or MissingCosignatureError.
    """
    view = view_or_chain if isinstance(view_or_chain, UtxoView) else UtxoView(view_or_chain)
    body = tx.body_bytes()
    for inp in tx.inputs:
        spent = view.lookup(inp.outpoint)
        if spent is None:
            raise MissingUtxoError(f"input {inp.txid.hex()}:{inp.index} not found")
        valid_hashes = set()
        for public, signature in inp.signatures:
            if not verify_signature(public, signature, body):
                raise BadSignatureError(
                    f"signature by {codec.hash160(public).hex()} does not verify"
                )
            valid_hashes.add(codec.hash160(public))
        failure = _lock_satisfied(spent.lock, valid_hashes)
        if failure is not None:
            if isinstance(spent.lock, PayToMultisig2of2) and "one of two" in failure:
                raise MissingCosignatureError(failure)
            raise BadSignatureError(failure)


def validate_transaction(tx: Transaction, chain: Chain,
                         view: Optional[UtxoView] = None) -> int:
    """Full validation of a non-coinbase transaction; returns its fee.

    Checks input existence, single-spend, signatures satisfying every
    lock, and value conservation (inputs >= outputs).
    """
    if tx.is_coinbase:
        raise ChainFormatError("coinbase transactions are built by mine_block")
    if not tx.inputs:
        raise MissingUtxoError("transaction has no inputs")
    view = view or UtxoView(chain)

    seen = set()
    total_in = 0
    for inp in tx.inputs:
        if inp.outpoint in seen:
            raise DoubleSpendError(
                f"transaction {tx.txid.hex()} spends {inp.txid.hex()}:{inp.index} twice"
            )
        seen.add(inp.outpoint)
        spent = view.lookup(inp.outpoint)
        if spent is None:
            if view.exists_anywhere(inp.outpoint):
                raise DoubleSpendError(
                    f"output {inp.txid.hex()}:{inp.index} is already spent"
                )
            raise MissingUtxoError(f"input {inp.txid.hex()}:{inp.index} not found")
        total_in += spent.amount

    total_out = sum(out.amount for out in tx.outputs)
    if total_out > total_in:
        raise ValueOverflowError(
            f"outputs {total_out} exceed inputs {total_in} in {tx.txid.hex()}"
        )

    verify_signatures(tx, view)
    return total_in - total_out


def mine_block(chain: Chain, pending: Sequence[Transaction], miner: bytes) -> Block:
    """Validate and append a block; the coinbase pays subsidy plus fees
    to `miner` (a 20-byte key hash). Transactions apply in list order, so a
    transaction may spend outputs created earlier in the same pending set.
    """
    view = UtxoView(chain)
    fees = 0
    for tx in pending:
        try:
            fees += validate_transaction(tx, chain, view)
        except DoubleSpendError as exc:
            raise DoubleSpendError(f"conflicting transaction {tx.txid.hex()}: {exc}") from exc
        view.apply(tx)

    height = chain.height + 1
    coinbase = coinbase_transaction(
        height, [TxOutput(chain.config.subsidy + fees, PayToKeyHash(miner))]
    )
    block = Block(height, chain.tip_digest, coinbase, list(pending))
    chain._apply_block(block)
    return block


def block_fees(block: Block) -> int:
    """Fees collected in a block, read off the coinbase (value - subsidy)."""
    return sum(out.amount for out in block.coinbase.outputs)


# --- Wallet -------------------------------------------------------------------


@dataclass
class OwnedOutput:
    outpoint: Outpoint
    amount: int
    key_name: str


class Wallet:
    """Named key pairs plus the unspent outputs they own on a chain."""

    def __init__(self):
        self.keys: Dict[str, KeyPair] = {}
        self.default_key: Optional[str] = None
        self.owned: List[OwnedOutput] = []

    def add_key(self, name: str, keypair: KeyPair) -> KeyPair:
        if name in self.keys:
            raise ValueError(f"key {name!r} already exists")
        self.keys[name] = keypair
        if self.default_key is None:
            self.default_key = name
        return keypair

    def key(self, name: Optional[str] = None) -> KeyPair:
        name = name or self.default_key
        if name is None or name not in self.keys:
            raise KeyError(f"no such wallet key: {name!r}")
        return self.keys[name]

    def key_by_hash(self, keyhash: bytes) -> Optional[KeyPair]:
        for kp in self.keys.values():
            if kp.id == keyhash:
                return kp
        return None

    def sync(self, chain: Chain) -> None:
        """Recompute owned outputs by scanning the chain's UTXO set."""
        by_hash = {kp.id: name for name, kp in self.keys.items()}
        owned = []
        for outpoint, out in chain.utxos().items():
            if isinstance(out.lock, PayToKeyHash) and out.lock.keyhash in by_hash:
                owned.append(OwnedOutput(outpoint, out.amount, by_hash[out.lock.keyhash]))
        owned.sort(key=lambda o: (o.outpoint[0].hex(), o.outpoint[1]))
        self.owned = owned

    def spendable(self, exclude: Iterable[Outpoint] = ()) -> List[OwnedOutput]:
        excluded = set(exclude)
        return [o for o in self.owned if o.outpoint not in excluded]

    def balance(self, key_name: Optional[str] = None) -> int:
        return sum(o.amount for o in self.owned
                   if key_name is None or o.key_name == key_name)


# --- Chain store ----------------------------------------------------------------
#
# One block per line, JSON objects with sorted keys; see FORMATS.md.


def _lock_to_json(lock: OutputLock) -> dict:
    if isinstance(lock, PayToKeyHash):
        return {"kind": "p2kh", "keyhash": lock.keyhash.hex()}
    if isinstance(lock, PayToMultisig2of2):
        return {"kind": "p2m2", "keyhash_a": lock.keyhash_a.hex(),
                "keyhash_b": lock.keyhash_b.hex()}
    return {"kind": "marker", "payload": lock.payload.hex()}


def _lock_from_json(obj: dict) -> OutputLock:
    kind = obj.get("kind")
    if kind == "p2kh":
        return PayToKeyHash(bytes.fromhex(obj["keyhash"]))
    if kind == "p2m2":
        return PayToMultisig2of2(bytes.fromhex(obj["keyhash_a"]),
                                 bytes.fromhex(obj["keyhash_b"]))
    if kind == "marker":
        return Marker(bytes.fromhex(obj["payload"]))
    raise ChainFormatError(f"unknown lock kind: {kind!r}")


def tx_to_json(tx: Transaction) -> dict:
    return {
        "txid": tx.txid.hex(),
        "coinbase": tx.is_coinbase,
        "inputs": [
            {
                "txid": inp.txid.hex(),
                "index": inp.index,
                "sigs": [{"pub": p.hex(), "sig": s.hex()}
                         for p, s in sorted(inp.signatures)],
            }
            for inp in tx.inputs
        ],
        "outputs": [
            {"amount": out.amount, "lock": _lock_to_json(out.lock)}
            for out in tx.outputs
        ],
    }


def tx_from_json(obj: dict) -> Transaction:
    try:
        inputs = [
            TxInput(
                bytes.fromhex(i["txid"]),
                int(i["index"]),
                [(bytes.fromhex(s["pub"]), bytes.fromhex(s["sig"]))
                 for s in i.get("sigs", [])],
            )
            for i in obj["inputs"]
        ]
        outputs = [TxOutput(int(o["amount"]), _lock_from_json(o["lock"]))
                   for o in obj["outputs"]]
        tx = Transaction(inputs, outputs, is_coinbase=bool(obj.get("coinbase")))
    except (KeyError, ValueError, TypeError) as exc:
        raise ChainFormatError(f"bad transaction object: {exc}") from exc
    declared = obj.get("txid")
    if declared is not None and declared != tx.txid.hex():
        raise ChainFormatError(
            f"declared txid {declared} does not match computed {tx.txid.hex()}"
        )
    return tx


def block_to_json(block: Block) -> dict:
    return {
        "height": block.height,
        "prev": block.prev_digest.hex(),
        "coinbase": tx_to_json(block.coinbase),
        "txs": [tx_to_json(t) for t in block.txs],
    }


def block_from_json(obj: dict) -> Block:
    try:
        return Block(
            int(obj["height"]),
            bytes.fromhex(obj["prev"]),
            tx_from_json(obj["coinbase"]),
            [tx_from_json(t) for t in obj["txs"]],
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ChainFormatError(f"bad block object: {exc}") from exc


def block_line(block: Block) -> str:
    return json.dumps(block_to_json(block), sort_keys=True, separators=(",", ":"))


def chain_to_bytes(chain: Chain, config_line: bool = True) -> bytes:
    lines = []
    if config_line:
        lines.append(json.dumps(
            {"format": "voucherchain.chain", "version": 1,
             "subsidy": chain.config.subsidy},
            sort_keys=True, separators=(",", ":")))
    lines.extend(block_line(b) for b in chain.blocks)
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_chain(chain: Chain, path) -> None:
    with open(path, "wb") as fh:
        fh.write(chain_to_bytes(chain))


def append_block(path, block: Block) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(block_line(block) + "\n")


def load_chain(path) -> Chain:
    """Load and re-validate structure: heights, links, txids, single spend."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ChainFormatError("chain file is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ChainFormatError(f"bad chain header: {exc}") from exc
    if header.get("format") != "voucherchain.chain":
        raise ChainFormatError("missing chain header line")

    chain = Chain(ChainConfig(subsidy=int(header["subsidy"])))
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            block = block_from_json(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ChainFormatError(f"line {lineno}: {exc}") from exc
        expected_height = chain.height + 1 if chain.blocks else 0
        if block.height != expected_height:
            raise ChainFormatError(
                f"line {lineno}: height {block.height}, expected {expected_height}"
            )
        if block.prev_digest != chain.tip_digest:
            raise ChainFormatError(f"line {lineno}: previous-digest link broken")
        spent_here: set = set()
        for tx in block.txs:
            for inp in tx.inputs:
                if inp.outpoint in spent_here:
                    raise ChainFormatError(
                        f"line {lineno}: output {inp.txid.hex()}:{inp.index} "
                        f"spent twice within the block"
                    )
                if chain.utxo(inp.outpoint) is None and not _created_in_block(block, tx, inp):
                    raise ChainFormatError(
                        f"line {lineno}: tx {tx.txid.hex()} spends unknown or "
                        f"spent output {inp.txid.hex()}:{inp.index}"
                    )
                spent_here.add(inp.outpoint)
        chain._apply_block(block)
        if block.height == 0:
            chain.config.genesis_allocations = [
                (out.lock.keyhash, out.amount)
                for out in block.coinbase.outputs
                if isinstance(out.lock, PayToKeyHash)
            ]
    return chain


def _created_in_block(block: Block, spender: Transaction, inp: TxInput) -> bool:
    for tx in block.txs:
        if tx is spender:
            return False
        if tx.txid == inp.txid and inp.index < len(tx.outputs):
            return True
    return False
