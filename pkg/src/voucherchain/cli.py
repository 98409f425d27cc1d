"""Command-line surface tying wallet, chain store, protocol builders,
indexer, and simulator together.

Every command prints one JSON document (sorted keys) to stdout, or a
plain-text/CSV report where noted, and the process exits with a class-
specific code so scripts can distinguish failures:

    0  success
    2  parse errors: bad flags, amounts, or unreadable/ill-formed files
    3  validation errors: signatures, locks, double spends, bad offers
    4  insufficient funds
    5  link failures: payment missing or its price output already spent

State lives in a data directory (default ~/.voucherchain, overridable via
VOUCHERCHAIN_HOME or --data-dir): chain.jsonl, wallet.json, and a pending
transaction file next to the chain. Writes take an advisory file lock.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from . import codec, ledger, protocol, reputation, sim
from .errors import (
    ChainFormatError,
    InsufficientFundsError,
    LinkError,
    Out1SpentError,
    ScenarioError,
    VoucherChainError,
)

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_FUNDS = 4
EXIT_LINK = 5

DATA_DIR_ENV = "VOUCHERCHAIN_HOME"


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


# --- State files -------------------------------------------------------------


class Paths:
    def __init__(self, args):
        data_dir = Path(args.data_dir or os.environ.get(DATA_DIR_ENV)
                        or Path.home() / ".voucherchain")
        self.data_dir = data_dir
        self.chain = Path(args.chain) if args.chain else data_dir / "chain.jsonl"
        self.wallet = Path(args.wallet) if args.wallet else data_dir / "wallet.json"
        self.pending = self.chain.with_name(self.chain.name + ".pending")
        self.lock = self.chain.with_name(self.chain.name + ".lock")

    def ensure_dir(self) -> None:
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.chain.parent.mkdir(parents=True, exist_ok=True)
        self.wallet.parent.mkdir(parents=True, exist_ok=True)


@contextmanager
def _locked(paths: Paths):
    paths.ensure_dir()
    with open(paths.lock, "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def load_wallet(path: Path) -> ledger.Wallet:
    wallet = ledger.Wallet()
    if not path.exists():
        return wallet
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format") != "voucherchain.wallet":
        raise ChainFormatError(f"{path} is not a wallet file")
    for name, entry in sorted(obj.get("keys", {}).items()):
        wallet.add_key(name, ledger.KeyPair(bytes.fromhex(entry["seed"])))
    wallet.default_key = obj.get("default") or wallet.default_key
    for op in obj.get("outpoints", []):
        wallet.owned.append(ledger.OwnedOutput(
            (bytes.fromhex(op["txid"]), int(op["index"])),
            int(op["amount"]), op["key"]))
    return wallet


def save_wallet(wallet: ledger.Wallet, path: Path) -> None:
    obj = {
        "format": "voucherchain.wallet",
        "version": 1,
        "default": wallet.default_key,
        "keys": {name: {"seed": kp.seed.hex()} for name, kp in wallet.keys.items()},
        "outpoints": [
            {"txid": o.outpoint[0].hex(), "index": o.outpoint[1],
             "amount": o.amount, "key": o.key_name}
            for o in wallet.owned
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_pending(path: Path) -> list:
    if not path.exists():
        return []
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return [ledger.tx_from_json(t) for t in obj.get("txs", [])]


def save_pending(txs, path: Path) -> None:
    obj = {"format": "voucherchain.pending", "version": 1,
           "txs": [ledger.tx_to_json(t) for t in txs]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _require_chain(paths: Paths) -> ledger.Chain:
    if not paths.chain.exists():
        raise ChainFormatError(f"no chain file at {paths.chain}; run `init` first")
    return ledger.load_chain(paths.chain)


def _resolve_keyhash(wallet: ledger.Wallet, ref: str) -> bytes:
    """A key reference is a wallet key name or an address string."""
    if ref in wallet.keys:
        return wallet.keys[ref].id
    return codec.Address.from_text(ref).payload


def _pending_view(chain: ledger.Chain, pending) -> ledger.UtxoView:
    view = ledger.UtxoView(chain)
    for tx in pending:
        view.apply(tx)
    return view


# --- Commands ------------------------------------------------------------------


def cmd_init(args) -> int:
    paths = Paths(args)
    with _locked(paths):
        if paths.chain.exists() and not args.force:
            raise ChainFormatError(f"{paths.chain} already exists (use --force)")
        wallet = load_wallet(paths.wallet)
        allocations = []
        for item in args.allocate or []:
            ref, _, amount = item.rpartition(":")
            if not ref:
                raise ValueError(f"bad allocation {item!r}, expected NAME_OR_ADDR:COINS")
            allocations.append((_resolve_keyhash(wallet, ref),
                                ledger.parse_coins(amount)))
        config = ledger.ChainConfig(
            subsidy=ledger.parse_coins(args.subsidy),
            genesis_allocations=allocations)
        chain = ledger.new_chain(config)
        ledger.save_chain(chain, paths.chain)
        save_pending([], paths.pending)
        if wallet.keys:
            wallet.sync(chain)
            save_wallet(wallet, paths.wallet)
    _emit({
        "chain": str(paths.chain),
        "genesis_txid": chain.blocks[0].coinbase.txid.hex(),
        "allocations": [
            {"address": codec.key_address(kh).text, "amount": amt,
             "coins": ledger.format_coins(amt)}
            for kh, amt in allocations
        ],
        "subsidy": config.subsidy,
    })
    return EXIT_OK


def cmd_keygen(args) -> int:
    paths = Paths(args)
    with _locked(paths):
        wallet = load_wallet(paths.wallet)
        seed = bytes.fromhex(args.seed) if args.seed else os.urandom(32)
        if len(seed) != 32:
            raise ValueError("--seed must be 32 bytes of hex")
        keypair = wallet.add_key(args.name, ledger.KeyPair(seed))
        save_wallet(wallet, paths.wallet)
    _emit({"name": args.name, "address": keypair.address.text})
    return EXIT_OK


def cmd_address_for_service(args) -> int:
    address = codec.derive_service_address(args.url)
    _emit({"url": args.url, "address": address.text})
    return EXIT_OK


def cmd_pay(args) -> int:
    paths = Paths(args)
    with _locked(paths):
        chain = _require_chain(paths)
        wallet = load_wallet(paths.wallet)
        wallet.sync(chain)
        pending = load_pending(paths.pending)
        reserved = {inp.outpoint for tx in pending for inp in tx.inputs}

        service = protocol.ServiceDescriptor.for_url(args.url)
        payment = protocol.build_payment(
            wallet, chain,
            codec.Address.from_text(args.producer),
            service,
            price=ledger.parse_coins(args.amount),
            miner_fee=ledger.parse_coins(args.fee),
            key_name=args.key,
            exclude=reserved)
        ledger.validate_transaction(payment.tx, chain, _pending_view(chain, pending))
        pending.append(payment.tx)
        save_pending(pending, paths.pending)
        save_wallet(wallet, paths.wallet)
    _emit({
        "txid": payment.txid.hex(),
        "price": payment.price,
        "change": payment.change,
        "marker": codec.key_address(payment.service_marker).text,
        "producer": codec.key_address(payment.producer).text,
        "fee": ledger.parse_coins(args.fee),
    })
    return EXIT_OK


def cmd_offer(args) -> int:
    paths = Paths(args)
    chain = _require_chain(paths)
    wallet = load_wallet(paths.wallet)
    config = protocol.ProtocolConfig(
        min_vote_fee=0 if args.allow_zero_fee else 1)
    offer = protocol.build_voucher_offer(
        chain, bytes.fromhex(args.payment_txid), wallet,
        rate=args.rate,
        incentive=ledger.parse_coins(args.incentive),
        funding_miner_fee=ledger.parse_coins(args.funding_fee),
        config=config)
    out = Path(args.out) if args.out else Path(f"offer-{args.payment_txid[:8]}.json")
    out.write_text(offer.dumps() + "\n", encoding="utf-8")
    _emit({
        "offer_file": str(out),
        "payment_txid": args.payment_txid,
        "vote_fee": offer.vote_fee,
        "incentive": offer.incentive,
        "escrow": offer.funding.outputs[0].amount,
        "producer_change": offer.funding.outputs[1].amount,
        "voucher_txid": offer.draft.txid.hex(),
    })
    return EXIT_OK


def cmd_cosign(args) -> int:
    paths = Paths(args)
    chain = _require_chain(paths)
    wallet = load_wallet(paths.wallet)
    offer = protocol.VoucherOffer.loads(Path(args.offer_file).read_text(encoding="utf-8"))

    if chain.transaction(offer.payment_txid) is None:
        raise LinkError(f"payment {offer.payment_txid.hex()} not found in chain")
    if chain.utxo((offer.payment_txid, 0)) is None:
        raise Out1SpentError(
            f"price output of payment {offer.payment_txid.hex()} is already spent")

    lock = offer.escrow_lock
    if args.key:
        consumer = wallet.key(args.key)
    else:
        consumer = None
        for name in sorted(wallet.keys):
            if wallet.keys[name].id in (lock.keyhash_a, lock.keyhash_b):
                consumer = wallet.keys[name]
                break
        if consumer is None:
            raise VoucherChainError("no wallet key matches the escrow lock")
    voucher = protocol.cosign_voucher(offer, consumer)

    out = Path(args.out) if args.out else Path(f"cosigned-{voucher.txid.hex()[:8]}.json")
    package = {"format": "voucherchain.txpackage", "version": 1,
               "txs": [ledger.tx_to_json(offer.funding), ledger.tx_to_json(voucher)]}
    out.write_text(json.dumps(package, sort_keys=True, indent=2) + "\n",
                   encoding="utf-8")
    _emit({
        "package_file": str(out),
        "voucher_txid": voucher.txid.hex(),
        "funding_txid": offer.funding.txid.hex(),
        "vote_fee": offer.vote_fee,
    })
    return EXIT_OK


def cmd_submit(args) -> int:
    paths = Paths(args)
    with _locked(paths):
        chain = _require_chain(paths)
        pending = load_pending(paths.pending)
        with open(args.tx_file, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        tx_objs = obj["txs"] if isinstance(obj, dict) and "txs" in obj else [obj]
        new_txs = [ledger.tx_from_json(t) for t in tx_objs]

        view = _pending_view(chain, pending)
        for tx in new_txs:
            ledger.validate_transaction(tx, chain, view)
            view.apply(tx)
        pending.extend(new_txs)
        save_pending(pending, paths.pending)
    _emit({"submitted": [tx.txid.hex() for tx in new_txs],
           "pending": len(pending)})
    return EXIT_OK


def cmd_mine(args) -> int:
    paths = Paths(args)
    with _locked(paths):
        chain = _require_chain(paths)
        wallet = load_wallet(paths.wallet)
        pending = load_pending(paths.pending)
        miner = _resolve_keyhash(wallet, args.miner)
        block = ledger.mine_block(chain, pending, miner)
        ledger.append_block(paths.chain, block)
        save_pending([], paths.pending)
        if wallet.keys:
            wallet.sync(chain)
            save_wallet(wallet, paths.wallet)
    _emit({
        "height": block.height,
        "digest": block.digest.hex(),
        "transactions": [tx.txid.hex() for tx in block.txs],
        "coinbase_value": sum(o.amount for o in block.coinbase.outputs),
        "fees": ledger.block_fees(block) - chain.config.subsidy,
    })
    return EXIT_OK


def _mode_from_args(args) -> reputation.ScoringMode:
    if args.weighted is not None:
        return reputation.weighted(ledger.parse_coins(args.weighted))
    return reputation.UNWEIGHTED


def cmd_rep_service(args) -> int:
    paths = Paths(args)
    chain = _require_chain(paths)
    index = reputation.full_rescan(chain, _mode_from_args(args))
    score = index.reputation_of_service(args.service)
    marker = reputation.resolve_marker(args.service)
    events = sum(1 for e in index.events if e.marker == marker)
    _emit({
        "service": args.service,
        "marker": codec.key_address(marker).text,
        "score": score,
        "score_coins": ledger.format_coins(score),
        "events": events,
    })
    return EXIT_OK


def cmd_rep_producer(args) -> int:
    paths = Paths(args)
    chain = _require_chain(paths)
    index = reputation.full_rescan(chain, _mode_from_args(args))
    report = index.reputation_of_producer(args.producer)
    _emit({
        "producer": args.producer,
        "total": report.total,
        "total_coins": ledger.format_coins(report.total),
        "breakdown": [
            {"marker": codec.key_address(marker).text, "score": score}
            for marker, score in report.breakdown
        ],
    })
    return EXIT_OK


def cmd_rescan(args) -> int:
    paths = Paths(args)
    chain = _require_chain(paths)
    index = reputation.full_rescan(chain, _mode_from_args(args))
    urls = list(args.url or [])
    if args.csv:
        sys.stdout.write(reputation.report_csv(index, urls))
    else:
        sys.stdout.write(reputation.report_text(index, urls))
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = sim.load_scenario(args.scenario_file)
    if args.seed is not None:
        scenario.seed = args.seed
        scenario.validate()
    result = sim.run(scenario)

    summary = {
        "seed": scenario.seed,
        "blocks": result.chain.height,
        "transactions": sum(len(b.txs) for b in result.chain.blocks),
        "ranking": [{"producer": name, "score": score}
                    for name, score in result.ranking],
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "chain.jsonl").write_bytes(result.chain_bytes())
        (out / "report.csv").write_text(result.report_csv(), encoding="utf-8")
        (out / "metrics.csv").write_text(result.metrics_csv(), encoding="utf-8")
        (out / "attack.txt").write_text(sim.attack_report_text(result),
                                        encoding="utf-8")
        summary["out"] = str(out)
    _emit(summary)
    return EXIT_OK


# --- Parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voucherchain",
        description="Service-bound payments, co-signed vouchers, and "
                    "fee-based reputation on a deterministic ledger.")
    parser.add_argument("--data-dir", help=f"state directory (env {DATA_DIR_ENV})")
    parser.add_argument("--chain", help="chain file override")
    parser.add_argument("--wallet", help="wallet file override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create a new chain with genesis allocations")
    p.add_argument("--allocate", action="append", metavar="NAME_OR_ADDR:COINS")
    p.add_argument("--subsidy", default="50", help="block subsidy in coins")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("keygen", help="add a named key to the wallet")
    p.add_argument("name")
    p.add_argument("--seed", help="32-byte hex seed for deterministic keys")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("address-for-service",
                       help="derive the service marker address for a URL")
    p.add_argument("url")
    p.set_defaults(func=cmd_address_for_service)

    p = sub.add_parser("pay", help="pay a producer for a service")
    p.add_argument("producer", help="producer address")
    p.add_argument("url", help="service URL")
    p.add_argument("amount", help="price in coins")
    p.add_argument("--fee", default="0", help="miner fee in coins")
    p.add_argument("--key", help="paying wallet key (default: wallet default)")
    p.set_defaults(func=cmd_pay)

    p = sub.add_parser("offer", help="build a voucher offer for a confirmed payment")
    p.add_argument("payment_txid")
    p.add_argument("--rate", required=True, help="vote-fee rate, e.g. 0.03")
    p.add_argument("--incentive", default="0", help="incentive in coins")
    p.add_argument("--funding-fee", default="0", help="funding miner fee in coins")
    p.add_argument("--allow-zero-fee", action="store_true",
                   help="waive the minimum vote fee (free services)")
    p.add_argument("--out", help="offer file path")
    p.set_defaults(func=cmd_offer)

    p = sub.add_parser("cosign", help="co-sign a voucher offer")
    p.add_argument("offer_file")
    p.add_argument("--key", help="consumer wallet key")
    p.add_argument("--out", help="package file path")
    p.set_defaults(func=cmd_cosign)

    p = sub.add_parser("submit", help="queue transactions for the next block")
    p.add_argument("tx_file")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("mine", help="mine queued transactions into a block")
    p.add_argument("--miner", required=True, help="miner key name or address")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("rep", help="reputation queries")
    rep_sub = p.add_subparsers(dest="rep_command", required=True)
    q = rep_sub.add_parser("service", help="score for a service URL or marker")
    q.add_argument("service")
    q.add_argument("--weighted", metavar="C",
                   help="weighted mode with constant C (coins)")
    q.set_defaults(func=cmd_rep_service)
    q = rep_sub.add_parser("producer", help="score and breakdown for a producer")
    q.add_argument("producer", help="producer address")
    q.add_argument("--weighted", metavar="C")
    q.set_defaults(func=cmd_rep_producer)

    p = sub.add_parser("rescan", help="rebuild the index and print a report")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--url", action="append", help="known service URL (repeatable)")
    p.add_argument("--weighted", metavar="C")
    p.set_defaults(func=cmd_rescan)

    p = sub.add_parser("simulate", help="run a scenario file")
    p.add_argument("scenario_file")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", help="directory for chain/report/metrics output")
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_PARSE

    try:
        return args.func(args)
    except InsufficientFundsError as exc:
        print(f"error: insufficient funds: {exc}", file=sys.stderr)
        return EXIT_FUNDS
    except LinkError as exc:
        print(f"error: link failure: {exc}", file=sys.stderr)
        return EXIT_LINK
    except (ChainFormatError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (json.JSONDecodeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except VoucherChainError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
