"""Deterministic agent-based scenario runner.

Simulates a marketplace on the ledger: honest consumers buy services and
co-sign vouchers when satisfied, an optional attacker pumps its own
service through fake identities, and miners collect the vote fees. All
randomness flows from one seeded generator with agents drawing in a fixed
round-robin order, so a scenario's chain bytes are reproducible.

A deal spans two blocks: the payment confirms first, then the producer
funds the escrow and the (co-signed) voucher confirms in the next block.
The attacker supports two imperfections worth measuring: skipping the
co-signature (payment only, nothing scored, nothing burned) and "decoy"
deals that burn a vote fee without a properly linked payment (fee paid,
nothing scored), which keeps its reputation at or below its spend.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import ledger, protocol, reputation
from .errors import ScenarioError

POLICIES = ("cosign_if_satisfied", "always_cosign", "never_cosign")


# --- Scenario configuration -----------------------------------------------


@dataclass
class ProducerSpec:
    name: str
    price: int
    delivery_success: float = 1.0
    url: str = ""

    def __post_init__(self):
        if not self.url:
            self.url = f"svc://{self.name}"


@dataclass
class ConsumerSpec:
    name: str
    funds: int
    purchase_rate: float = 0.5
    policy: str = "cosign_if_satisfied"


@dataclass
class AttackerSpec:
    name: str
    budget: int
    price: int
    identities: int = 3
    deals_per_block: int = 1
    payment_miner_fee: int = 0
    decoy_rate: float = 0.0
    skip_cosign_rate: float = 0.0
    url: str = ""

    def __post_init__(self):
        if not self.url:
            self.url = f"svc://{self.name}"


@dataclass
class Scenario:
    seed: int
    blocks: int
    producers: List[ProducerSpec] = field(default_factory=list)
    consumers: List[ConsumerSpec] = field(default_factory=list)
    attacker: Optional[AttackerSpec] = None
    miners: List[str] = field(default_factory=lambda: ["miner"])
    attacker_mines: bool = False
    subsidy: int = 50 * ledger.COIN
    rate: str = "0.03"
    incentive: int = ledger.COIN // 100
    min_vote_fee: int = 1
    mode: str = "unweighted"
    weight_constant: int = 1_000_000

    def validate(self) -> None:
        if self.blocks < 1:
            raise ScenarioError("blocks must be >= 1")
        if not self.miners:
            raise ScenarioError("at least one miner is required")
        names = [m for m in self.miners]
        names += [p.name for p in self.producers] + [c.name for c in self.consumers]
        if self.attacker:
            names.append(self.attacker.name)
        if len(names) != len(set(names)):
            raise ScenarioError("agent names must be unique")
        for p in self.producers:
            if not 0.0 <= p.delivery_success <= 1.0:
                raise ScenarioError(f"{p.name}: delivery_success outside [0, 1]")
            if p.price < 0:
                raise ScenarioError(f"{p.name}: negative price")
        for c in self.consumers:
            if not 0.0 <= c.purchase_rate <= 1.0:
                raise ScenarioError(f"{c.name}: purchase_rate outside [0, 1]")
            if c.policy not in POLICIES:
                raise ScenarioError(f"{c.name}: unknown policy {c.policy!r}")
            if c.funds < 0:
                raise ScenarioError(f"{c.name}: negative funds")
        if self.attacker:
            a = self.attacker
            if a.budget < 0 or a.price < 0 or a.identities < 1 or a.deals_per_block < 0:
                raise ScenarioError("attacker budget/price/identities invalid")
            for prob in (a.decoy_rate, a.skip_cosign_rate):
                if not 0.0 <= prob <= 1.0:
                    raise ScenarioError("attacker rates must be in [0, 1]")
            if a.payment_miner_fee < 0:
                raise ScenarioError("attacker payment_miner_fee negative")
        if self.incentive < 0 or self.min_vote_fee < 0 or self.subsidy < 0:
            raise ScenarioError("amounts must be non-negative")
        protocol.as_rate(self.rate)
        self.scoring_mode()

    def scoring_mode(self) -> reputation.ScoringMode:
        if self.mode == "unweighted":
            return reputation.UNWEIGHTED
        if self.mode == "weighted":
            return reputation.weighted(self.weight_constant)
        raise ScenarioError(f"unknown scoring mode {self.mode!r}")

    def to_json(self) -> dict:
        obj = {
            "seed": self.seed,
            "blocks": self.blocks,
            "subsidy": self.subsidy,
            "rate": self.rate,
            "incentive": self.incentive,
            "min_vote_fee": self.min_vote_fee,
            "mode": self.mode,
            "weight_constant": self.weight_constant,
            "miners": list(self.miners),
            "attacker_mines": self.attacker_mines,
            "producers": [vars(p).copy() for p in self.producers],
            "consumers": [vars(c).copy() for c in self.consumers],
            "attacker": vars(self.attacker).copy() if self.attacker else None,
        }
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "Scenario":
        try:
            scenario = cls(
                seed=int(obj["seed"]),
                blocks=int(obj["blocks"]),
                producers=[ProducerSpec(**p) for p in obj.get("producers", [])],
                consumers=[ConsumerSpec(**c) for c in obj.get("consumers", [])],
                attacker=AttackerSpec(**obj["attacker"]) if obj.get("attacker") else None,
                miners=list(obj.get("miners", ["miner"])),
                attacker_mines=bool(obj.get("attacker_mines", False)),
                subsidy=int(obj.get("subsidy", 50 * ledger.COIN)),
                rate=str(obj.get("rate", "0.03")),
                incentive=int(obj.get("incentive", ledger.COIN // 100)),
                min_vote_fee=int(obj.get("min_vote_fee", 1)),
                mode=str(obj.get("mode", "unweighted")),
                weight_constant=int(obj.get("weight_constant", 1_000_000)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"bad scenario document: {exc}") from exc
        scenario.validate()
        return scenario


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"scenario file is not valid JSON: {exc}") from exc
    return Scenario.from_json(obj)


# --- Metrics ------------------------------------------------------------------


@dataclass
class AgentMetrics:
    name: str
    role: str  # producer | consumer | attacker | miner
    reputation: int = 0
    vote_fees_paid: int = 0
    other_fees_paid: int = 0
    incentives_paid: int = 0
    incentives_received: int = 0
    purchases: int = 0
    sales: int = 0
    cosigned: int = 0
    declined: int = 0
    blocks_mined: int = 0
    mining_fees_collected: int = 0
    self_financed_fraction: float = 0.0
    self_financed: bool = False

    @property
    def total_fees_paid(self) -> int:
        return self.vote_fees_paid + self.other_fees_paid

    @property
    def incentives_net(self) -> int:
        return self.incentives_received - self.incentives_paid


METRIC_COLUMNS = (
    "name", "role", "reputation", "vote_fees_paid", "other_fees_paid",
    "incentives_paid", "incentives_received", "purchases", "sales",
    "cosigned", "declined", "blocks_mined", "mining_fees_collected",
    "self_financed_fraction", "self_financed",
)


@dataclass
class SimResult:
    scenario: Scenario
    chain: ledger.Chain
    index: reputation.ReputationIndex
    metrics: Dict[str, AgentMetrics]
    ranking: List[Tuple[str, int]]
    service_urls: List[str]

    def rescan(self, mode: reputation.ScoringMode) -> reputation.ReputationIndex:
        return reputation.full_rescan(self.chain, mode)

    def chain_bytes(self) -> bytes:
        return ledger.chain_to_bytes(self.chain)

    def report_csv(self) -> str:
        return reputation.report_csv(self.index, self.service_urls)

    def metrics_csv(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for name in sorted(self.metrics):
            m = self.metrics[name]
            values = [str(getattr(m, col)) for col in METRIC_COLUMNS]
            lines.append(",".join(values))
        return "\n".join(lines) + "\n"


# --- Runner internals ------------------------------------------------------------


@dataclass
class _Deal:
    kind: str                 # honest | attack | decoy
    consumer_name: str
    consumer_key: ledger.KeyPair
    producer_name: str
    producer_key: ledger.KeyPair
    service: protocol.ServiceDescriptor
    price: int
    payment_txid: bytes
    created_height: int
    delivery_success: float = 1.0
    policy: str = "cosign_if_satisfied"
    skip_cosign: bool = False
    resolved: bool = False


class _Runner:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.sc = scenario
        self.rng = random.Random(scenario.seed)
        self.config = protocol.ProtocolConfig(min_vote_fee=scenario.min_vote_fee)
        self.rate = protocol.as_rate(scenario.rate)

        # Key creation order is part of the deterministic contract.
        self.miner_keys = {m: ledger.KeyPair.generate(self.rng) for m in scenario.miners}
        self.producer_keys = {p.name: ledger.KeyPair.generate(self.rng)
                              for p in scenario.producers}
        self.consumer_keys = {c.name: ledger.KeyPair.generate(self.rng)
                              for c in scenario.consumers}
        self.attacker_key: Optional[ledger.KeyPair] = None
        self.fake_keys: List[ledger.KeyPair] = []
        if scenario.attacker:
            self.attacker_key = ledger.KeyPair.generate(self.rng)
            self.fake_keys = [ledger.KeyPair.generate(self.rng)
                              for _ in range(scenario.attacker.identities)]

        self.services = {p.name: protocol.ServiceDescriptor.for_url(p.url)
                         for p in scenario.producers}
        if scenario.attacker:
            self.services[scenario.attacker.name] = protocol.ServiceDescriptor.for_url(
                scenario.attacker.url)

        allocations: List[Tuple[bytes, int]] = []
        for c in scenario.consumers:
            allocations.append((self.consumer_keys[c.name].id, c.funds))
        if scenario.attacker:
            n = scenario.attacker.identities
            share, remainder = divmod(scenario.attacker.budget, n)
            for i, key in enumerate(self.fake_keys):
                allocations.append((key.id, share + (remainder if i == 0 else 0)))
        self.chain = ledger.new_chain(
            ledger.ChainConfig(subsidy=scenario.subsidy,
                               genesis_allocations=allocations))
        self.index = reputation.ReputationIndex(scenario.scoring_mode())
        self.index.index_block(self.chain.blocks[0])

        self.rotation = list(scenario.miners)
        if scenario.attacker and scenario.attacker_mines:
            self.rotation.append(scenario.attacker.name)

        self.metrics: Dict[str, AgentMetrics] = {}
        for m in scenario.miners:
            self.metrics[m] = AgentMetrics(m, "miner")
        for p in scenario.producers:
            self.metrics[p.name] = AgentMetrics(p.name, "producer")
        for c in scenario.consumers:
            self.metrics[c.name] = AgentMetrics(c.name, "consumer")
        if scenario.attacker:
            self.metrics[scenario.attacker.name] = AgentMetrics(
                scenario.attacker.name, "attacker")

        self.deals: List[_Deal] = []
        self._attack_rotation = 0

    # -- wallet helpers ----------------------------------------------------

    def _wallet_for(self, key: ledger.KeyPair) -> ledger.Wallet:
        wallet = ledger.Wallet()
        wallet.add_key("k", key)
        wallet.sync(self.chain)
        return wallet

    # -- per-block phases ----------------------------------------------------

    def _consumer_purchases(self, height: int, pending, reserved) -> None:
        if not self.sc.producers:
            return
        for spec in self.sc.consumers:
            if self.rng.random() >= spec.purchase_rate:
                continue
            pick = self.sc.producers[self.rng.randrange(len(self.sc.producers))]
            wallet = self._wallet_for(self.consumer_keys[spec.name])
            if sum(o.amount for o in wallet.spendable(reserved)) < pick.price:
                continue
            payment = protocol.build_payment(
                wallet, self.chain, self.producer_keys[pick.name].id,
                self.services[pick.name], pick.price, miner_fee=0,
                exclude=reserved)
            pending.append(payment.tx)
            reserved.update(inp.outpoint for inp in payment.tx.inputs)
            self.metrics[spec.name].purchases += 1
            self.metrics[pick.name].sales += 1
            self.deals.append(_Deal(
                kind="honest", consumer_name=spec.name,
                consumer_key=self.consumer_keys[spec.name],
                producer_name=pick.name, producer_key=self.producer_keys[pick.name],
                service=self.services[pick.name], price=pick.price,
                payment_txid=payment.txid, created_height=height,
                delivery_success=pick.delivery_success, policy=spec.policy))

    def _attacker_purchases(self, height: int, pending, reserved) -> None:
        attacker = self.sc.attacker
        if not attacker or attacker.deals_per_block == 0:
            return
        name = attacker.name
        service = self.services[name]
        for _ in range(attacker.deals_per_block):
            fake = self.fake_keys[self._attack_rotation % len(self.fake_keys)]
            self._attack_rotation += 1
            decoy = self.rng.random() < attacker.decoy_rate
            skip = self.rng.random() < attacker.skip_cosign_rate
            wallet = self._wallet_for(fake)
            need = attacker.price + attacker.payment_miner_fee
            if sum(o.amount for o in wallet.spendable(reserved)) < need:
                continue
            if decoy:
                tx = self._plain_transfer(wallet, self.attacker_key.id,
                                          attacker.price,
                                          attacker.payment_miner_fee, reserved)
                kind = "decoy"
                payment_txid = tx.txid
            else:
                payment = protocol.build_payment(
                    wallet, self.chain, self.attacker_key.id, service,
                    attacker.price, miner_fee=attacker.payment_miner_fee,
                    exclude=reserved)
                tx = payment.tx
                kind = "attack"
                payment_txid = payment.txid
            pending.append(tx)
            reserved.update(inp.outpoint for inp in tx.inputs)
            self.metrics[name].purchases += 1
            self.metrics[name].sales += 1
            self.metrics[name].other_fees_paid += attacker.payment_miner_fee
            self.deals.append(_Deal(
                kind=kind, consumer_name=name, consumer_key=fake,
                producer_name=name, producer_key=self.attacker_key,
                service=service, price=attacker.price,
                payment_txid=payment_txid, created_height=height,
                skip_cosign=skip))

    def _plain_transfer(self, wallet: ledger.Wallet, to_keyhash: bytes,
                        amount: int, miner_fee: int, reserved) -> ledger.Transaction:
        """Two-output transfer with no marker: never detected as a payment."""
        selected, total = [], 0
        for owned in wallet.spendable(reserved):
            selected.append(owned)
            total += owned.amount
            if total >= amount + miner_fee:
                break
        change = total - amount - miner_fee
        sender = wallet.key()
        tx = ledger.Transaction(
            inputs=[ledger.TxInput(o.outpoint[0], o.outpoint[1]) for o in selected],
            outputs=[
                ledger.TxOutput(amount, ledger.PayToKeyHash(to_keyhash)),
                ledger.TxOutput(change, ledger.PayToKeyHash(sender.id)),
            ])
        for i in range(len(selected)):
            ledger.sign_input(tx, i, sender, ledger.PayToKeyHash(sender.id))
        return tx

    def _voucher_phase(self, height: int, pending) -> None:
        for deal in self.deals:
            if deal.resolved or deal.created_height >= height:
                continue
            deal.resolved = True
            if deal.kind == "honest":
                self._resolve_honest(deal, pending)
            elif deal.kind == "attack":
                self._resolve_attack(deal, pending)
            else:
                self._resolve_decoy(deal, pending)

    def _resolve_honest(self, deal: _Deal, pending) -> None:
        producer_wallet = ledger.Wallet()
        producer_wallet.add_key("k", deal.producer_key)
        vote_fee = protocol.vote_fee_for(deal.price, self.rate)
        incentive = min(self.sc.incentive, max(deal.price - vote_fee, 0))
        satisfied = self.rng.random() < deal.delivery_success
        if deal.policy == "never_cosign":
            cosign = False
        elif deal.policy == "always_cosign":
            cosign = True
        else:
            cosign = satisfied
        if vote_fee < self.config.min_vote_fee:
            cosign = False  # unscorable offer: producer does not send one
        if not cosign:
            self.metrics[deal.consumer_name].declined += 1
            return
        offer = protocol.build_voucher_offer(
            self.chain, deal.payment_txid, producer_wallet, self.rate,
            incentive=incentive, config=self.config)
        voucher = protocol.cosign_voucher(offer, deal.consumer_key)
        pending.extend([offer.funding, voucher])
        self.metrics[deal.consumer_name].cosigned += 1
        self.metrics[deal.consumer_name].incentives_received += incentive
        self.metrics[deal.producer_name].incentives_paid += incentive
        self.metrics[deal.producer_name].vote_fees_paid += offer.vote_fee

    def _resolve_attack(self, deal: _Deal, pending) -> None:
        name = deal.producer_name
        vote_fee = protocol.vote_fee_for(deal.price, self.rate)
        if deal.skip_cosign or vote_fee < self.config.min_vote_fee:
            self.metrics[name].declined += 1
            return
        producer_wallet = ledger.Wallet()
        producer_wallet.add_key("k", deal.producer_key)
        incentive = min(self.sc.incentive, max(deal.price - vote_fee, 0))
        offer = protocol.build_voucher_offer(
            self.chain, deal.payment_txid, producer_wallet, self.rate,
            incentive=incentive, config=self.config)
        voucher = protocol.cosign_voucher(offer, deal.consumer_key)
        pending.extend([offer.funding, voucher])
        self.metrics[name].cosigned += 1
        self.metrics[name].incentives_received += incentive
        self.metrics[name].incentives_paid += incentive
        self.metrics[name].vote_fees_paid += offer.vote_fee

    def _resolve_decoy(self, deal: _Deal, pending) -> None:
        """Burn a vote fee through an unlinked escrow: same shape as a real
        voucher, but funded from a plain transfer instead of a payment."""
        name = deal.producer_name
        vote_fee = protocol.vote_fee_for(deal.price, self.rate)
        if deal.skip_cosign or vote_fee < self.config.min_vote_fee:
            self.metrics[name].declined += 1
            return
        incentive = min(self.sc.incentive, max(deal.price - vote_fee, 0))
        escrow_lock = ledger.PayToMultisig2of2(deal.consumer_key.id, deal.producer_key.id)
        change = deal.price - incentive - vote_fee
        funding = ledger.Transaction(
            inputs=[ledger.TxInput(deal.payment_txid, 0)],
            outputs=[
                ledger.TxOutput(incentive + vote_fee, escrow_lock),
                ledger.TxOutput(change, ledger.PayToKeyHash(deal.producer_key.id)),
            ])
        ledger.sign_input(funding, 0, deal.producer_key,
                          ledger.PayToKeyHash(deal.producer_key.id))
        outputs = []
        if incentive > 0:
            outputs.append(ledger.TxOutput(incentive,
                                           ledger.PayToKeyHash(deal.consumer_key.id)))
        outputs.append(ledger.TxOutput(0, ledger.Marker(deal.service.marker.payload)))
        voucher = ledger.Transaction(
            inputs=[ledger.TxInput(funding.txid, 0)], outputs=outputs)
        ledger.sign_input(voucher, 0, deal.producer_key, escrow_lock)
        ledger.sign_input(voucher, 0, deal.consumer_key, escrow_lock)
        pending.extend([funding, voucher])
        self.metrics[name].cosigned += 1
        self.metrics[name].incentives_received += incentive
        self.metrics[name].incentives_paid += incentive
        self.metrics[name].vote_fees_paid += vote_fee

    # -- main loop --------------------------------------------------------------

    def run(self) -> SimResult:
        expected_supply = sum(a for _, a in self.chain.config.genesis_allocations)
        for height in range(1, self.sc.blocks + 1):
            pending: List[ledger.Transaction] = []
            reserved: set = set()
            self._consumer_purchases(height, pending, reserved)
            self._attacker_purchases(height, pending, reserved)
            self._voucher_phase(height, pending)

            miner_name = self.rotation[(height - 1) % len(self.rotation)]
            if self.sc.attacker and miner_name == self.sc.attacker.name:
                miner_key = self.attacker_key
            else:
                miner_key = self.miner_keys[miner_name]
            block = ledger.mine_block(self.chain, pending, miner_key.id)
            self.index.index_block(block)

            fee_income = ledger.block_fees(block) - self.sc.subsidy
            miner_metrics = self.metrics[miner_name]
            miner_metrics.blocks_mined += 1
            miner_metrics.mining_fees_collected += fee_income

            expected_supply += self.sc.subsidy
            assert self.chain.total_supply() == expected_supply, (
                "supply conservation broken at height %d" % height)

        return self._finish()

    def _finish(self) -> SimResult:
        actor_identities: Dict[str, set] = {}
        for name, key in self.producer_keys.items():
            actor_identities[name] = {key.id}
        for name, key in self.consumer_keys.items():
            actor_identities[name] = {key.id}
        if self.sc.attacker:
            ids = {self.attacker_key.id} | {k.id for k in self.fake_keys}
            actor_identities[self.sc.attacker.name] = ids

        producer_of = {}
        for name, key in self.producer_keys.items():
            producer_of[key.id] = name
        if self.sc.attacker:
            producer_of[self.attacker_key.id] = self.sc.attacker.name

        self_fee: Dict[str, int] = {}
        total_fee: Dict[str, int] = {}
        for event in self.index.events:
            owner = producer_of.get(event.producer)
            if owner is None:
                continue
            self.metrics[owner].reputation = self.index.producer_scores.get(
                event.producer, 0)
            total_fee[owner] = total_fee.get(owner, 0) + event.vote_fee
            if event.voter in actor_identities.get(owner, set()):
                self_fee[owner] = self_fee.get(owner, 0) + event.vote_fee
        for name, metrics in self.metrics.items():
            if name in total_fee and total_fee[name] > 0:
                metrics.self_financed_fraction = self_fee.get(name, 0) / total_fee[name]
                metrics.self_financed = metrics.self_financed_fraction > 0.5

        fees_tracked = sum(m.vote_fees_paid + m.other_fees_paid
                           for m in self.metrics.values())
        fees_collected = sum(m.mining_fees_collected for m in self.metrics.values())
        assert fees_tracked == fees_collected, (
            f"fee metrics ({fees_tracked}) do not reconcile with mined fees "
            f"({fees_collected})")

        ranking = []
        for name, key in self.producer_keys.items():
            ranking.append((name, self.index.producer_scores.get(key.id, 0)))
        if self.sc.attacker:
            ranking.append((self.sc.attacker.name,
                            self.index.producer_scores.get(self.attacker_key.id, 0)))
        ranking.sort(key=lambda item: (-item[1], item[0]))

        urls = [p.url for p in self.sc.producers]
        if self.sc.attacker:
            urls.append(self.sc.attacker.url)

        return SimResult(
            scenario=self.sc, chain=self.chain, index=self.index,
            metrics=self.metrics, ranking=ranking, service_urls=urls)


def run(scenario: Scenario) -> SimResult:
    """Run a scenario to completion; deterministic for a given seed."""
    return _Runner(scenario).run()


# --- Attack report -----------------------------------------------------------

ATTACK_COLUMNS = ("agent", "role", "reputation", "vote_fees_paid",
                  "total_fees_paid", "incentives_net", "mining_fees_collected",
                  "self_financed")


def attack_report(result: SimResult) -> List[dict]:
    """Cost-per-reputation rows per agent, flagging self-financed scores."""
    rows = []
    for name in sorted(result.metrics):
        m = result.metrics[name]
        rows.append({
            "agent": m.name,
            "role": m.role,
            "reputation": m.reputation,
            "vote_fees_paid": m.vote_fees_paid,
            "total_fees_paid": m.total_fees_paid,
            "incentives_net": m.incentives_net,
            "mining_fees_collected": m.mining_fees_collected,
            "self_financed": m.self_financed,
        })
    return rows


def attack_report_text(result: SimResult) -> str:
    rows = attack_report(result)
    header = (f"{'agent':<14} {'role':<9} {'reputation':>12} {'vote_fees':>12} "
              f"{'all_fees':>12} {'incent_net':>12} {'mined_fees':>12} {'self'}")
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['agent']:<14} {r['role']:<9} {r['reputation']:>12} "
            f"{r['vote_fees_paid']:>12} {r['total_fees_paid']:>12} "
            f"{r['incentives_net']:>12} {r['mining_fees_collected']:>12} "
            f"{'yes' if r['self_financed'] else 'no'}")
    return "\n".join(lines) + "\n"
