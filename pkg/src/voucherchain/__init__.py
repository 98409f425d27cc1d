"""voucherchain: service-bound payments, co-signed voucher transactions,
and chain-derived reputation on a deterministic UTXO ledger.

A payment tags a purchase with a zero-valued output to a service marker
address derived from the service URL. The producer answers with a voucher
drawn from a 2-of-2 escrow over the price output; the consumer's
co-signature releases it, deliberately leaving a vote fee for the miner.
Indexers traverse the chain and read each counted vote fee as a
reputation increment for the service and its producer, which makes fake
feedback cost real money.
"""

from . import codec, errors, ledger, protocol, reputation, sim

__version__ = "0.1.0"

__all__ = ["codec", "errors", "ledger", "protocol", "reputation", "sim", "__version__"]
