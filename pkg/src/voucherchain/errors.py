"""Exception hierarchy shared across the package.

The CLI maps these classes onto process exit codes, so new error types
should subclass the closest existing family rather than Exception.
"""


class VoucherChainError(Exception):
    """Base class for all errors raised by this package."""


# --- codec ------------------------------------------------------------

class CodecError(VoucherChainError):
    pass


class InvalidPayloadError(CodecError):
    """Address payload is not exactly 20 bytes."""


class MalformedAddressError(CodecError):
    """Text is not decodable Base58 (bad character, empty, too short)."""


class ChecksumError(CodecError):
    """Base58 decoded, but the 4-byte checksum does not verify."""


class InvalidServiceError(CodecError):
    """Service URL unusable for address derivation (empty)."""


# --- ledger -----------------------------------------------------------

class LedgerError(VoucherChainError):
    pass


class MissingUtxoError(LedgerError):
    """Input references an output that does not exist."""


class DoubleSpendError(LedgerError):
    """Input references an output that is already spent."""


class BadSignatureError(LedgerError):
    """A signature fails cryptographic verification."""


class MissingCosignatureError(LedgerError):
    """A 2-of-2 input carries only one of the two required signatures."""


class ValueOverflowError(LedgerError):
    """Transaction outputs exceed its inputs."""


class WrongKeyError(LedgerError):
    """Key does not match the lock it is asked to satisfy."""


class ChainFormatError(LedgerError):
    """Chain or transaction file does not parse or fails integrity checks."""


# --- protocol ---------------------------------------------------------

class ProtocolError(VoucherChainError):
    pass


class InsufficientFundsError(ProtocolError):
    """Wallet cannot cover amount plus fee."""


class LinkError(ProtocolError):
    """Payment/voucher linkage cannot be established or was broken."""


class PaymentNotFoundError(LinkError):
    """Referenced payment is not a confirmed payment-shaped transaction."""


class Out1SpentError(LinkError):
    """The payment's price output was already spent."""


class InvalidOfferError(ProtocolError):
    """Offer document is structurally broken or missing producer signature."""


class IncentiveTooLargeError(ProtocolError):
    """incentive + vote fee + funding fee exceeds the payment price."""


class InvalidRateError(ProtocolError):
    """Vote-fee rate outside (0, 1]."""


class VoteFeeTooSmallError(ProtocolError):
    """Computed vote fee is below the configured minimum."""


class AlreadyCosignedError(ProtocolError):
    """Voucher already carries a signature from this key."""


class IllegalTransitionError(ProtocolError):
    """Deal state machine received an event not legal in its state."""


# --- reputation -------------------------------------------------------

class ReputationError(VoucherChainError):
    pass


class OutOfOrderBlockError(ReputationError):
    """Block height does not extend the index by exactly one."""


class InvalidWeightConfigError(ReputationError):
    """Weighting constant must be positive."""


# --- simulator --------------------------------------------------------

class ScenarioError(VoucherChainError):
    """Scenario configuration is invalid."""
