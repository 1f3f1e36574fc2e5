"""Exception hierarchy shared across the service."""


class MemtrustError(Exception):
    """Base class for all service errors."""


class SealViolation(MemtrustError):
    """Unseal attempted under a measurement other than the one data was sealed to."""


class IntegrityError(MemtrustError):
    """An AEAD tag or Merkle path failed to verify."""


class RollbackError(MemtrustError):
    """Storage state is authentic but older than the last acknowledged write."""


class ShreddedError(MemtrustError):
    """Operation touched a unit whose key has been cryptographically destroyed."""


class EpochError(MemtrustError):
    """Key derivation requested for an epoch that does not exist yet."""


class NotFoundError(MemtrustError):
    """Referenced unit, object, or segment does not exist."""


class PolicyError(MemtrustError):
    """Request denied by policy, or the policy bundle fails its measurement check."""


class ProtocolError(MemtrustError):
    """Malformed or out-of-order wire message."""


class BackpressureError(MemtrustError):
    """Update queue is above its high-water mark; caller should retry later."""


class DurableWriteError(MemtrustError):
    """A write that must be durable before acknowledgment could not be persisted."""


class KeyUnavailableError(MemtrustError):
    """The simulated platform signing key could not be loaded."""
