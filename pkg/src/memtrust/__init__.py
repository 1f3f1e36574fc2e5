"""memtrust: a zero-trust memory service for AI agents.

Five layers over a simulated trusted execution environment:
sealed storage, sanitizing ingestion, a decaying dual-layer memory
engine, oblivious multi-path retrieval, and audited governance,
exposed through the Universal Memory Protocol.
"""

from memtrust.errors import (
    IntegrityError,
    MemtrustError,
    RollbackError,
    SealViolation,
    ShreddedError,
)

__version__ = "0.1.0"

__all__ = [
    "MemtrustError",
    "IntegrityError",
    "RollbackError",
    "SealViolation",
    "ShreddedError",
    "__version__",
]
