import pytest

from memtrust.keyvault import KeyVault
from memtrust.store import SealedStore
from memtrust.tee import Measurement, MonotonicCounter, TeeSimulator, measure


@pytest.fixture
def measurement() -> Measurement:
    return measure(b"test code bundle", b"test policy bundle")


@pytest.fixture
def tee(tmp_path, measurement) -> TeeSimulator:
    return TeeSimulator(tmp_path / "platform.key", measurement)


@pytest.fixture
def counter(tmp_path) -> MonotonicCounter:
    # Lives outside the store tree: it simulates TEE-protected NV memory
    # and must not be captured by storage snapshots.
    return MonotonicCounter(tmp_path / "nv" / "counter.bin")


@pytest.fixture
def vault(tmp_path, tee) -> KeyVault:
    return KeyVault(tmp_path / "vault", tee)


@pytest.fixture
def store(tmp_path, tee, vault, counter) -> SealedStore:
    return SealedStore(tmp_path, tee, vault, counter)
