import math
import os

import mpmath
import pytest

from memtrust.engine import (
    MemoryEngine,
    PatternSummarizer,
    ProfileGraph,
    retention,
)
from memtrust.errors import IntegrityError, ShreddedError
from memtrust.store import _unit_hash


class MockClock:
    def __init__(self, t=1_000_000.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, dt):
        self.t += dt


@pytest.fixture
def clock():
    return MockClock()


@pytest.fixture
def engine(store, vault, tee, clock):
    return MemoryEngine(store, vault, tee, clock=clock)


class TestRetention:
    def test_zero_elapsed_is_one(self):
        assert retention(0, 100.0) == 1.0

    def test_t_equals_s_is_inverse_e(self):
        assert retention(100.0, 100.0) == pytest.approx(math.exp(-1), abs=1e-15)

    def test_exponent_law(self):
        s = 5000.0
        assert retention(2 * s, s) == pytest.approx(retention(s, s) ** 2, rel=1e-12)

    def test_nonpositive_strength_rejected(self):
        with pytest.raises(ValueError):
            retention(10.0, 0.0)
        with pytest.raises(ValueError):
            retention(10.0, -1.0)

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            retention(-1.0, 10.0)

    def test_matches_high_precision_oracle_sampled(self):
        mpmath.mp.dps = 40
        for i in range(500):
            t = 0.1 + i * 37.3
            s = 50.0 + (i % 17) * 991.0
            oracle = float(mpmath.exp(-mpmath.mpf(t) / mpmath.mpf(s)))
            assert abs(retention(t, s) - oracle) < 1e-12


class TestReinforce:
    def test_multiplicative_update(self, engine, clock):
        ep = engine.add_episode("hello")
        ep.strength_s = 100.0
        assert engine.reinforce(ep.episode_id) == pytest.approx(150.0)

    def test_two_reinforcements_compose(self, engine):
        ep = engine.add_episode("hello")
        s0 = ep.strength_s
        engine.reinforce(ep.episode_id)
        engine.reinforce(ep.episode_id)
        assert ep.strength_s == pytest.approx(s0 * 1.5**2)

    def test_retention_is_one_right_after_reinforce(self, engine, clock):
        ep = engine.add_episode("hello")
        clock.advance(50_000)
        engine.reinforce(ep.episode_id)
        assert engine.current_retention(ep.episode_id) == 1.0

    def test_cold_episode_promoted_then_reinforced(self, engine, clock):
        ep = engine.add_episode("chilly")
        clock.advance(86_400 * 10)
        engine.decay_sweep()
        assert ep.tier == "cold"
        engine.reinforce(ep.episode_id)
        assert ep.tier == "active"


class TestConsolidate:
    def test_stub_extracts_prefers(self, engine, clock):
        ep = engine.add_episode("alice prefers rust")
        facts = engine.consolidate((0, clock() + 1))
        assert len(facts) == 1
        f = facts[0]
        assert (f.subject, f.predicate, f.object) == ("alice", "prefers", "rust")
        assert f.confidence == pytest.approx(0.6)
        assert f.provenance == [ep.episode_id]

    def test_reassertion_raises_confidence(self, engine, clock):
        engine.add_episode("alice prefers rust")
        engine.add_episode("alice prefers rust")
        engine.consolidate((0, clock() + 1))
        f = engine.graph.facts[("alice", "prefers")]
        assert f.confidence == pytest.approx(0.7)

    def test_contradiction_decrements_then_replaces(self, engine, clock):
        # consolidation windows do not overlap: each worker owns its own
        engine.add_episode("alice prefers rust")
        engine.consolidate((clock() - 1, clock() + 1))
        # two contradictions: 0.6 -> 0.4 -> 0.2 <= replace threshold
        clock.advance(10)
        engine.add_episode("alice prefers go")
        engine.consolidate((clock() - 1, clock() + 1))
        f = engine.graph.facts[("alice", "prefers")]
        assert f.object == "rust" and f.confidence == pytest.approx(0.4)
        clock.advance(10)
        engine.add_episode("alice prefers go")
        engine.consolidate((clock() - 1, clock() + 1))
        f = engine.graph.facts[("alice", "prefers")]
        assert f.object == "go" and f.confidence == pytest.approx(0.6)

    def test_empty_window_empty_list(self, engine):
        engine.add_episode("alice prefers rust")
        assert engine.consolidate((0, 1)) == []

    def test_confidence_stays_in_bounds_under_arbitrary_sequences(self, engine, clock):
        import random

        rng = random.Random(9)
        for _ in range(200):
            obj = rng.choice(["rust", "go", "zig", "c"])
            engine.add_episode(f"bob prefers {obj}")
            engine.consolidate((0, clock() + 1))
            for f in engine.graph.facts.values():
                assert 0.0 <= f.confidence <= 1.0

    def test_works_on_pattern(self):
        s = PatternSummarizer()
        assert s.extract("Carol works_on memtrust") == [("carol", "works_on", "memtrust")]
        assert s.extract("carol works on memtrust") == [("carol", "works_on", "memtrust")]


class TestDecaySweep:
    def test_threshold_demotion(self, engine, clock):
        ep = engine.add_episode("fades fast")
        ep.strength_s = 1000.0
        clock.advance(3 * 1000.0)  # R = e^-3 ~ 0.0498 < 0.05
        report = engine.decay_sweep()
        assert ep.tier == "cold"
        assert report.demoted == 1

    def test_barely_retained_stays_active(self, engine, clock):
        ep = engine.add_episode("hangs on")
        ep.strength_s = 1000.0
        clock.advance(2.9 * 1000.0)  # R = e^-2.9 ~ 0.055 > 0.05
        engine.decay_sweep()
        assert ep.tier == "active"

    def test_sweep_with_no_decay_still_rewrites_everything(self, engine, store, clock):
        for i in range(5):
            engine.add_episode(f"fresh {i}")
        writes = []
        store.write_listeners.append(lambda p, s: writes.append(s))
        report = engine.decay_sweep()
        assert report.demoted == 0
        assert report.rewritten == 5
        assert len(writes) == 5  # one block each

    def test_trace_independent_of_decay_count(self, tmp_path, tee, clock):
        from memtrust.keyvault import KeyVault
        from memtrust.store import SealedStore
        from memtrust.tee import MonotonicCounter

        def build(tag, n_decayed):
            base = tmp_path / tag
            vault = KeyVault(base / "v", tee)
            store = SealedStore(base, tee, vault,
                                MonotonicCounter(base / "nv" / "c.bin"))
            eng = MemoryEngine(store, vault, tee, clock=clock)
            for i in range(30):
                ep = eng.add_episode(f"episode number {i} with same size pad")
                if i < n_decayed:
                    ep.strength_s = 1.0  # decays immediately
            writes = []
            store.write_listeners.append(lambda p, s: writes.append(s))
            clock.advance(10.0)
            eng.decay_sweep()
            clock.advance(-10.0)
            return writes

        a = build("one", 1)
        b = build("many", 25)
        assert len(a) == len(b)
        assert sorted(a) == sorted(b)

    def test_sweep_rotates_epoch_and_data_survives(self, engine, store, vault, clock):
        ep = engine.add_episode("durable")
        before = vault.current_epoch
        engine.decay_sweep()
        assert vault.current_epoch == before + 1
        assert store.get_object(ep.unit_id) == b"durable"

    def test_shredded_unit_rewritten_as_garbage(self, engine, store, vault, clock):
        ep = engine.add_episode("to be forgotten")
        vault.shred(ep.unit_id, b"\x00" * 32)
        engine.decay_sweep()
        blocks = store.raw_blocks(ep.unit_id)
        # not decryptable under any active unit's derivable keys
        from cryptography.exceptions import InvalidTag
        from cryptography.hazmat.primitives.ciphers.aead import AESGCM

        for other in store.object_units():
            if vault.is_shredded(other):
                continue
            for epoch in range(vault.current_epoch + 1):
                key = vault.derive_duk(other, epoch).key
                for nonce, ct in blocks:
                    with pytest.raises(InvalidTag):
                        AESGCM(key).decrypt(nonce, ct, None)

    def test_no_cold_plaintext_on_disk(self, tmp_path, engine, store, clock):
        marker = "PLANTEDMARKER" + os.urandom(8).hex()
        ep = engine.add_episode(f"secret {marker}")
        ep.strength_s = 1.0
        clock.advance(100.0)
        engine.decay_sweep()
        assert ep.tier == "cold"
        for path in tmp_path.rglob("*"):
            if path.is_file():
                assert marker.encode() not in path.read_bytes(), path


class TestRecallPromote:
    def _demote(self, engine, clock, text="frozen"):
        ep = engine.add_episode(text)
        ep.strength_s = 1.0
        clock.advance(100.0)
        engine.decay_sweep()
        assert ep.tier == "cold"
        return ep

    def test_demote_then_promote_round_trip(self, engine, store, clock):
        ep = self._demote(engine, clock)
        engine.recall_promote(ep.episode_id)
        assert ep.tier == "active"
        assert store.get_object(ep.unit_id) == b"frozen"

    def test_promote_resets_time(self, engine, clock):
        ep = self._demote(engine, clock)
        engine.recall_promote(ep.episode_id)
        assert engine.current_retention(ep.episode_id) == 1.0

    def test_promote_on_active_is_reinforce_only(self, engine):
        ep = engine.add_episode("warm")
        s0 = ep.strength_s
        engine.recall_promote(ep.episode_id)
        assert ep.tier == "active"
        assert ep.strength_s == pytest.approx(s0 * 1.5)

    def test_shredded_promote_rejected(self, engine, vault, clock):
        ep = self._demote(engine, clock)
        vault.shred(ep.unit_id, b"\x00" * 32)
        with pytest.raises(ShreddedError):
            engine.recall_promote(ep.episode_id)


class TestCatalogPersistence:
    def test_engine_state_survives_reopen(self, tmp_path, store, vault, tee, clock):
        eng = MemoryEngine(store, vault, tee, clock=clock)
        ep = eng.add_episode("alice prefers rust")
        eng.consolidate((0, clock() + 1))
        eng2 = MemoryEngine(store, vault, tee, clock=clock)
        assert ep.episode_id in eng2.episodes
        assert ("alice", "prefers") in eng2.graph.facts
