"""Flat key=value configuration with typed defaults.

Lines are `key = value`; `#` starts a comment. Unknown keys are kept so
modules can define their own namespaces (`ingest.batch_size`,
`retrieval.noise_rho`, ...).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any

DEFAULTS: dict[str, Any] = {
    "data_dir": "./memtrust-data",
    "listen_host": "127.0.0.1",
    "listen_port": 7431,
    "policy_path": "",
    "rules_path": "",
    "ingest.tick_ms": 250,
    "ingest.batch_size": 4,
    "ingest.high_water": 1024,
    "retrieval.k_anonymity": 2,
    "retrieval.noise_rho": 0.1,
    "retrieval.bucket_capacity": 64,
    "retrieval.weights.keyword": 0.3,
    "retrieval.weights.vector": 0.5,
    "retrieval.weights.graph": 0.2,
    "retrieval.weights.recency": 0.1,
    "retrieval.recency_half_life_s": 7 * 86400.0,
    "retrieval.hnsw_m": 16,
    "retrieval.hnsw_ef_construct": 200,
    "retrieval.hnsw_ef_search": 64,
    "engine.reinforce_alpha": 0.5,
    "engine.decay_threshold": 0.05,
    "engine.initial_strength_s": 86400.0,
    "proxy.endpoint": "",
    "proxy.timeout_ms": 5000,
    "governance.ticket_lifetime_s": 900,
    "governance.anchor_every_entries": 64,
    "governance.anchor_every_s": 60.0,
    "store.block_slots": 16,
    "store.hot_segment_budget": 8,
}


class ConfigError(ValueError):
    pass


class Config:
    def __init__(self, values: dict[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        if values:
            self.values.update(values)
        env_dir = os.environ.get("MEMTRUST_DATA_DIR")
        if env_dir:
            self.values["data_dir"] = env_dir

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        values: dict[str, Any] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key in DEFAULTS and not isinstance(DEFAULTS[key], str):
                try:
                    value = type(DEFAULTS[key])(value)
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}")
            values[key] = value
        return cls(values)

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]
