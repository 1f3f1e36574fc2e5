"""Masking proxy between internal workers and an external LLM API.

Sensitive spans are tokenized to `[CATEGORY_n]` placeholders before any
text leaves the trust boundary; responses are detokenized on the way
back. The placeholder namespace is shared with the ingest sanitizer, one
bijective mapping table per session, persisted only sealed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from memtrust.canonical import canonical_json
from memtrust.ingest import EntityMap, RuleSet, SessionContext, mask_to_fixpoint
from memtrust.tee import SealedBlob, TeeSimulator

_PLACEHOLDER = re.compile(r"\[[A-Z]+_\d+\]")


@dataclass
class MaskedPrompt:
    text: str
    table_delta: dict[str, str]  # placeholder -> original, new this call


class CompletionClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class EchoClient:
    """Deterministic stub: returns the masked prompt unchanged."""

    def complete(self, prompt: str) -> str:
        return prompt


class RecordingClient:
    """Test double that records every outbound prompt before delegating."""

    def __init__(self, inner: CompletionClient | None = None):
        self.inner = inner or EchoClient()
        self.outbound: list[str] = []

    def complete(self, prompt: str) -> str:
        self.outbound.append(prompt)
        return self.inner.complete(prompt)


class HttpClient:
    """Deployment client: POST {"prompt": ...} and read {"text": ...}."""

    def __init__(self, endpoint: str, timeout_ms: int = 5000):
        self.endpoint = endpoint
        self.timeout_s = timeout_ms / 1000.0

    def complete(self, prompt: str) -> str:
        import urllib.request

        req = urllib.request.Request(
            self.endpoint,
            data=canonical_json({"prompt": prompt}),
            headers={"Content-Type": "application/json"},
        )
        with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
            return json.loads(resp.read().decode("utf-8"))["text"]


class PrivacyProxy:
    def __init__(self, rules: RuleSet, client: CompletionClient,
                 tee: TeeSimulator | None = None,
                 table_dir: str | Path | None = None):
        self.rules = rules
        self.client = client
        self.tee = tee
        self.table_dir = Path(table_dir) if table_dir else None
        self.unmask_warnings: list[str] = []

    # -- mapping table persistence ------------------------------------

    def _table_path(self, session: SessionContext) -> Path | None:
        if self.table_dir is None:
            return None
        return self.table_dir / f"{session.session_id}.table.sealed"

    def _persist_table(self, session: SessionContext) -> None:
        path = self._table_path(session)
        if path is None or self.tee is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = canonical_json(session.entities.backward)
        path.write_bytes(self.tee.seal(doc).to_bytes())

    def load_table(self, session: SessionContext) -> None:
        path = self._table_path(session)
        if path is None or self.tee is None or not path.exists():
            return
        doc = json.loads(self.tee.unseal(SealedBlob.from_bytes(path.read_bytes())))
        for token, original in doc.items():
            session.entities.backward[token] = original
            session.entities.forward[original] = token

    def clear_table(self, session: SessionContext) -> None:
        path = self._table_path(session)
        if path is not None:
            path.unlink(missing_ok=True)
        session.entities = EntityMap()

    # -- masking -------------------------------------------------------

    def mask(self, prompt: str, session: SessionContext) -> MaskedPrompt:
        before = set(session.entities.backward)
        masked = mask_to_fixpoint(prompt, self.rules, session.entities)
        delta = {
            t: o for t, o in session.entities.backward.items() if t not in before
        }
        self._persist_table(session)
        return MaskedPrompt(text=masked, table_delta=delta)

    def unmask(self, response: str, session: SessionContext) -> str:
        def substitute(m: re.Match) -> str:
            token = m.group()
            original = session.entities.backward.get(token)
            if original is None:
                self.unmask_warnings.append(token)
                return token
            return original

        return _PLACEHOLDER.sub(substitute, response)

    def proxy_complete(self, prompt: str, session: SessionContext) -> str:
        masked = self.mask(prompt, session)
        response = self.client.complete(masked.text)
        return self.unmask(response, session)
