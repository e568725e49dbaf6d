"""In-process model registry: per-model deadlines, fault injection, fan-out.

Models run in-process behind this registry instead of as sixteen remote web
services; the enabled/injected-failure flags and per-call deadlines preserve
the same failure semantics for testing. A request succeeds as long as at
least one model returns; only the all-failed case surfaces as unavailable.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FuturesTimeoutError
from dataclasses import dataclass, field

from .base import ModelOutput

logger = logging.getLogger(__name__)

DEFAULT_DEADLINE_MS = 500.0


class ModelFailure(RuntimeError):
    """A registered model failed (injected or real) for this call."""


@dataclass
class RegistryEntry:
    model_id: str
    family: str
    predict: object  # callable Incident -> ModelOutput
    enabled: bool = True
    injected_failure: bool = False
    deadline_ms: float = DEFAULT_DEADLINE_MS
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def call(self, incident) -> ModelOutput:
        if self.injected_failure:
            raise ModelFailure(f"{self.model_id}: injected failure")
        with self.lock:  # model forward passes keep per-call caches
            return self.predict(incident)


@dataclass
class FanOutResult:
    outputs: list = field(default_factory=list)  # ModelOutput per responding model
    responded: int = 0
    total: int = 0
    failed: list = field(default_factory=list)   # model ids that errored/timed out


class ModelRegistry:
    """Registry of the deployed models, keyed by model id."""

    def __init__(self, max_workers: int = 16):
        self.entries = {}
        self._executor = ThreadPoolExecutor(max_workers=max_workers)
        self.manifest_version = ""

    def close(self):
        self._executor.shutdown(wait=False)

    def register(self, model_id, family, predict, deadline_ms=DEFAULT_DEADLINE_MS):
        if model_id in self.entries:
            raise ValueError(f"duplicate model id {model_id!r}")
        self.entries[model_id] = RegistryEntry(
            model_id=model_id, family=family, predict=predict, deadline_ms=deadline_ms
        )

    @classmethod
    def from_system(cls, system, deadline_ms=DEFAULT_DEADLINE_MS) -> "ModelRegistry":
        registry = cls()
        bundle = system.bundle
        for model_id in sorted(bundle.models):
            predict = _bound_predict(system, model_id)
            registry.register(model_id, bundle.family_of[model_id], predict, deadline_ms)
        registry.manifest_version = bundle.manifest.get("corpus_fingerprint", "")[:12]
        return registry

    # -- flags -------------------------------------------------------------

    def set_enabled(self, model_id: str, enabled: bool) -> None:
        self._entry(model_id).enabled = enabled

    def inject_failure(self, model_id: str, failed: bool) -> None:
        self._entry(model_id).injected_failure = failed

    def reset_failures(self) -> None:
        for entry in self.entries.values():
            entry.injected_failure = False

    def _entry(self, model_id) -> RegistryEntry:
        if model_id not in self.entries:
            raise KeyError(f"unknown model id {model_id!r}")
        return self.entries[model_id]

    def counts(self) -> dict:
        enabled = sum(1 for e in self.entries.values() if e.enabled)
        failed = sum(1 for e in self.entries.values() if e.injected_failure)
        return {"total": len(self.entries), "enabled": enabled, "failed": failed}

    # -- fan-out -------------------------------------------------------------

    def collect_outputs(self, incident) -> FanOutResult:
        """Call every enabled model concurrently, honoring per-model deadlines.

        A model that raises or misses its deadline counts as failed for this
        request; whatever arrived is returned.
        """
        live = [e for e in self.entries.values() if e.enabled]
        result = FanOutResult(total=len(self.entries))
        if not live:
            return result
        start = time.monotonic()
        futures = {e.model_id: self._executor.submit(e.call, incident) for e in live}
        # Waiting in ascending deadline order bounds the total wall time by
        # the largest deadline while giving each model exactly its own budget.
        for entry in sorted(live, key=lambda e: e.deadline_ms):
            future = futures[entry.model_id]
            remaining = entry.deadline_ms / 1000.0 - (time.monotonic() - start)
            try:
                output = future.result(timeout=max(remaining, 0.0))
            except FuturesTimeoutError:
                future.cancel()
                result.failed.append(entry.model_id)
                logger.warning("model %s missed its %gms deadline",
                               entry.model_id, entry.deadline_ms)
                continue
            except Exception as exc:
                result.failed.append(entry.model_id)
                logger.warning("model %s failed: %s", entry.model_id, exc)
                continue
            result.outputs.append(output)
            result.responded += 1
        return result


def _bound_predict(system, model_id):
    def predict(incident):
        return system.model_outputs(incident, model_ids=[model_id])[model_id]

    return predict
