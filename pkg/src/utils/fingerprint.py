"""Config fingerprints and run deduplication."""
import hashlib
import json
from typing import Any, Callable, Dict, Optional


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a resolved config."""
    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode()).hexdigest()


def run_key(config: Dict[str, Any], seed: int, purpose: str) -> str:
    """Identity of one seeded computation under a config."""
    hash_input = f"{config_hash(config)}:{seed}:{purpose}"
    return hashlib.sha256(hash_input.encode()).hexdigest()


class RunDeduplicator:
    """Memoizes seeded computations that several modes would otherwise repeat."""

    def __init__(self):
        self.results: Dict[str, Any] = {}

    def get_or_compute(self, key: str, compute: Callable[[], Any]) -> Any:
        if key not in self.results:
            self.results[key] = compute()
        return self.results[key]

    def lookup(self, key: str) -> Optional[Any]:
        return self.results.get(key)

    def clear_cache(self):
        """Drop every memoized result."""
        self.results.clear()
