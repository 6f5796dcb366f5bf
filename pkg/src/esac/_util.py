"""Small shared helpers: canonical JSON, config hashing, worker mapping."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor


def canonical_json(obj) -> str:
    """Deterministic JSON encoding: sorted keys, no whitespace variance."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def parallel_map(fn, items, threads: int = 1) -> list:
    """Order-preserving map over items; results are independent of scheduling
    as long as fn derives all randomness from its item."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
