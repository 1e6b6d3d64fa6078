"""Small JSON/hash helpers shared by the artifact writers."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path


def canonical_json_bytes(obj) -> bytes:
    """Stable byte encoding used for artifact checksums."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def object_sha256(obj) -> str:
    return sha256_hex(canonical_json_bytes(obj))


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def conventions() -> dict:
    """Bookkeeping conventions embedded in reports so numbers stay comparable."""
    return {
        "flops_per_multiply_accumulate": 2,
        "param_counts_include_biases": True,
        "weight_pruning_scope": "kernel-only",
        "flatten_order": "row-major (h, w, c)",
        "finetune_defaults": {"optimizer": "sgd", "momentum": 0.9, "batch_size": 32},
    }
