"""Named RNG substreams and content fingerprints.

Every source of randomness in the package draws from an explicit generator
derived here; nothing touches the global numpy/torch RNG state. That is what
makes whole pipeline runs bit-reproducible.
"""
from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def substream_seed(master_seed: int, *labels: object) -> int:
    """Derive a 63-bit seed for the named substream of ``master_seed``."""
    tag = str(int(master_seed)) + "".join("/" + str(lb) for lb in labels)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK63


def numpy_stream(master_seed: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(substream_seed(master_seed, *labels))


def torch_stream(master_seed: int, *labels: object) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(substream_seed(master_seed, *labels))
    return gen


def fingerprint_arrays(arrays) -> str:
    """sha256 over the raw bytes of a sequence of arrays/tensors."""
    h = hashlib.sha256()
    for arr in arrays:
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().contiguous().numpy()
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def fingerprint_module(module: torch.nn.Module) -> str:
    """sha256 over all parameter bytes of a network, in declaration order."""
    return fingerprint_arrays(p for _, p in module.named_parameters())


def canonical_json(obj: Any) -> str:
    """Key-sorted, whitespace-stable JSON used for hashing and emission."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False)


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
