"""Deterministic random-stream management.

One master seed fans out into independent named streams (parameter init,
shuffling / Poisson sampling, gradient noise, corpus generation, ...).
The split is a pure function of (master_seed, name[, index]): the name is
hashed with SHA-256 and the digest words are appended to the seed-sequence
entropy, so streams are reproducible across platforms and adding a new
stream never perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def named_stream(master_seed: int, name: str) -> np.random.Generator:
    """Return the generator for stream `name` under `master_seed`."""
    entropy = [int(master_seed) & _MASK64, *_name_words(name)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def indexed_stream(master_seed: int, name: str, index: int) -> np.random.Generator:
    """Per-item substream, e.g. one independent stream per generated record."""
    entropy = [int(master_seed) & _MASK64, *_name_words(name), int(index) & _MASK64]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def seed_lineage(master_seed: int, names: tuple[str, ...]) -> dict:
    """Documented description of the split, embedded in checkpoints/manifests."""
    return {
        "master_seed": int(master_seed),
        "streams": list(names),
        "split": "SeedSequence([master_seed, *sha256(name)[:16] as 4 LE u32 words])",
    }
