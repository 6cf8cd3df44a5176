"""Named random streams derived from a single run seed.

Each consumer asks for its own stream by name, so adding draws to one
component never shifts the numbers another component sees.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch


def _spawn_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, name: str) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=seed, spawn_key=_spawn_key(name))
    return np.random.default_rng(seq)


def torch_generator(seed: int, name: str) -> torch.Generator:
    sub = int(stream(seed, name).integers(0, 2**62))
    gen = torch.Generator()
    gen.manual_seed(sub)
    return gen
