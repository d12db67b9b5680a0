"""Seeded randomness and stable hashing.

All randomness in the package flows through numpy's PCG64 bit generator.
Each named component (embedder, router for layer 3, ...) draws from its
own generator spawned from the run seed and the component name, so adding
or removing a component never shifts the initialization of the others.
Python's builtin hash() is salted per process and is never used here.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash. Deterministic across processes and platforms."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def generator(seed: int, component: str | None = None) -> np.random.Generator:
    """PCG64 generator for a run seed, optionally keyed by component name."""
    if component is None:
        seq = np.random.SeedSequence(seed)
    else:
        key = fnv1a_64(component.encode("utf-8"))
        seq = np.random.SeedSequence(seed, spawn_key=(key & 0xFFFFFFFF, key >> 32))
    return np.random.Generator(np.random.PCG64(seq))


def gaussian(gen: np.random.Generator, shape, std: float) -> np.ndarray:
    return gen.normal(0.0, std, size=shape)


def state_dict(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of the generator state."""
    st = gen.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def restore_state(snapshot: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = {
        "bit_generator": snapshot["bit_generator"],
        "state": {"state": int(snapshot["state"]), "inc": int(snapshot["inc"])},
        "has_uint32": int(snapshot["has_uint32"]),
        "uinteger": int(snapshot["uinteger"]),
    }
    return gen
