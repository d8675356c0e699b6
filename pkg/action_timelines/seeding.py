from typing import Union

import numpy as np
import torch

__all__ = ["derive_seed", "derive_generator", "derive_numpy_generator"]

Key = Union[int, str]


def _entropy(key: Key) -> int:
    if isinstance(key, str):
        return int.from_bytes(key.encode("utf-8"), "little")
    if key < 0:
        raise ValueError("seed keys must be non-negative, got {}".format(key))
    return int(key)


def derive_seed(seed: int, *keys: Key) -> int:
    """Split a child seed off the run seed.

    The child depends only on ``seed`` and the ordered ``keys`` (for example
    ``("train", step, video_index)``), never on how many draws happened before.
    """
    sequence = np.random.SeedSequence([_entropy(seed)] + [_entropy(k) for k in keys])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def derive_generator(seed: int, *keys: Key) -> torch.Generator:
    """A torch CPU generator seeded with derive_seed(seed, *keys)"""
    generator = torch.Generator()
    generator.manual_seed(derive_seed(seed, *keys))
    return generator


def derive_numpy_generator(seed: int, *keys: Key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
