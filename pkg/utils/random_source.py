import hashlib
from typing import List

import numpy as np

MAX_SEED = 2**64 - 1


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed > MAX_SEED:
        raise ValueError(f"Seed must be a 64-bit unsigned integer, got {seed}")
    return seed


class RandomSource:
    """
    Seeded pseudo-random stream (numpy PCG64).
    Equal seeds give equal draw sequences. Each concurrent caller owns its own instance.
    """

    def __init__(self, seed: int, _seed_seq: np.random.SeedSequence = None):
        self.seed = _check_seed(seed)
        self._seed_seq = _seed_seq if _seed_seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seed_seq))

    @classmethod
    def for_key(cls, seed: int, *labels) -> "RandomSource":
        """Source keyed by a master seed plus labels, e.g. (query_id, epoch_index)."""
        digest = hashlib.sha256("\x1f".join(str(label) for label in labels).encode("utf-8")).digest()
        key_words = [int.from_bytes(digest[i:i + 4], "big") for i in range(0, 16, 4)]
        seed = _check_seed(seed)
        seq = np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, *key_words])
        return cls(seed, _seed_seq=seq)

    def spawn(self, n: int) -> List["RandomSource"]:
        """Independent child sources; child i is the same for a given seed whatever n is."""
        return [RandomSource(self.seed, _seed_seq=child) for child in self._seed_seq.spawn(n)]

    def uniform(self) -> float:
        return float(self._gen.random())

    def uniforms(self, size: int) -> np.ndarray:
        return self._gen.random(size)

    def open_uniforms(self, size: int) -> np.ndarray:
        """Draws in the open interval (0, 1)."""
        u = self._gen.random(size)
        # 0.0 has probability 2**-53 per draw; nudge it inside the interval
        return np.where(u == 0.0, np.nextafter(0.0, 1.0), u)

    def random_bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen
