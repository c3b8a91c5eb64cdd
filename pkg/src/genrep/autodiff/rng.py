"""Deterministic random streams.

Every random draw in the package comes from :class:`SeededRNG`.  The bit
source is PCG64 (the XSL-RR 128/64 permuted congruential generator as
implemented by NumPy), initialised from ``SeedSequence(seed)``.  Uniform
doubles are ``(raw >> 11) * 2**-53``; standard normals use the basic
Box-Muller transform on consecutive uniform pairs ``(u1, u2)``::

    r = sqrt(-2 ln(1 - u1));  z0 = r cos(2 pi u2);  z1 = r sin(2 pi u2)

emitted in the order z0, z1.  Child streams are keyed with
``SeedSequence([seed, *keys])`` so independent components never share a
stream.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


class SeededRNG:
    def __init__(self, seed):
        self.seed = int(seed) & _MASK64
        self._bits = np.random.PCG64(np.random.SeedSequence(self.seed))

    def __repr__(self):
        return f"SeededRNG(seed={self.seed})"

    def raw(self, n):
        return self._bits.random_raw(int(n))

    def uniform(self, size=None, low=0.0, high=1.0):
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(shape)

    def normal(self, size=None, loc=0.0, scale=1.0):
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        z = loc + scale * z.reshape(-1)[:n]
        return float(z[0]) if size is None else z.reshape(shape)

    def integers(self, low, high=None, size=None):
        if high is None:
            low, high = 0, low
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(size if size is not None else 1)
        out = low + np.floor(u * (high - low)).astype(np.int64)
        return int(out[0]) if size is None else out

    def permutation(self, n):
        return np.argsort(self.uniform(int(n)), kind="stable")

    def spawn(self, *keys):
        """Independent child stream identified by integer ``keys``."""
        ss = np.random.SeedSequence([self.seed, *[int(k) & _MASK64 for k in keys]])
        return SeededRNG(int(ss.generate_state(1, np.uint64)[0]))

    def child_seed(self):
        """Fresh 32-bit seed for third-party code that wants an int."""
        return int(self.raw(1)[0] >> np.uint64(33))


def seeded_rng(seed):
    return SeededRNG(seed)
