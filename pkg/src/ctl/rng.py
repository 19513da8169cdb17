"""Deterministic random streams built on xoshiro256**.

Every stochastic operation in this package draws from a :class:`Stream`.
A stream is identified by a 64-bit key; child streams are derived by name
with :meth:`Stream.spawn`, so the full tree of randomness used by a run is
a pure function of the single user-facing seed.  Two runs with the same
seed therefore replay byte-identical draw sequences on any platform.

Scalar draws step a single xoshiro256** generator (Blackman & Vigna),
seeded from the key via the splitmix64 finalizer.  Bulk array draws
(``uniform_field`` / ``normal_field``) run a lane-parallel variant of the
same generator: each call consumes one scalar step to key the lanes, then
fills the array in a fixed round-major order.  Both paths are part of the
documented algorithm and are frozen by the test suite.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FIELD_LANES = 1024


def _mix64(z):
    """splitmix64 output finalizer on a 64-bit value."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(seed, n):
    """Return the first ``n`` outputs of the splitmix64 sequence for ``seed``."""
    out = []
    state = seed & MASK64
    for _ in range(n):
        state = (state + _GOLDEN) & MASK64
        out.append(_mix64(state))
    return out


def _fnv1a64(text):
    """FNV-1a hash of a string, used to turn stream labels into key material."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


class Stream:
    """One named xoshiro256** stream.

    Equal (seed, label) pairs replay the same sequence; different labels
    under one seed are independent, which is how modules partition a
    single run seed without coordinating draw counts.

    Args:
        seed: any Python int; reduced modulo 2**64.
        label: name of the stream, mixed into the state.
    """

    def __init__(self, seed, label="root"):
        self._init_from_key(_mix64((seed & MASK64) ^ _fnv1a64(str(label))), label)

    def _init_from_key(self, key, label):
        self.key = key & MASK64
        self.label = label
        s = splitmix64(self.key, 4)
        if s[0] == s[1] == s[2] == s[3] == 0:
            s[0] = 1
        self._s = s

    def __repr__(self):
        return f"Stream({self.key:#x}, {self.label!r})"

    def spawn(self, label):
        """Derive an independent child stream; does not advance this stream."""
        child = object.__new__(Stream)
        child._init_from_key(_mix64(self.key ^ _fnv1a64(str(label))),
                             f"{self.label}/{label}")
        return child

    def next_u64(self):
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self):
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, n):
        """Uniform integer in [0, n), rejection-sampled so it is unbiased."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        limit = MASK64 + 1 - ((MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self, mean=0.0, std=1.0):
        """One Gaussian draw (Box-Muller; the spare value is not cached)."""
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53  # in (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        return mean + std * r * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items):
        """In-place Fisher-Yates shuffle of a mutable sequence."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n):
        idx = list(range(n))
        self.shuffle(idx)
        return idx

    # -- bulk array draws ---------------------------------------------------

    def _u64_field(self, n):
        """n raw 64-bit words from the lane-parallel generator."""
        base = self.next_u64()
        lanes = min(_FIELD_LANES, max(1, n))
        ctr = np.arange(1, 4 * lanes + 1, dtype=np.uint64)
        seeded = (np.uint64(base) + ctr * np.uint64(_GOLDEN))
        z = seeded
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        state = z.reshape(lanes, 4).T.copy()  # s0..s3 per lane
        s0, s1, s2, s3 = state[0], state[1], state[2], state[3]

        rounds = -(-n // lanes)
        out = np.empty((rounds, lanes), dtype=np.uint64)
        five = np.uint64(5)
        nine = np.uint64(9)
        for r in range(rounds):
            prod = s1 * five
            out[r] = ((prod << np.uint64(7)) | (prod >> np.uint64(57))) * nine
            t = s1 << np.uint64(17)
            s2 = s2 ^ s0
            s3 = s3 ^ s1
            s1 = s1 ^ s2
            s0 = s0 ^ s3
            s2 = s2 ^ t
            s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        return out.reshape(-1)[:n]

    def uniform_field(self, shape, low=0.0, high=1.0):
        """Array of uniforms in [low, high), filled in a fixed order."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._u64_field(n) >> np.uint64(11)) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal_field(self, shape, mean=0.0, std=1.0):
        """Array of Gaussians (pairwise Box-Muller over the uniform field)."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = -(-n // 2)
        words = self._u64_field(2 * m)
        u1 = ((words[:m] >> np.uint64(11)) + np.uint64(1)) * 2.0**-53
        u2 = (words[m:] >> np.uint64(11)) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return (mean + std * z[:n]).reshape(shape)
