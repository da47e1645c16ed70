"""Portable, counter-based random streams.

Every random draw in the package goes through :class:`Stream`, a thin
layer over the Philox4x64-10 bit generator (Salmon et al., Random123).
A stream is addressed by ``(seed, stream_id)``, which becomes the 128-bit
Philox key; the counter starts at zero.  Derived variates use fixed,
documented formulas so that any Philox4x64-10 implementation reproduces
them bit for bit:

* uniform double:   ``(raw >> 11) * 2**-53``           in [0, 1)
* bounded integer:  ``floor(u * n)``                    in [0, n)
* standard normal:  Box-Muller cosine branch
  ``sqrt(-2 log(1 - u1)) * cos(2 pi u2)``, one raw pair per variate.
* permutation:      Fisher-Yates from the back, ``j = floor(u * (i + 1))``.
"""

import numpy as np

# Stream purposes; see stream_id for the sub-index layout.
INIT = 1
SHUFFLE = 2
DROPOUT = 3
CORRUPT = 4
DATA = 5
SPLIT = 6
AUGMENT = 7
TEXT = 8

_MASK64 = (1 << 64) - 1


def stream_id(purpose, *indices):
    """Pack a purpose and up to three 16-bit indices into one 64-bit id.

    Layout (high to low): purpose (8 bits), index count (8), then the
    indices in 16-bit slots.
    """
    if len(indices) > 3:
        raise ValueError("at most three sub-indices")
    sid = ((purpose & 0xFF) << 56) | (len(indices) << 48)
    for slot, idx in enumerate(indices):
        idx = int(idx)
        if not 0 <= idx < 1 << 16:
            raise ValueError(f"stream index {idx} outside [0, 65536)")
        sid |= idx << (32 - 16 * slot)
    return sid


class Stream:
    """Seeded random stream; see module docstring for the exact formulas."""

    def __init__(self, seed, sid=0):
        self.seed = int(seed) & _MASK64
        self.sid = int(sid) & _MASK64
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.sid], dtype=np.uint64))

    def raw(self, size):
        return self._bitgen.random_raw(size).astype(np.uint64)

    def uniform(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return float(u[0]) if size is None else u.reshape(size)

    def integers(self, n, size=None):
        u = self.uniform(size)
        if size is None:
            return int(np.floor(u * n))
        return np.floor(u * n).astype(np.int64)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = self.uniform(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return float(z[0]) if size is None else z.reshape(size)

    def permutation(self, n):
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(np.floor(u[k] * (i + 1)))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    # resumable state, JSON friendly
    def get_state(self):
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "sid": self.sid,
            "counter": [int(c) for c in st["state"]["counter"]],
            "buffer_pos": int(st["buffer_pos"]),
            "buffer": [int(b) for b in st["buffer"]],
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state):
        s = cls(state["seed"], state["sid"])
        st = s._bitgen.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        s._bitgen.state = st
        return s


def stream(seed, purpose, *indices):
    return Stream(seed, stream_id(purpose, *indices))
