"""Inference-time degradation: box blur for images, staged DNA corruption.

DNA corruption runs five stages in order, all drawing from one seeded
:class:`~hirtaxa.rng.Stream`.  Draw protocol (``n`` = current length
entering the stage):

1. substitution   ``u = uniform(n)``, ``r = uniform(n)``.  Base ``i`` is
   replaced when ``u[i] < p_sub``: an A/C/G/T base ``b`` becomes
   ``ACGT[(idx(b) + 1 + floor(3 r[i])) % 4]``, an ``N`` becomes
   ``ACGT[floor(4 r[i])]``.
2. masking        ``u = uniform(n)``; base ``i`` becomes ``N`` when
   ``u[i] < p_mask``.
3. indels         ``ui = uniform(n + 1)``, ``bi = uniform(n + 1)``,
   ``ud = uniform(n)``.  One left-to-right pass over gaps and bases: before
   base ``i`` (and once after the last base, gap ``n``) insert
   ``ACGT[floor(4 bi[g])]`` when ``ui[g] < p_ins``; base ``i`` is dropped
   when ``ud[i] < p_del``.
4. N-dropout      ``run = round_half_away(rho * n)``; if ``0 < run <= n`` the
   start is ``integers(n - run + 1)`` and the run is overwritten with ``N``.
5. truncation     the final ``floor(tau * n)`` characters are removed.
"""

from dataclasses import asdict, dataclass, field
import math

import numpy as np

from . import rng
from .errors import BadAlphabet, BadKernel, ConfigInvalid
from .taxonomy import round_half_away

BASES = "ACGT"
ALPHABET = frozenset("ACGTN")


@dataclass
class DnaNoiseConfig:
    p_sub: float = 0.01
    p_mask: float = 0.003
    p_ins: float = 0.002
    p_del: float = 0.002
    dropout_run_fraction: float = 0.05
    tail_truncation: float = 0.10
    seed: int = 0

    def validate(self):
        for name in ("p_sub", "p_mask", "p_ins", "p_del"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigInvalid(f"{name}={v} not in [0, 1]")
        for name in ("dropout_run_fraction", "tail_truncation"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigInvalid(f"{name}={v} not in [0, 1)")
        return self

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, doc):
        return cls(**doc).validate()

    @classmethod
    def off(cls, **overrides):
        """All stages disabled; pass overrides to switch single stages on."""
        kw = dict(p_sub=0.0, p_mask=0.0, p_ins=0.0, p_del=0.0,
                  dropout_run_fraction=0.0, tail_truncation=0.0)
        kw.update(overrides)
        return cls(**kw).validate()


@dataclass
class ImageNoiseConfig:
    kernel_size: int = 7
    padding: str = "edge"

    def validate(self):
        k = self.kernel_size
        if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
            raise BadKernel(f"kernel size must be a positive odd integer, got {k!r}")
        if self.padding != "edge":
            raise BadKernel("only edge-replication padding is supported")
        return self

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, doc):
        return cls(**doc).validate()


def blur_image(image, config=None):
    """k x k mean filter with edge-replicated borders."""
    config = (config or ImageNoiseConfig()).validate()
    k = int(config.kernel_size)
    image = np.asarray(image, dtype=np.float64)
    if k == 1:
        return image.copy()
    r = k // 2
    padded = np.pad(image, r, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return windows.mean(axis=(-2, -1))


@dataclass
class CorruptionTrace:
    """Intermediate strings and event counts of one corruption run."""

    stages: list = field(default_factory=list)  # input, then after each stage
    n_sub: int = 0
    n_mask: int = 0
    n_ins: int = 0
    n_del: int = 0
    run_start: int = -1
    run_length: int = 0
    n_truncated: int = 0

    @property
    def output(self):
        return self.stages[-1]


def check_alphabet(s):
    bad = set(s) - ALPHABET
    if bad:
        raise BadAlphabet(f"characters outside ACGTN: {''.join(sorted(bad))!r}")


def _stream_for(config, stream):
    return stream if stream is not None else rng.stream(config.seed, rng.CORRUPT)


def corrupt_dna_trace(s, config=None, stream=None):
    """Run the five stages and return a :class:`CorruptionTrace`."""
    config = (config or DnaNoiseConfig()).validate()
    check_alphabet(s)
    st = _stream_for(config, stream)
    trace = CorruptionTrace(stages=[s])
    seq = np.array(list(s), dtype="<U1")

    # (1) substitution
    n = len(seq)
    u, r = st.uniform(n), st.uniform(n)
    for i in np.flatnonzero(u < config.p_sub):
        if seq[i] == "N":
            seq[i] = BASES[int(math.floor(4 * r[i]))]
        else:
            seq[i] = BASES[(BASES.index(seq[i]) + 1 + int(math.floor(3 * r[i]))) % 4]
        trace.n_sub += 1
    trace.stages.append("".join(seq))

    # (2) ambiguous masking
    u = st.uniform(n)
    hit = u < config.p_mask
    seq[hit] = "N"
    trace.n_mask = int(hit.sum())
    trace.stages.append("".join(seq))

    # (3) insertions and deletions, one pass
    ui, bi, ud = st.uniform(n + 1), st.uniform(n + 1), st.uniform(n)
    out = []
    for i in range(n + 1):
        if ui[i] < config.p_ins:
            out.append(BASES[int(math.floor(4 * bi[i]))])
            trace.n_ins += 1
        if i < n:
            if ud[i] < config.p_del:
                trace.n_del += 1
            else:
                out.append(seq[i])
    seq = np.array(out, dtype="<U1")
    trace.stages.append("".join(seq))

    # (4) contiguous N-dropout on the post-indel length
    n = len(seq)
    run = round_half_away(config.dropout_run_fraction * n)
    if 0 < run <= n:
        start = st.integers(n - run + 1)
        seq[start:start + run] = "N"
        trace.run_start, trace.run_length = start, run
    trace.stages.append("".join(seq))

    # (5) tail truncation
    cut = int(math.floor(config.tail_truncation * n))
    trace.n_truncated = cut
    trace.stages.append("".join(seq[: n - cut]))
    return trace


def corrupt_dna(s, config=None, stream=None):
    """Corrupted copy of ``s``; deterministic given ``config.seed`` (or ``stream``)."""
    return corrupt_dna_trace(s, config, stream).output


def levenshtein(a, b):
    """Unit-cost edit distance, row-by-row dynamic programming."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


@dataclass
class CorruptionStats:
    edit_distance: int
    n_count: int
    length_delta: int


def corruption_stats(original, corrupted):
    return CorruptionStats(edit_distance=levenshtein(original, corrupted),
                           n_count=corrupted.count("N"),
                           length_delta=len(corrupted) - len(original))
