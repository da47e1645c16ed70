"""Taxonomic hierarchy: label IDs, prompt strings and closed-set splits.

Levels are numbered 1..L in the public API (1 = order, the coarsest;
L = species, the finest).  Internally everything is stored 0-based, so
public level ``l`` lives at index ``l - 1``.

A taxon's identity is its full ancestor path, not its bare name, so two
genera both called "Aedes" under different families are distinct taxa.
"""

from dataclasses import dataclass, field
import json
import math

from . import rng
from .errors import (InconsistentParent, InfeasibleSplit, LevelOutOfRange,
                     NonPrefixLabels, SchemaMismatch)

DEFAULT_LEVEL_NAMES = ("order", "family", "genus", "species")
TREE_FORMAT_VERSION = 1
SPLIT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TaxonLabel:
    """Hierarchical label; ``levels[i]`` is the ID at public level ``i + 1``."""

    levels: tuple

    def __post_init__(self):
        levels = tuple(None if v is None else int(v) for v in self.levels)
        if not levels:
            raise NonPrefixLabels("a label needs at least one level")
        seen_gap = False
        for v in levels:
            if v is None:
                seen_gap = True
            elif seen_gap:
                raise NonPrefixLabels(f"label {levels} skips a level")
            elif v < 0:
                raise NonPrefixLabels(f"label {levels} has a negative ID")
        object.__setattr__(self, "levels", levels)

    @property
    def depth(self):
        """Number of labeled levels."""
        return sum(v is not None for v in self.levels)

    @property
    def n_levels(self):
        return len(self.levels)

    def at(self, level):
        """ID at 1-based ``level`` or None."""
        return self.levels[level - 1]


def level_template(level_names):
    return " ".join(f"{name} {{}}" for name in level_names)


def render_prompt(names, level_names=DEFAULT_LEVEL_NAMES):
    """``order A family B ...`` truncated to the labeled depth."""
    return " ".join(f"{level_names[i]} {n}" for i, n in enumerate(names))


class TaxonomyTree:
    """Label forest with per-level ID tables, parent links and prompts.

    ``paths[i][id]`` is the full ancestor path (tuple of names) of taxon
    ``id`` at index ``i``; IDs are assigned in lexicographic order of
    those paths.  ``parents[i][id]`` is the parent ID at index ``i - 1``
    (``-1`` at the root level).
    """

    def __init__(self, paths, level_names=DEFAULT_LEVEL_NAMES):
        self.level_names = tuple(level_names)
        self.paths = [list(map(tuple, p)) for p in paths]
        if len(self.paths) != len(self.level_names):
            raise NonPrefixLabels("level name count does not match tree depth")
        self._index = [{p: i for i, p in enumerate(lvl)} for lvl in self.paths]
        self.parents = []
        for lvl, lvl_paths in enumerate(self.paths):
            if lvl == 0:
                self.parents.append([-1] * len(lvl_paths))
                continue
            par = []
            for p in lvl_paths:
                try:
                    par.append(self._index[lvl - 1][p[:-1]])
                except KeyError:
                    raise InconsistentParent(f"path {p} has no parent at level {lvl}")
            self.parents.append(par)
        self.prompts = [[render_prompt(p, self.level_names) for p in lvl] for lvl in self.paths]

    @property
    def n_levels(self):
        return len(self.paths)

    def n_labels(self, level):
        self._check_level(level)
        return len(self.paths[level - 1])

    def names(self, level):
        """Bare (last-segment) names at a level, in ID order."""
        self._check_level(level)
        return [p[-1] for p in self.paths[level - 1]]

    def parent(self, level, label_id):
        self._check_level(level)
        return self.parents[level - 1][label_id]

    def label_for(self, path):
        """Map a raw label path (strings, ``None`` for unlabeled) to a TaxonLabel."""
        path = _clean_path(path, self.n_levels)
        ids = [self._index[i][tuple(path[: i + 1])] for i in range(len(path))]
        return TaxonLabel(tuple(ids) + (None,) * (self.n_levels - len(ids)))

    def path_of(self, label):
        """Deepest ancestor path of a label."""
        depth = label.depth
        if depth == 0:
            return ()
        return self.paths[depth - 1][label.levels[depth - 1]]

    def prompt_of(self, label):
        """Prompt text for a label at its deepest labeled level."""
        return render_prompt(self.path_of(label), self.level_names)

    def _check_level(self, level):
        if not 1 <= level <= self.n_levels:
            raise LevelOutOfRange(f"level {level} not in 1..{self.n_levels}")

    def to_json(self):
        return {
            "version": TREE_FORMAT_VERSION,
            "level_names": list(self.level_names),
            "paths": [[list(p) for p in lvl] for lvl in self.paths],
            "parents": [list(p) for p in self.parents],
        }

    @classmethod
    def from_json(cls, doc):
        if doc.get("version") != TREE_FORMAT_VERSION:
            raise SchemaMismatch(f"tree format version {doc.get('version')!r}, expected {TREE_FORMAT_VERSION}")
        tree = cls(doc["paths"], doc["level_names"])
        if tree.parents != [list(p) for p in doc["parents"]]:
            raise SchemaMismatch("stored parent arrays disagree with the paths")
        return tree

    def __eq__(self, other):
        return (isinstance(other, TaxonomyTree) and self.paths == other.paths
                and self.level_names == other.level_names)

    def __repr__(self):
        counts = "/".join(str(len(p)) for p in self.paths)
        return f"TaxonomyTree({counts})"


def _clean_path(path, n_levels):
    path = list(path)
    if len(path) > n_levels:
        raise NonPrefixLabels(f"path {path} is deeper than {n_levels} levels")
    while path and (path[-1] is None or path[-1] == ""):
        path.pop()
    if any(p is None or p == "" for p in path):
        raise NonPrefixLabels(f"path {path} skips a level")
    return [str(p) for p in path]


def build_tree(records, n_levels=4, level_names=None, keying="path"):
    """Build a tree from raw label paths.

    ``keying="path"`` (default) identifies taxa by full ancestor path.
    ``keying="name"`` identifies them by (level, bare name) and raises
    :class:`InconsistentParent` when one name appears under two parents.
    """
    if level_names is None:
        if n_levels == len(DEFAULT_LEVEL_NAMES):
            level_names = DEFAULT_LEVEL_NAMES
        else:
            level_names = tuple(f"level{i + 1}" for i in range(n_levels))
    if len(level_names) != n_levels:
        raise NonPrefixLabels("level_names must have n_levels entries")
    per_level = [set() for _ in range(n_levels)]
    name_parent = {}
    for rec in records:
        path = _clean_path(rec, n_levels)
        for i in range(len(path)):
            per_level[i].add(tuple(path[: i + 1]))
            if keying == "name" and i > 0:
                key = (i, path[i])
                prev = name_parent.setdefault(key, path[i - 1])
                if prev != path[i - 1]:
                    raise InconsistentParent(
                        f"{level_names[i]} {path[i]!r} has parents {prev!r} and {path[i - 1]!r}")
    if keying not in ("path", "name"):
        raise ValueError(f"unknown keying {keying!r}")
    return TaxonomyTree([sorted(s) for s in per_level], level_names)


def prompts_for_level(tree, level):
    """``[(label_id, prompt)]`` for every taxon at 1-based ``level``, by ID."""
    tree._check_level(level)
    return list(enumerate(tree.prompts[level - 1]))


@dataclass
class SplitSpec:
    train: list
    test: list
    seed: int
    closed: list = field(default_factory=list)
    test_fraction: float = 0.0

    def to_json(self):
        return {"version": SPLIT_FORMAT_VERSION, "seed": self.seed,
                "test_fraction": self.test_fraction, "closed": list(self.closed),
                "train": list(self.train), "test": list(self.test)}

    @classmethod
    def from_json(cls, doc):
        if doc.get("version") != SPLIT_FORMAT_VERSION:
            raise SchemaMismatch(f"split format version {doc.get('version')!r}")
        return cls(train=[int(i) for i in doc["train"]], test=[int(i) for i in doc["test"]],
                   seed=int(doc["seed"]), closed=[bool(c) for c in doc["closed"]],
                   test_fraction=float(doc["test_fraction"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def round_half_away(x):
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def verify_closed(split, labels):
    """Per-level flags: is every test label at that level also in train?

    Unlabeled levels are ignored on both sides.
    """
    n_levels = labels[0].n_levels if labels else 0
    flags = []
    for i in range(n_levels):
        train_set = {labels[k].levels[i] for k in split.train} - {None}
        test_set = {labels[k].levels[i] for k in split.test} - {None}
        flags.append(test_set <= train_set)
    return flags


def make_closed_split(labels, test_fraction, seed):
    """Seeded train/test split that is closed-set at every level.

    Specimens are grouped by their full label; each group keeps at least
    one member in train, so every test label at every level also occurs
    in train.  Singleton groups go wholly to train.  The total test count
    is ``round(test_fraction * n)`` whenever group capacities allow it.
    """
    if not labels:
        raise InfeasibleSplit("empty dataset")
    if not 0.0 < test_fraction < 1.0:
        raise InfeasibleSplit(f"test_fraction {test_fraction} not in (0, 1)")
    groups = {}
    for idx, lab in enumerate(labels):
        groups.setdefault(lab.levels, []).append(idx)
    keys = sorted(groups, key=lambda k: tuple((-1 if v is None else v) for v in k))
    capacity = {k: len(groups[k]) - 1 for k in keys}
    if sum(capacity.values()) == 0:
        raise InfeasibleSplit("every label group is a singleton; no specimen can be held out")

    target = min(round_half_away(test_fraction * len(labels)), sum(capacity.values()))
    quota = {k: min(int(math.floor(test_fraction * len(groups[k]))), capacity[k]) for k in keys}
    remaining = target - sum(quota.values())
    stream = rng.stream(seed, rng.SPLIT, 0)
    while remaining > 0:
        spare = [k for k in keys if quota[k] < capacity[k]]
        order = stream.permutation(len(spare))
        for j in order[:remaining]:
            quota[spare[j]] += 1
        remaining = target - sum(quota.values())
    while remaining < 0:
        # floor quotas never overshoot; kept for safety if capacity shrank
        busy = [k for k in keys if quota[k] > 0]
        quota[busy[stream.integers(len(busy))]] -= 1
        remaining += 1

    train, test = [], []
    for g, k in enumerate(keys):
        members = groups[k]
        perm = rng.stream(seed, rng.SPLIT, 1, g % (1 << 16)).permutation(len(members))
        chosen = [members[p] for p in perm]
        test.extend(chosen[: quota[k]])
        train.extend(chosen[quota[k]:])
    split = SplitSpec(train=sorted(train), test=sorted(test), seed=int(seed),
                      test_fraction=float(test_fraction))
    split.closed = verify_closed(split, labels)
    return split
