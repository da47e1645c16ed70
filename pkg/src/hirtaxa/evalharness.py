"""Retrieval-based taxonomic classification under clean and degraded inputs.

For every test specimen, condition and query mode the query embedding is
compared with the prompt embedding of every taxon at each level; label
IDs are ranked by descending cosine similarity (ties: lower ID first) and
Top-k hits are counted.  Global accuracy is the micro-average over all
(specimen, level) pairs that carry a label.

DNA corruption for specimen ``i`` draws from stream
``(eval seed, CORRUPT, i >> 16, i & 0xFFFF)`` regardless of condition, so
``noisy-D`` and ``noisy-I+D`` see the same corrupted sequence.
"""

from dataclasses import dataclass, field
import json
import logging

import numpy as np

from . import autograd as ag
from . import rng
from .corrupt import DnaNoiseConfig, ImageNoiseConfig, blur_image, corrupt_dna
from .embedcore import average_fuse, kmer_features
from .errors import ConfigError, EmptyFeature, GridMismatch, HirTaxaError, LevelOutOfRange

log = logging.getLogger(__name__)

MODES = ("I->T", "D->T", "I+D avg", "I+D gated")
CONDITIONS = ("clean", "noisy-D", "noisy-I", "noisy-I+D")
GLOBAL_NOTE = "Global = micro-average over (specimen, level) pairs with a label"


@dataclass
class EvalConfig:
    modes: tuple = MODES
    conditions: tuple = CONDITIONS
    dna_noise: DnaNoiseConfig = field(default_factory=DnaNoiseConfig)
    image_noise: ImageNoiseConfig = field(default_factory=ImageNoiseConfig)
    ks: tuple = (1, 5)
    seed: int = 0

    def validate(self):
        if not self.modes or not self.conditions:
            raise ConfigError("modes and conditions must be non-empty")
        bad = set(self.modes) - set(MODES)
        if bad:
            raise ConfigError(f"unknown modes {sorted(bad)}; choose from {MODES}")
        bad = set(self.conditions) - set(CONDITIONS)
        if bad:
            raise ConfigError(f"unknown conditions {sorted(bad)}; choose from {CONDITIONS}")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError("ks must be positive")
        self.dna_noise.validate()
        self.image_noise.validate()
        return self

    def to_json(self):
        return {"modes": list(self.modes), "conditions": list(self.conditions),
                "dna_noise": self.dna_noise.to_json(), "image_noise": self.image_noise.to_json(),
                "ks": list(self.ks), "seed": self.seed}

    @classmethod
    def from_json(cls, doc):
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown eval fields: {sorted(unknown)}")
        for key in ("modes", "conditions", "ks"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "dna_noise" in doc:
            doc["dna_noise"] = DnaNoiseConfig.from_json(doc["dna_noise"])
        if "image_noise" in doc:
            doc["image_noise"] = ImageNoiseConfig.from_json(doc["image_noise"])
        return cls(**doc).validate()


# ranking ----------------------------------------------------------------------
def rank_by_similarity(query, prompt_embs):
    """Label IDs (row indices of ``prompt_embs``) by descending cosine, ties by ID."""
    sims = np.asarray(prompt_embs) @ np.asarray(query)
    return np.lexsort((np.arange(len(sims)), -sims))


def rank_prompts(query, level, tree, model):
    """Rank the level's taxa for one query embedding."""
    if not 1 <= level <= tree.n_levels:
        raise LevelOutOfRange(f"level {level} not in 1..{tree.n_levels}")
    with ag.no_grad():
        prompts = model.encode_text(tree.prompts[level - 1]).data
    q = query.data if isinstance(query, ag.Tensor) else np.asarray(query)
    return rank_by_similarity(q.reshape(-1), prompts)


def topk_correct(ranking, true_id, k):
    return true_id in list(ranking[:k])


def rank_positions(queries, prompt_embs, true_ids):
    """0-based rank of each query's true ID under the ranking rule (vectorized)."""
    sims = np.asarray(queries) @ np.asarray(prompt_embs).T
    true_sim = sims[np.arange(len(true_ids)), true_ids]
    ids = np.arange(sims.shape[1])
    better = (sims > true_sim[:, None]) | ((sims == true_sim[:, None]) & (ids[None, :] < true_ids[:, None]))
    return better.sum(axis=1)


# reports --------------------------------------------------------------------------
@dataclass
class EvalReport:
    """Accuracies in percent.

    ``cells[(mode, condition, level, k)]``, ``global_[(mode, condition, k)]``,
    ``counts[(mode, condition, level)]`` and ``excluded[(mode, condition)]``.
    """

    cells: dict = field(default_factory=dict)
    global_: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)
    level_names: tuple = ("order", "family", "genus", "species")
    metadata: dict = field(default_factory=dict)

    @property
    def modes(self):
        return sorted({k[0] for k in self.global_}, key=_order(MODES))

    @property
    def conditions(self):
        return sorted({k[1] for k in self.global_}, key=_order(CONDITIONS))

    @property
    def ks(self):
        return sorted({k[2] for k in self.global_})

    def check(self):
        """Raise if any invariant (range, Top-1 <= Top-5) fails."""
        for key, acc in list(self.cells.items()) + list(self.global_.items()):
            if not 0.0 <= acc <= 100.0:
                raise ValueError(f"accuracy {acc} out of range at {key}")
        ks = self.ks
        for small, large in zip(ks, ks[1:]):
            for key, acc in self.cells.items():
                if key[3] == small and acc > self.cells[key[:3] + (large,)]:
                    raise ValueError(f"Top-{small} > Top-{large} at {key[:3]}")
            for key, acc in self.global_.items():
                if key[2] == small and acc > self.global_[key[:2] + (large,)]:
                    raise ValueError(f"Global Top-{small} > Top-{large} at {key[:2]}")
        return True

    def to_json(self):
        return {
            "metadata": self.metadata,
            "level_names": list(self.level_names),
            "cells": [{"mode": m, "condition": c, "level": l, "k": k, "accuracy": a}
                      for (m, c, l, k), a in sorted(self.cells.items(), key=_cell_key)],
            "global": [{"mode": m, "condition": c, "k": k, "accuracy": a}
                       for (m, c, k), a in sorted(self.global_.items(), key=_cell_key)],
            "counts": [{"mode": m, "condition": c, "level": l, "n": n}
                       for (m, c, l), n in sorted(self.counts.items(), key=_cell_key)],
            "excluded": [{"mode": m, "condition": c, "n": n}
                         for (m, c), n in sorted(self.excluded.items(), key=_cell_key)],
        }

    @classmethod
    def from_json(cls, doc):
        return cls(
            cells={(e["mode"], e["condition"], e["level"], e["k"]): e["accuracy"] for e in doc["cells"]},
            global_={(e["mode"], e["condition"], e["k"]): e["accuracy"] for e in doc["global"]},
            counts={(e["mode"], e["condition"], e["level"]): e["n"] for e in doc["counts"]},
            excluded={(e["mode"], e["condition"]): e["n"] for e in doc["excluded"]},
            level_names=tuple(doc["level_names"]), metadata=doc.get("metadata", {}))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def render(self):
        """Fixed-width table: one row per (mode, condition), Top-k cells per level."""
        ks = self.ks
        heads = [n.capitalize() for n in self.level_names] + ["Global"]
        cw = max(6 * len(ks), 12)
        title = "/".join(f"Top-{k}" for k in ks)
        lines = [f"{'Mode':<11}{'Condition':<11}" + "".join(f"{h:>{cw}}" for h in heads),
                 f"{'':<22}" + "".join(f"{title:>{cw}}" for _ in heads)]
        lines.append("-" * len(lines[0]))
        for m in self.modes:
            for c in self.conditions:
                if (m, c, ks[0]) not in self.global_:
                    continue
                row = f"{m:<11}{c:<11}"
                for lvl in range(1, len(self.level_names) + 1):
                    vals = [self.cells.get((m, c, lvl, k)) for k in ks]
                    row += f"{_fmt(vals):>{cw}}"
                row += f"{_fmt([self.global_[(m, c, k)] for k in ks]):>{cw}}"
                lines.append(row)
        lines.append("")
        lines.append(GLOBAL_NOTE)
        return "\n".join(lines) + "\n"

    def to_rows(self):
        """Flat rows for delimited output."""
        rows = []
        for (m, c, l, k), acc in sorted(self.cells.items(), key=_cell_key):
            rows.append({"mode": m, "condition": c, "level": self.level_names[l - 1], "k": k,
                         "accuracy": acc, "n": self.counts.get((m, c, l), 0)})
        for (m, c, k), acc in sorted(self.global_.items(), key=_cell_key):
            rows.append({"mode": m, "condition": c, "level": "global", "k": k,
                         "accuracy": acc,
                         "n": sum(n for (mm, cc, _), n in self.counts.items() if (mm, cc) == (m, c))})
        return rows


def _order(seq):
    return lambda x: seq.index(x) if x in seq else len(seq)


def _cell_key(item):
    key = item[0]
    out = []
    for part in key:
        if part in MODES:
            out.append((0, MODES.index(part)))
        elif part in CONDITIONS:
            out.append((0, CONDITIONS.index(part)))
        else:
            out.append((1, part))
    return out


def _fmt(vals):
    return "/".join("  -  " if v is None else f"{v:5.1f}" for v in vals)


# embedding and scoring ------------------------------------------------------------
def degrade(records, indices, condition, config):
    """Images and DNA strings for ``indices`` under ``condition``."""
    blur = condition in ("noisy-I", "noisy-I+D")
    noisy_dna = condition in ("noisy-D", "noisy-I+D")
    images, seqs = [], []
    for i in indices:
        rec = records[i]
        images.append(blur_image(rec.image, config.image_noise) if blur else rec.image)
        if noisy_dna:
            s = rng.stream(config.seed, rng.CORRUPT, int(i) >> 16, int(i) & 0xFFFF)
            seqs.append(corrupt_dna(rec.dna, config.dna_noise, stream=s))
        else:
            seqs.append(rec.dna)
    return np.stack(images), seqs


def _encode_rows(encode, inputs):
    """Encode a batch; on failure retry row by row and mark failures as None."""
    try:
        return list(encode(inputs).data)
    except HirTaxaError:
        out = []
        for x in inputs:
            try:
                out.append(encode(x[None]).data[0])
            except HirTaxaError as exc:
                log.warning("encoder failed on one specimen: %s", exc)
                out.append(None)
        return out


def embed_condition(model, records, indices, condition, config, need_fusion=True):
    """Query embeddings per mode; a failed specimen gets ``None``.

    ``EmptyFeature`` DNA is marked with the string ``"empty"`` so D->T can
    score it as a miss while fused modes exclude it.
    """
    images, seqs = degrade(records, indices, condition, config)
    k = model.config.kmer
    with ag.no_grad():
        v = _encode_rows(model.encode_images, images)
        feats, dna_state = [], []
        for s in seqs:
            try:
                feats.append(kmer_features(s, k))
                dna_state.append("ok")
            except EmptyFeature:
                feats.append(None)
                dna_state.append("empty")
        ok = [i for i, st in enumerate(dna_state) if st == "ok"]
        d = [None] * len(seqs)
        if ok:
            enc = _encode_rows(lambda f: model.encode_dna(features=f), np.stack([feats[i] for i in ok]))
            for i, e in zip(ok, enc):
                d[i] = e
        avg, gated = [None] * len(seqs), [None] * len(seqs)
        both = [i for i in range(len(seqs)) if v[i] is not None and d[i] is not None]
        if both:
            vb = ag.Tensor(np.stack([v[i] for i in both]))
            db = ag.Tensor(np.stack([d[i] for i in both]))
            for i, e in zip(both, _rows_or_none(lambda: average_fuse(vb, db), len(both))):
                avg[i] = e
            if need_fusion:
                for i, e in zip(both, _rows_or_none(lambda: model.gated_fuse(vb, db), len(both))):
                    gated[i] = e
    for i, st in enumerate(dna_state):
        if st == "empty":
            d[i] = "empty"
    return {"I->T": v, "D->T": d, "I+D avg": avg, "I+D gated": gated}


def _rows_or_none(fn, n):
    try:
        return list(fn().data)
    except HirTaxaError as exc:
        log.warning("fusion failed for the batch: %s", exc)
        return [None] * n


def level_prompt_embeddings(model, tree):
    with ag.no_grad():
        return [model.encode_text(tree.prompts[lvl]).data for lvl in range(tree.n_levels)]


def evaluate_embeddings(queries, prompt_embs, labels, ks=(1, 5), level_names=None):
    """Score precomputed queries.

    ``queries[(mode, condition)]`` is a list with one entry per specimen:
    a vector, ``None`` (excluded) or ``"empty"`` (scored as a miss).
    ``prompt_embs[l - 1]`` holds one row per label ID at level ``l``;
    ``labels`` is an ``(N, L)`` array with ``-1`` for missing labels.
    """
    labels = np.asarray(labels)
    n_levels = labels.shape[1]
    report = EvalReport(level_names=tuple(level_names or
                                          ("order", "family", "genus", "species")[:n_levels]))
    for (mode, cond), qs in queries.items():
        usable = [i for i, q in enumerate(qs) if q is not None]
        report.excluded[(mode, cond)] = len(qs) - len(usable)
        hits = {k: 0 for k in ks}
        total = 0
        for lvl in range(1, n_levels + 1):
            rows = [i for i in usable if labels[i, lvl - 1] >= 0]
            n = len(rows)
            report.counts[(mode, cond, lvl)] = n
            total += n
            scored = [i for i in rows if not isinstance(qs[i], str)]
            if scored:
                pos = rank_positions(np.stack([qs[i] for i in scored]), prompt_embs[lvl - 1],
                                     labels[scored, lvl - 1])
            else:
                pos = np.array([], dtype=np.int64)
            for k in ks:
                c = int((pos < k).sum())
                hits[k] += c
                report.cells[(mode, cond, lvl, k)] = 100.0 * c / n if n else 0.0
        for k in ks:
            report.global_[(mode, cond, k)] = 100.0 * hits[k] / total if total else 0.0
    report.metadata["global_definition"] = GLOBAL_NOTE
    return report


def evaluate(model, records, tree, indices, config=None, metadata=None):
    """Full evaluation over ``indices`` (e.g. ``split.test``)."""
    from .trainer import labels_array

    config = (config or EvalConfig()).validate()
    indices = list(indices)
    prompt_embs = level_prompt_embeddings(model, tree)
    queries = {}
    for cond in config.conditions:
        emb = embed_condition(model, records, indices, cond, config,
                              need_fusion="I+D gated" in config.modes)
        for mode in config.modes:
            queries[(mode, cond)] = emb[mode]
    labels = labels_array([records[i].label for i in indices])
    report = evaluate_embeddings(queries, prompt_embs, labels, config.ks, tree.level_names)
    report.metadata.update({"eval_config": config.to_json(), "n_specimens": len(indices)})
    if metadata:
        report.metadata.update(metadata)
    return report


def validation_metric(model, records, tree, split):
    """Clean I->T Global Top-1 on the split's held-out indices."""
    conf = EvalConfig(modes=("I->T",), conditions=("clean",), ks=(1,))
    return evaluate(model, records, tree, split.test, conf).global_[("I->T", "clean", 1)]


# comparison -------------------------------------------------------------------
@dataclass
class DeltaTable:
    """Cellwise ``b - a`` for matching report grids."""

    cells: dict
    global_: dict
    level_names: tuple

    def to_json(self):
        return {"level_names": list(self.level_names),
                "cells": [{"mode": m, "condition": c, "level": l, "k": k, "delta": d}
                          for (m, c, l, k), d in sorted(self.cells.items(), key=_cell_key)],
                "global": [{"mode": m, "condition": c, "k": k, "delta": d}
                           for (m, c, k), d in sorted(self.global_.items(), key=_cell_key)]}

    def render(self):
        rep = EvalReport(cells=self.cells, global_=self.global_, level_names=self.level_names)
        ks = rep.ks
        heads = [n.capitalize() for n in self.level_names] + ["Global"]
        cw = max(7 * len(ks), 14)
        lines = [f"{'Mode':<11}{'Condition':<11}" + "".join(f"{h:>{cw}}" for h in heads)]
        lines.append("-" * len(lines[0]))
        for m in rep.modes:
            for c in rep.conditions:
                if (m, c, ks[0]) not in self.global_:
                    continue
                row = f"{m:<11}{c:<11}"
                for lvl in range(1, len(self.level_names) + 1):
                    row += f"{'/'.join(f'{self.cells[(m, c, lvl, k)]:+6.1f}' for k in ks):>{cw}}"
                row += f"{'/'.join(f'{self.global_[(m, c, k)]:+6.1f}' for k in ks):>{cw}}"
                lines.append(row)
        return "\n".join(lines) + "\n"


def compare_reports(a, b):
    if set(a.cells) != set(b.cells) or set(a.global_) != set(b.global_):
        missing = sorted(set(a.cells) ^ set(b.cells), key=str)[:5]
        raise GridMismatch(f"report grids differ, e.g. {missing}")
    return DeltaTable(cells={k: b.cells[k] - a.cells[k] for k in a.cells},
                      global_={k: b.global_[k] - a.global_[k] for k in a.global_},
                      level_names=a.level_names)
