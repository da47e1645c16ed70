"""Synthetic specimen triplets with hierarchy-respecting modality signal.

Every taxon carries an image archetype and a DNA archetype.  Orders draw
theirs at random; each child copies its parent's archetype and perturbs
it (image: add a scaled, spatially smoothed random pattern; DNA: mutate
each base with the level's probability).  Specimens perturb their
species archetype with sample-level noise.  Coarse levels use smooth
patterns and fine levels use high-frequency ones, so blurring an image
erases species detail before it erases order detail.

On disk a dataset is two files: ``<stem>.header.json`` (format version,
tree, generator config, image shape) and ``<stem>.jsonl`` with one record
per line::

    {"id": "s000000", "image": [row-major floats], "dna": "ACGT...",
     "labels": [0, 1, 3, null], "prompt": "order ... species ..."}
"""

from dataclasses import asdict, dataclass, field
import json
import os

import numpy as np

from . import rng
from .errors import ConfigInvalid, CorruptRecord, DataIOError, SchemaMismatch
from .taxonomy import TaxonLabel, TaxonomyTree, build_tree

DATASET_FORMAT = "hirtaxa-dataset"
DATASET_VERSION = 1
BASES = "ACGT"
DNA_ALPHABET = frozenset("ACGTN")


@dataclass
class GenConfig:
    orders: int = 5
    families_per_order: int = 3
    genera_per_family: int = 3
    species_per_genus: int = 3
    specimens_per_species: int = 8
    image_size: tuple = (16, 16)
    dna_length: tuple = (120, 200)
    # per level, order..species; the order entry scales the root pattern
    image_strength: tuple = (0.15, 0.10, 0.07, 0.05)
    # Gaussian smoothing width (pixels) of each level's pattern
    image_smoothing: tuple = (3.0, 2.0, 1.0, 0.0)
    # per-base mutation probability when deriving a child archetype;
    # the order entry is unused (orders draw fresh random sequences)
    dna_mutation: tuple = (0.0, 0.15, 0.08, 0.04)
    image_noise: float = 0.03
    dna_noise: float = 0.01
    seed: int = 0

    @property
    def counts(self):
        return (self.orders, self.families_per_order, self.genera_per_family,
                self.species_per_genus)

    @property
    def n_records(self):
        return int(np.prod(self.counts)) * self.specimens_per_species

    def validate(self):
        for name in ("orders", "families_per_order", "genera_per_family",
                     "species_per_genus", "specimens_per_species"):
            if int(getattr(self, name)) < 1:
                raise ConfigInvalid(f"{name} must be >= 1")
        h, w = self.image_size
        if h < 1 or w < 1:
            raise ConfigInvalid("image_size must be positive")
        lo, hi = self.dna_length
        if not 1 <= lo <= hi:
            raise ConfigInvalid("dna_length must satisfy 1 <= min <= max")
        for name in ("image_strength", "image_smoothing", "dna_mutation"):
            vals = getattr(self, name)
            if len(vals) != 4:
                raise ConfigInvalid(f"{name} needs 4 entries (order..species)")
            if any(v < 0 for v in vals):
                raise ConfigInvalid(f"{name} entries must be >= 0")
        if any(p > 1 for p in self.dna_mutation) or not 0 <= self.dna_noise <= 1:
            raise ConfigInvalid("probabilities must lie in [0, 1]")
        if self.image_noise < 0:
            raise ConfigInvalid("image_noise must be >= 0")
        return self

    def to_json(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, doc):
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigInvalid(f"unknown generator fields: {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()}
        return cls(**kw).validate()


@dataclass
class SpecimenRecord:
    id: str
    image: np.ndarray
    dna: str
    label: TaxonLabel
    prompt: str

    def __eq__(self, other):
        return (isinstance(other, SpecimenRecord) and self.id == other.id
                and self.dna == other.dna and self.label == other.label
                and self.prompt == other.prompt
                and self.image.shape == other.image.shape
                and bool(np.array_equal(self.image, other.image)))

    def check(self, image_shape=None, dna_length=None):
        if image_shape is not None and self.image.shape != tuple(image_shape):
            raise ValueError(f"{self.id}: image shape {self.image.shape} != {tuple(image_shape)}")
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise ValueError(f"{self.id}: image values outside [0, 1]")
        if not set(self.dna) <= DNA_ALPHABET:
            raise ValueError(f"{self.id}: DNA has characters outside ACGTN")
        if dna_length is not None and not dna_length[0] <= len(self.dna) <= dna_length[1]:
            raise ValueError(f"{self.id}: DNA length {len(self.dna)} outside {dna_length}")


@dataclass
class Dataset:
    records: list
    tree: TaxonomyTree
    forest: dict = field(default_factory=dict)
    config: GenConfig = None

    @property
    def labels(self):
        return [r.label for r in self.records]


def smooth(field_, width):
    """Separable Gaussian smoothing with edge replication; ``width`` is sigma."""
    if width <= 0:
        return field_
    radius = int(np.ceil(3 * width))
    x = np.arange(-radius, radius + 1)
    kern = np.exp(-0.5 * (x / width) ** 2)
    kern /= kern.sum()
    padded = np.pad(field_, radius, mode="edge")
    rows = np.apply_along_axis(lambda r: np.convolve(r, kern, mode="valid"), 1, padded)
    return np.apply_along_axis(lambda c: np.convolve(c, kern, mode="valid"), 0, rows)


def _pattern(stream, shape, width):
    pat = smooth(stream.normal(shape), width)
    sd = pat.std()
    return pat / sd if sd > 0 else pat


def _mutate(seq, p, stream):
    """Replace each base with a different uniform base with probability ``p``."""
    if p <= 0:
        return seq
    u = stream.uniform(len(seq))
    shift = stream.integers(3, len(seq)) + 1
    out = list(seq)
    for i in np.flatnonzero(u < p):
        out[i] = BASES[(BASES.index(seq[i]) + int(shift[i])) % 4]
    return "".join(out)


def _quantize(img):
    # 9 significant digits keeps the JSON text exact on reload
    return np.array([float(f"{v:.9g}") for v in img.ravel()]).reshape(img.shape)


def generate(config=None):
    """Generate ``(tree, records, forest)`` deterministically from ``config.seed``.

    ``forest`` maps each non-root taxon path (tuple of names) to its parent
    path and is the ground truth for :func:`build_tree`.
    """
    config = (config or GenConfig()).validate()
    seed = config.seed
    shape = tuple(config.image_size)
    lo, hi = config.dna_length
    n_orders, n_fam, n_gen, n_sp = config.counts

    forest = {}
    taxa = []  # (path, image archetype, dna archetype) for species
    counter = [0, 0, 0, 0]

    def next_stream(level):
        counter[level] += 1
        return rng.stream(seed, rng.DATA, level, counter[level] - 1)

    for o in range(n_orders):
        s = next_stream(0)
        o_path = (f"Ord{o:02d}",)
        o_img = 0.5 + config.image_strength[0] * _pattern(s, shape, config.image_smoothing[0])
        length = lo + s.integers(hi - lo + 1)
        o_dna = "".join(BASES[b] for b in s.integers(4, length))
        for f in range(n_fam):
            s = next_stream(1)
            f_path = o_path + (f"Fam{o:02d}-{f}",)
            forest[f_path] = o_path
            f_img = o_img + config.image_strength[1] * _pattern(s, shape, config.image_smoothing[1])
            f_dna = _mutate(o_dna, config.dna_mutation[1], s)
            for g in range(n_gen):
                s = next_stream(2)
                g_path = f_path + (f"Gen{o:02d}-{f}-{g}",)
                forest[g_path] = f_path
                g_img = f_img + config.image_strength[2] * _pattern(s, shape, config.image_smoothing[2])
                g_dna = _mutate(f_dna, config.dna_mutation[2], s)
                for p in range(n_sp):
                    s = next_stream(3)
                    sp_path = g_path + (f"Sp{o:02d}-{f}-{g}-{p}",)
                    forest[sp_path] = g_path
                    sp_img = g_img + config.image_strength[3] * _pattern(s, shape, config.image_smoothing[3])
                    sp_dna = _mutate(g_dna, config.dna_mutation[3], s)
                    taxa.append((sp_path, sp_img, sp_dna))

    tree = build_tree([t[0] for t in taxa])
    records = []
    for t_idx, (path, img, dna) in enumerate(taxa):
        label = tree.label_for(path)
        prompt = tree.prompt_of(label)
        s = rng.stream(seed, rng.DATA, 4, t_idx)
        for _ in range(config.specimens_per_species):
            noisy = np.clip(img + config.image_noise * s.normal(shape), 0.0, 1.0)
            records.append(SpecimenRecord(
                id=f"s{len(records):06d}", image=_quantize(noisy),
                dna=_mutate(dna, config.dna_noise, s), label=label, prompt=prompt))
    return tree, records, forest


def generate_dataset(config=None):
    config = config or GenConfig()
    tree, records, forest = generate(config)
    return Dataset(records=records, tree=tree, forest=forest, config=config)


def forest_to_json(forest):
    return [{"child": list(c), "parent": list(p)} for c, p in sorted(forest.items())]


def forest_from_json(doc):
    return {tuple(e["child"]): tuple(e["parent"]) for e in doc}


def _paths(path):
    path = str(path)
    if path.endswith(".jsonl"):
        stem = path[: -len(".jsonl")]
    elif path.endswith(".header.json"):
        stem = path[: -len(".header.json")]
    else:
        stem = path
    return stem + ".header.json", stem + ".jsonl"


def record_to_json(rec):
    return {"id": rec.id, "image": rec.image.ravel().tolist(), "dna": rec.dna,
            "labels": list(rec.label.levels), "prompt": rec.prompt}


def record_from_json(doc, shape, line_no):
    try:
        image = np.asarray(doc["image"], dtype=np.float64)
        if image.size != shape[0] * shape[1]:
            raise ValueError(f"image has {image.size} values, expected {shape[0] * shape[1]}")
        return SpecimenRecord(id=str(doc["id"]), image=image.reshape(shape),
                              dna=str(doc["dna"]), label=TaxonLabel(tuple(doc["labels"])),
                              prompt=str(doc["prompt"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptRecord(line_no, f"bad record: {exc}") from exc


def save_dataset(records, tree, path, config=None, forest=None, extra=None):
    """Write ``<stem>.header.json`` and ``<stem>.jsonl``; returns both paths."""
    header_path, data_path = _paths(path)
    shape = list(records[0].image.shape) if records else (
        list(config.image_size) if config is not None else [0, 0])
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION,
              "count": len(records), "image_shape": shape,
              "tree": tree.to_json(),
              "config": config.to_json() if config is not None else None}
    if forest is not None:
        header["forest"] = forest_to_json(forest)
    if extra:
        header.update(extra)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(data_path)), exist_ok=True)
        with open(header_path, "w", encoding="utf-8") as fh:
            json.dump(header, fh, indent=1)
            fh.write("\n")
        with open(data_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(record_to_json(rec), separators=(",", ":")))
                fh.write("\n")
    except OSError as exc:
        raise DataIOError(f"cannot write dataset at {data_path}: {exc}") from exc
    return header_path, data_path


def load_header(path):
    header_path, _ = _paths(path)
    try:
        with open(header_path, encoding="utf-8") as fh:
            header = json.load(fh)
    except OSError as exc:
        raise DataIOError(f"cannot read {header_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{header_path} is not valid JSON: {exc}") from exc
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise SchemaMismatch(f"{header_path}: expected {DATASET_FORMAT} v{DATASET_VERSION}, "
                             f"found {header.get('format')!r} v{header.get('version')!r}")
    return header


def load_dataset(path, with_header=False):
    """Load ``(records, tree)``; with ``with_header`` also return the header dict."""
    header = load_header(path)
    _, data_path = _paths(path)
    tree = TaxonomyTree.from_json(header["tree"])
    shape = tuple(header["image_shape"])
    records = []
    try:
        with open(data_path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorruptRecord(line_no, str(exc)) from exc
                records.append(record_from_json(doc, shape, line_no))
    except DataIOError:
        raise
    except OSError as exc:
        raise DataIOError(f"cannot read {data_path}: {exc}") from exc
    if len(records) != header["count"]:
        raise SchemaMismatch(f"header declares {header['count']} records, file has {len(records)}")
    if with_header:
        return records, tree, header
    return records, tree


def load_full(path):
    """Load a :class:`Dataset` including generator config and forest when present."""
    records, tree, header = load_dataset(path, with_header=True)
    config = GenConfig.from_json(header["config"]) if header.get("config") else None
    forest = forest_from_json(header["forest"]) if header.get("forest") else {}
    return Dataset(records=records, tree=tree, forest=forest, config=config)
