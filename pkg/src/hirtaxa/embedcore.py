"""Encoders, gated fusion head and model checkpoints.

* image encoder: flatten(H*W) -> hidden -> d MLP with ReLU, then l2-normalize
* DNA encoder:   normalized 4-mer counts (256) -> hidden -> d MLP, l2-normalize
* text encoder:  lookup in a prompt table (frozen unless ``text_finetune``)
* fusion head:   gate = sigmoid(W2 dropout(relu(W1 [v; d] + b1)) + b2),
                 fused = normalize(gate * v + (1 - gate) * d)

The text table is initialized compositionally: the row for a taxon at
level l is the sum of seeded Gaussian vectors for each taxon on its
ancestor path, so a species prompt shares direction with the prompts of
its genus, family and order.
"""

from dataclasses import asdict, dataclass, field
import json
from itertools import product

import numpy as np

from . import autograd as ag
from . import rng
from .autograd import Tensor
from .errors import ConfigError, DataIOError, EmptyFeature, SchemaMismatch, UnknownPrompt
from .objectives import LossWeights

CHECKPOINT_FORMAT = "hirtaxa-checkpoint"
CHECKPOINT_VERSION = 1
KMER_INDEX = {"A": 0, "C": 1, "G": 2, "T": 3}


@dataclass
class ModelConfig:
    image_shape: tuple = (16, 16)
    hidden: int = 128
    dim: int = 64
    kmer: int = 4
    fusion_hidden: int = 64
    fusion_dropout: float = 0.1
    fusion_init: str = "random"   # or "zero"
    text_finetune: bool = False
    init_seed: int = 0
    text_seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if self.hidden < 1 or self.dim < 1 or self.fusion_hidden < 1 or self.kmer < 1:
            raise ConfigError("layer sizes and k-mer size must be positive")
        if not 0 <= self.fusion_dropout < 1:
            raise ConfigError("fusion_dropout must lie in [0, 1)")
        if self.fusion_init not in ("random", "zero"):
            raise ConfigError("fusion_init must be 'random' or 'zero'")
        self.loss.validate()
        return self

    def to_json(self):
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["loss"] = self.loss.to_json()
        return d

    @classmethod
    def from_json(cls, doc):
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        if "image_shape" in doc:
            doc["image_shape"] = tuple(doc["image_shape"])
        if "loss" in doc:
            doc["loss"] = LossWeights.from_json(doc["loss"])
        return cls(**doc).validate()


def kmer_features(dna, k=4):
    """Normalized k-mer count vector of length ``4**k``.

    Windows containing ``N`` are skipped; counts are divided by the number
    of valid windows.  Raises :class:`EmptyFeature` if none remain.
    """
    codes = np.array([KMER_INDEX.get(c, -1) for c in dna], dtype=np.int64)
    n_win = len(codes) - k + 1
    if n_win <= 0:
        raise EmptyFeature(f"sequence of length {len(dna)} has no {k}-mer window")
    win = np.lib.stride_tricks.sliding_window_view(codes, k)
    valid = (win >= 0).all(axis=1)
    if not valid.any():
        raise EmptyFeature("every k-mer window contains N")
    idx = win[valid] @ (4 ** np.arange(k - 1, -1, -1))
    feat = np.bincount(idx, minlength=4 ** k).astype(np.float64)
    return feat / valid.sum()


def kmer_name(index, k=4):
    return "".join("ACGT"[(index // 4 ** (k - 1 - i)) % 4] for i in range(k))


def all_kmers(k=4):
    return ["".join(p) for p in product("ACGT", repeat=k)]


class Model:
    """Parameter container plus the forward passes."""

    def __init__(self, config, prompts, prompt_paths=None, params=None):
        self.config = config.validate()
        self.prompts = list(prompts)
        self.prompt_index = {p: i for i, p in enumerate(self.prompts)}
        if len(self.prompt_index) != len(self.prompts):
            raise ConfigError("prompt strings must be unique")
        self.params = params if params is not None else self._init_params(prompt_paths)
        self.params["text_table"].requires_grad = bool(config.text_finetune)

    # construction -----------------------------------------------------
    @classmethod
    def for_tree(cls, config, tree):
        """Model whose text table covers every prompt of every level of ``tree``."""
        prompts, paths = [], []
        for lvl in range(tree.n_levels):
            for lab_id, prompt in enumerate(tree.prompts[lvl]):
                prompts.append(prompt)
                path_ids = [lab_id]
                for up in range(lvl, 0, -1):
                    path_ids.append(tree.parents[up][path_ids[-1]])
                paths.append(tuple(reversed(path_ids)))
        return cls(config, prompts, paths)

    def _init_params(self, prompt_paths):
        c = self.config
        n_in = int(np.prod(c.image_shape))
        n_kmer = 4 ** c.kmer
        s = rng.stream(c.init_seed, rng.INIT, 0)

        def dense(fan_in, fan_out, gain):
            return s.normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)

        p = {
            "img_w1": dense(n_in, c.hidden, 2.0), "img_b1": np.zeros((1, c.hidden)),
            "img_w2": dense(c.hidden, c.dim, 1.0), "img_b2": np.zeros((1, c.dim)),
            "dna_w1": dense(n_kmer, c.hidden, 2.0), "dna_b1": np.zeros((1, c.hidden)),
            "dna_w2": dense(c.hidden, c.dim, 1.0), "dna_b2": np.zeros((1, c.dim)),
            "fuse_w1": dense(2 * c.dim, c.fusion_hidden, 2.0),
            "fuse_b1": np.zeros((1, c.fusion_hidden)),
            "fuse_w2": dense(c.fusion_hidden, c.dim, 1.0), "fuse_b2": np.zeros((1, c.dim)),
        }
        if c.fusion_init == "zero":
            for name in ("fuse_w1", "fuse_b1", "fuse_w2", "fuse_b2"):
                p[name] = np.zeros_like(p[name])
        p["text_table"] = self._init_text_table(prompt_paths)
        return {name: Tensor(val, requires_grad=True, name=name) for name, val in p.items()}

    def _init_text_table(self, prompt_paths):
        c = self.config
        rows = np.zeros((len(self.prompts), c.dim))
        cache = {}
        for r, path in enumerate(prompt_paths or [(i,) for i in range(len(self.prompts))]):
            for lvl, lab_id in enumerate(path):
                key = (lvl, lab_id)
                if key not in cache:
                    cache[key] = rng.stream(c.text_seed, rng.TEXT, lvl, lab_id).normal(c.dim)
                rows[r] += cache[key]
        return rows / np.sqrt(c.dim)

    # parameter views ----------------------------------------------------
    def trainable(self):
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_arrays(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    # encoders ---------------------------------------------------------------
    def _mlp(self, x, prefix):
        p = self.params
        h = ag.relu(ag.add(ag.matmul(x, p[prefix + "_w1"]), p[prefix + "_b1"]))
        return ag.add(ag.matmul(h, p[prefix + "_w2"]), p[prefix + "_b2"])

    def encode_images(self, images):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.shape[1:] != tuple(self.config.image_shape):
            raise ConfigError(f"image shape {images.shape[1:]} != {tuple(self.config.image_shape)}")
        x = Tensor(images.reshape(len(images), -1))
        return ag.l2_normalize(self._mlp(x, "img"))

    def dna_features(self, seqs):
        if isinstance(seqs, str):
            seqs = [seqs]
        return np.stack([kmer_features(s, self.config.kmer) for s in seqs])

    def encode_dna(self, seqs=None, features=None):
        """Encode DNA strings (or precomputed k-mer features)."""
        feats = features if features is not None else self.dna_features(seqs)
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[None]
        return ag.l2_normalize(self._mlp(Tensor(feats), "dna"))

    def prompt_rows(self, prompts):
        if isinstance(prompts, str):
            prompts = [prompts]
        try:
            return np.array([self.prompt_index[p] for p in prompts], dtype=np.int64)
        except KeyError as exc:
            raise UnknownPrompt(f"prompt not in the text table: {exc.args[0]!r}") from None

    def encode_text(self, prompts=None, rows=None):
        rows = rows if rows is not None else self.prompt_rows(prompts)
        return ag.l2_normalize(ag.take_rows(self.params["text_table"], rows))

    def gate(self, v, d, train_mode=False, dropout_stream=None):
        """Per-dimension gate in (0, 1) for embeddings ``v`` and ``d``."""
        p = self.params
        z = ag.concat([v, d], axis=1)
        h = ag.relu(ag.add(ag.matmul(z, p["fuse_w1"]), p["fuse_b1"]))
        rate = self.config.fusion_dropout
        if train_mode and rate > 0:
            if dropout_stream is None:
                raise ConfigError("training-mode fusion needs a dropout stream")
            keep = dropout_stream.uniform(h.shape) >= rate
            h = ag.dropout(h, keep, rate)
        return ag.sigmoid(ag.add(ag.matmul(h, p["fuse_w2"]), p["fuse_b2"]))

    def gated_fuse(self, v, d, train_mode=False, dropout_stream=None):
        g = self.gate(v, d, train_mode, dropout_stream)
        raw = ag.add(ag.mul(g, v), ag.mul(ag.sub(1.0, g), d))
        return ag.l2_normalize(raw)

    # checkpoints ----------------------------------------------------------------
    def to_json(self):
        return {"config": self.config.to_json(), "prompts": list(self.prompts),
                "params": {k: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                           for k, t in self.params.items()}}

    @classmethod
    def from_json(cls, doc):
        config = ModelConfig.from_json(doc["config"])
        params = {}
        for k, entry in doc["params"].items():
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            params[k] = Tensor(arr, requires_grad=True, name=k)
        return cls(config, doc["prompts"], params=params)


def average_fuse(v, d):
    """Normalized average of two embedding batches."""
    return ag.l2_normalize(ag.add(v, d))


def save_checkpoint(path, model, extra=None):
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "model": model.to_json()}
    if extra:
        doc.update(extra)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.write("\n")
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Return ``(model, document)``; the document carries trainer state."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise SchemaMismatch(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file")
    return Model.from_json(doc["model"]), doc
