"""Declarative run configuration.

One JSON document drives every command.  All sections are optional and
missing fields take their defaults; :func:`resolve` returns the fully
expanded document that the run manifest records.

    {
      "generator": {GenConfig fields},
      "split":     {"test_fraction": 0.2, "seed": 0},
      "model":     {ModelConfig fields, "loss": {LossWeights fields}},
      "train":     {TrainConfig fields},
      "eval":      {EvalConfig fields},
      "paths":     {"dataset": ..., "split": ..., "run_dir": ...}
    }

Relative paths are taken relative to the config file's directory.
Command-line overrides use dotted paths, ``train.epochs=3``; the value is
parsed as JSON when possible and kept as a string otherwise.
"""

import copy
import json
import os

from .embedcore import ModelConfig
from .errors import ConfigError, ConfigInvalid, DataIOError
from .evalharness import EvalConfig
from .synthdata import GenConfig
from .trainer import TrainConfig

SECTIONS = ("generator", "split", "model", "train", "eval", "paths")
PATH_KEYS = ("dataset", "split", "run_dir")
SPLIT_DEFAULTS = {"test_fraction": 0.2, "seed": 0}


def load(path=None, overrides=()):
    """Read a config file (or start empty), apply overrides, resolve defaults."""
    doc = {}
    base_dir = os.getcwd()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise DataIOError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigInvalid(f"{path}: top level must be an object")
        base_dir = os.path.dirname(os.path.abspath(path))
    for item in overrides:
        apply_override(doc, item)
    return resolve(doc, base_dir)


def apply_override(doc, item):
    if "=" not in item:
        raise ConfigInvalid(f"override {item!r} must look like section.field=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in SECTIONS:
        raise ConfigInvalid(f"{key}: unknown section {parts[0]!r}; expected one of {SECTIONS}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigInvalid(f"{key}: {p} is not a section")
    node[parts[-1]] = value
    return doc


def _section(doc, name):
    val = doc.get(name, {})
    if not isinstance(val, dict):
        raise ConfigInvalid(f"{name}: must be an object")
    return val


def _build(name, fn, doc):
    try:
        return fn(doc)
    except ConfigError as exc:
        raise type(exc)(f"{name}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{name}: {exc}") from exc


def resolve(doc, base_dir="."):
    """Expand every section to full defaults and validate it.

    Returns a plain JSON-compatible dict.
    """
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigInvalid(f"unknown sections {sorted(unknown)}; expected {SECTIONS}")
    gen = _build("generator", GenConfig.from_json, _section(doc, "generator"))
    model = _build("model", ModelConfig.from_json, _section(doc, "model"))
    train = _build("train", TrainConfig.from_json, _section(doc, "train"))
    ev = _build("eval", EvalConfig.from_json, _section(doc, "eval"))

    split = dict(SPLIT_DEFAULTS)
    extra = set(_section(doc, "split")) - set(SPLIT_DEFAULTS)
    if extra:
        raise ConfigInvalid(f"split: unknown fields {sorted(extra)}")
    split.update(_section(doc, "split"))
    if not 0 < float(split["test_fraction"]) < 1:
        raise ConfigInvalid("split.test_fraction: must lie in (0, 1)")

    paths = {k: None for k in PATH_KEYS}
    extra = set(_section(doc, "paths")) - set(PATH_KEYS)
    if extra:
        raise ConfigInvalid(f"paths: unknown fields {sorted(extra)}")
    for k, v in _section(doc, "paths").items():
        paths[k] = None if v is None else os.path.normpath(os.path.join(base_dir, str(v)))

    return {"generator": gen.to_json(), "split": split, "model": model.to_json(),
            "train": train.to_json(), "eval": ev.to_json(), "paths": paths}


def objects(resolved):
    """Dataclass instances for a resolved config."""
    return {"generator": GenConfig.from_json(resolved["generator"]),
            "model": ModelConfig.from_json(resolved["model"]),
            "train": TrainConfig.from_json(resolved["train"]),
            "eval": EvalConfig.from_json(resolved["eval"]),
            "split": copy.deepcopy(resolved["split"]),
            "paths": copy.deepcopy(resolved["paths"])}


def defaults():
    return resolve({})
