"""Training loops for the two objectives (``algo1``: contrastive + HiR,
``algo2``: additionally a jointly trained gated fusion head).

Randomness is drawn from counter-based streams keyed by position rather
than carried as mutable state: the shuffle of epoch ``e`` uses stream
``(seed, SHUFFLE, e)``, fusion dropout at global step ``s`` uses
``(seed, DROPOUT, s)`` and view augmentation ``(seed, AUGMENT, s)``.  A
checkpoint therefore only needs the step counter, the parameters and the
optimizer moments to resume bit-exactly.
"""

from dataclasses import asdict, dataclass, field
import json
import logging
import math
import os

import numpy as np

from . import autograd as ag
from . import rng
from .embedcore import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericalError, ShapeMismatch
from .objectives import BatchEmbeddings, total_loss_algo1, total_loss_algo2
from .taxonomy import round_half_away

log = logging.getLogger(__name__)

ALGORITHMS = ("algo1", "algo2")
BETA1, BETA2, EPS = 0.9, 0.999, 1e-8
FUSION_PARAMS = ("fuse_w1", "fuse_b1", "fuse_w2", "fuse_b2")


@dataclass
class TrainConfig:
    algorithm: str = "algo1"
    epochs: int = 10
    batch_size: int = 30
    base_lr: float = 1e-6
    max_lr: float = 5e-5
    warmup_fraction: float = 0.3
    weight_decay: float = 0.01
    seed: int = 0
    eval_every: int = 0          # extra eval snapshot every N steps (0 = epoch ends only)
    validate: bool = True        # clean eval at each epoch end, keeps best checkpoint
    hir_views: int = 1           # 2 adds one jittered copy of each image to the HiR batch
    augment_noise: float = 0.05

    def validate_config(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not 0 < self.base_lr <= self.max_lr:
            raise ConfigError("need 0 < base_lr <= max_lr")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.hir_views not in (1, 2):
            raise ConfigError("hir_views must be 1 or 2")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        return self

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, doc):
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        return cls(**doc).validate_config()


def lr_at(step, total_steps, config):
    """One-cycle schedule: linear warmup base->max, then cosine max->base.

    The warmup covers ``round(warmup_fraction * total_steps)`` steps and the
    cosine reaches ``base_lr`` exactly at ``total_steps - 1``.
    """
    base, peak = config.base_lr, config.max_lr
    warm = round_half_away(config.warmup_fraction * total_steps)
    if step < warm:
        return base + (peak - base) * step / warm
    span = total_steps - 1 - warm
    if span <= 0:
        return peak
    progress = (step - warm) / span
    return base + (peak - base) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def to_json(self):
        return {"t": self.t,
                "m": {k: a.ravel().tolist() for k, a in self.m.items()},
                "v": {k: a.ravel().tolist() for k, a in self.v.items()}}

    @classmethod
    def from_json(cls, doc, params):
        def arr(name, data):
            return np.array(data, dtype=np.float64).reshape(params[name].shape)
        return cls(m={k: arr(k, d) for k, d in doc["m"].items()},
                   v={k: arr(k, d) for k, d in doc["v"].items()}, t=int(doc["t"]))


def optimizer_step(params, grads, state, lr, weight_decay):
    """AdamW update in place.

    ``params`` maps names to tensors; only tensors with ``requires_grad``
    move.  A missing gradient counts as zero.  Weight decay is decoupled:
    ``theta *= (1 - lr * wd)`` before the adaptive step.
    """
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = BETA1 * m + (1.0 - BETA1) * g
        v = BETA2 * v + (1.0 - BETA2) * g * g
        state.m[name], state.v[name] = m, v
        if weight_decay:
            p.data = p.data * (1.0 - lr * weight_decay)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return params, state


@dataclass
class RunLog:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def append(self, record):
        if self.steps and record["step"] <= self.steps[-1]["step"]:
            raise ValueError("run log steps must increase")
        self.steps.append(record)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.evals:
                fh.write(json.dumps({"kind": "eval", **rec}, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        out = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("kind")
                (out.steps if kind == "step" else out.evals).append(rec)
        return out

    def to_json(self):
        return {"steps": self.steps, "evals": self.evals}

    @classmethod
    def from_json(cls, doc):
        return cls(steps=list(doc["steps"]), evals=list(doc["evals"]))


class TrainingData:
    """Per-record arrays needed by the training loop, computed once."""

    def __init__(self, records, indices, model):
        self.indices = np.asarray(indices, dtype=np.int64)
        recs = [records[i] for i in self.indices]
        self.images = np.stack([r.image for r in recs])
        self.features = model.dna_features([r.dna for r in recs])
        self.text_rows = model.prompt_rows([r.prompt for r in recs])
        self.labels = labels_array([r.label for r in recs])

    def __len__(self):
        return len(self.indices)


def labels_array(labels):
    return np.array([[-1 if v is None else v for v in lab.levels] for lab in labels],
                    dtype=np.int64)


def level_prompt_rows(model, tree, level):
    return model.prompt_rows(tree.prompts[level - 1])


def batch_loss(model, data, pos, tconf, step, tree=None, hir_thresholds=None):
    """Forward pass and loss for batch positions ``pos`` of ``data``.

    ``hir_thresholds`` freezes the HiR clamp values (gradient checks only).
    """
    w = model.config.loss
    v = model.encode_images(data.images[pos])
    d = model.encode_dna(features=data.features[pos])
    t = model.encode_text(rows=data.text_rows[pos])
    labels = data.labels[pos]
    batch = BatchEmbeddings(v=v, d=d, t=t, labels=labels, hir_thresholds=hir_thresholds)
    if tconf.hir_views == 2:
        s = rng.stream(tconf.seed, rng.AUGMENT, step)
        imgs = data.images[pos]
        jitter = np.clip(imgs + tconf.augment_noise * s.normal(imgs.shape), 0.0, 1.0)
        batch.hir_v = ag.concat([v, model.encode_images(jitter)], axis=0)
        batch.hir_labels = np.concatenate([labels, labels], axis=0)
    if tconf.algorithm == "algo1":
        return total_loss_algo1(batch, w)
    if w.fuse_mode == "ce":
        if tree is None:
            raise ConfigError("cross-entropy fusion loss needs the taxonomy tree")
        batch.class_prompts = model.encode_text(rows=level_prompt_rows(model, tree, w.fuse_level))
    fused = model.gated_fuse(v, d, train_mode=True,
                             dropout_stream=rng.stream(tconf.seed, rng.DROPOUT, step))
    return total_loss_algo2(batch, fused, w)


def optimized_params(model, algorithm):
    params = model.trainable()
    if algorithm == "algo1":
        params = {k: p for k, p in params.items() if k not in FUSION_PARAMS}
    return params


def grad_norm(grads):
    with np.errstate(over="ignore", invalid="ignore"):
        return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))


def steps_per_epoch(n_train, batch_size):
    return n_train // batch_size


def train(records, tree, split, model, config, run_dir=None, resume_from=None,
          evaluate_fn=None):
    """Train ``model`` in place on ``split.train``; returns ``(model, RunLog)``.

    With ``run_dir`` a checkpoint is written after every epoch
    (``epoch_XXX.ckpt.json``) along with ``best.ckpt.json`` (highest clean
    validation Global Top-1 on ``split.test``) and ``runlog.jsonl``.
    ``resume_from`` continues from a checkpoint written by this function.
    ``evaluate_fn(model) -> float`` overrides the validation metric.
    """
    config.validate_config()
    data = TrainingData(records, split.train, model)
    per_epoch = steps_per_epoch(len(data), config.batch_size)
    if per_epoch == 0:
        raise ConfigError(f"{len(data)} training records cannot fill one batch of {config.batch_size}")
    total_steps = per_epoch * config.epochs
    params = optimized_params(model, config.algorithm)
    state = AdamState()
    runlog = RunLog()
    start_epoch, step = 0, 0
    best = -math.inf

    if resume_from is not None:
        loaded, doc = load_checkpoint(resume_from)
        tr = doc.get("trainer")
        if tr is None:
            raise ConfigError(f"{resume_from} carries no trainer state")
        if tr["config"] != config.to_json():
            raise ConfigError("resume config differs from the checkpoint's training config")
        for k, t in loaded.params.items():
            model.params[k].data = t.data
        state = AdamState.from_json(tr["optimizer"], model.params)
        runlog = RunLog.from_json(tr["runlog"])
        start_epoch, step = tr["epochs_done"], tr["step"]
        best = tr.get("best", -math.inf)
        best = -math.inf if best is None else best
        log.info("resumed from %s at epoch %d, step %d", resume_from, start_epoch, step)

    if evaluate_fn is None and config.validate:
        from .evalharness import validation_metric

        def evaluate_fn(m):
            return validation_metric(m, records, tree, split)

    for epoch in range(start_epoch, config.epochs):
        perm = rng.stream(config.seed, rng.SHUFFLE, epoch).permutation(len(data))
        for b in range(per_epoch):
            pos = perm[b * config.batch_size:(b + 1) * config.batch_size]
            model.zero_grad()
            try:
                loss, report = batch_loss(model, data, pos, config, step, tree)
                if loss.requires_grad:
                    loss.backward()
            except NumericalError as exc:
                raise NumericalError(
                    f"step {step}: {exc}; batch record indices {data.indices[pos].tolist()}") from exc
            grads = {k: p.grad for k, p in params.items()}
            gnorm = grad_norm(grads)
            if not math.isfinite(gnorm):
                raise NumericalError(
                    f"step {step}: non-finite gradient norm; batch record indices {data.indices[pos].tolist()}")
            lr = lr_at(step, total_steps, config)
            optimizer_step(params, grads, state, lr, config.weight_decay)
            runlog.append({"step": step, "epoch": epoch, "lr": lr, "grad_norm": gnorm,
                           **report.as_log()})
            step += 1
            if config.eval_every and step % config.eval_every == 0 and evaluate_fn is not None:
                runlog.evals.append({"step": step, "epoch": epoch, "metric": evaluate_fn(model)})
        metric = evaluate_fn(model) if evaluate_fn is not None else None
        if metric is not None:
            runlog.evals.append({"step": step, "epoch": epoch + 1, "metric": metric, "epoch_end": True})
        log.info("epoch %d/%d done: loss %.4f%s", epoch + 1, config.epochs,
                 runlog.steps[-1]["total"], "" if metric is None else f", val {metric:.2f}")
        is_best = metric is not None and metric > best
        if is_best:
            best = metric
        if run_dir is not None:
            trainer_state = {"config": config.to_json(), "optimizer": state.to_json(),
                             "runlog": runlog.to_json(), "epochs_done": epoch + 1,
                             "step": step, "total_steps": total_steps,
                             "best": None if best == -math.inf else best,
                             "rng": {"seed": config.seed,
                                     "streams": {"shuffle": rng.SHUFFLE, "dropout": rng.DROPOUT,
                                                 "augment": rng.AUGMENT}}}
            path = os.path.join(run_dir, f"epoch_{epoch + 1:03d}.ckpt.json")
            save_checkpoint(path, model, {"trainer": trainer_state})
            if is_best:
                save_checkpoint(os.path.join(run_dir, "best.ckpt.json"), model,
                                {"trainer": trainer_state})
            runlog.write(os.path.join(run_dir, "runlog.jsonl"))
    if run_dir is not None:
        save_checkpoint(os.path.join(run_dir, "final.ckpt.json"), model,
                        {"trainer": {"config": config.to_json(), "optimizer": state.to_json(),
                                     "runlog": runlog.to_json(), "epochs_done": config.epochs,
                                     "step": step, "total_steps": total_steps,
                                     "best": None if best == -math.inf else best}})
    return model, runlog
