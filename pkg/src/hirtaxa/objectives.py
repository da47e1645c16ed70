"""Contrastive, hierarchical and fusion objectives.

All functions take row-normalized embedding matrices as
:class:`~hirtaxa.autograd.Tensor` (plain arrays are wrapped as constants)
and return differentiable scalars.  Labels are integer arrays of shape
``(N, L)`` with ``-1`` marking an unlabeled level; column ``l - 1``
holds public level ``l``.
"""

from dataclasses import asdict, dataclass, field
import math
import warnings

import numpy as np

from . import autograd as ag
from .autograd import Tensor, as_tensor
from .errors import BatchTooSmall, ConfigError

FUSE_MODES = ("contrastive", "ce")


@dataclass
class LossWeights:
    tau: float = 0.07
    lam_vt: float = 1.0
    lam_vd: float = 1.0
    lam_dt: float = 1.0
    lam_hir: float = 0.99
    lam_fuse: float = 0.7
    alphas: tuple = (0.1, 0.1, 0.1, 0.1)
    clamp_detach: bool = True
    fuse_mode: str = "contrastive"
    fuse_level: int = 4  # target level for the cross-entropy fusion loss

    def validate(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if any(a < 0 for a in self.alphas):
            raise ConfigError("level weights must be >= 0")
        if self.fuse_mode not in FUSE_MODES:
            raise ConfigError(f"fuse_mode must be one of {FUSE_MODES}")
        return self

    def to_json(self):
        d = asdict(self)
        d["alphas"] = list(self.alphas)
        return d

    @classmethod
    def from_json(cls, doc):
        doc = dict(doc)
        if "alphas" in doc:
            doc["alphas"] = tuple(doc["alphas"])
        return cls(**doc).validate()


def _check_batch(*mats):
    n = mats[0].shape[0]
    if n < 2:
        raise BatchTooSmall(f"contrastive terms need N >= 2, got {n}")
    for m in mats[1:]:
        if m.shape[0] != n:
            raise BatchTooSmall("batch matrices disagree on N")


def similarity(a, b, tau):
    """``s(a_i, b_j) = a_i . b_j / tau`` as an N x M tensor."""
    return ag.scale(ag.matmul(a, ag.transpose(b)), 1.0 / tau)


def info_nce_directed(a, b, tau):
    """Mean cross-entropy of matching row ``i`` of ``a`` to row ``i`` of ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_batch(a, b)
    s = similarity(a, b, tau)
    per_row = ag.sub(ag.logsumexp(s), ag.diag(s))
    return ag.mean(per_row)


def info_nce_symmetric(a, b, tau):
    return ag.add(info_nce_directed(a, b, tau), info_nce_directed(b, a, tau))


def xmod_terms(v, d, t, tau):
    """Symmetric losses for the (V,T), (V,D) and (D,T) pairs."""
    return {"vt": info_nce_symmetric(v, t, tau),
            "vd": info_nce_symmetric(v, d, tau),
            "dt": info_nce_symmetric(d, t, tau)}


def combine(terms, weights):
    """``sum_k weights[k] * terms[k]`` skipping zero weights (exact 0 if all are)."""
    total = None
    for key, term in terms.items():
        w = weights[key]
        if w == 0:
            continue
        part = ag.scale(term, w)
        total = part if total is None else ag.add(total, part)
    return total if total is not None else Tensor(0.0)


def xmod_loss(v, d, t, tau, lam_vt=1.0, lam_vd=1.0, lam_dt=1.0):
    terms = xmod_terms(as_tensor(v), as_tensor(d), as_tensor(t), tau)
    return combine(terms, {"vt": lam_vt, "vd": lam_vd, "dt": lam_dt})


# supervised contrastive ----------------------------------------------------
@dataclass
class PairTable:
    """Pair losses of one level.

    ``losses[i, j]`` is the pair loss for anchor ``i`` and candidate ``j``
    (meaningful where ``positives`` is true); ``weights[i, j]`` is
    ``1 / |P_i|`` on positives; ``n_anchors`` counts anchors with positives.
    """

    losses: Tensor
    positives: np.ndarray
    weights: np.ndarray
    n_anchors: int

    def mean_of(self, pair_values):
        """Anchor-averaged mean of a pair-value tensor over positives."""
        if self.n_anchors == 0:
            return Tensor(0.0)
        return ag.scale(ag.sum_(ag.mul(pair_values, self.weights)), 1.0 / self.n_anchors)


def level_masks(level_labels):
    """Denominator and positive masks for one level's labels (``-1`` = absent)."""
    y = np.asarray(level_labels)
    n = len(y)
    labeled = y >= 0
    denom = labeled[:, None] & labeled[None, :] & ~np.eye(n, dtype=bool)
    pos = denom & (y[:, None] == y[None, :])
    return denom, pos


def pair_table_from_sim(sim, level_labels):
    denom, pos = level_masks(level_labels)
    n = len(denom)
    lse = ag.reshape(ag.logsumexp(sim, denom), (n, 1))
    losses = ag.sub(lse, sim)
    counts = pos.sum(axis=1)
    weights = np.where(pos, 1.0 / np.maximum(counts, 1)[:, None], 0.0)
    return PairTable(losses=losses, positives=pos, weights=weights,
                     n_anchors=int((counts > 0).sum()))


def supcon_pair_losses(v, level_labels, tau):
    """Pair-loss table and level mean for one level.

    Anchors without positives (or without a label at this level) are
    skipped and the mean divides by the number of contributing anchors.
    A level with no positive pair returns mean 0 and emits a warning.
    """
    v = as_tensor(v)
    _check_batch(v)
    table = pair_table_from_sim(similarity(v, v, tau), level_labels)
    if table.n_anchors == 0:
        warnings.warn("no positive pairs at this level; it contributes 0", RuntimeWarning)
    return table, table.mean_of(table.losses)


# hierarchical regularization ---------------------------------------------
@dataclass
class HiRBatchReport:
    pair_losses: list = field(default_factory=list)      # raw, per level
    positives: list = field(default_factory=list)        # bool masks
    rectified: list = field(default_factory=list)
    maxima: list = field(default_factory=list)           # m^(l); None when empty
    thresholds: list = field(default_factory=list)       # clamp value used at level l
    level_means: list = field(default_factory=list)
    clamped: list = field(default_factory=list)          # clamped-pair counts
    clamped_masks: list = field(default_factory=list)
    empty_levels: list = field(default_factory=list)

    def summary(self):
        return {"hir_level_means": list(self.level_means),
                "hir_maxima": [None if m is None else float(m) for m in self.maxima],
                "hir_clamped": list(self.clamped),
                "hir_empty_levels": list(self.empty_levels)}


def hir_loss(v, labels, alphas, tau, clamp_detach=True, rectify=True, thresholds=None):
    """Multi-level supervised contrastive loss with max-rectification.

    Level 1 uses raw pair losses.  At level ``l > 1`` every positive pair
    loss is raised to at least ``m^(l-1)``, the largest raw positive pair
    loss of the previous level (``m^(0) = 0``; a level without positives
    passes its predecessor's threshold on).  With ``clamp_detach`` the
    threshold is a constant and clamped pairs get no gradient; otherwise
    the gradient of a clamped pair flows to the coarse pair attaining the
    maximum.  ``rectify=False`` gives plain multi-level SupCon.

    ``thresholds`` (one entry per level, detached mode only) replaces the
    computed clamp values; finite-difference checks use it to hold the
    batch maxima fixed, which is exactly what the detached gradient assumes.

    Returns ``(loss, HiRBatchReport)``.
    """
    v = as_tensor(v)
    _check_batch(v)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    n_levels = labels.shape[1]
    if len(alphas) != n_levels:
        raise ConfigError(f"need {n_levels} level weights, got {len(alphas)}")
    sim = similarity(v, v, tau)
    report = HiRBatchReport()
    total = None
    prev_value, prev_tensor = 0.0, None
    for lvl in range(n_levels):
        table = pair_table_from_sim(sim, labels[:, lvl])
        pos = table.positives
        raw = table.losses
        empty = table.n_anchors == 0
        if lvl == 0 or not rectify:
            rect = raw
            clamped = np.zeros_like(pos)
            thr = None
        else:
            thr = prev_value if thresholds is None else float(thresholds[lvl])
            clamped = pos & (raw.data < thr)
            if clamp_detach or prev_tensor is None:
                rect = ag.maximum_const(raw, thr)
            else:
                rect = ag.maximum(raw, prev_tensor)
        level_mean = table.mean_of(rect)
        if alphas[lvl] != 0 and not empty:
            part = ag.scale(level_mean, alphas[lvl])
            total = part if total is None else ag.add(total, part)

        if empty:
            m = None
        else:
            m = float(raw.data[pos].max())
            prev_value = m
            if not clamp_detach:
                prev_tensor = ag.masked_max(raw, pos)
        report.pair_losses.append(raw.data.copy())
        report.positives.append(pos)
        report.rectified.append(rect.data.copy())
        report.maxima.append(m)
        report.thresholds.append(thr)
        report.level_means.append(float(level_mean.data))
        report.clamped.append(int(clamped.sum()))
        report.clamped_masks.append(clamped)
        report.empty_levels.append(empty)
    return (total if total is not None else Tensor(0.0)), report


# fusion ---------------------------------------------------------------------
def fuse_ce_loss(fused, level_labels, class_prompts, tau):
    """Cross-entropy over prompt-similarity logits at one level.

    ``class_prompts`` holds one normalized prompt embedding per class (row
    ``c`` = label ID ``c``).  Rows whose label is missing are skipped.
    """
    fused = as_tensor(fused)
    y = np.asarray(level_labels)
    keep = y >= 0
    if not keep.any():
        return Tensor(0.0)
    logits = similarity(fused, as_tensor(class_prompts), tau)
    n_cls = logits.shape[1]
    onehot = np.zeros(logits.shape)
    onehot[np.flatnonzero(keep), y[keep]] = 1.0
    row_mask = np.repeat(keep[:, None], n_cls, axis=1)
    lse = ag.logsumexp(logits, row_mask)
    true_logit = ag.sum_(ag.mul(logits, onehot), axis=1)
    per_row = ag.sub(lse, true_logit)  # zero on skipped rows
    return ag.scale(ag.sum_(per_row), 1.0 / int(keep.sum()))


def fuse_contrastive_loss(fused, t, tau):
    """Symmetric InfoNCE between fused and text embeddings."""
    return info_nce_symmetric(as_tensor(fused), as_tensor(t), tau)


# totals -----------------------------------------------------------------------
@dataclass
class BatchEmbeddings:
    v: Tensor
    d: Tensor
    t: Tensor
    labels: np.ndarray
    hir_v: Tensor = None        # image embeddings seen by HiR (dual-view mode)
    hir_labels: np.ndarray = None
    class_prompts: Tensor = None  # level prompts for the cross-entropy fusion loss
    hir_thresholds: list = None   # frozen clamp values (finite-difference checks)


@dataclass
class LossReport:
    total: float
    components: dict
    hir: HiRBatchReport = None

    def as_log(self):
        out = {"total": self.total, **self.components}
        if self.hir is not None:
            out.update(self.hir.summary())
        return out


def _algo1_parts(batch, w):
    terms = xmod_terms(batch.v, batch.d, batch.t, w.tau)
    xmod = combine(terms, {"vt": w.lam_vt, "vd": w.lam_vd, "dt": w.lam_dt})
    hv = batch.hir_v if batch.hir_v is not None else batch.v
    hl = batch.hir_labels if batch.hir_labels is not None else batch.labels
    hir, report = hir_loss(hv, hl, w.alphas, w.tau, clamp_detach=w.clamp_detach,
                           thresholds=batch.hir_thresholds)
    comps = {"xmod": float(xmod.data), "vt": float(terms["vt"].data),
             "vd": float(terms["vd"].data), "dt": float(terms["dt"].data),
             "hir": float(hir.data)}
    return xmod, hir, report, comps


def total_loss_algo1(batch, weights):
    """``L_XMOD + lam_hir * L_HiR``; returns ``(loss, LossReport)``."""
    w = weights.validate()
    xmod, hir, report, comps = _algo1_parts(batch, w)
    total = combine({"xmod": xmod, "hir": hir}, {"xmod": 1.0, "hir": w.lam_hir})
    return total, LossReport(total=float(total.data), components=comps, hir=report)


def fusion_loss(batch, fused, weights, fuse_mode=None):
    mode = fuse_mode or weights.fuse_mode
    if mode == "contrastive":
        return fuse_contrastive_loss(fused, batch.t, weights.tau)
    if mode == "ce":
        if batch.class_prompts is None:
            raise ConfigError("cross-entropy fusion loss needs class prompt embeddings")
        return fuse_ce_loss(fused, batch.labels[:, weights.fuse_level - 1],
                            batch.class_prompts, weights.tau)
    raise ConfigError(f"unknown fuse_mode {mode!r}")


def total_loss_algo2(batch, fused, weights, fuse_mode=None):
    """``L_XMOD + lam_hir * L_HiR + lam_fuse * L_fuse``; returns ``(loss, LossReport)``."""
    w = weights.validate()
    xmod, hir, report, comps = _algo1_parts(batch, w)
    fuse = fusion_loss(batch, fused, w, fuse_mode)
    comps["fuse"] = float(fuse.data)
    total = combine({"xmod": xmod, "hir": hir, "fuse": fuse},
                    {"xmod": 1.0, "hir": w.lam_hir, "fuse": w.lam_fuse})
    return total, LossReport(total=float(total.data), components=comps, hir=report)


def info_nce_upper_bound(n, tau):
    return math.log(n) + 2.0 / tau
