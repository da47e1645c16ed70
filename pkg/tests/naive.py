"""Straight-line scalar reimplementations used as independent oracles.

Nothing here imports the vectorized code paths under test; only plain
Python loops and ``math``.
"""

import math

import numpy as np


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def logsumexp(vals):
    m = max(vals)
    return m + math.log(sum(math.exp(v - m) for v in vals))


def info_nce(A, B, tau):
    n = len(A)
    total = 0.0
    for i in range(n):
        logits = [dot(A[i], B[j]) / tau for j in range(n)]
        total += logsumexp(logits) - logits[i]
    return total / n


def xmod(V, D, T, tau, lvt, lvd, ldt):
    return (lvt * (info_nce(V, T, tau) + info_nce(T, V, tau))
            + lvd * (info_nce(V, D, tau) + info_nce(D, V, tau))
            + ldt * (info_nce(D, T, tau) + info_nce(T, D, tau)))


def supcon_pairs(V, y, tau):
    """``{(i, j): loss}`` over positive pairs and the anchor-averaged level mean."""
    n = len(V)
    pairs = {}
    anchor_means = []
    for i in range(n):
        if y[i] < 0:
            continue
        others = [k for k in range(n) if k != i and y[k] >= 0]
        pos = [j for j in others if y[j] == y[i]]
        if not pos:
            continue
        denom = logsumexp([dot(V[i], V[k]) / tau for k in others])
        vals = []
        for j in pos:
            pairs[(i, j)] = denom - dot(V[i], V[j]) / tau
            vals.append(pairs[(i, j)])
        anchor_means.append(sum(vals) / len(vals))
    mean = sum(anchor_means) / len(anchor_means) if anchor_means else 0.0
    return pairs, mean


def hir(V, labels, alphas, tau):
    """Quadruple-loop HiR: levels, anchors, positives, denominator."""
    n_levels = len(labels[0])
    total = 0.0
    prev_max = 0.0
    clamped_counts = []
    for lvl in range(n_levels):
        y = [row[lvl] for row in labels]
        pairs, _ = supcon_pairs(V, y, tau)
        per_anchor = {}
        clamped = 0
        for (i, j), loss in pairs.items():
            if lvl == 0:
                rect = loss
            else:
                rect = max(loss, prev_max)
                if loss < prev_max:
                    clamped += 1
            per_anchor.setdefault(i, []).append(rect)
        if per_anchor:
            level_mean = sum(sum(v) / len(v) for v in per_anchor.values()) / len(per_anchor)
            total += alphas[lvl] * level_mean
            prev_max = max(pairs.values())
        clamped_counts.append(clamped)
    return total, clamped_counts


def fuse_ce(F, y, P, tau):
    total, n = 0.0, 0
    for i in range(len(F)):
        if y[i] < 0:
            continue
        logits = [dot(F[i], P[c]) / tau for c in range(len(P))]
        total += logsumexp(logits) - logits[y[i]]
        n += 1
    return total / n if n else 0.0


def box_blur(img, k):
    h, w = len(img), len(img[0])
    r = k // 2
    out = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii = min(max(i + di, 0), h - 1)
                    jj = min(max(j + dj, 0), w - 1)
                    acc += img[ii][jj]
            out[i][j] = acc / (k * k)
    return out


def corrupt_reference(s, cfg, stream):
    """Stage-by-stage reference following the documented draw protocol."""
    bases = "ACGT"
    stages = [s]
    seq = list(s)
    n = len(seq)
    u = [float(x) for x in stream.uniform(n)]
    r = [float(x) for x in stream.uniform(n)]
    for i in range(n):
        if u[i] < cfg.p_sub:
            if seq[i] == "N":
                seq[i] = bases[math.floor(4 * r[i])]
            else:
                seq[i] = bases[(bases.index(seq[i]) + 1 + math.floor(3 * r[i])) % 4]
    stages.append("".join(seq))
    u = [float(x) for x in stream.uniform(n)]
    for i in range(n):
        if u[i] < cfg.p_mask:
            seq[i] = "N"
    stages.append("".join(seq))
    ui = [float(x) for x in stream.uniform(n + 1)]
    bi = [float(x) for x in stream.uniform(n + 1)]
    ud = [float(x) for x in stream.uniform(n)]
    out = []
    for g in range(n + 1):
        if ui[g] < cfg.p_ins:
            out.append(bases[math.floor(4 * bi[g])])
        if g < n and not ud[g] < cfg.p_del:
            out.append(seq[g])
    seq = out
    stages.append("".join(seq))
    n = len(seq)
    x = cfg.dropout_run_fraction * n
    run = math.floor(x + 0.5)
    if 0 < run <= n:
        start = stream.integers(n - run + 1)
        for i in range(start, start + run):
            seq[i] = "N"
    stages.append("".join(seq))
    cut = math.floor(cfg.tail_truncation * n)
    stages.append("".join(seq[: n - cut]))
    return stages


def edit_distance(a, b):
    """Full-table Levenshtein."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        table[i][0] = i
    for j in range(len(b) + 1):
        table[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i][j] = min(table[i - 1][j] + 1, table[i][j - 1] + 1,
                              table[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return table[len(a)][len(b)]


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def central_difference(f, arr, h=1e-4):
    """Gradient of scalar ``f()`` w.r.t. the array ``arr`` (mutated in place and restored)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    assert np.shares_memory(flat, arr), "array must be contiguous"
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f()
        flat[k] = old - h
        down = f()
        flat[k] = old
        gflat[k] = (up - down) / (2 * h)
    return grad
