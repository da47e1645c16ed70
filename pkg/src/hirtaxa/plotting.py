"""Report figures (PNG) written next to the delimited outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def global_bars(report, path, k=1):
    """Grouped bars: Global Top-k per mode, one group per condition."""
    modes, conds = report.modes, report.conditions
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.6 + 1.5 * len(conds), 3.2))
        width = 0.8 / max(len(modes), 1)
        x = np.arange(len(conds))
        for i, m in enumerate(modes):
            vals = [report.global_.get((m, c, k), np.nan) for c in conds]
            ax.bar(x + (i - (len(modes) - 1) / 2) * width, vals, width, label=m)
        ax.set_xticks(x)
        ax.set_xticklabels(conds)
        ax.set_ylim(0, 100)
        ax.set_ylabel(f"Global Top-{k} (%)")
        ax.legend(ncol=len(modes), frameon=False, loc="lower center", bbox_to_anchor=(0.5, 1.0))
        return _save(fig, path)


def level_lines(report, path, k=1):
    """Top-k accuracy per taxonomic level, one panel per condition."""
    modes, conds = report.modes, report.conditions
    levels = list(report.level_names)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(conds), figsize=(2.6 * len(conds), 2.8),
                                 sharey=True, squeeze=False)
        for ax, c in zip(axes[0], conds):
            for m in modes:
                vals = [report.cells.get((m, c, l + 1, k), np.nan) for l in range(len(levels))]
                ax.plot(levels, vals, marker="o", label=m)
            ax.set_title(c)
            ax.set_ylim(0, 100)
            ax.tick_params(axis="x", rotation=30)
        axes[0][0].set_ylabel(f"Top-{k} (%)")
        axes[0][-1].legend(frameon=False)
        return _save(fig, path)


def delta_heatmap(delta, path, k=1):
    """Top-k deltas (b - a); rows are mode/condition, columns levels plus Global."""
    rows = sorted({key[:2] for key in delta.global_ if key[2] == k},
                  key=lambda mc: (_index(mc[0], "mode"), _index(mc[1], "cond")))
    cols = list(delta.level_names) + ["global"]
    grid = np.array([[delta.cells[(m, c, l + 1, k)] for l in range(len(delta.level_names))]
                     + [delta.global_[(m, c, k)]] for m, c in rows])
    lim = max(float(np.abs(grid).max()), 1e-9) if grid.size else 1.0
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(cols) + 2.2, 0.35 * len(rows) + 1.2))
        im = ax.imshow(grid, cmap="RdBu", vmin=-lim, vmax=lim, aspect="auto")
        ax.set_xticks(range(len(cols)))
        ax.set_xticklabels(cols)
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels([f"{m} / {c}" for m, c in rows])
        for (r, cidx), val in np.ndenumerate(grid):
            ax.text(cidx, r, f"{val:+.1f}", ha="center", va="center", fontsize=7,
                    color="white" if abs(val) > 0.6 * lim else "black")
        fig.colorbar(im, ax=ax, label=f"delta Top-{k} (points)")
        return _save(fig, path)


def loss_curves(runlog, path):
    """Total loss and components against optimizer step."""
    steps = [s["step"] for s in runlog.steps]
    keys = [k for k in ("total", "xmod", "hir", "fuse") if runlog.steps and k in runlog.steps[0]]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for key in keys:
            ax.plot(steps, [s[key] for s in runlog.steps], label=key, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def _index(name, kind):
    from .evalharness import CONDITIONS, MODES
    seq = MODES if kind == "mode" else CONDITIONS
    return seq.index(name) if name in seq else len(seq)
