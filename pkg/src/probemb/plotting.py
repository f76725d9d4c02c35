"""Figure rendering for the CLI reports.

All figures go through the Agg backend and are saved as PNG without
timestamped metadata, so identical inputs give identical files.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(traces, path, names=None, log_y=True):
    """One line per trace; each trace is a list of dicts with step/total."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, tr in enumerate(traces):
            label = names[i] if names else None
            ax.plot([r["step"] for r in tr], [r["total"] for r in tr], label=label)
        if log_y:
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("objective")
        if names:
            ax.legend()
        return _save(fig, path)


def loss_breakdown(trace, path, terms=("ppcl", "inc_vt", "inc_mask", "vib")):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        steps = [r["step"] for r in trace]
        for t in terms:
            vals = np.array([r[t] for r in trace])
            if np.any(vals > 0):
                ax.plot(steps, vals, label=t)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("weighted term")
        ax.legend()
        return _save(fig, path)


def uncertainty_bars(rows, path):
    """Grouped bars of mean image / text variance per ablation row."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(rows))
        w = 0.38
        ax.bar(x - w / 2, [r["mean_var_image"] for r in rows], w, label="image")
        ax.bar(x + w / 2, [r["mean_var_text"] for r in rows], w, label="text")
        ax.set_xticks(x, [r["name"] for r in rows])
        ax.set_ylabel(r"mean $\sigma^2$")
        ax.legend()
        return _save(fig, path)


def h_histogram(h_values, path, bins=30):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(np.asarray(h_values), bins=bins, color="C0", alpha=0.8)
        ax.axvline(0.0, color="k", lw=1)
        ax.set_xlabel("H(specific in general)")
        ax.set_ylabel("pairs")
        return _save(fig, path)


def weight_bars(weights_by_class, path):
    """Max prompt weight per class against the uniform level."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = list(weights_by_class)
        peak = [float(np.max(weights_by_class[c])) for c in names]
        ax.bar(np.arange(len(names)), peak)
        if names:
            ax.axhline(1.0 / len(weights_by_class[names[0]]), color="k", ls="--", lw=1,
                       label="uniform")
            ax.legend()
        ax.set_xticks(np.arange(len(names)), [str(n) for n in names], rotation=45)
        ax.set_ylabel(r"max $\pi$")
        return _save(fig, path)


def traversal_levels(paths, levels, path):
    """Hierarchy level of the caption retrieved at each interpolation step."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for p in paths:
            ts = [t for t, _ in p.steps]
            ax.plot(ts, [levels.get(c, np.nan) for _, c in p.steps], alpha=0.4, lw=1)
        ax.set_xlabel("t (root -> target)")
        ax.set_ylabel("caption level")
        ax.invert_yaxis()
        return _save(fig, path)
