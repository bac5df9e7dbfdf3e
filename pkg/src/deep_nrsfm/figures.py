"""Report figures: the noise-robustness curve and the coherence scatter.

Figures are written straight to files with the Agg backend; nothing is
shown interactively.
"""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keep PNG bytes independent of the matplotlib version string
_PNG_META = {"Software": None}

STYLE = {
    "figure.figsize": (4.8, 3.4),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
}


def _save(fig, path):
    fig.tight_layout()
    kwargs = {"metadata": _PNG_META} if str(path).lower().endswith(".png") else {}
    fig.savefig(path, **kwargs)
    plt.close(fig)
    return path


def plot_noise_curve(curve, path, baseline=None):
    """Mean 3D error against noise ratio.

    ``curve`` is a sequence of ``(ratio, mean_error)``.  ``baseline`` is an
    optional error level drawn as a horizontal reference line (for instance
    the rigid factorization at ratio 0).
    """
    ratios = np.array([r for r, _ in curve], dtype=float)
    errors = np.array([e for _, e in curve], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(100 * ratios, errors, "o-", color="tab:red", label="network")
        if baseline is not None:
            ax.axhline(baseline, color="tab:green", ls="--", lw=1, label="rigid baseline, no noise")
        ax.set_xlabel("noise ratio (%)")
        ax.set_ylabel("normalized mean 3D error")
        ax.set_ylim(bottom=0)
        ax.legend(loc="best", frameon=False)
        return _save(fig, path)


def plot_coherence_scatter(series, path, title=None):
    """Scatter of checkpoint 3D error (percent) against final-dictionary coherence.

    A least-squares line is drawn through the points and the Pearson
    correlation is printed in the legend.
    """
    coh = np.array([c for _, c, _ in series.points], dtype=float)
    err = 100 * np.array([e for _, _, e in series.points], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(coh, err, s=14, color="tab:blue", zorder=3)
        if coh.size >= 2 and np.ptp(coh) > 0:
            slope, icept = np.polyfit(coh, err, 1)
            xs = np.linspace(coh.min(), coh.max(), 2)
            corr = series.correlation
            label = "fit" if math.isnan(corr) else f"fit, r = {corr:.2f}"
            ax.plot(xs, slope * xs + icept, color="tab:orange", lw=1.2, label=label)
            ax.legend(loc="best", frameon=False)
        ax.set_xlabel("final dictionary coherence")
        ax.set_ylabel("3D error (%)")
        if title:
            ax.set_title(title)
        return _save(fig, path)
