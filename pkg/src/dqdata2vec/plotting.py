"""Heatmap rendering of conditional-probability tables.

Figures are written straight to files with the non-interactive Agg backend,
so the report path works on headless machines.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGURE_DPI = 120


def heatmap(table, row_labels, col_labels, path, title=None, cmap="viridis"):
    """Save ``table`` (rows = labels, columns = codes) as a PNG heatmap.

    Tick labels are thinned when there are more than 40 columns so the axis
    stays legible; the colour scale is fixed to [0, 1].
    """
    table = np.asarray(table, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_rows, n_cols = table.shape if table.ndim == 2 else (0, 0)
    width = min(16.0, 2.5 + 0.22 * max(n_cols, 1))
    height = min(10.0, 1.8 + 0.3 * max(n_rows, 1))
    fig, ax = plt.subplots(figsize=(width, height))
    if table.size:
        im = ax.imshow(table, aspect="auto", interpolation="nearest", cmap=cmap, vmin=0.0, vmax=1.0)
        fig.colorbar(im, ax=ax, fraction=0.04, pad=0.02, label="P(label | code)")
        step = max(1, int(np.ceil(n_cols / 40)))
        ax.set_xticks(np.arange(0, n_cols, step))
        ax.set_xticklabels([str(c) for c in list(col_labels)[::step]], rotation=90, fontsize=6)
        ax.set_yticks(np.arange(n_rows))
        ax.set_yticklabels([str(r) for r in row_labels], fontsize=7)
    else:
        ax.text(0.5, 0.5, "no active codes", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("codeword")
    ax.set_ylabel("label")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return path


def render_conditional(matrix, path, title=None):
    """Render the conditional table of a co-occurrence matrix to ``path``."""
    from .analysis import conditional_table

    table, rows, cols = conditional_table(matrix)
    return heatmap(table, rows.tolist(), cols.tolist(), path, title=title)
