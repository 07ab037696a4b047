"""Grouped bar charts of attack success rates, rendered to PNG files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_COLORS = {"random": "#999999", "fgsm": "#1f77b4", "mifgsm": "#ff7f0e", "pgd": "#d62728"}


def _read_rates(csv_path):
    rows = []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({"cell": row["cell"], "method": row["method"],
                         "epsilon": float(row["epsilon"]),
                         "rate": float(row["success_rate"])})
    return rows


def render_rates_csv(csv_path, png_path) -> Path:
    """One subplot per epsilon; cells plus the across-cells aggregate on x."""
    rows = _read_rates(csv_path)
    eps_values = sorted({r["epsilon"] for r in rows})
    methods = list(dict.fromkeys(r["method"] for r in rows))
    cells = list(dict.fromkeys(r["cell"] for r in rows))
    fig, axes = plt.subplots(1, len(eps_values),
                             figsize=(4.2 * len(eps_values), 3.4),
                             sharey=True, squeeze=False)
    width = 0.8 / len(methods)
    for ax, eps in zip(axes[0], eps_values):
        for mi, method in enumerate(methods):
            rates = [next(r["rate"] for r in rows
                          if r["cell"] == c and r["method"] == method
                          and r["epsilon"] == eps)
                     for c in cells]
            pos = [ci + (mi - (len(methods) - 1) / 2) * width for ci in range(len(cells))]
            ax.bar(pos, [100 * r for r in rates], width=width, label=method,
                   color=_COLORS.get(method))
        ax.set_title(f"eps = {eps:g}")
        ax.set_xticks(range(len(cells)))
        ax.set_xticklabels([f"cell {c}" if c != "all" else "all" for c in cells])
        ax.set_ylim(0, 100)
        ax.grid(axis="y", alpha=0.3)
    axes[0][0].set_ylabel("success rate [%]")
    axes[0][-1].legend(loc="upper left", fontsize=8)
    fig.suptitle(Path(csv_path).stem.replace("_", " "))
    fig.tight_layout()
    # Strip the Software tag so identical runs produce identical bytes.
    fig.savefig(png_path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return Path(png_path)


def render_run_dir(run_dir) -> list:
    """Render every rates_*.csv in the directory to a matching PNG."""
    run_dir = Path(run_dir)
    out = []
    for csv_path in sorted(run_dir.glob("rates_*.csv")):
        out.append(render_rates_csv(csv_path, csv_path.with_suffix(".png")))
    return out
