"""Render accuracy-versus-budget curves from a sweep CSV.

Input columns: ``epsilon`` plus an accuracy column (``adversarial_accuracy``
or ``accuracy``); an optional variant column (``variant``, ``variant_top_k``
or ``label``) splits the data into one line per defense variant. Accuracies
given as fractions are shown on a 0-100 percent axis.
"""

from __future__ import annotations

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "sparse-frontend-report"  # deterministic element ids
import matplotlib.pyplot as plt

sys.path.insert(0, str(Path(__file__).resolve().parent))
from sweepframe import SweepFrame

ACCURACY_COLUMNS = ("adversarial_accuracy", "accuracy")
VARIANT_COLUMNS = ("variant", "variant_top_k", "label")


def build_figure(csv_path):
    """Parse the sweep CSV and return the assembled matplotlib figure."""
    probe = SweepFrame.read(csv_path, required=("epsilon",), numeric=())
    accuracy_column = next((c for c in ACCURACY_COLUMNS if c in probe.columns), None)
    if accuracy_column is None:
        raise ValueError(
            f"{csv_path}: missing required columns: one of {', '.join(ACCURACY_COLUMNS)}"
        )
    frame = SweepFrame.read(csv_path, required=("epsilon",), numeric=("epsilon", accuracy_column))
    variant_column = next((c for c in VARIANT_COLUMNS if c in frame.columns), None)

    rows = [r for r in frame.rows if isinstance(r.get(accuracy_column), float)]
    if not rows:
        raise ValueError(f"{csv_path}: no rows with a numeric {accuracy_column!r} value")
    scale = 100.0 if max(r[accuracy_column] for r in rows) <= 1.0 else 1.0

    groups: dict[str, list] = {}
    for row in rows:
        key = str(row[variant_column]) if variant_column else "defense"
        groups.setdefault(key, []).append((row["epsilon"], row[accuracy_column] * scale))

    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for key in sorted(groups):
        points = sorted(groups[key])
        ax.plot(
            [p[0] for p in points],
            [p[1] for p in points],
            marker="o",
            markersize=3.5,
            label=key,
        )
    ax.set_xlabel("perturbation budget $\\epsilon$")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0.0, 100.0)
    ax.grid(alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return fig


def plot_accuracy_vs_eps(csv_path, out_path) -> None:
    fig = build_figure(csv_path)
    fig.savefig(out_path, metadata=_stable_metadata(out_path))
    plt.close(fig)


def _stable_metadata(out_path) -> dict | None:
    # strip the timestamp so identical inputs give identical bytes
    suffix = Path(out_path).suffix.lower()
    if suffix == ".svg":
        return {"Date": None}
    if suffix == ".png":
        return {"Software": None}
    return None


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print("usage: accuracy_vs_eps <sweep.csv> <out.svg|out.png>", file=sys.stderr)
        return 2
    try:
        plot_accuracy_vs_eps(argv[0], argv[1])
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {argv[1]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
