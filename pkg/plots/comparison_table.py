"""Render a defense-comparison CSV as a markdown table.

Expects the comparison shape: a ``variant`` label column, accuracy columns
(clean and the four whitebox attacks), and the decision-boundary mean-norm
column. The best value in every numeric column is bolded; higher is better
throughout (a bigger boundary norm means a harder-to-attack model). Ties
are all bolded. The norm column is rendered as a "‖e‖₂ = value" cell
(avoiding raw pipes, which would break markdown table cells).
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
from sweepframe import SweepFrame

LABEL_COLUMN = "variant"
NORM_COLUMN = "boundary_mean_l2"
COLUMN_TITLES = {
    "variant": "Defense",
    "clean": "Clean",
    "pgd_inf_ce": "Whitebox (l-inf)",
    "pgd_inf_cw": "Whitebox C&W (l-inf)",
    "pgd_l2": "Whitebox (l2)",
    "pgd_l1": "Whitebox (l1)",
    "boundary_mean_l2": "Decision Boundary BB",
}


def _format_number(value: float) -> str:
    return f"{value:.2f}"


def render_comparison_table(csv_path, out_path) -> str:
    """Write the markdown table; returns the rendered text."""
    frame = SweepFrame.read(csv_path, required=(LABEL_COLUMN,), numeric=())
    numeric_columns = [c for c in frame.columns if c != LABEL_COLUMN]
    frame = SweepFrame.read(csv_path, required=(LABEL_COLUMN,), numeric=tuple(numeric_columns))

    best: dict[str, float] = {}
    for column in numeric_columns:
        values = [row[column] for row in frame.rows if isinstance(row[column], float)]
        if values:
            best[column] = max(values)

    titles = [COLUMN_TITLES.get(c, c) for c in frame.columns]
    lines = ["| " + " | ".join(titles) + " |", "|" + "---|" * len(titles)]
    for row in frame.rows:
        cells = [str(row[LABEL_COLUMN])]
        for column in numeric_columns:
            value = row[column]
            if not isinstance(value, float):
                cells.append(str(value))
                continue
            text = _format_number(value)
            if column == NORM_COLUMN:
                text = f"‖e‖₂ = {text}"
            if column in best and value == best[column]:
                text = f"**{text}**"
            cells.append(text)
        lines.append("| " + " | ".join(cells) + " |")
    rendered = "\n".join(lines) + "\n"
    Path(out_path).write_text(rendered)
    return rendered


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print("usage: table <compare.csv> <out.md>", file=sys.stderr)
        return 2
    try:
        render_comparison_table(argv[0], argv[1])
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {argv[1]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
