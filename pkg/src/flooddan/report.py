"""
Markdown results report.

Renders the run's results table, equivalence statement and alignment
diagnostics into ``report_templates/results_report_template.md`` (or a
built-in layout with the same placeholders) next to the figures.
"""

import logging
from pathlib import Path

import pandas as pd

from .evaluation import EquivalenceStatement
from .io import ROOT_DIR, atomic_write_text

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = ROOT_DIR / "report_templates" / "results_report_template.md"

_BUILTIN_TEMPLATE = """# FloodDAN Results: {source} → {target}

*Config digest: `{config_digest}` · code version: `{version}` · seed: {seed}*

---

## Results

{results_table}

## Supervision equivalence

{equivalence}

## Feature alignment

{alignment}

## Figures

{figures}
"""


def _fmt_table(df: pd.DataFrame, max_rows: int = 40) -> str:
    if df.empty:
        return "*No data available.*\n"
    return df.head(max_rows).to_markdown(index=False, floatfmt=".4g") + "\n"


def _fmt_alignment(alignment: dict | None) -> str:
    if not alignment:
        return "*Not computed.*\n"
    rows = [{"stage": stage, **values} for stage, values in alignment.items()]
    return _fmt_table(pd.DataFrame(rows))


def _fmt_figures(figures: list[Path]) -> str:
    if not figures:
        return "*No figures.*\n"
    return "\n".join(f"![{Path(f).stem.replace('_', ' ')}]({Path(f).name})" for f in figures) + "\n"


def generate_report(
    table: pd.DataFrame,
    output_dir: Path,
    run_info: dict,
    equivalence: EquivalenceStatement | None = None,
    alignment: dict | None = None,
    figures: list[Path] | None = None,
    template_path: Path | None = DEFAULT_TEMPLATE,
) -> Path:
    """
    Write ``results_report.md``.

    ``run_info`` supplies source, target, seed, config_digest and version.
    ``alignment`` maps a label ("before", "after") to an alignment summary.
    """
    output_dir.mkdir(parents=True, exist_ok=True)
    report_path = output_dir / "results_report.md"

    if template_path is not None and Path(template_path).exists():
        template = Path(template_path).read_text()
    else:
        template = _BUILTIN_TEMPLATE

    values = {
        "source": run_info.get("source", "source"),
        "target": run_info.get("target", "target"),
        "seed": run_info.get("seed", "N/A"),
        "config_digest": str(run_info.get("config_digest", ""))[:12],
        "version": run_info.get("version", "unknown"),
        "results_table": _fmt_table(table),
        "equivalence": (equivalence.describe() + "\n") if equivalence else "*Not computed.*\n",
        "alignment": _fmt_alignment(alignment),
        "figures": _fmt_figures(figures or []),
    }
    atomic_write_text(report_path, template.format_map(values))
    logger.info("Report written to %s", report_path)
    return report_path
