"""Config-driven experiment pipeline and cross-seed reporting."""

from .config import SEED_ENV, ExperimentConfig, load_config, parse_config
from .pipeline import (SUMMARY_COLUMNS, Cell, load_manifest, missing_cells, plan_cells, run,
                       summary_rows, write_summary)
from .report import aggregate, median_iqr, report

__all__ = [
    "Cell", "ExperimentConfig", "SEED_ENV", "SUMMARY_COLUMNS", "aggregate", "load_config",
    "load_manifest", "median_iqr", "missing_cells", "parse_config", "plan_cells", "report", "run",
    "summary_rows", "write_summary",
]
