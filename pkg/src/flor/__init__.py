"""Capture, query and backfill the metadata of iterative ML pipelines."""

from .errors import FlorError, NotFoundError
from .project import Project
from .query import PivotTable, best_checkpoint, dataframe

__all__ = ["FlorError", "NotFoundError", "PivotTable", "Project", "best_checkpoint", "dataframe"]
__version__ = "0.1.0"
