"""Dataset management, configuration, orchestration and reporting."""
from .config import RunConfig
from .data import extract_patches, make_splits, rasterize_polygons
from .report import build_report, render_overlay

__all__ = ["RunConfig", "extract_patches", "make_splits", "rasterize_polygons", "build_report", "render_overlay"]
