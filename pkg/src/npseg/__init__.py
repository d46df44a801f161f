"""Segmentation clustering of well-log series with neural-process and physics affiliations."""
from .cluster import DpConfig, Pattern, dp_segment, iterate, np_affiliation, physics_affiliation
from .evalgrid import ari, confusion, grid_search, select_combos

__version__ = "0.1.0"

__all__ = [
    "DpConfig",
    "Pattern",
    "ari",
    "confusion",
    "dp_segment",
    "grid_search",
    "iterate",
    "np_affiliation",
    "physics_affiliation",
    "select_combos",
]
