"""Exact score decomposition and input-space heatmaps for small CNNs."""
from .engine import ExplanationBundle, ScoreState, explain, layer_score_map, propagate
from .graph import ForwardTape, ModelGraph, build_paper_model, forward, forward_with_tape, param_count
from .rf import SplatConfig, attach_total_maps, compute_rf_table, gaussian_splat, total_input_map
from .store import load_image, load_model, make_toy_model, save_model

__version__ = "0.1.0"
