"""Semantic-aware conformal tile prefetching for 360-degree video, with a trace-driven simulator."""

from .conformal import (AciState, CalibrationStore, DifficultyTable, aci_update, conformal_quantile, difficulty,
                        fit_difficulty, margin, observe, score)
from .policy import BudgetModel, PredictionSet, build_set, coverage_check
from .predictor import ForecastRequest, ForecastResult, LinearTrendForecaster, load_forecaster, predict_point
from .semantics import (AssociationGraph, Edge, SemanticChunkMeta, build_graph, decode_meta, encode_meta, lookup,
                        tiles_of_class)
from .simulator import SessionMetrics, SimConfig, run_session
from .sphere import (Direction, InvalidInput, TileGrid, TileSet, Viewport, angular_error, expand_viewport, tile_of,
                     viewport_tiles)
from .traces import (GazeSample, HeadTrace, NetworkTrace, Regime, SyntheticSceneSpec, generate_synthetic,
                     label_regime, parse_head_trace, parse_network_trace)

__version__ = "0.1.0"
