"""Prediction-set construction: the calibrated foveal set plus associative lookahead."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .predictor import ForecastResult
from .semantics import AssociationGraph, SemanticChunkMeta, lookup, tiles_of_class
from .sphere import (Direction, InvalidInput, TileSet, Viewport, expand_viewport, order_by_distance,
                     tile_of, tiles_centroid, viewport_tiles)

FOOTPRINTS = ("class_tiles", "viewport")


@dataclass(frozen=True)
class BudgetModel:
    """Uniform per-tile cost and the capacity the client expects for one chunk."""

    tile_mbits: float = 0.5
    capacity_mbps: float = math.inf
    chunk_s: float = 1.0

    def __post_init__(self):
        if not self.tile_mbits > 0:
            raise InvalidInput(f"tile cost must be > 0, got {self.tile_mbits}")
        if self.capacity_mbps < 0 or not self.chunk_s > 0:
            raise InvalidInput("capacity must be >= 0 and chunk duration > 0")

    @classmethod
    def from_bitrate(cls, full_sphere_mbps: float, n_tiles: int = 64, **kw) -> "BudgetModel":
        chunk_s = kw.get("chunk_s", 1.0)
        return cls(tile_mbits=full_sphere_mbps * chunk_s / n_tiles, **kw)

    def cost(self, n_tiles: int) -> float:
        return n_tiles * self.tile_mbits

    @property
    def chunk_budget(self) -> float:
        return self.capacity_mbps * self.chunk_s


@dataclass(frozen=True)
class PredictionSet:
    foveal: TileSet
    associative: TileSet
    total: TileSet
    margin_used: float
    alpha_used: float
    lookahead_classes: tuple[int, ...] = ()
    order: tuple[int, ...] = ()


def fixated_class(meta: SemanticChunkMeta, d: Direction) -> int | None:
    """Lowest class id present in the tile under ``d`` (codec bit order)."""
    m = meta.tile_masks[tile_of(d, meta.grid)]
    if not m:
        return None
    return (m & -m).bit_length() - 1


def lookahead_class(meta: SemanticChunkMeta, d: Direction, graph: AssociationGraph) -> int | None:
    """Lowest class id under ``d`` that has a nonempty graph row."""
    m = meta.tile_masks[tile_of(d, meta.grid)]
    c = 0
    while m:
        if m & 1 and graph.has_row(c):
            return c
        m >>= 1
        c += 1
    return None


def class_footprint(meta: SemanticChunkMeta, cls: int, vp: Viewport, mode: str = "class_tiles",
                    assoc_margin: float = 0.0) -> list[int]:
    """Tiles to prefetch for a lookahead class, nearest to the class centroid first.

    ``class_tiles`` takes exactly the tiles tagged with the class. ``viewport``
    adds the tiles of a viewport centered on those tiles' centroid, grown by
    ``assoc_margin`` degrees.
    """
    grid = meta.grid
    tiles = tiles_of_class(meta, cls)
    if not tiles:
        return []
    center = tiles_centroid(tiles, grid)
    if mode == "viewport":
        tiles = tiles | viewport_tiles(expand_viewport(vp.at(center), assoc_margin), grid)
    elif mode != "class_tiles":
        raise InvalidInput(f"unknown footprint mode {mode!r}; use one of {FOOTPRINTS}")
    return order_by_distance(tiles, center, grid)


def build_set(pred: ForecastResult | Direction, vp: Viewport, margin: float, meta: SemanticChunkMeta,
              graph: AssociationGraph | None, current_class: int | None, tau: float,
              budget: BudgetModel, alpha: float = math.nan, footprint: str = "class_tiles",
              assoc_margin: float = 0.0) -> PredictionSet:
    """Union of the margin-expanded foveal set and budget-limited associative tiles.

    Foveal tiles are always requested in full. Associative tiles are admitted
    class by class in descending P(dst | current) while the cumulative cost
    stays within ``budget.chunk_budget - cost(foveal)``.
    """
    center = pred.predicted if isinstance(pred, ForecastResult) else pred
    grid = meta.grid
    foveal = viewport_tiles(expand_viewport(vp.at(center), margin), grid)
    order = order_by_distance(foveal, center, grid)
    assoc_bits = 0
    classes = []
    if graph is not None and current_class is not None and len(foveal) < grid.n_tiles:
        residual = max(0.0, budget.chunk_budget - budget.cost(len(foveal)))
        spent = 0.0
        taken = foveal.bits
        full = False
        for cls, _p in lookup(graph, current_class, tau):
            classes.append(cls)
            if full:
                continue
            for t in class_footprint(meta, cls, vp, footprint, assoc_margin):
                if taken >> t & 1:
                    continue
                if spent + budget.tile_mbits > residual + 1e-12:
                    full = True
                    break
                spent += budget.tile_mbits
                taken |= 1 << t
                assoc_bits |= 1 << t
                order.append(t)
    assoc = TileSet(grid.n_tiles, assoc_bits)
    return PredictionSet(foveal, assoc, foveal | assoc, margin, alpha, tuple(classes), tuple(order))


def coverage_check(ps: PredictionSet, true_vp_tiles: TileSet) -> bool:
    return true_vp_tiles <= ps.total
