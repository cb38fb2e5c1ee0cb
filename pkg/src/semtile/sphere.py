"""Yaw/pitch angular arithmetic and the equirectangular tile grid.

Angles are degrees throughout. Yaw lives in [-180, 180), pitch in [-90, 90].
Tiles are cells of a rows x cols grid over the ERP rectangle; a tile id is
``row * cols + col`` with row 0 at pitch -90 and col 0 at yaw -180.
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator

import numpy as np


class InvalidInput(ValueError):
    pass


def wrap_yaw(raw: float) -> float:
    """Reduce ``raw`` into [-180, 180)."""
    if not math.isfinite(raw):
        raise InvalidInput(f"yaw must be finite, got {raw!r}")
    out = (raw + 180.0) % 360.0 - 180.0
    # float modulo can land exactly on the excluded upper bound
    if out >= 180.0:
        out -= 360.0
    return out


def clamp_pitch(raw: float) -> float:
    if not math.isfinite(raw):
        raise InvalidInput(f"pitch must be finite, got {raw!r}")
    return min(90.0, max(-90.0, raw))


@dataclass(frozen=True)
class Direction:
    yaw: float
    pitch: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_yaw(float(self.yaw)))
        object.__setattr__(self, "pitch", clamp_pitch(float(self.pitch)))


def yaw_delta(a: float, b: float) -> float:
    """Signed shortest yaw difference ``a - b`` in [-180, 180)."""
    return wrap_yaw(a - b)


def angular_error(a: Direction, b: Direction) -> float:
    """Per-axis Chebyshev distance between two directions."""
    return max(abs(wrap_yaw(a.yaw - b.yaw)), abs(a.pitch - b.pitch))


@dataclass(frozen=True)
class Viewport:
    center: Direction
    width: float = 90.0
    height: float = 90.0

    def __post_init__(self):
        if not (0.0 < self.width <= 360.0):
            raise InvalidInput(f"viewport width must be in (0, 360], got {self.width}")
        if not (0.0 < self.height <= 180.0):
            raise InvalidInput(f"viewport height must be in (0, 180], got {self.height}")

    def at(self, center: Direction) -> "Viewport":
        return Viewport(center, self.width, self.height)


def expand_viewport(vp: Viewport, margin: float) -> Viewport:
    """Grow both half-extents by ``margin`` degrees, saturating at the full sphere."""
    if math.isnan(margin) or margin < 0:
        raise InvalidInput(f"margin must be >= 0, got {margin}")
    if math.isinf(margin):
        return Viewport(vp.center, 360.0, 180.0)
    return Viewport(
        vp.center,
        min(360.0, vp.width + 2.0 * margin),
        min(180.0, vp.height + 2.0 * margin),
    )


@dataclass(frozen=True)
class TileGrid:
    rows: int = 8
    cols: int = 8

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvalidInput(f"grid needs rows, cols >= 1, got {self.rows}x{self.cols}")

    @property
    def n_tiles(self) -> int:
        return self.rows * self.cols

    @cached_property
    def row_edges(self) -> tuple[float, ...]:
        return tuple(-90.0 + 180.0 * r / self.rows for r in range(self.rows + 1))

    @cached_property
    def col_edges(self) -> tuple[float, ...]:
        return tuple(-180.0 + 360.0 * c / self.cols for c in range(self.cols + 1))

    def tile_id(self, row: int, col: int) -> int:
        return row * self.cols + col

    def row_col(self, tile: int) -> tuple[int, int]:
        return divmod(tile, self.cols)

    def bounds(self, tile: int) -> tuple[float, float, float, float]:
        """(yaw_lo, yaw_hi, pitch_lo, pitch_hi) of a tile cell."""
        r, c = self.row_col(tile)
        return (self.col_edges[c], self.col_edges[c + 1], self.row_edges[r], self.row_edges[r + 1])

    def center(self, tile: int) -> Direction:
        ylo, yhi, plo, phi = self.bounds(tile)
        return Direction((ylo + yhi) / 2.0, (plo + phi) / 2.0)

    def full(self) -> "TileSet":
        return TileSet(self.n_tiles, (1 << self.n_tiles) - 1)

    def empty(self) -> "TileSet":
        return TileSet(self.n_tiles, 0)


@dataclass(frozen=True)
class TileSet:
    """Bitset over the tile ids of one grid."""

    n_tiles: int
    bits: int = 0

    @classmethod
    def from_ids(cls, n_tiles: int, ids: Iterable[int]) -> "TileSet":
        bits = 0
        for i in ids:
            if not 0 <= i < n_tiles:
                raise InvalidInput(f"tile id {i} outside [0, {n_tiles})")
            bits |= 1 << i
        return cls(n_tiles, bits)

    def _check(self, other: "TileSet"):
        if self.n_tiles != other.n_tiles:
            raise InvalidInput("tile sets belong to different grids")

    def __or__(self, other: "TileSet") -> "TileSet":
        self._check(other)
        return TileSet(self.n_tiles, self.bits | other.bits)

    def __and__(self, other: "TileSet") -> "TileSet":
        self._check(other)
        return TileSet(self.n_tiles, self.bits & other.bits)

    def __sub__(self, other: "TileSet") -> "TileSet":
        self._check(other)
        return TileSet(self.n_tiles, self.bits & ~other.bits)

    def __le__(self, other: "TileSet") -> bool:
        self._check(other)
        return self.bits & ~other.bits == 0

    def issubset(self, other: "TileSet") -> bool:
        return self <= other

    def __len__(self) -> int:
        return self.bits.bit_count()

    def __bool__(self) -> bool:
        return self.bits != 0

    def __contains__(self, tile: int) -> bool:
        return 0 <= tile < self.n_tiles and bool(self.bits >> tile & 1)

    def __iter__(self) -> Iterator[int]:
        bits = self.bits
        while bits:
            low = bits & -bits
            yield low.bit_length() - 1
            bits ^= low

    def ids(self) -> list[int]:
        return list(self)

    def __repr__(self) -> str:
        return f"TileSet({self.ids()})"


def tile_of(d: Direction, grid: TileGrid) -> int:
    """Tile whose half-open cell contains ``d``; pitch +90 maps to the top band."""
    row = min(bisect_right(grid.row_edges, d.pitch) - 1, grid.rows - 1)
    col = min(bisect_right(grid.col_edges, d.yaw) - 1, grid.cols - 1)
    return grid.tile_id(max(row, 0), max(col, 0))


def _row_range(p_lo: float, p_hi: float, grid: TileGrid) -> tuple[int, int]:
    r0 = max(bisect_right(grid.row_edges, p_lo) - 1, 0)
    r1 = min(bisect_left(grid.row_edges, p_hi) - 1, grid.rows - 1)
    return r0, r1


def _col_bits(yaw_c: float, width: float, grid: TileGrid) -> int:
    cols = grid.cols
    if width >= 360.0:
        return (1 << cols) - 1
    edges = grid.col_edges
    a = wrap_yaw(yaw_c - width / 2.0)
    b = a + width
    if b <= 180.0:
        c0 = max(bisect_right(edges, a) - 1, 0)
        c1 = bisect_left(edges, b) - 1
        return ((1 << (c1 + 1)) - 1) ^ ((1 << c0) - 1) if c1 >= c0 else 0
    c0 = max(bisect_right(edges, a) - 1, 0)
    bits = ((1 << cols) - 1) ^ ((1 << c0) - 1)
    c1 = bisect_left(edges, b - 360.0) - 1
    if c1 >= 0:
        bits |= (1 << (c1 + 1)) - 1
    return bits


def viewport_tiles(vp: Viewport, grid: TileGrid) -> TileSet:
    """Tiles whose cell has positive-area overlap with the viewport rectangle.

    A 180-degree-tall viewport spans every pitch band wherever it is centered.
    """
    if vp.height >= 180.0:
        r0, r1 = 0, grid.rows - 1
    else:
        p_lo = max(-90.0, vp.center.pitch - vp.height / 2.0)
        p_hi = min(90.0, vp.center.pitch + vp.height / 2.0)
        r0, r1 = _row_range(p_lo, p_hi, grid)
    cbits = _col_bits(vp.center.yaw, vp.width, grid)
    bits = 0
    for r in range(r0, r1 + 1):
        bits |= cbits << (r * grid.cols)
    return TileSet(grid.n_tiles, bits)


def viewport_masks(yaw: np.ndarray, pitch: np.ndarray, width: float, height: float,
                   grid: TileGrid) -> list[int]:
    """Bitmask of :func:`viewport_tiles` for many centers at once.

    Equivalent to calling ``viewport_tiles`` per center; used to precompute
    the visible tiles of a whole head trace.
    """
    yaw = np.asarray(yaw, dtype=float)
    pitch = np.asarray(pitch, dtype=float)
    row_edges = np.asarray(grid.row_edges)
    p_lo = np.maximum(-90.0, pitch - height / 2.0)
    p_hi = np.minimum(90.0, pitch + height / 2.0)
    r0 = np.maximum(np.searchsorted(row_edges, p_lo, side="right") - 1, 0)
    r1 = np.minimum(np.searchsorted(row_edges, p_hi, side="left") - 1, grid.rows - 1)
    if height >= 180.0:
        r0[:] = 0
        r1[:] = grid.rows - 1
    cache: dict[tuple, int] = {}
    out = []
    for y, a, b in zip(yaw.tolist(), r0.tolist(), r1.tolist()):
        cbits = _col_bits(y, width, grid)
        key = (cbits, a, b)
        m = cache.get(key)
        if m is None:
            m = 0
            for r in range(a, b + 1):
                m |= cbits << (r * grid.cols)
            cache[key] = m
        out.append(m)
    return out


def tile_distance(tile: int, d: Direction, grid: TileGrid) -> float:
    """Chebyshev distance from ``d`` to the nearest point of a tile cell."""
    ylo, yhi, plo, phi = grid.bounds(tile)
    half = (yhi - ylo) / 2.0
    dy = max(0.0, abs(wrap_yaw(d.yaw - (ylo + half))) - half)
    dp = max(0.0, plo - d.pitch, d.pitch - phi)
    return max(dy, dp)


def order_by_distance(tiles: TileSet, d: Direction, grid: TileGrid) -> list[int]:
    """Tile ids sorted nearest-first to ``d`` (ties by tile id)."""
    return sorted(tiles, key=lambda t: (tile_distance(t, d, grid), t))


def tiles_centroid(tiles: TileSet, grid: TileGrid) -> Direction | None:
    """Circular-mean yaw / mean pitch of tile centers, or None for an empty set."""
    ids = tiles.ids()
    if not ids:
        return None
    sx = sy = sp = 0.0
    for t in ids:
        c = grid.center(t)
        sx += math.cos(math.radians(c.yaw))
        sy += math.sin(math.radians(c.yaw))
        sp += c.pitch
    yaw = math.degrees(math.atan2(sy, sx)) if (sx or sy) else 0.0
    return Direction(yaw, sp / len(ids))
