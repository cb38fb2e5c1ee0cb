"""Semantic tile maps, the class association graph, and the 304-byte sidecar codec."""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .sphere import TileGrid, TileSet, viewport_masks

MAX_CLASSES = 32
MAX_EDGES = 11
META_MAGIC = 0xA7
META_VERSION = 1
META_SIZE = 304
_HEADER = struct.Struct("<BBH")
_TILEMAP = struct.Struct("<64I")
_EDGE = struct.Struct("<BBH")
_PROB_SCALE = 65535


class MetaCodecError(ValueError):
    pass


class GraphError(ValueError):
    pass


class Edge(NamedTuple):
    src: int
    dst: int
    p: float


def _edge_key(e: Edge):
    return (-e.p, e.src, e.dst)


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        if len(names) > MAX_CLASSES:
            raise GraphError(f"vocabulary holds at most {MAX_CLASSES} classes, got {len(names)}")
        if len(set(names)) != len(names):
            raise GraphError("class names must be unique")
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.names)

    def id_of(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class SemanticChunkMeta:
    """Per-chunk tile -> class bitmask map plus sparse association edges."""

    chunk_index: int
    tile_masks: tuple[int, ...]
    edges: tuple[Edge, ...] = ()
    grid: TileGrid = field(default_factory=TileGrid)

    def __post_init__(self):
        masks = tuple(int(m) for m in self.tile_masks)
        if len(masks) != self.grid.n_tiles:
            raise MetaCodecError(f"expected {self.grid.n_tiles} tile masks, got {len(masks)}")
        if any(m < 0 or m >= 1 << MAX_CLASSES for m in masks):
            raise MetaCodecError("tile masks must be 32-bit unsigned")
        edges = []
        for e in self.edges:
            e = Edge(int(e[0]), int(e[1]), float(e[2]))
            if e.src == e.dst:
                raise MetaCodecError(f"self-loop on class {e.src}")
            if not (0 <= e.src < MAX_CLASSES and 0 <= e.dst < MAX_CLASSES):
                raise MetaCodecError(f"edge class ids out of range: {e}")
            if not (0.0 < e.p <= 1.0):
                raise MetaCodecError(f"edge probability must be in (0, 1], got {e.p}")
            edges.append(e)
        object.__setattr__(self, "tile_masks", masks)
        object.__setattr__(self, "edges", tuple(sorted(edges, key=_edge_key)))

    @classmethod
    def empty(cls, chunk_index: int = 0, grid: TileGrid | None = None) -> "SemanticChunkMeta":
        grid = grid or TileGrid()
        return cls(chunk_index, (0,) * grid.n_tiles, (), grid)

    def present_classes(self) -> set[int]:
        acc = 0
        for m in self.tile_masks:
            acc |= m
        return {c for c in range(MAX_CLASSES) if acc >> c & 1}


def tiles_of_class(meta: SemanticChunkMeta, cls: int) -> TileSet:
    bits = 0
    for t, m in enumerate(meta.tile_masks):
        if m >> cls & 1:
            bits |= 1 << t
    return TileSet(meta.grid.n_tiles, bits)


def classes_at(meta: SemanticChunkMeta, tile: int) -> frozenset[int]:
    m = meta.tile_masks[tile]
    return frozenset(c for c in range(MAX_CLASSES) if m >> c & 1)


# -- sidecar codec ----------------------------------------------------------

def _quantize(p: float) -> int:
    return max(1, min(_PROB_SCALE, int(round(p * _PROB_SCALE))))


def encode_meta(meta: SemanticChunkMeta) -> bytes:
    """Pack a chunk's metadata into exactly 304 bytes.

    Layout: 4-byte header (magic, version, chunk index low 16 bits, LE),
    64 little-endian u32 tile masks in tile-id order, then 11 edge slots of
    (src u8, dst u8, probability u16 / 65535). Unused slots are zero.
    """
    if meta.grid != TileGrid(8, 8):
        raise MetaCodecError(f"sidecar codec needs an 8x8 grid, got {meta.grid.rows}x{meta.grid.cols}")
    if len(meta.edges) > MAX_EDGES:
        raise MetaCodecError(f"at most {MAX_EDGES} edges fit the sidecar, got {len(meta.edges)}")
    out = bytearray(_HEADER.pack(META_MAGIC, META_VERSION, meta.chunk_index & 0xFFFF))
    out += _TILEMAP.pack(*meta.tile_masks)
    for e in meta.edges:
        out += _EDGE.pack(e.src, e.dst, _quantize(e.p))
    out += bytes(_EDGE.size * (MAX_EDGES - len(meta.edges)))
    assert len(out) == META_SIZE
    return bytes(out)


def decode_meta(buf: bytes) -> SemanticChunkMeta:
    if len(buf) != META_SIZE:
        raise MetaCodecError(f"sidecar must be {META_SIZE} bytes, got {len(buf)}")
    magic, version, chunk = _HEADER.unpack_from(buf, 0)
    if magic != META_MAGIC:
        raise MetaCodecError(f"bad magic byte 0x{magic:02X}")
    if version != META_VERSION:
        raise MetaCodecError(f"unsupported sidecar version {version}")
    masks = _TILEMAP.unpack_from(buf, _HEADER.size)
    edges = []
    off = _HEADER.size + _TILEMAP.size
    for _ in range(MAX_EDGES):
        src, dst, q = _EDGE.unpack_from(buf, off)
        off += _EDGE.size
        if q == 0:
            if src or dst:
                raise MetaCodecError("edge slot with zero probability but nonzero classes")
            continue
        edges.append(Edge(src, dst, q / _PROB_SCALE))
    return SemanticChunkMeta(chunk, masks, tuple(edges))


def encode_stream(metas: Iterable[SemanticChunkMeta]) -> bytes:
    return b"".join(encode_meta(m) for m in metas)


def decode_stream(buf: bytes) -> list[SemanticChunkMeta]:
    if len(buf) % META_SIZE:
        raise MetaCodecError(f"sidecar stream length {len(buf)} is not a multiple of {META_SIZE}")
    return [decode_meta(buf[i:i + META_SIZE]) for i in range(0, len(buf), META_SIZE)]


def meta_overhead(bytes_per_chunk: int = META_SIZE, chunk_s: float = 1.0,
                  stream_mbps: float = 15.0) -> dict:
    bps = bytes_per_chunk * 8 / chunk_s
    return {
        "bytes_per_chunk": bytes_per_chunk,
        "bps": bps,
        "kbps": bps / 1000.0,
        "fraction_of_stream": bps / (stream_mbps * 1e6),
    }


def meta_to_dict(meta: SemanticChunkMeta) -> dict:
    return {
        "chunk": meta.chunk_index,
        "tiles": {str(t): sorted(classes_at(meta, t)) for t in range(meta.grid.n_tiles)
                  if meta.tile_masks[t]},
        "edges": [[e.src, e.dst, e.p] for e in meta.edges],
    }


def meta_from_dict(d: dict, grid: TileGrid | None = None) -> SemanticChunkMeta:
    grid = grid or TileGrid()
    masks = [0] * grid.n_tiles
    for t, classes in d.get("tiles", {}).items():
        for c in classes:
            masks[int(t)] |= 1 << int(c)
    return SemanticChunkMeta(int(d["chunk"]), tuple(masks),
                             tuple(Edge(int(s), int(t), float(p)) for s, t, p in d.get("edges", [])),
                             grid)


# -- association graph ------------------------------------------------------

@dataclass(frozen=True)
class AssociationGraph:
    """Sparse row-stochastic P(dst | src) over class ids.

    Rows map a class id to ``((dst, p), ...)`` in descending probability,
    ties broken by ascending dst.
    """

    rows: dict
    vocabulary: ClassVocabulary | None = None

    def __post_init__(self):
        clean = {}
        for src, entries in self.rows.items():
            src = int(src)
            row = []
            for dst, p in entries:
                dst, p = int(dst), float(p)
                if dst == src:
                    raise GraphError(f"self-loop on class {src}")
                if p < 0:
                    raise GraphError(f"negative probability {p} on {src}->{dst}")
                if p > 0:
                    row.append((dst, p))
            if row:
                clean[src] = tuple(sorted(row, key=lambda e: (-e[1], e[0])))
        object.__setattr__(self, "rows", clean)

    def row(self, cls: int) -> tuple:
        return self.rows.get(cls, ())

    def has_row(self, cls: int) -> bool:
        return cls in self.rows

    @classmethod
    def from_edges(cls, edges: Iterable[Edge], vocabulary: ClassVocabulary | None = None):
        rows: dict[int, list] = {}
        for e in edges:
            rows.setdefault(e[0], []).append((e[1], e[2]))
        return cls(rows, vocabulary)

    def top_edges(self, classes: set[int] | None = None, limit: int = MAX_EDGES) -> tuple[Edge, ...]:
        """Strongest edges overall, optionally restricted to edges among ``classes``."""
        edges = [Edge(s, d, p) for s, row in self.rows.items() for d, p in row
                 if classes is None or (s in classes and d in classes)]
        return tuple(sorted(edges, key=_edge_key)[:limit])

    def to_json(self) -> str:
        doc = {
            "vocabulary": list(self.vocabulary.names) if self.vocabulary else [],
            "rows": {str(s): [[d, p] for d, p in row] for s, row in sorted(self.rows.items())},
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AssociationGraph":
        doc = json.loads(text)
        vocab = ClassVocabulary(tuple(doc.get("vocabulary", []))) if doc.get("vocabulary") else None
        return cls({int(s): [(d, p) for d, p in row] for s, row in doc["rows"].items()}, vocab)


def build_graph(cooccur, sim, lam: float, top_k: int,
                vocabulary: ClassVocabulary | None = None) -> AssociationGraph:
    """Mix clipped similarity with row-normalised co-occurrence, keep top-k per row.

    ``w(i, j) = lam * max(0, sim[i, j]) + (1 - lam) * cooc[i, j] / sum_j' cooc[i, j']``
    for ``i != j``; rows are renormalised after sparsification and rows with
    no positive weight stay empty.
    """
    if not (0.0 <= lam <= 1.0):
        raise GraphError(f"lambda must be in [0, 1], got {lam}")
    if top_k < 1:
        raise GraphError(f"top_k must be >= 1, got {top_k}")
    cooc = np.array(cooccur, dtype=float)
    sim = np.array(sim, dtype=float)
    if cooc.ndim != 2 or cooc.shape[0] != cooc.shape[1] or cooc.shape != sim.shape:
        raise GraphError("co-occurrence and similarity must be matching square matrices")
    if (cooc < 0).any():
        raise GraphError("co-occurrence counts must be nonnegative")
    k = cooc.shape[0]
    np.fill_diagonal(cooc, 0.0)
    totals = cooc.sum(axis=1)
    rows = {}
    for i in range(k):
        cterm = cooc[i] / totals[i] if totals[i] > 0 else np.zeros(k)
        w = lam * np.maximum(0.0, sim[i]) + (1.0 - lam) * cterm
        w[i] = 0.0
        cand = [(j, float(w[j])) for j in range(k) if w[j] > 0]
        cand.sort(key=lambda e: (-e[1], e[0]))
        cand = cand[:top_k]
        s = sum(p for _, p in cand)
        if s > 0:
            rows[i] = [(j, p / s) for j, p in cand]
    return AssociationGraph(rows, vocabulary)


def lookup(graph: AssociationGraph, cls: int | None, tau: float) -> list[tuple[int, float]]:
    """Successor classes of ``cls`` with probability strictly above ``tau``."""
    if cls is None:
        return []
    return [(d, p) for d, p in graph.row(cls) if p > tau]


def parse_similarity(text: str) -> tuple[list[str], np.ndarray]:
    """Read a class-similarity CSV with a header row and a leading name column."""
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r]
    if not rows:
        raise GraphError("empty similarity file")
    names = [n.strip() for n in rows[0][1:]]
    if len(rows) - 1 != len(names):
        raise GraphError(f"similarity matrix needs {len(names)} rows, got {len(rows) - 1}")
    mat = np.zeros((len(names), len(names)))
    for i, r in enumerate(rows[1:]):
        if r[0].strip() != names[i]:
            raise GraphError(f"row {i + 2}: expected class {names[i]!r}, got {r[0]!r}")
        try:
            mat[i] = [float(x) for x in r[1:]]
        except ValueError as exc:
            raise GraphError(f"row {i + 2}: {exc}") from None
    if not np.allclose(mat, mat.T, atol=1e-9):
        raise GraphError("similarity matrix is not symmetric")
    if not np.allclose(np.diag(mat), 1.0, atol=1e-9):
        raise GraphError("similarity matrix needs a unit diagonal")
    if (np.abs(mat) > 1.0 + 1e-9).any():
        raise GraphError("similarities must lie in [-1, 1]")
    return names, mat


def format_similarity(names: Sequence[str], mat) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(names))
    for n, row in zip(names, np.asarray(mat, dtype=float)):
        w.writerow([n] + [repr(float(x)) for x in row])
    return buf.getvalue()


def cooccurrence_counts(trace, metas: Sequence[SemanticChunkMeta], fov: tuple[float, float] = (90.0, 90.0),
                        chunk_ms: float = 1000.0, n_classes: int = MAX_CLASSES) -> np.ndarray:
    """Count class pairs seen together in the viewport within the same chunk.

    A class counts as seen in a chunk if it is present in any tile visible
    at any head sample of that chunk.
    """
    counts = np.zeros((n_classes, n_classes))
    if not metas:
        return counts
    grid = metas[0].grid
    masks = viewport_masks(trace.yaw, trace.pitch, fov[0], fov[1], grid)
    chunk_of = (np.asarray(trace.t_ms) // chunk_ms).astype(int)
    seen: dict[int, int] = {}
    for c, vis in zip(chunk_of.tolist(), masks):
        seen[c] = seen.get(c, 0) | vis
    by_index = {m.chunk_index: m for m in metas}
    for c, vis in seen.items():
        meta = by_index.get(c)
        if meta is None:
            continue
        present = 0
        t = 0
        while vis:
            if vis & 1:
                present |= meta.tile_masks[t]
            vis >>= 1
            t += 1
        ids = [k for k in range(n_classes) if present >> k & 1]
        for i in ids:
            for j in ids:
                if i != j:
                    counts[i, j] += 1
    return counts
