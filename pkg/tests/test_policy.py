import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from semtile.policy import BudgetModel, build_set, class_footprint, coverage_check, fixated_class, lookahead_class
from semtile.semantics import AssociationGraph, SemanticChunkMeta
from semtile.sphere import Direction, InvalidInput, TileGrid, TileSet, Viewport, viewport_tiles
from semtile.traces import SceneObject, SyntheticSceneSpec, generate_synthetic

GRID = TileGrid()
GUITAR, MIC, CROWD = 0, 1, 2
MIC_TILES = [GRID.tile_id(4, 4), GRID.tile_id(4, 5)]  # behind-right, outside any margin-0 view at yaw -135
CROWD_TILES = [GRID.tile_id(2, 6)]
GRAPH = AssociationGraph({GUITAR: [(MIC, 0.8), (CROWD, 0.2)], MIC: [(GUITAR, 1.0)]})
HERE = Direction(-135, 0)
VP = Viewport(HERE)


def stage_meta():
    masks = [0] * 64
    masks[GRID.tile_id(4, 1)] |= 1 << GUITAR
    for t in MIC_TILES:
        masks[t] |= 1 << MIC
    for t in CROWD_TILES:
        masks[t] |= 1 << CROWD
    return SemanticChunkMeta(0, masks)


META = stage_meta()


def budget(n_tiles, tile=1.0):
    return BudgetModel(tile_mbits=tile, capacity_mbps=n_tiles * tile, chunk_s=1.0)


class TestBuildSet:
    def test_tau_one_empty(self):
        ps = build_set(HERE, VP, 5.0, META, GRAPH, GUITAR, 1.0, budget(64))
        assert len(ps.associative) == 0 and ps.total == ps.foveal

    def test_infinite_margin(self):
        ps = build_set(HERE, VP, math.inf, META, GRAPH, GUITAR, 0.0, budget(64))
        assert len(ps.total) == 64 and len(ps.associative) == 0

    def test_guitar_to_mic(self):
        foveal = viewport_tiles(VP, GRID)
        assert not foveal & TileSet.from_ids(64, MIC_TILES)
        # residual = capacity - cost(foveal) = exactly two tile costs
        b = budget(len(foveal) + 2, tile=0.25)
        ps = build_set(HERE, VP, 0.0, META, GRAPH, GUITAR, 0.5, b)
        assert ps.foveal == foveal
        assert set(ps.associative) == set(MIC_TILES)
        assert ps.lookahead_classes == (MIC,)

    def test_budget_cuts_admission(self):
        foveal = viewport_tiles(VP, GRID)
        ps = build_set(HERE, VP, 0.0, META, GRAPH, GUITAR, 0.0, budget(len(foveal) + 1))
        assert len(ps.associative) == 1
        # crowd never overtakes mic even though its single tile would fit
        assert not ps.associative & TileSet.from_ids(64, CROWD_TILES)

    def test_no_class_or_graph(self):
        assert len(build_set(HERE, VP, 0.0, META, None, GUITAR, 0.0, budget(64)).associative) == 0
        assert len(build_set(HERE, VP, 0.0, META, GRAPH, None, 0.0, budget(64)).associative) == 0

    def test_viewport_footprint(self):
        ps = build_set(HERE, VP, 0.0, META, GRAPH, GUITAR, 0.5, budget(64), footprint="viewport")
        assert set(MIC_TILES) <= set(ps.associative)
        assert len(ps.associative) > len(MIC_TILES)

    def test_unknown_footprint(self):
        with pytest.raises(InvalidInput):
            class_footprint(META, MIC, VP, "sphere")

    def test_invariants(self):
        ps = build_set(HERE, VP, 12.0, META, GRAPH, GUITAR, 0.1, budget(64))
        assert ps.total == ps.foveal | ps.associative
        assert not ps.foveal & ps.associative
        assert sorted(ps.order) == ps.total.ids()


class TestClassRules:
    def test_fixated_lowest_id(self):
        masks = [0] * 64
        masks[GRID.tile_id(4, 1)] = (1 << 5) | (1 << 2)
        assert fixated_class(SemanticChunkMeta(0, masks), HERE) == 2

    def test_lookahead_needs_row(self):
        masks = [0] * 64
        masks[GRID.tile_id(4, 1)] = (1 << 0) | (1 << 3)
        meta = SemanticChunkMeta(0, masks)
        assert lookahead_class(meta, HERE, AssociationGraph({3: [(0, 1.0)]})) == 3
        assert lookahead_class(meta, HERE, AssociationGraph({})) is None


class TestCoverage:
    def test_subset(self):
        ps = build_set(HERE, VP, 10.0, META, None, None, 0.3, budget(64))
        assert coverage_check(ps, viewport_tiles(VP, GRID))

    def test_one_missing(self):
        ps = build_set(HERE, VP, 0.0, META, None, None, 0.3, budget(64))
        extra = next(t for t in range(64) if t not in ps.total)
        assert not coverage_check(ps, ps.total | TileSet.from_ids(64, [extra]))

    def test_saccade_lands_in_associative_tiles(self):
        objs = (SceneObject(0, Direction(-90, 0), 3.0), SceneObject(1, Direction(90, 0), 3.0))
        scene = SyntheticSceneSpec(objs, ((0, 1), (1, 0)), 250.0, 0.5, seed=1)
        s = generate_synthetic(scene, 30)
        sc = s.saccades[0]
        tr = s.trace
        i_pred = int(sc.t_start_ms / 10) - 1
        i_land = int(sc.t_end_ms / 10) + 20
        pred, true = tr.direction(i_pred), tr.direction(i_land)
        ps = build_set(pred, Viewport(pred), 0.0, s.metas[0], scene.graph(), sc.src, 0.3, budget(64),
                       footprint="viewport", assoc_margin=10.0)
        seen = viewport_tiles(Viewport(true), GRID)
        assert not seen & ps.foveal
        assert seen <= ps.associative
        assert coverage_check(ps, seen)


masks_st = st.lists(st.integers(0, 0b1111), min_size=64, max_size=64)
rows_st = st.lists(st.floats(0.01, 1.0), min_size=1, max_size=3)
dirs = st.builds(Direction, st.floats(-180, 179.9), st.floats(-80, 80))


def graph_from(weights):
    total = sum(weights)
    return AssociationGraph({0: [(j + 1, w / total) for j, w in enumerate(weights)]})


class TestProperties:
    @given(masks_st, rows_st, dirs, st.floats(0, 1), st.floats(0, 1), st.integers(0, 64), st.floats(0, 60))
    def test_monotone_in_tau(self, masks, w, d, t1, t2, cap, m):
        lo, hi = sorted((t1, t2))
        meta, g = SemanticChunkMeta(0, masks), graph_from(w)
        a = build_set(d, Viewport(d), m, meta, g, 0, lo, budget(cap)).associative
        b = build_set(d, Viewport(d), m, meta, g, 0, hi, budget(cap)).associative
        assert b <= a

    @given(dirs, st.floats(0, 200), st.floats(0, 200))
    def test_monotone_in_margin(self, d, m1, m2):
        lo, hi = sorted((m1, m2))
        a = build_set(d, Viewport(d), lo, META, None, None, 0.3, budget(64)).foveal
        b = build_set(d, Viewport(d), hi, META, None, None, 0.3, budget(64)).foveal
        assert a <= b

    @given(masks_st, rows_st, dirs, st.floats(0, 1), st.integers(0, 64), st.floats(0, 60),
           st.floats(0.01, 2.0))
    def test_budget_feasible(self, masks, w, d, tau, cap, m, tile):
        b = budget(cap, tile)
        ps = build_set(d, Viewport(d), m, SemanticChunkMeta(0, masks), graph_from(w), 0, tau, b)
        if b.cost(len(ps.foveal)) <= b.chunk_budget:
            assert b.cost(len(ps.total)) <= b.chunk_budget + 1e-9
        else:
            assert len(ps.associative) == 0

    @given(masks_st, rows_st, dirs, st.floats(0, 1), st.integers(0, 64), st.floats(0, 60), st.floats(0, 60))
    def test_smaller_margin_never_shrinks_associative(self, masks, w, d, tau, cap, m1, m2):
        small, big = sorted((m1, m2))
        meta, g = SemanticChunkMeta(0, masks), graph_from(w)
        a_small = build_set(d, Viewport(d), small, meta, g, 0, tau, budget(cap)).associative
        a_big = build_set(d, Viewport(d), big, meta, g, 0, tau, budget(cap)).associative
        assert a_big <= a_small
