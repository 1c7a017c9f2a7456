import numpy as np
import pytest

from splatstego.errors import IndexOutOfRangeError, OutOfRangeError
from splatstego.hash_encoding import (
    DEFAULT_PRIMES,
    HashGrid,
    HashGridConfig,
    hash_index,
    level_resolution,
    positions_bbox,
)

UNIT_BBOX = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def small_grid(seed=0, **kw):
    kw.setdefault("levels", 4)
    kw.setdefault("r_min", 2)
    kw.setdefault("r_max", 16)
    kw.setdefault("table_size", 1 << 12)
    kw.setdefault("feature_dim", 3)
    return HashGrid(HashGridConfig(seed=seed, **kw), UNIT_BBOX)


def test_resolution_ladder_endpoints():
    cfg = HashGridConfig()
    assert level_resolution(0, cfg) == 16
    assert level_resolution(8, cfg) == 147   # floor(16 * 64**(8/15))
    assert level_resolution(15, cfg) == 1024
    with pytest.raises(IndexOutOfRangeError):
        level_resolution(16, cfg)


def test_resolution_exact_integer_levels():
    # 16 * 64**(10/15) == 256 exactly; floor must not undershoot
    assert level_resolution(10, HashGridConfig()) == 256
    assert level_resolution(5, HashGridConfig()) == 64


def test_hash_index_examples():
    assert hash_index((0, 0, 0), 1 << 16) == 0
    assert hash_index((1, 0, 0), 1 << 16) == 1 % (1 << 16) == 1
    assert hash_index((0, 1, 0), 1 << 16) == 31153  # 2654435761 mod 2^16


def test_hash_index_wraps_mod_2_64():
    v = (2 ** 40, 2 ** 40, 2 ** 40)
    expected = 0
    for d in range(3):
        expected ^= (v[d] * DEFAULT_PRIMES[d]) % 2 ** 64
    assert hash_index(v, 1 << 20) == expected % (1 << 20)


def test_config_validation():
    with pytest.raises(OutOfRangeError):
        HashGridConfig(levels=1)
    with pytest.raises(OutOfRangeError):
        HashGridConfig(table_size=1000)  # not a power of two
    with pytest.raises(OutOfRangeError):
        HashGridConfig(r_min=8, r_max=8)


def test_descriptor_dimension_default():
    grid = HashGrid(HashGridConfig(), UNIT_BBOX)
    h = grid.encode(np.array([[0.3, 0.4, 0.5]]))
    assert h.shape == (1, 64)  # L=16 * F=4


def test_encode_at_vertex_hits_table_entry():
    grid = small_grid()
    # (0,0,0) is a lattice vertex of every level
    h = grid.encode(np.zeros((1, 3)))
    for level in range(grid.config.levels):
        idx = grid.corner_indices(np.zeros((1, 3)))[level][0][0, 0]
        f = grid.config.feature_dim
        assert np.allclose(h[0, level * f:(level + 1) * f], grid.tables[level][idx])


def test_encode_at_cell_center_is_corner_mean():
    grid = small_grid()
    level = 1  # resolution 4 at these settings
    r = grid.resolutions[level]
    x = np.array([[0.5 / r, 0.5 / r, 0.5 / r]])
    idx, w = grid.corner_indices(x)[level]
    assert np.allclose(w, 0.125)
    f = grid.config.feature_dim
    feat = grid.encode(x)[0, level * f:(level + 1) * f]
    assert np.allclose(feat, grid.tables[level][idx[0]].mean(axis=0))


def test_weights_partition_of_unity():
    grid = small_grid(seed=3)
    pts = np.random.default_rng(0).uniform(0, 1, (50, 3))
    for idx, w in grid.corner_indices(pts):
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
    grid.tables[:] = 1.0
    assert np.allclose(grid.encode(pts), 1.0, atol=1e-12)


def test_encode_linearity_in_tables():
    cfg = HashGridConfig(levels=4, r_min=2, r_max=16, table_size=1 << 12, feature_dim=3)
    pts = np.random.default_rng(1).uniform(0, 1, (20, 3))
    ga = HashGrid(cfg, UNIT_BBOX)
    gb = HashGrid(cfg, UNIT_BBOX)
    gb.tables = np.random.default_rng(2).normal(size=gb.tables.shape)
    gsum = HashGrid(cfg, UNIT_BBOX, tables=ga.tables + gb.tables)
    assert np.allclose(gsum.encode(pts), ga.encode(pts) + gb.encode(pts), atol=1e-12)


def test_encode_deterministic():
    grid = small_grid(seed=9)
    pts = np.random.default_rng(4).uniform(0, 1, (100, 3))
    a = grid.encode(pts)
    b = grid.encode(pts)
    assert np.array_equal(a, b)


def test_out_of_bbox_clamped():
    grid = small_grid()
    inside = grid.encode(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))
    outside = grid.encode(np.array([[-5.0, -1.0, -0.1], [2.0, 7.0, 1.5]]))
    assert np.allclose(inside, outside)


def test_dense_levels_are_collision_free():
    grid = small_grid()
    level = 0  # (2+1)^3 = 27 <= table_size
    assert grid._level_dense(level)
    r = grid.resolutions[level]
    # query all cell centers; their stencils cover every lattice vertex once
    centers = np.stack(np.meshgrid(*[(np.arange(r) + 0.5) / r] * 3, indexing="ij"),
                       -1).reshape(-1, 3)
    idx, _ = grid.corner_indices(centers)[level]
    assert len(np.unique(idx)) == (r + 1) ** 3


def test_always_hash_flag():
    cfg = HashGridConfig(levels=4, r_min=2, r_max=16, table_size=1 << 12,
                         feature_dim=3, always_hash=True)
    grid = HashGrid(cfg, UNIT_BBOX)
    assert not grid._level_dense(0)


def test_encode_backward_zero_upstream():
    grid = small_grid()
    grads = grid.encode_backward(np.array([[0.2, 0.3, 0.4]]),
                                 np.zeros(grid.config.descriptor_dim))
    for _, g in grads:
        assert np.all(g == 0.0)


def test_encode_backward_vertex_full_weight():
    grid = small_grid()
    up = np.ones(grid.config.descriptor_dim)
    grads = grid.encode_backward(np.zeros((1, 3)), up)
    for level, (idx, g) in enumerate(grads):
        totals = g.sum(axis=0)
        assert np.allclose(totals, 1.0)   # weights sum to 1 per level
        assert np.isclose(g.max(), 1.0)   # all weight on one vertex


def test_encode_backward_finite_difference():
    grid = small_grid(seed=5)
    pts = np.random.default_rng(6).uniform(0.05, 0.95, (7, 3))
    rng = np.random.default_rng(7)
    up = rng.normal(size=(7, grid.config.descriptor_dim))
    grads = grid.encode_backward(pts, up)
    eps = 1e-4
    for level, (idx, g) in enumerate(grads):
        if len(idx) == 0:
            continue
        pick = rng.integers(len(idx))
        f_dim = rng.integers(grid.config.feature_dim)
        delta = np.zeros_like(grid.tables)
        delta[level, idx[pick], f_dim] = eps
        plus = HashGrid(grid.config, grid.bbox, grid.tables + delta).encode(pts)
        minus = HashGrid(grid.config, grid.bbox, grid.tables - delta).encode(pts)
        fd = float(np.sum((plus - minus) / (2 * eps) * up))
        assert fd == pytest.approx(g[pick, f_dim], abs=1e-6)


def test_positions_bbox_margin():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 4.0]])
    bbox = positions_bbox(pts, margin=0.05)
    assert np.allclose(bbox[0], [-0.05, -0.1, -0.2])
    assert np.allclose(bbox[1], [1.05, 2.1, 4.2])
