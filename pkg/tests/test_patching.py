import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from maediff.errors import ConfigError
from maediff.patching import (
    compose_partial, coverage_counts, enumerate_patches, expected_patch_count, grids_for_patch, make_mask,
    mask_stack, visible_grid_table, visible_grids, visible_region,
)


def brute_origins(H, W, p, s):
    """Every placement whose top-left lies on the stride lattice and stays inside the image."""
    return [(i, j) for i in range(H) for j in range(W)
            if i % s == 0 and j % s == 0 and i + p <= H and j + p <= W]


@st.composite
def geometries(draw):
    r = draw(st.sampled_from([1, 2, 4, 8]))
    s = r * draw(st.integers(1, 3))
    p = r * draw(st.integers(2, 6))
    H = p + s * draw(st.integers(0, 4))
    W = p + s * draw(st.integers(0, 4))
    if H % r or W % r:
        return None
    return H, W, p, s, r


@settings(max_examples=60, deadline=None)
@given(g=geometries())
def test_patch_enumeration_oracle(g):
    if g is None:
        return
    H, W, p, s, r = g
    plan = enumerate_patches(H, W, p, s, r)
    assert list(plan.origins) == brute_origins(H, W, p, s)
    assert plan.K == expected_patch_count(H, W, p, s)
    cov = coverage_counts(plan)
    if s <= p:
        assert cov.min() >= 1
    assert cov.sum() == plan.K * p * p
    for k in range(plan.K):
        m = make_mask(plan, k)
        assert m.sum() == p * p
        assert len(grids_for_patch(plan, k)) == (p // r) ** 2
        assert len(visible_grids(plan, k)) == plan.n_grids - (p // r) ** 2


def test_default_96_geometry():
    plan = enumerate_patches(96, 96, 48, 16, 16)
    assert plan.K == 16
    assert plan.n_grids == 36
    cov = coverage_counts(plan)
    assert cov[0, 0] == 1 and cov[0, 95] == 1 and cov[95, 95] == 1
    assert cov[48, 48] == 9
    assert cov.max() == 9
    assert grids_for_patch(plan, 0) == (0, 1, 2, 6, 7, 8, 12, 13, 14)
    assert len(visible_grids(plan, 5)) == 27
    table = visible_grid_table(plan)
    assert table.shape == (16, 27) and table.dtype == torch.long
    for k in range(16):
        assert set(table[k].tolist()) | set(grids_for_patch(plan, k)) == set(range(36))


def test_grid_cells_lie_inside_patch():
    plan = enumerate_patches(64, 64, 32, 16, 16)
    gh, gw = plan.grid_shape
    for k in range(plan.K):
        m = make_mask(plan, k)
        for g in grids_for_patch(plan, k):
            a, b = divmod(g, gw)
            assert m[a * 16:(a + 1) * 16, b * 16:(b + 1) * 16].all()
        for g in visible_grids(plan, k):
            a, b = divmod(g, gw)
            assert not m[a * 16:(a + 1) * 16, b * 16:(b + 1) * 16].any()


def test_single_patch_covering_everything():
    plan = enumerate_patches(32, 32, 32, 16, 16)
    assert plan.K == 1
    assert make_mask(plan, 0).all()
    assert visible_grid_table(plan).shape == (1, 0)


@pytest.mark.parametrize("args", [
    (96, 96, 48, 20, 16),   # H - p not divisible by s
    (96, 96, 48, 16, 48),   # r not smaller than p
    (96, 96, 48, 16, 32),   # s not divisible by r
    (96, 96, 40, 8, 16),    # s not divisible by r
    (96, 96, 100, 4, None),  # patch larger than the image
    (96, 96, 0, 16, None),
])
def test_invalid_geometry(args):
    with pytest.raises(ConfigError):
        enumerate_patches(*args)


def test_index_errors():
    plan = enumerate_patches(64, 64, 32, 16, 16)
    with pytest.raises(IndexError):
        make_mask(plan, plan.K)
    with pytest.raises(IndexError):
        grids_for_patch(plan, -1)
    with pytest.raises(ConfigError):
        enumerate_patches(64, 64, 32, 16).grid_shape


@settings(max_examples=30, deadline=None)
@given(k=st.integers(0, 8), seed=st.integers(0, 1000))
def test_compose_and_visible(k, seed):
    plan = enumerate_patches(64, 64, 32, 16, 16)
    rng = np.random.default_rng(seed)
    x0, xt = rng.normal(size=(64, 64)), rng.normal(size=(64, 64))
    m = make_mask(plan, k)
    comp = compose_partial(xt, x0, m)
    np.testing.assert_array_equal(comp[m], xt[m])
    np.testing.assert_array_equal(comp[~m], x0[~m])
    # the arithmetic form of the composition agrees where the inputs are finite
    np.testing.assert_allclose(comp, m * xt + (1 - m) * x0, atol=0)
    vis = visible_region(x0, m)
    assert np.all(vis[m] == 0)
    np.testing.assert_array_equal(vis[~m], x0[~m])
    # torch path gives the same values
    tm = mask_stack(plan, [k])[0, 0]
    torch.testing.assert_close(compose_partial(torch.from_numpy(xt), torch.from_numpy(x0), tm),
                               torch.from_numpy(comp))
    torch.testing.assert_close(visible_region(torch.from_numpy(x0), tm), torch.from_numpy(vis))


def test_compose_does_not_leak_nan_outside_patch():
    plan = enumerate_patches(64, 64, 32, 16, 16)
    m = make_mask(plan, 0)
    xt = np.full((64, 64), np.nan)
    out = compose_partial(np.where(m, 1.0, xt), np.zeros((64, 64)), m)
    assert np.isfinite(out).all()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        compose_partial(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((4, 4)))


def test_mask_stack_shape():
    plan = enumerate_patches(64, 64, 32, 16, 16)
    st_ = mask_stack(plan, [0, 8, 4])
    assert st_.shape == (3, 1, 64, 64) and st_.dtype == torch.float32
    assert st_.sum().item() == 3 * 32 * 32
