import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stlod.errors import InvalidArgumentError
from stlod.grid import (
    build_mesh_pair,
    build_temporal_grid,
    build_uniform_mesh,
    patch,
    patch_elements,
    saturating_radius,
)


@pytest.mark.parametrize("n, ne, nn, ni", [(1, 8, 9, 1), (2, 32, 25, 9), (3, 128, 81, 49)])
def test_mesh_counts(n, ne, nn, ni):
    m = build_uniform_mesh(n)
    assert (m.n_elements, m.n_nodes, m.n_interior) == (ne, nn, ni)
    assert m.areas.sum() == pytest.approx(1.0, abs=1e-14)


def test_mesh_orientation_and_spacing():
    m = build_uniform_mesh(2)
    p = m.nodes[m.elements]
    a, b = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    assert np.all(cross > 0)
    assert m.spacing == 0.25
    assert m.mesh_size == pytest.approx(np.sqrt(2) / 4)
    # node (i, j) has id j*(N+1)+i
    assert np.allclose(m.nodes[2 * 5 + 3], [0.75, 0.5])


def test_boundary_mask():
    m = build_uniform_mesh(2)
    x, y = m.nodes.T
    on = (x == 0) | (x == 1) | (y == 0) | (y == 1)
    assert np.array_equal(m.boundary_mask, on)
    assert np.array_equal(m.interior_index[m.interior_nodes], np.arange(m.n_interior))


def test_bad_exponent():
    with pytest.raises(InvalidArgumentError):
        build_uniform_mesh(0)
    with pytest.raises(InvalidArgumentError):
        build_mesh_pair(2, 2)


@pytest.mark.parametrize("nc, nf, kids", [(1, 2, 4), (1, 3, 16), (2, 4, 16)])
def test_children(nc, nf, kids):
    pair = build_mesh_pair(nc, nf)
    assert pair.element_children.shape == (pair.coarse.n_elements, kids)
    assert np.array_equal(np.sort(pair.element_children.ravel()), np.arange(pair.fine.n_elements))
    # every child lies inside its parent
    for K in range(pair.coarse.n_elements):
        assert pair.fine.areas[pair.element_children[K]].sum() == pytest.approx(pair.coarse.areas[K])
        assert np.all(pair.fine_parent[pair.element_children[K]] == K)


def test_prolongation_kronecker():
    pair = build_mesh_pair(2, 4)
    P = pair.prolongation_all.toarray()
    at_coarse = P[pair.node_embedding]
    assert np.allclose(at_coarse, np.eye(pair.coarse.n_nodes))
    assert np.allclose(P.sum(axis=1), 1.0)  # partition of unity


def test_prolongation_reproduces_linear():
    pair = build_mesh_pair(1, 3)
    c = 2.0 + 3.0 * pair.coarse.nodes[:, 0] - pair.coarse.nodes[:, 1]
    f = pair.prolongation_all @ c
    assert np.allclose(f, 2.0 + 3.0 * pair.fine.nodes[:, 0] - pair.fine.nodes[:, 1])


def test_temporal_grid():
    g = build_temporal_grid(1.25, 10, 16)
    assert g.coarse_step == 0.125 and g.fine_step == 0.0078125
    g = build_temporal_grid(1.0, 1, 1)
    assert np.allclose(g.coarse_nodes, [0.0, 1.0])
    g = build_temporal_grid(1.0, 4, 8)
    assert np.allclose(g.interval_fine_nodes(1), np.arange(9) / 32)
    with pytest.raises(InvalidArgumentError):
        build_temporal_grid(1.0, 0, 2)


def _criss_cross_interior_element(mesh):
    N = mesh.n_per_side
    s = (N // 2) * N + N // 2
    return 2 * s


def test_patch_k1_interior():
    pair = build_mesh_pair(3, 4)
    K = _criss_cross_interior_element(pair.coarse)
    el = patch_elements(pair.coarse, K, 1)
    verts = set(pair.coarse.elements[K])
    expected = [e for e in range(pair.coarse.n_elements) if verts & set(pair.coarse.elements[e])]
    assert np.array_equal(el, expected)
    assert len(el) == 13


def test_patch_boundary_truncation_and_saturation():
    pair = build_mesh_pair(2, 3)
    K_int = _criss_cross_interior_element(pair.coarse)
    assert len(patch_elements(pair.coarse, 0, 1)) < len(patch_elements(pair.coarse, K_int, 1))
    p = patch(pair, 0, saturating_radius(pair.coarse))
    assert p.is_global and len(p.coarse_elements) == pair.coarse.n_elements
    assert p.n_fine == pair.fine.n_interior and p.n_coarse == pair.coarse.n_interior


def test_patch_restrict_extend():
    pair = build_mesh_pair(2, 4)
    p = patch(pair, 5, 1)
    v = np.random.default_rng(0).random(pair.fine.n_interior)
    back = p.extend(p.restrict(v), pair.fine.n_interior)
    assert np.array_equal(back[p.fine_dofs], v[p.fine_dofs])
    assert np.count_nonzero(back) == p.n_fine
    with pytest.raises(InvalidArgumentError):
        patch(pair, 5, 0)


def _layers_bfs(mesh, K, k):
    """Reference: element graph distance through shared vertices."""
    dist = {K: 0}
    frontier = [K]
    for d in range(1, k + 1):
        nxt = []
        for e in frontier:
            for v in mesh.elements[e]:
                for f in range(mesh.n_elements):
                    if f not in dist and v in mesh.elements[f]:
                        dist[f] = d
                        nxt.append(f)
        frontier = nxt
    return sorted(dist)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 127), st.integers(0, 6))
def test_patch_matches_bfs(K, k):
    mesh = build_uniform_mesh(3)
    assert patch_elements(mesh, K, k).tolist() == _layers_bfs(mesh, K, k)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 31), st.integers(1, 4))
def test_patch_monotone(K, k):
    pair = build_mesh_pair(2, 3)
    small, big = patch(pair, K, k), patch(pair, K, k + 1)
    assert set(small.coarse_elements) <= set(big.coarse_elements)
    assert set(small.fine_dofs) <= set(big.fine_dofs)
    # active fine nodes lie strictly inside the patch: all incident fine elements belong to it
    inside = set(small.fine_elements)
    for node in small.fine_nodes_active:
        assert set(pair.fine.node_elements[node]) <= inside
