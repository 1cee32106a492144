import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stlod import assembly
from stlod.errors import InvalidArgumentError
from stlod.grid import build_mesh_pair
from stlod.interpolation import apply, apply_transpose, build_quasi_interpolation, prolongate

from oracles import dense_fem, gauss

PAIR = build_mesh_pair(2, 4)
OP = build_quasi_interpolation(PAIR)


def test_projectivity_on_hats():
    assert np.allclose((OP.matrix @ OP.prolongation).toarray(), np.eye(PAIR.coarse.n_interior), atol=1e-13)
    assert np.allclose(apply(OP, np.zeros(PAIR.fine.n_interior)), 0.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 9, elements=st.floats(-10, 10)))
def test_projectivity(c):
    assert np.allclose(apply(OP, prolongate(OP, c)), c, atol=1e-12)


def test_transpose_shape_and_errors():
    assert apply_transpose(OP, np.ones(9)).shape == (PAIR.fine.n_interior,)
    with pytest.raises(InvalidArgumentError):
        apply(OP, np.ones(5))
    with pytest.raises(InvalidArgumentError):
        apply_transpose(OP, np.ones(5))
    with pytest.raises(InvalidArgumentError):
        prolongate(OP, np.ones(5))


def _elementwise_projection(pair, v_all, K):
    """L2 projection of a fine function onto P1(K) by 3x3 solve with Gauss quadrature on children."""
    coarse, fine = pair.coarse, pair.fine
    pK = coarse.nodes[coarse.elements[K]]
    A = np.column_stack([np.ones(3), pK])
    C = np.linalg.inv(A)
    xq, wq = gauss(3)
    G = np.zeros((3, 3))
    rhs = np.zeros(3)
    for e in pair.element_children[K]:
        p = fine.nodes[fine.elements[e]]
        for s, ws in zip(xq, wq):
            for r, wr in zip(xq, wq):
                # Duffy map of the unit square onto the triangle
                lam = np.array([1 - s, s * (1 - r), s * r])
                jac = s * 2 * fine.areas[e]
                x = lam @ p
                phi = np.array([1.0, *x]) @ C
                val = lam @ v_all[fine.elements[e]]
                G += ws * wr * jac * np.outer(phi, phi)
                rhs += ws * wr * jac * phi * val
    return np.linalg.solve(G, rhs)


def test_against_quadrature_oracle():
    rng = np.random.default_rng(5)
    coarse, fine = PAIR.coarse, PAIR.fine
    v = rng.random(fine.n_interior)
    v_all = np.zeros(fine.n_nodes)
    v_all[fine.interior_nodes] = v
    acc = np.zeros(coarse.n_nodes)
    for K in range(coarse.n_elements):
        acc[coarse.elements[K]] += _elementwise_projection(PAIR, v_all, K)
    ref = (acc / coarse.node_valence)[coarse.interior_nodes]
    assert np.allclose(apply(OP, v), ref, atol=1e-12)


def test_bubble_locality():
    coarse, fine = PAIR.coarse, PAIR.fine
    K = 10
    centroid = coarse.nodes[coarse.elements[K]].mean(axis=0)
    node = int(np.argmin(np.abs(fine.nodes - centroid).sum(axis=1)))
    v = np.zeros(fine.n_interior)
    v[fine.interior_index[node]] = 1.0
    out = apply(OP, v)
    touched = {z for e in fine.node_elements[node] for z in coarse.elements[PAIR.fine_parent[e]]}
    support = set(coarse.interior_nodes[np.flatnonzero(np.abs(out) > 1e-15)])
    assert support <= touched


def test_mass_pairing():
    """(I v)' M_H mu equals the integral of the two coarse functions evaluated on the fine mesh."""
    rng = np.random.default_rng(6)
    MH = assembly.mass_matrix(PAIR.coarse)
    M_f, _ = dense_fem(PAIR.fine)
    inner = PAIR.fine.interior_nodes
    for _ in range(5):
        v = rng.standard_normal(PAIR.fine.n_interior)
        mu = rng.standard_normal(PAIR.coarse.n_interior)
        Iv = apply(OP, v)
        a = Iv @ (MH @ mu)
        b = prolongate(OP, Iv) @ M_f[np.ix_(inner, inner)] @ prolongate(OP, mu)
        assert a == pytest.approx(b, rel=1e-12)
