"""P1 mass and stiffness matrices, element-restricted variants and space-time load vectors."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError

_REF_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def local_mass(mesh) -> np.ndarray:
    """Element mass matrices, shape ``(n_elements, 3, 3)``."""
    return mesh.areas[:, None, None] * _REF_MASS


def local_gradients(mesh) -> np.ndarray:
    """Gradients of the three barycentric coordinates on each element, shape ``(n_elements, 3, 2)``."""
    p = mesh.nodes[mesh.elements]
    e1 = p[:, 2] - p[:, 1]
    e2 = p[:, 0] - p[:, 2]
    e3 = p[:, 1] - p[:, 0]
    rot = np.stack([e1, e2, e3], axis=1)
    # grad lambda_i is the opposite edge rotated by -90 degrees over twice the area
    g = np.stack([-rot[..., 1], rot[..., 0]], axis=-1)
    return g / (2.0 * mesh.areas)[:, None, None]


def local_stiffness(mesh) -> np.ndarray:
    g = local_gradients(mesh)
    return mesh.areas[:, None, None] * np.einsum("eik,ejk->eij", g, g)


def _dof_map(mesh, dof_set: str):
    if dof_set == "all":
        return np.arange(mesh.n_nodes), mesh.n_nodes
    if dof_set == "interior":
        return mesh.interior_index, mesh.n_interior
    raise InvalidArgumentError(f"dof_set must be 'interior' or 'all', got {dof_set!r}")


def assemble(mesh, local: np.ndarray, weights=None, elements=None, dof_set: str = "interior") -> sp.csr_matrix:
    """Sum ``weights[e] * local[e]`` over ``elements`` into a sparse matrix on ``dof_set``."""
    if elements is None:
        elements = np.arange(mesh.n_elements)
    elements = np.asarray(elements)
    blocks = local[elements]
    if weights is not None:
        blocks = blocks * np.asarray(weights, dtype=float)[elements, None, None]
    dmap, n = _dof_map(mesh, dof_set)
    conn = dmap[mesh.elements[elements]]
    rows = np.repeat(conn, 3, axis=1).ravel()
    cols = np.tile(conn, (1, 3)).ravel()
    vals = blocks.ravel()
    keep = (rows >= 0) & (cols >= 0)
    A = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))
    A.sum_duplicates()
    return A


def mass_matrix(mesh, dof_set: str = "interior") -> sp.csr_matrix:
    return assemble(mesh, local_mass(mesh), dof_set=dof_set)


def stiffness_from_values(mesh, kappa, dof_set: str = "interior", elements=None) -> sp.csr_matrix:
    """Stiffness matrix for a per-element scalar coefficient ``kappa`` (a scalar is broadcast)."""
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (mesh.n_elements,))
    return assemble(mesh, local_stiffness(mesh), kappa, elements, dof_set)


def stiffness_matrix(mesh, coeff, fine_interval_index: int, dof_set: str = "interior", *, fine_step: float) -> sp.csr_matrix:
    """Stiffness with the coefficient frozen at ``t_{i-1/2}`` of fine step ``i`` (1-based)."""
    if fine_interval_index < 1:
        raise InvalidArgumentError(f"fine interval index must be >= 1, got {fine_interval_index}")
    t = (fine_interval_index - 0.5) * fine_step
    return stiffness_from_values(mesh, coeff.values_at(mesh.centroids, t), dof_set)


def element_restricted_matrices(pair, coeff, K: int, fine_interval_index: int, dof_set: str = "interior", *, fine_step: float):
    """Fine mass and stiffness integrated over the coarse element ``K`` only."""
    if not 0 <= K < pair.coarse.n_elements:
        raise InvalidArgumentError(f"coarse element {K} out of range")
    fine = pair.fine
    children = pair.element_children[K]
    t = (fine_interval_index - 0.5) * fine_step
    kappa = coeff.values_at(fine.centroids, t)
    M = assemble(fine, local_mass(fine), None, children, dof_set)
    S = assemble(fine, local_stiffness(fine), kappa, children, dof_set)
    return M, S


@lru_cache(maxsize=8)
def _mass_all_cached(mesh):
    return mass_matrix(mesh, "all")


def _edge_midpoint_load(mesh, g) -> np.ndarray:
    p = mesh.nodes[mesh.elements]
    mids = np.stack([(p[:, 1] + p[:, 2]) / 2, (p[:, 2] + p[:, 0]) / 2, (p[:, 0] + p[:, 1]) / 2], axis=1)
    vals = g(mids[..., 0], mids[..., 1])  # (ne, 3), value at midpoint opposite vertex i
    # phi_i is 1/2 at the two midpoints adjacent to vertex i and 0 at the opposite one
    w = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
    contrib = (mesh.areas / 3.0)[:, None] * (vals @ w.T)
    return np.bincount(mesh.elements.ravel(), contrib.ravel(), minlength=mesh.n_nodes)


def load_vector(f, mesh, t0: float, t1: float, rule: str = "nodal") -> np.ndarray:
    """Interior entries of ``int_{t0}^{t1} int f phi_x dx dt``.

    ``f(x, y, t)`` must accept arrays.  Time uses the midpoint rule.  In space,
    ``rule="nodal"`` integrates the P1 interpolant of ``f`` exactly, and
    ``rule="edge"`` uses the edge-midpoint rule (exact for quadratic ``f``).
    """
    if not t1 > t0:
        raise InvalidArgumentError("load interval must have positive length")
    tau = t1 - t0
    tm = 0.5 * (t0 + t1)
    if rule == "nodal":
        fv = np.broadcast_to(np.asarray(f(mesh.nodes[:, 0], mesh.nodes[:, 1], tm), dtype=float), (mesh.n_nodes,))
        full = _mass_all_cached(mesh) @ fv
    elif rule == "edge":
        full = _edge_midpoint_load(mesh, lambda x, y: np.broadcast_to(np.asarray(f(x, y, tm), dtype=float), x.shape))
    else:
        raise InvalidArgumentError(f"unknown quadrature rule {rule!r}")
    return tau * full[mesh.interior_nodes]
