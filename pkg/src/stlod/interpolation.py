"""Projective quasi-interpolation ``I_H = pi_H o Pi_H`` from fine to coarse P1 functions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .assembly import local_mass
from .errors import InvalidArgumentError
from .grid import SpatialMeshPair, barycentric


@dataclass(frozen=True, eq=False)
class InterpolationOperator:
    matrix: sp.csr_matrix  # coarse interior x fine interior
    prolongation: sp.csr_matrix  # fine interior x coarse interior

    @property
    def shape(self):
        return self.matrix.shape


def elementwise_projection_all(pair: SpatialMeshPair) -> sp.csr_matrix:
    """Averaged piecewise L2 projection on all nodes, ``(n_coarse_nodes, n_fine_nodes)``."""
    coarse, fine = pair.coarse, pair.fine
    parent = pair.fine_parent
    verts = fine.elements  # (nf, 3)
    # coarse barycentrics of each fine element's vertices w.r.t. its parent: (nf, 3 fine vtx, 3 coarse loc)
    pts = fine.nodes[verts].reshape(-1, 2)
    lam = barycentric(coarse, np.repeat(parent, 3), pts).reshape(-1, 3, 3)
    mom = np.einsum("eji,eia->eaj", local_mass(fine), lam)  # (nf, a, j): int phi_j lambda_a over e
    Minv = np.linalg.inv(local_mass(coarse))  # (nc, 3, 3)
    coef = np.einsum("eba,eaj->ebj", Minv[parent], mom)
    znodes = coarse.elements[parent]  # (nf, 3) coarse node per local index b
    weight = 1.0 / coarse.node_valence[znodes]
    rows = np.repeat(znodes, 3, axis=1).ravel()
    cols = np.tile(verts, (1, 3)).ravel()
    vals = (coef * weight[:, :, None]).ravel()
    A = sp.csr_matrix((vals, (rows, cols)), shape=(coarse.n_nodes, fine.n_nodes))
    A.sum_duplicates()
    A.eliminate_zeros()
    return A


def build_quasi_interpolation(pair: SpatialMeshPair) -> InterpolationOperator:
    if pair.fine.exponent <= pair.coarse.exponent or len(pair.fine_parent) != pair.fine.n_elements:
        raise InvalidArgumentError("quasi-interpolation needs a nested mesh pair")
    full = elementwise_projection_all(pair)
    I = full[pair.coarse.interior_nodes][:, pair.fine.interior_nodes].tocsr()
    return InterpolationOperator(I, pair.prolongation)


def apply(op: InterpolationOperator, v) -> np.ndarray:
    v = np.asarray(v)
    if v.shape[0] != op.matrix.shape[1]:
        raise InvalidArgumentError(f"expected {op.matrix.shape[1]} fine values, got {v.shape[0]}")
    return op.matrix @ v


def apply_transpose(op: InterpolationOperator, mu) -> np.ndarray:
    mu = np.asarray(mu)
    if mu.shape[0] != op.matrix.shape[0]:
        raise InvalidArgumentError(f"expected {op.matrix.shape[0]} coarse values, got {mu.shape[0]}")
    return op.matrix.T @ mu


def prolongate(op: InterpolationOperator, c) -> np.ndarray:
    c = np.asarray(c)
    if c.shape[0] != op.prolongation.shape[1]:
        raise InvalidArgumentError(f"expected {op.prolongation.shape[1]} coarse values, got {c.shape[0]}")
    return op.prolongation @ c
