"""Uniform triangulations of the unit square, nested mesh pairs, temporal grids and patches.

All meshes split each of the ``2^n x 2^n`` squares along the diagonal from its lower-left
to its upper-right corner. Node ``(i, j)`` (``x = i/N``, ``y = j/N``) has id ``j*(N+1) + i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True, eq=False)
class SpatialMesh:
    exponent: int
    nodes: np.ndarray  # (n_nodes, 2)
    elements: np.ndarray  # (n_elements, 3), counterclockwise
    boundary_mask: np.ndarray  # (n_nodes,) bool
    interior_index: np.ndarray  # node id -> interior dof id, -1 on the boundary

    @property
    def n_per_side(self) -> int:
        return 2**self.exponent

    @property
    def spacing(self) -> float:
        """Side length of the squares, the H (or h) of the experiments."""
        return 2.0**-self.exponent

    @property
    def mesh_size(self) -> float:
        """Longest element diameter."""
        return np.sqrt(2.0) * self.spacing

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @property
    def n_interior(self) -> int:
        return len(self.interior_nodes)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def node_elements(self) -> list[np.ndarray]:
        """Elements incident to each node."""
        order = np.argsort(self.elements.ravel(), kind="stable")
        owners = order // 3
        counts = np.bincount(self.elements.ravel(), minlength=self.n_nodes)
        return np.split(owners, np.cumsum(counts)[:-1])

    @cached_property
    def node_valence(self) -> np.ndarray:
        return np.bincount(self.elements.ravel(), minlength=self.n_nodes)

    @cached_property
    def edges(self) -> np.ndarray:
        e = np.concatenate([self.elements[:, [0, 1]], self.elements[:, [1, 2]], self.elements[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


def build_uniform_mesh(subdivision_exponent: int) -> SpatialMesh:
    n = subdivision_exponent
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgumentError(f"subdivision exponent must be an integer >= 1, got {n!r}")
    n = int(n)
    N = 2**n
    ii, jj = np.meshgrid(np.arange(N + 1), np.arange(N + 1), indexing="xy")
    nodes = np.column_stack([ii.ravel() / N, jj.ravel() / N])

    ci, cj = np.meshgrid(np.arange(N), np.arange(N), indexing="xy")
    ci, cj = ci.ravel(), cj.ravel()
    ll = cj * (N + 1) + ci
    lr = ll + 1
    ul = ll + (N + 1)
    ur = ul + 1
    # square s owns elements 2s (below the diagonal) and 2s+1 (above it)
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    elements = np.empty((2 * N * N, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper

    boundary = (
        np.isclose(nodes[:, 0], 0.0) | np.isclose(nodes[:, 0], 1.0)
        | np.isclose(nodes[:, 1], 0.0) | np.isclose(nodes[:, 1], 1.0)
    )
    interior_index = np.full(len(nodes), -1, dtype=np.int64)
    interior_index[~boundary] = np.arange(int((~boundary).sum()))
    return SpatialMesh(n, nodes, elements, boundary, interior_index)


@dataclass(frozen=True, eq=False)
class SpatialMeshPair:
    coarse: SpatialMesh
    fine: SpatialMesh
    element_children: np.ndarray  # (n_coarse_elements, 4**r) fine element ids
    fine_parent: np.ndarray  # fine element id -> coarse element id
    node_embedding: np.ndarray  # coarse node id -> fine node id

    @property
    def refinement_levels(self) -> int:
        return self.fine.exponent - self.coarse.exponent

    @cached_property
    def prolongation_all(self):
        """Nodal evaluation of coarse P1 functions on all fine nodes, ``(n_fine_nodes, n_coarse_nodes)``."""
        import scipy.sparse as sp

        fine, coarse = self.fine, self.coarse
        parent = locate_in_coarse(coarse, fine.nodes)
        lam = barycentric(coarse, parent, fine.nodes)
        rows = np.repeat(np.arange(fine.n_nodes), 3)
        cols = coarse.elements[parent].ravel()
        vals = lam.ravel()
        keep = np.abs(vals) > 1e-14
        P = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(fine.n_nodes, coarse.n_nodes))
        P.sum_duplicates()
        return P

    @cached_property
    def prolongation(self):
        """Prolongation restricted to interior dofs, ``(n_fine_interior, n_coarse_interior)``."""
        return self.prolongation_all[self.fine.interior_nodes][:, self.coarse.interior_nodes].tocsr()


def locate_in_coarse(mesh: SpatialMesh, points: np.ndarray) -> np.ndarray:
    """Element of ``mesh`` containing each point (ties resolved towards lower indices)."""
    N = mesh.n_per_side
    u = points[:, 0] * N
    v = points[:, 1] * N
    ci = np.clip(np.floor(u + 1e-12).astype(np.int64), 0, N - 1)
    cj = np.clip(np.floor(v + 1e-12).astype(np.int64), 0, N - 1)
    above = (v - cj) - (u - ci) > 1e-12
    return 2 * (cj * N + ci) + above.astype(np.int64)


def barycentric(mesh: SpatialMesh, elems: np.ndarray, points: np.ndarray) -> np.ndarray:
    p = mesh.nodes[mesh.elements[elems]]
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    l1 = ((points[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (points[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])) / det
    l2 = ((b[:, 0] - a[:, 0]) * (points[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (points[:, 0] - a[:, 0])) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def build_mesh_pair(coarse_exponent: int, fine_exponent: int) -> SpatialMeshPair:
    if fine_exponent <= coarse_exponent:
        raise InvalidArgumentError(
            f"fine exponent ({fine_exponent}) must exceed coarse exponent ({coarse_exponent})"
        )
    coarse = build_uniform_mesh(coarse_exponent)
    fine = build_uniform_mesh(fine_exponent)
    parent = locate_in_coarse(coarse, fine.centroids)
    order = np.argsort(parent, kind="stable")
    per = 4 ** (fine_exponent - coarse_exponent)
    children = order.reshape(coarse.n_elements, per)
    r = 2 ** (fine_exponent - coarse_exponent)
    Nc, Nf = coarse.n_per_side, fine.n_per_side
    ci = np.arange(coarse.n_nodes) % (Nc + 1)
    cj = np.arange(coarse.n_nodes) // (Nc + 1)
    embedding = (cj * r) * (Nf + 1) + ci * r
    return SpatialMeshPair(coarse, fine, children, parent, embedding)


@dataclass(frozen=True)
class TemporalGrid:
    t_final: float
    coarse_steps: int
    fine_per_coarse: int

    def __post_init__(self):
        if self.coarse_steps < 1 or self.fine_per_coarse < 1:
            raise InvalidArgumentError("step counts must be >= 1")
        if not self.t_final > 0:
            raise InvalidArgumentError(f"final time must be positive, got {self.t_final}")

    @property
    def coarse_step(self) -> float:
        return self.t_final / self.coarse_steps

    @property
    def fine_step(self) -> float:
        return self.coarse_step / self.fine_per_coarse

    @property
    def n_fine_steps(self) -> int:
        return self.coarse_steps * self.fine_per_coarse

    @property
    def coarse_nodes(self) -> np.ndarray:
        return self.coarse_step * np.arange(self.coarse_steps + 1)

    @property
    def fine_nodes(self) -> np.ndarray:
        return self.fine_step * np.arange(self.n_fine_steps + 1)

    def interval_fine_nodes(self, j: int) -> np.ndarray:
        """Fine time nodes in the closed coarse interval ``[T_{j-1}, T_j]`` (1-based ``j``)."""
        self._check_interval(j)
        n0 = (j - 1) * self.fine_per_coarse
        return self.fine_step * np.arange(n0, n0 + self.fine_per_coarse + 1)

    def interval_steps(self, j: int) -> np.ndarray:
        """Global 1-based indices of the fine steps inside coarse interval ``j``."""
        self._check_interval(j)
        return (j - 1) * self.fine_per_coarse + np.arange(1, self.fine_per_coarse + 1)

    def step_midpoint(self, step) -> np.ndarray:
        return (np.asarray(step) - 0.5) * self.fine_step

    def _check_interval(self, j):
        if not 1 <= j <= self.coarse_steps:
            raise InvalidArgumentError(f"coarse interval {j} outside 1..{self.coarse_steps}")


def build_temporal_grid(t_final: float, coarse_steps: int, fine_per_coarse: int) -> TemporalGrid:
    return TemporalGrid(float(t_final), int(coarse_steps), int(fine_per_coarse))


@dataclass(frozen=True, eq=False)
class Patch:
    center_element: int
    radius: int
    coarse_elements: np.ndarray
    fine_elements: np.ndarray
    fine_nodes_active: np.ndarray  # global fine node ids
    fine_dofs: np.ndarray  # global fine interior dof ids, same order
    coarse_nodes_active: np.ndarray
    coarse_dofs: np.ndarray
    is_global: bool = field(default=False)

    @property
    def n_fine(self) -> int:
        return len(self.fine_dofs)

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_dofs)

    def restrict(self, global_fine: np.ndarray) -> np.ndarray:
        """Global fine interior vector(s) (last axis) to patch-local numbering."""
        return np.asarray(global_fine)[..., self.fine_dofs]

    def extend(self, local: np.ndarray, n_fine_interior: int) -> np.ndarray:
        """Zero extension of patch-local values to the global fine interior numbering."""
        local = np.asarray(local)
        out = np.zeros(local.shape[:-1] + (n_fine_interior,), dtype=local.dtype)
        out[..., self.fine_dofs] = local
        return out


def neighborhood(mesh: SpatialMesh, elements: np.ndarray) -> np.ndarray:
    """All elements whose closure meets the closure of the given element set."""
    verts = np.unique(mesh.elements[elements].ravel())
    return np.unique(np.concatenate([mesh.node_elements[v] for v in verts]))


def patch_elements(mesh: SpatialMesh, K: int, k: int) -> np.ndarray:
    """Coarse elements of ``N^k(K)``; ``k = 0`` gives ``{K}``."""
    if not 0 <= K < mesh.n_elements:
        raise InvalidArgumentError(f"element {K} outside 0..{mesh.n_elements - 1}")
    if k < 0:
        raise InvalidArgumentError(f"patch radius must be >= 0, got {k}")
    current = np.array([K])
    for _ in range(k):
        grown = neighborhood(mesh, current)
        if len(grown) == len(current):
            break
        current = grown
    return current


def saturating_radius(mesh: SpatialMesh) -> int:
    """A radius for which every patch covers the whole mesh."""
    return 2 * mesh.n_per_side + 1


def _strictly_inside(mesh: SpatialMesh, elements: np.ndarray) -> np.ndarray:
    """Interior nodes all of whose incident elements belong to ``elements``."""
    inside = np.zeros(mesh.n_elements, dtype=bool)
    inside[elements] = True
    counts = np.bincount(mesh.elements[elements].ravel(), minlength=mesh.n_nodes)
    full = (counts == mesh.node_valence) & (counts > 0) & ~mesh.boundary_mask
    return np.flatnonzero(full)


def patch(pair: SpatialMeshPair, K: int, k: int) -> Patch:
    if k < 1:
        raise InvalidArgumentError(f"patch radius must be >= 1, got {k}")
    coarse_el = patch_elements(pair.coarse, K, k)
    fine_el = np.sort(pair.element_children[coarse_el].ravel())
    fine_nodes = _strictly_inside(pair.fine, fine_el)
    coarse_nodes = _strictly_inside(pair.coarse, coarse_el)
    return Patch(
        center_element=int(K),
        radius=int(k),
        coarse_elements=coarse_el,
        fine_elements=fine_el,
        fine_nodes_active=fine_nodes,
        fine_dofs=pair.fine.interior_index[fine_nodes],
        coarse_nodes_active=coarse_nodes,
        coarse_dofs=pair.coarse.interior_index[coarse_nodes],
        is_global=len(coarse_el) == pair.coarse.n_elements,
    )
