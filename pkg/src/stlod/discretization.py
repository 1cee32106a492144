"""Shared fine/coarse operators for one (mesh pair, temporal grid, coefficient) triple."""
from __future__ import annotations

import hashlib
import struct
import threading

import numpy as np
import scipy.sparse as sp

from . import assembly
from .coefficient import Coefficient, check_compatible
from .grid import SpatialMeshPair, TemporalGrid
from .interpolation import build_quasi_interpolation


class Discretization:
    """Global matrices, slab bookkeeping and fingerprint.

    Stiffness matrices are cached per coefficient slab; every fine step uses the
    slab that contains its midpoint.
    """

    def __init__(self, pair: SpatialMeshPair, tgrid: TemporalGrid, coeff: Coefficient):
        check_compatible(coeff, pair.fine, tgrid)
        self.pair = pair
        self.tgrid = tgrid
        self.coeff = coeff
        fine, coarse = pair.fine, pair.coarse
        self.interp = build_quasi_interpolation(pair)
        self.I_H = self.interp.matrix
        self.P = self.interp.prolongation
        self.P_all = pair.prolongation_all
        self.M_all = assembly.mass_matrix(fine, "all")
        self.M = self.M_all[fine.interior_nodes][:, fine.interior_nodes].tocsr()
        self.M_H = assembly.mass_matrix(coarse, "interior")
        self.local_mass = assembly.local_mass(fine)
        self.local_stiffness = assembly.local_stiffness(fine)
        tau = tgrid.fine_step
        self.step_slab = np.array(
            [coeff.slab_of_step(n, tau) for n in range(1, tgrid.n_fine_steps + 1)], dtype=np.int64
        )
        self._lock = threading.Lock()
        self._kappa = {}
        self._S_all = {}
        self._S = {}
        self._PtS = {}
        self._PtSP = {}
        self._PtM = None
        self._fingerprint = None

    # ---- time bookkeeping

    def slab(self, step: int) -> int:
        """Coefficient slab of global fine step ``step`` (1-based)."""
        return int(self.step_slab[step - 1])

    def interval_signature(self, j: int) -> tuple:
        Nt = self.tgrid.fine_per_coarse
        return tuple(self.step_slab[(j - 1) * Nt: j * Nt].tolist())

    @property
    def periodic_intervals(self) -> bool:
        """True when every coarse interval sees the same slab sequence."""
        sigs = {self.interval_signature(j) for j in range(1, self.tgrid.coarse_steps + 1)}
        return len(sigs) == 1

    @property
    def slabs(self) -> list[int]:
        return sorted(set(self.step_slab.tolist()))

    # ---- matrices

    def kappa(self, s: int) -> np.ndarray:
        k = self._kappa.get(s)
        if k is None:
            fine = self.pair.fine
            ix = np.clip(np.floor(fine.centroids[:, 0] * self.coeff.cells_per_side).astype(int), 0, self.coeff.cells_per_side - 1)
            iy = np.clip(np.floor(fine.centroids[:, 1] * self.coeff.cells_per_side).astype(int), 0, self.coeff.cells_per_side - 1)
            k = self.coeff.values[ix, iy, s].copy()
            self._kappa[s] = k
        return k

    def S_all(self, s: int) -> sp.csr_matrix:
        with self._lock:
            S = self._S_all.get(s)
            if S is None:
                S = assembly.assemble(self.pair.fine, self.local_stiffness, self.kappa(s), dof_set="all")
                self._S_all[s] = S
            return S

    def S(self, s: int) -> sp.csr_matrix:
        """Interior stiffness for slab ``s``."""
        S = self._S.get(s)
        if S is None:
            idx = self.pair.fine.interior_nodes
            S = self.S_all(s)[idx][:, idx].tocsr()
            with self._lock:
                self._S[s] = S
        return S

    def S_step(self, step: int) -> sp.csr_matrix:
        return self.S(self.slab(step))

    @property
    def PtM(self) -> sp.csr_matrix:
        if self._PtM is None:
            self._PtM = (self.P.T @ self.M).tocsr()
        return self._PtM

    def PtS(self, s: int) -> sp.csr_matrix:
        A = self._PtS.get(s)
        if A is None:
            A = (self.P.T @ self.S(s)).tocsr()
            with self._lock:
                self._PtS[s] = A
        return A

    def PtSP(self, s: int) -> np.ndarray:
        A = self._PtSP.get(s)
        if A is None:
            A = (self.PtS(s) @ self.P).toarray()
            with self._lock:
                self._PtSP[s] = A
        return A

    @property
    def PtMP(self) -> np.ndarray:
        return (self.PtM @ self.P).toarray()

    def element_vectors(self, K: int, values_all: np.ndarray, s: int | None = None) -> np.ndarray:
        """``M_K v`` (or ``S_K v`` for slab ``s``) on all fine nodes, integrating over coarse element ``K`` only."""
        fine = self.pair.fine
        children = self.pair.element_children[K]
        local = self.local_mass[children] if s is None else self.local_stiffness[children] * self.kappa(s)[children, None, None]
        conn = fine.elements[children]
        v = np.asarray(values_all)
        vals = np.einsum("eij,ej...->ei...", local, v[conn])
        out = np.zeros((fine.n_nodes,) + v.shape[1:])
        np.add.at(out, conn.ravel(), vals.reshape((-1,) + v.shape[1:]))
        return out

    # ---- identity

    @property
    def fingerprint(self) -> bytes:
        if self._fingerprint is None:
            h = hashlib.sha256()
            g = self.tgrid
            h.update(struct.pack(
                "<IIdII", self.pair.coarse.exponent, self.pair.fine.exponent,
                g.t_final, g.coarse_steps, g.fine_per_coarse,
            ))
            c = self.coeff
            h.update(struct.pack("<ddBd3I", c.eps_x, c.eps_t, int(c.time_periodic), c.period, *c.values.shape))
            h.update(np.ascontiguousarray(c.values, dtype="<f8").tobytes())
            self._fingerprint = h.digest()
        return self._fingerprint
