"""Coarse multiscale system, sequential coarse solves, fine reconstruction and fine reference solvers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import load_vector
from .corrector import CorrectorOperator, apply_corrector, check_operator
from .discretization import Discretization
from .errors import InvalidArgumentError, NumericalFailure


def fine_loads(disc: Discretization, f, rule: str = "nodal") -> np.ndarray:
    """Fine load vectors per fine step, ``(N_T*N_t, n_h)``; ``f(x, y, t)``."""
    t = disc.tgrid.fine_nodes
    return np.stack([load_vector(f, disc.pair.fine, t[n - 1], t[n], rule) for n in range(1, len(t))])


def coarse_loads(disc: Discretization, f=None, loads=None, rule: str = "nodal") -> np.ndarray:
    """``F_j = P^T`` (sum of fine loads inside coarse interval ``j``), shape ``(N_T, n_H)``."""
    if loads is None:
        loads = fine_loads(disc, f, rule)
    g = disc.tgrid
    per = loads.reshape(g.coarse_steps, g.fine_per_coarse, -1).sum(axis=1)
    return (disc.P.T @ per.T).T


def _cn_factor(disc, s):
    tau = disc.tgrid.fine_step
    return splu((disc.M + 0.5 * tau * disc.S(s)).tocsc())


def solve_reference_fine(disc: Discretization, f=None, loads=None, rule: str = "nodal") -> np.ndarray:
    """Crank-Nicolson on the fine mesh; values at every fine time node, ``u^0 = 0``."""
    if loads is None:
        loads = fine_loads(disc, f, rule)
    return _cn_sweep(disc, loads)


def _cn_sweep(disc, loads):
    tau = disc.tgrid.fine_step
    N = disc.tgrid.n_fine_steps
    U = np.zeros((N + 1, disc.pair.fine.n_interior) + loads.shape[2:])
    lus = {}
    for n in range(1, N + 1):
        s = disc.slab(n)
        if s not in lus:
            lus[s] = _cn_factor(disc, s)
        rhs = loads[n - 1] + disc.M @ U[n - 1] - 0.5 * tau * (disc.S(s) @ U[n - 1])
        U[n] = lus[s].solve(rhs)
    return U


def solve_ideal(disc: Discretization, f=None, loads=None, rule: str = "nodal") -> np.ndarray:
    """Non-localized multiscale solution, computed without correctors.

    The ideal method is equivalent to the fine CN scheme whose source is replaced by
    its coarse-tent projection: on every fine step of coarse interval ``J`` the load is
    ``(tau/T) I_H^T F_J``.
    """
    g = disc.tgrid
    F = coarse_loads(disc, f, loads, rule)
    proj = (g.fine_step / g.coarse_step) * (disc.I_H.T @ F.T).T
    return _cn_sweep(disc, np.repeat(proj, g.fine_per_coarse, axis=0))


@dataclass(eq=False)
class CoarseSystem:
    disc: Discretization
    op: CorrectorOperator
    band: int  # largest offset m with nonzero blocks (ell + 1)
    blocks: dict  # (j, m) -> csr, or m -> csr when periodic_blocks
    periodic_blocks: bool
    solve_log: list = field(default_factory=list)
    _lu: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.disc.tgrid.coarse_steps

    @property
    def n_coarse(self) -> int:
        return self.disc.pair.coarse.n_interior

    def block(self, j: int, m: int):
        if m < 0 or m > self.band or j - m < 1:
            return None
        return self.blocks.get(m if self.periodic_blocks else (j, m))

    def dense_block(self, j: int, m: int) -> np.ndarray:
        B = self.block(j, m)
        return np.zeros((self.n_coarse, self.n_coarse)) if B is None else B.toarray()

    def step_solver(self, j: int):
        key = 0 if self.periodic_blocks else j
        lu = self._lu.get(key)
        if lu is None:
            G0 = self.block(j, 0)
            try:
                lu = splu(G0.tocsc())
            except RuntimeError as exc:
                raise NumericalFailure(f"coarse step matrix {j} is singular") from exc
            self._lu[key] = lu
        return lu


def _coarse_identity_blocks(disc, j):
    """Blocks of the uncorrected coarse pyramids: offset 0 (rising) and 1 (falling)."""
    g = disc.tgrid
    Nt, tau = g.fine_per_coarse, g.fine_step
    sig = disc.interval_signature(j)
    PtMP = disc.PtMP
    up = PtMP.copy()
    down = -PtMP
    for n, s in enumerate(sig, start=1):
        a = (2 * n - 1) / (2 * Nt)  # mean of the rising pyramid over step n
        up += tau * a * disc.PtSP(s)
        down += tau * (1 - a) * disc.PtSP(s)
    return up, down


def _template_contributions(disc, tmpl, i0, need_ramp, sig_of):
    """Per interval offset q, the CN pairing of every chain column with all coarse tents."""
    Nt, tau = disc.tgrid.fine_per_coarse, disc.tgrid.fine_step
    W = tmpl.series(tmpl.n_int, need_ramp)
    RM = disc.PtM[:, tmpl.act]
    out = []
    for q in range(tmpl.n_int + int(need_ramp)):
        w = W[q * Nt:(q + 1) * Nt + 1]
        acc = RM @ (w[-1] - w[0])
        sums = {}
        for n, s in enumerate(sig_of(i0 + q), start=1):
            sums[s] = sums.get(s, 0.0) + (w[n - 1] + w[n])
        for s, v in sums.items():
            acc += 0.5 * tau * (disc.PtS(s)[:, tmpl.act] @ v)
        out.append(acc)
    return out


def assemble_coarse_system(op: CorrectorOperator, disc: Discretization) -> CoarseSystem:
    check_operator(op, disc)
    NT = disc.tgrid.coarse_steps
    periodic = op.reuse
    band = min(op.ell + 1, NT - 1) if NT > 1 else 0
    coarse = disc.pair.coarse
    dof = coarse.interior_index
    nH = coarse.n_interior
    trip = {}

    def add(key, col, vec):
        rows = np.flatnonzero(vec)
        if rows.size:
            trip.setdefault(key, []).append((rows, np.full(rows.size, col), vec[rows]))

    if periodic:
        sig1 = disc.interval_signature(1)
        sig_of = lambda j: sig1  # noqa: E731
    else:
        sig_of = disc.interval_signature

    by_tmpl = {}
    for key, ref in op.blocks.items():
        K, i, z, p = key
        if periodic and p != 1:
            continue
        by_tmpl.setdefault(ref.template, []).append((key, ref))

    for tid in sorted(by_tmpl):
        refs = by_tmpl[tid]
        tmpl = op.templates[tid]
        need_ramp = any(r.ramp for _, r in refs)
        i0 = 1 if periodic else tmpl.i0
        contrib = _template_contributions(disc, tmpl, i0, need_ramp, sig_of)
        for (K, i, z, p), ref in sorted(refs):
            col = dof[z]
            for q in range(ref.n_used + int(ref.ramp)):
                j = i + q
                m = j - p
                add(m if periodic else (j, m), col, contrib[q][:, ref.col])

    blocks = {}
    for key, parts in trip.items():
        rows = np.concatenate([r for r, _, _ in parts])
        cols = np.concatenate([c for _, c, _ in parts])
        vals = np.concatenate([v for _, _, v in parts])
        blocks[key] = sp.csr_matrix((vals, (rows, cols)), shape=(nH, nH))

    def add_dense(key, D):
        B = sp.csr_matrix(D)
        blocks[key] = blocks[key] + B if key in blocks else B

    for j in ([1] if periodic else range(1, NT + 1)):
        up, down = _coarse_identity_blocks(disc, j)
        add_dense(0 if periodic else (j, 0), up)
        if NT > 1 and (periodic or j >= 2):
            add_dense(1 if periodic else (j, 1), down)
    for key in blocks:
        blocks[key].sum_duplicates()
    return CoarseSystem(disc, op, band, blocks, periodic)


def solve_multiscale(system: CoarseSystem, f=None, F=None, rule: str = "nodal") -> np.ndarray:
    """Sequential coarse solve; returns ``u[p-1, y]``, the coarse coefficients at ``T_p``."""
    if F is None:
        F = coarse_loads(system.disc, f, rule=rule)
    NT, nH = system.n_steps, system.n_coarse
    F = np.asarray(F, dtype=float)
    if F.shape[:2] != (NT, nH):
        raise InvalidArgumentError(f"coarse load must have shape ({NT}, {nH}, ...), got {F.shape}")
    U = np.zeros_like(F)
    for j in range(1, NT + 1):
        rhs = F[j - 1].copy()
        for m in range(1, min(system.band, j - 1) + 1):
            B = system.block(j, m)
            if B is not None:
                rhs -= B @ U[j - m - 1]
        lu = system.step_solver(j)
        system.solve_log.append(lu.shape)
        U[j - 1] = lu.solve(rhs)
        if not np.all(np.isfinite(U[j - 1])):
            raise NumericalFailure(f"non-finite coarse solution at step {j}")
    return U


def solve_multi_rhs(system: CoarseSystem, loads: list) -> list:
    """One coarse solve per right-hand side, sharing the step factorizations.

    ``loads`` holds coarse load arrays ``(N_T, n_H)`` (see :func:`coarse_loads`).
    """
    if not loads:
        return []
    stacked = np.stack([np.asarray(F, dtype=float) for F in loads], axis=-1)
    U = solve_multiscale(system, F=stacked)
    return [U[..., r] for r in range(U.shape[-1])]


def prolongate_coarse(disc: Discretization, u: np.ndarray) -> np.ndarray:
    """Fine nodal values of the coarse space-time pyramid expansion at every fine time node."""
    g = disc.tgrid
    Nt = g.fine_per_coarse
    nodes = np.vstack([np.zeros((1,) + u.shape[1:]), u])  # coarse values at T_0..T_NT
    s = np.arange(1, Nt + 1) / Nt
    out = np.zeros((g.n_fine_steps + 1,) + u.shape[1:])
    for j in range(1, g.coarse_steps + 1):
        out[(j - 1) * Nt + 1: j * Nt + 1] = (1 - s)[:, None] * nodes[j - 1] + s[:, None] * nodes[j]
    return (disc.P @ out.T).T


def reconstruct_fine(system: CoarseSystem, u: np.ndarray) -> np.ndarray:
    """``(Id + Q) u`` at every fine time node."""
    return prolongate_coarse(system.disc, u) + apply_corrector(system.op, u, system.disc)
