"""Localized space-time basis correctors.

A corrector chain for coarse element ``K`` starting on coarse interval ``i`` is a
sequence of constrained Crank-Nicolson problems on the patch ``N^k(K)``: the first
interval is driven by the coarse basis functions restricted to ``K x (T_{i-1}, T_i]``,
every later interval by the endpoint value of its predecessor, which is carried
along a linear ramp ``(T_j - t)/T``.  After ``ell`` intervals the last endpoint is
ramped down to zero over one more interval (unless the final time is reached).

The columns of one chain are the basis functions ``phi_z zeta_p`` with ``z`` an
interior vertex of ``K`` and ``p = i`` (rising on interval ``i``) or ``p = i - 1``
(falling on interval ``i``).  Several blocks can share one stored chain ("template"),
e.g. all intervals of a time-periodic problem.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import splu

from .discretization import Discretization
from .errors import FingerprintMismatch, InvalidArgumentError, NumericalFailure
from .grid import Patch, patch as build_patch, saturating_radius

UP, DOWN = 0, -1

# process-wide counters, read by the multi-RHS driver to prove correctors are not recomputed
STATS = {"chains_computed": 0, "interval_solves": 0, "cache_loads": 0}


def reset_stats():
    for key in STATS:
        STATS[key] = 0


class PatchSystem:
    """Patch-restricted CN operators with cached factorizations."""

    def __init__(self, disc: Discretization, patch: Patch):
        self.disc = disc
        self.patch = patch
        act = patch.fine_dofs
        self.act = act
        self.nodes = patch.fine_nodes_active
        self.tau = disc.tgrid.fine_step
        self.M = disc.M[act][:, act].tocsc()
        cd = patch.coarse_dofs
        self.I = disc.I_H[cd][:, act].toarray()
        M_H = disc.M_H[cd][:, cd].toarray()
        self.B = self.tau * self.I.T @ M_H
        self._S = {}
        self._lu = {}
        self._N = {}
        self._schur = {}

    @property
    def n_fine(self):
        return len(self.act)

    @property
    def n_coarse(self):
        return self.I.shape[0]

    def S(self, s):
        S = self._S.get(s)
        if S is None:
            S = self.disc.S(s)[self.act][:, self.act].tocsc()
            self._S[s] = S
        return S

    def _step(self, s):
        lu = self._lu.get(s)
        if lu is None:
            S = self.S(s)
            lu = splu((self.M + 0.5 * self.tau * S).tocsc())
            self._lu[s] = lu
            self._N[s] = (-self.M + 0.5 * self.tau * S).tocsr()
        return lu, self._N[s]

    def sweep(self, sig, F, x0=None) -> np.ndarray:
        """Solve the block-bidiagonal CN system step by step.

        ``F`` has shape ``(Nt, n, c)`` or ``(n, c)`` (same load every step).
        """
        Nt = len(sig)
        n = self.n_fine
        const = F.ndim == 2
        c = F.shape[-1]
        X = np.empty((Nt, n, c))
        prev = x0
        for m, s in enumerate(sig):
            lu, N = self._step(s)
            rhs = F if const else F[m]
            if prev is not None:
                rhs = rhs - N @ prev
            X[m] = lu.solve(np.ascontiguousarray(rhs))
            prev = X[m]
        return X

    def schur(self, sig):
        key = tuple(sig)
        f = self._schur.get(key)
        if f is None:
            X = self.sweep(sig, self.B)
            Sc = self.I @ X[-1]
            lu, piv = sla.lu_factor(Sc, check_finite=False)
            d = np.abs(np.diag(lu))
            if d.size and (not np.all(np.isfinite(d)) or d.min() <= 1e-13 * max(d.max(), 1e-300)):
                raise NumericalFailure(f"singular Schur system on the patch of element {self.patch.center_element}")
            f = (lu, piv)
            self._schur[key] = f
        return f

    def solve_interval(self, sig, F, x0=None):
        """Constrained CN solve on one coarse interval: returns (xi, lam)."""
        STATS["interval_solves"] += 1
        if self.n_coarse == 0:
            return self.sweep(sig, F, x0), np.zeros((0, F.shape[-1]))
        lu = self.schur(sig)
        Y = self.sweep(sig, F, x0)
        lam = sla.lu_solve(lu, self.I @ Y[-1], check_finite=False)
        xi = self.sweep(sig, F - (self.B @ lam)[None], x0)
        return xi, lam

    # right-hand sides

    def basis_drive(self, K, cols, i, sig):
        """Load of ``-A_{K,i}(phi_z zeta_p, .)`` for each column, shape ``(Nt, n, c)``."""
        disc = self.disc
        Nt = len(sig)
        zs = [z for z, _ in cols]
        phi = disc.P_all[:, zs].toarray()
        mK = disc.element_vectors(K, phi)[self.nodes]
        sK = {s: disc.element_vectors(K, phi, s)[self.nodes] for s in set(sig)}
        t = np.arange(Nt + 1) / Nt
        F = np.empty((Nt, self.n_fine, len(cols)))
        for c, (_, dp) in enumerate(cols):
            zeta = t if dp == UP else 1.0 - t
            for n, s in enumerate(sig, start=1):
                F[n - 1, :, c] = -(mK[:, c] * (zeta[n] - zeta[n - 1]) + 0.5 * self.tau * sK[s][:, c] * (zeta[n] + zeta[n - 1]))
        return F

    def carry(self, xi_prev, sig):
        """Load of ``-A(r xi_prev, .)`` with the ramp ``r(t) = (T_j - t)/T`` over one interval."""
        Nt = len(sig)
        coarse_step = Nt * self.tau
        F = np.empty((Nt,) + xi_prev.shape)
        Mx = (self.tau / coarse_step) * (self.M @ xi_prev)
        for n, s in enumerate(sig, start=1):
            r = 1.0 - (n - 0.5) / Nt
            F[n - 1] = Mx - self.tau * r * (self.S(s) @ xi_prev)
        return F


@dataclass(eq=False)
class ChainTemplate:
    K: int
    i0: int  # interval the chain was computed on
    cols: list  # (coarse node id, UP|DOWN)
    act: np.ndarray  # global fine interior dofs
    xi: np.ndarray  # (n_int, Nt, n_act, n_cols), zero initial value per interval
    residual: float = 0.0

    @property
    def n_int(self):
        return self.xi.shape[0]

    def series(self, n_used: int, ramp: bool, coef=None) -> np.ndarray:
        """Total corrector values at the fine time nodes of the window, starting with 0 at ``T_{i-1}``.

        With ``coef`` the columns are combined, otherwise the last axis keeps them apart.
        """
        xi = self.xi[:n_used]
        if coef is not None:
            xi = xi @ coef
        Nt = xi.shape[1]
        r = 1.0 - np.arange(1, Nt + 1) / Nt
        r = r.reshape((Nt,) + (1,) * (xi.ndim - 2))
        L = (n_used + int(ramp)) * Nt
        W = np.zeros((L + 1,) + xi.shape[2:])
        prev = 0.0
        for q in range(n_used):
            W[q * Nt + 1:(q + 1) * Nt + 1] = xi[q] + r * prev
            prev = xi[q, -1]
        if ramp:
            W[n_used * Nt + 1:] = r * prev
        return W


@dataclass(frozen=True)
class BlockRef:
    template: int
    col: int
    n_used: int
    ramp: bool


@dataclass(frozen=True, eq=False)
class CorrectorBlock:
    """One localized basis corrector for source ``(K, i, z, p)``."""
    patch: Patch
    source: tuple
    interval_series: list  # per interval, (Nt, n_act) values without the carried ramp
    ramp_tail: np.ndarray | None
    values: np.ndarray  # total function at fine nodes from T_{i-1}, shape (L+1, n_act)


@dataclass(eq=False)
class CorrectorOperator:
    k: int
    ell: int
    n_coarse_steps: int
    fine_per_coarse: int
    fingerprint: bytes
    reuse: bool
    templates: list
    blocks: dict  # (K, i, z, p) -> BlockRef
    stats: dict = field(default_factory=dict)

    @property
    def max_constraint_residual(self) -> float:
        return max((t.residual for t in self.templates), default=0.0)

    def block_values(self, key) -> tuple[int, np.ndarray, np.ndarray]:
        """(first fine time index, fine dofs, values) of one basis corrector block."""
        ref = self.blocks[key]
        tmpl = self.templates[ref.template]
        e = np.zeros(len(tmpl.cols))
        e[ref.col] = 1.0
        W = tmpl.series(ref.n_used, ref.ramp, e)
        return (key[1] - 1) * self.fine_per_coarse, tmpl.act, W

    def zeroed(self) -> "CorrectorOperator":
        """Copy with every corrector set to zero (debugging and oracle checks)."""
        temps = [ChainTemplate(t.K, t.i0, t.cols, t.act, np.zeros_like(t.xi), 0.0) for t in self.templates]
        return CorrectorOperator(self.k, self.ell, self.n_coarse_steps, self.fine_per_coarse,
                                 self.fingerprint, self.reuse, temps, dict(self.blocks), dict(self.stats))


def interior_vertices(disc: Discretization, K: int) -> list[int]:
    coarse = disc.pair.coarse
    return [int(z) for z in coarse.elements[K] if not coarse.boundary_mask[z]]


def chain_columns(disc, K, i):
    """Rising and falling sources for every interior vertex of ``K``.

    On the first interval the falling columns belong to no trial function; they are
    kept because their sum with the rising ones is the time-constant source used by
    the localization indicators.
    """
    zs = interior_vertices(disc, K)
    return [(z, UP) for z in zs] + [(z, DOWN) for z in zs]


def compute_chain(psys: PatchSystem, K: int, i0: int, cols, n_int: int, sig_of=None) -> ChainTemplate:
    """Run the sequential constrained solves for intervals ``i0 .. i0+n_int-1``."""
    disc = psys.disc
    if sig_of is None:
        sig_of = disc.interval_signature
    xis = []
    residual = 0.0
    prev = None
    for q in range(n_int):
        sig = sig_of(i0 + q)
        F = psys.basis_drive(K, cols, i0, sig) if q == 0 else psys.carry(prev, sig)
        xi, _ = psys.solve_interval(sig, F)
        if psys.n_coarse:
            residual = max(residual, float(np.abs(psys.I @ xi[-1]).max(initial=0.0)))
        xis.append(xi)
        prev = xi[-1]
    STATS["chains_computed"] += 1
    return ChainTemplate(K, i0, list(cols), psys.act, np.stack(xis), residual)


# ---- single-interval and single-block entry points


@dataclass(frozen=True)
class BasisDrive:
    K: int
    i: int
    z: int  # coarse node id
    p: int


@dataclass(frozen=True)
class Carry:
    xi_prev: np.ndarray  # patch-local endpoint values


def solve_constrained_interval(disc: Discretization, patch: Patch, j: int, rhs, psys: PatchSystem | None = None):
    """Solve the constrained CN problem on coarse interval ``j``; returns (xi, lam) for one source."""
    psys = psys or PatchSystem(disc, patch)
    sig = disc.interval_signature(j)
    if isinstance(rhs, BasisDrive):
        if rhs.p not in (rhs.i, rhs.i - 1) or j != rhs.i:
            raise InvalidArgumentError("a basis drive only acts on its own interval with p in {i-1, i}")
        F = psys.basis_drive(rhs.K, [(rhs.z, UP if rhs.p == rhs.i else DOWN)], rhs.i, sig)
    elif isinstance(rhs, Carry):
        F = psys.carry(np.asarray(rhs.xi_prev, dtype=float)[:, None], sig)
    else:
        raise InvalidArgumentError(f"unknown right-hand side {rhs!r}")
    xi, lam = psys.solve_interval(sig, F)
    return xi[..., 0], lam[:, 0]


def _validate(disc, k, ell):
    if k < 1:
        raise InvalidArgumentError(f"patch radius k must be >= 1, got {k}")
    if ell < 1:
        raise InvalidArgumentError(f"temporal truncation ell must be >= 1, got {ell}")


def chain_extent(n_steps: int, i: int, ell: int) -> tuple[int, bool]:
    """Number of solved intervals and whether the down-ramp is present for a chain starting at ``i``."""
    n_used = min(ell, n_steps - i + 1)
    return n_used, i + ell - 1 < n_steps


def compute_basis_corrector(disc: Discretization, K: int, i: int, z: int, p: int, k: int, ell: int) -> CorrectorBlock:
    _validate(disc, k, ell)
    NT = disc.tgrid.coarse_steps
    if not 1 <= i <= NT:
        raise InvalidArgumentError(f"interval {i} outside 1..{NT}")
    if z not in interior_vertices(disc, K) or p not in (i, i - 1) or p < 1:
        raise InvalidArgumentError(f"basis function (z={z}, p={p}) does not meet element {K} on interval {i}")
    pt = build_patch(disc.pair, K, k)
    psys = PatchSystem(disc, pt)
    n_used, ramp = chain_extent(NT, i, ell)
    tmpl = compute_chain(psys, K, i, [(z, UP if p == i else DOWN)], n_used)
    W = tmpl.series(n_used, ramp)[..., 0]
    tail = tmpl.xi[-1, -1, :, 0] if ramp else None
    return CorrectorBlock(pt, (K, i, z, p), [x[..., 0] for x in tmpl.xi], tail, W)


def _keys_for(disc, K, i, cols):
    """Block keys for the chain columns that correspond to actual trial functions."""
    return [(c, (K, i, z, i if dp == UP else i - 1)) for c, (z, dp) in enumerate(cols) if dp == UP or i >= 2]


def _element_task(disc, K, k, ell, reuse, intervals=None):
    NT = disc.tgrid.coarse_steps
    pt = build_patch(disc.pair, K, k)
    psys = PatchSystem(disc, pt)
    out = []  # (template, [(key, col, n_used, ramp)])
    if not interior_vertices(disc, K):
        return out
    if reuse:
        sig1 = disc.interval_signature(1)
        cols = chain_columns(disc, K, 1)
        n_int = min(ell, NT)
        tmpl = compute_chain(psys, K, 1, cols, n_int, sig_of=lambda j: sig1)
        refs = []
        for i in range(1, NT + 1):
            n_used, ramp = chain_extent(NT, i, ell)
            for c, (z, dp) in enumerate(cols):
                if dp == DOWN and i == 1:
                    continue
                refs.append(((K, i, z, i if dp == UP else i - 1), c, n_used, ramp))
        out.append((tmpl, refs))
    else:
        for i in (range(1, NT + 1) if intervals is None else sorted(intervals)):
            cols = chain_columns(disc, K, i)
            n_used, ramp = chain_extent(NT, i, ell)
            tmpl = compute_chain(psys, K, i, cols, n_used)
            refs = [(key, c, n_used, ramp) for c, key in _keys_for(disc, K, i, cols)]
            out.append((tmpl, refs))
    return out


def assemble_corrector_operator(disc: Discretization, k: int, ell: int, worker_count: int = 1,
                                reuse: bool | None = None, progress=None, pairs=None) -> CorrectorOperator:
    """All basis correctors for every coarse element and interval.

    ``reuse=None`` reuses one chain per element whenever every coarse interval sees the
    same coefficient slabs (e.g. a coefficient that is periodic with the coarse step).
    ``pairs`` restricts the computation to the listed ``(K, i)`` (no reuse); such a partial
    operator is only meaningful for correctors of basis functions it fully covers.
    """
    _validate(disc, k, ell)
    if pairs is not None:
        reuse = False
        wanted = {}
        for K, i in pairs:
            wanted.setdefault(int(K), set()).add(int(i))
    if reuse is None:
        reuse = disc.periodic_intervals
    elif reuse and not disc.periodic_intervals:
        raise InvalidArgumentError("corrector reuse needs a coefficient that repeats every coarse interval")
    k = min(int(k), saturating_radius(disc.pair.coarse))
    ell = min(int(ell), disc.tgrid.coarse_steps)
    elements = range(disc.pair.coarse.n_elements) if pairs is None else sorted(wanted)

    def task(K):
        res = _element_task(disc, K, k, ell, reuse, None if pairs is None else wanted[K])
        if progress is not None:
            progress(K)
        return res

    if worker_count > 1:
        with ThreadPoolExecutor(max_workers=worker_count) as ex:
            results = list(ex.map(task, elements))
    else:
        results = [task(K) for K in elements]

    templates, blocks = [], {}
    for res in results:  # merged in element order, independent of scheduling
        for tmpl, refs in res:
            tid = len(templates)
            templates.append(tmpl)
            for key, c, n_used, ramp in refs:
                blocks[key] = BlockRef(tid, c, n_used, ramp)
    return CorrectorOperator(k, ell, disc.tgrid.coarse_steps, disc.tgrid.fine_per_coarse,
                             disc.fingerprint, bool(reuse), templates, blocks,
                             {"max_constraint_residual": max((t.residual for t in templates), default=0.0)})


def truncate_operator(op: CorrectorOperator, ell: int) -> CorrectorOperator:
    """The operator for a smaller temporal truncation, sharing the stored chains."""
    if not 1 <= ell <= op.ell:
        raise InvalidArgumentError(f"can only truncate to 1..{op.ell}, got {ell}")
    NT = op.n_coarse_steps
    blocks = {}
    for key, ref in op.blocks.items():
        n_used, ramp = chain_extent(NT, key[1], ell)
        blocks[key] = BlockRef(ref.template, ref.col, n_used, ramp)
    return CorrectorOperator(op.k, ell, NT, op.fine_per_coarse, op.fingerprint, op.reuse,
                             op.templates, blocks, dict(op.stats))


def basis_keys(disc: Discretization, z: int, p: int) -> list:
    """``(K, i, z, p)`` keys whose blocks add up to the corrector of ``phi_z zeta_p``."""
    NT = disc.tgrid.coarse_steps
    coarse = disc.pair.coarse
    keys = []
    for K in coarse.node_elements[z]:
        keys.append((int(K), p, z, p))
        if p + 1 <= NT:
            keys.append((int(K), p + 1, z, p))
    return sorted(keys)


def check_operator(op: CorrectorOperator, disc: Discretization):
    if op.fingerprint != disc.fingerprint:
        raise FingerprintMismatch("corrector operator was computed for a different discretization")


def apply_corrector(op: CorrectorOperator, coarse: np.ndarray, disc: Discretization) -> np.ndarray:
    """Fine values of ``Q v`` at every fine time node, ``(N_T*N_t + 1, n_fine_interior)``.

    ``coarse[p-1, y]`` is the coefficient of the pyramid at coarse interior dof ``y`` and time ``T_p``.
    """
    coarse = np.asarray(coarse, dtype=float)
    H = disc.pair.coarse
    if coarse.ndim != 2 or coarse.shape[1] != H.n_interior:
        raise InvalidArgumentError(f"expected coarse values of shape (N_T, {H.n_interior}), got {coarse.shape}")
    by_node = np.zeros((coarse.shape[0], H.n_nodes))
    by_node[:, H.interior_nodes] = coarse
    n_fine = disc.pair.fine.n_interior
    NT, Nt = op.n_coarse_steps, op.fine_per_coarse
    if by_node.shape[0] != NT:
        raise InvalidArgumentError(f"expected {NT} coarse time levels, got {by_node.shape[0]}")
    U = np.zeros((NT * Nt + 1, n_fine))
    groups = {}
    for (K, i, z, p), ref in op.blocks.items():
        c = by_node[p - 1, z]
        if c == 0.0:
            continue
        g = groups.setdefault((ref.template, i, ref.n_used, ref.ramp), {})
        g[ref.col] = c
    for (tid, i, n_used, ramp), cs in sorted(groups.items()):
        tmpl = op.templates[tid]
        coef = np.zeros(len(tmpl.cols))
        for col, c in cs.items():
            coef[col] = c
        W = tmpl.series(n_used, ramp, coef)
        t0 = (i - 1) * Nt
        U[t0:t0 + len(W), tmpl.act] += W
    return U


# ---- cache file

MAGIC = b"STLODCORR"
VERSION = 1
_HEAD = struct.Struct("<9sIIIIIIIdB32sII")
_TMPL = struct.Struct("<IIIII")
_COL = struct.Struct("<Ii")
_BLOCK = struct.Struct("<IIIIIIIB")


def save_operator(op: CorrectorOperator, disc: Discretization, path) -> None:
    pair, g = disc.pair, disc.tgrid
    with open(Path(path), "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, op.k, op.ell, pair.coarse.exponent, pair.fine.exponent,
                            g.coarse_steps, g.fine_per_coarse, g.t_final, int(op.reuse), op.fingerprint,
                            len(op.templates), len(op.blocks)))
        for t in op.templates:
            n_int, Nt, na, nc = t.xi.shape
            fh.write(_TMPL.pack(t.K, t.i0, n_int, na, nc))
            for z, dp in t.cols:
                fh.write(_COL.pack(z, dp))
            fh.write(struct.pack("<d", t.residual))
            fh.write(np.ascontiguousarray(t.act, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(t.xi, dtype="<f8").tobytes())
        for key in sorted(op.blocks):
            ref = op.blocks[key]
            fh.write(_BLOCK.pack(*key, ref.template, ref.col, ref.n_used, int(ref.ramp)))


def _read_body(raw, n_t, n_b, Nt):
    pos = _HEAD.size
    templates = []
    for _ in range(n_t):
        K, i0, n_int, na, nc = _TMPL.unpack_from(raw, pos)
        pos += _TMPL.size
        cols = []
        for _ in range(nc):
            z, dp = _COL.unpack_from(raw, pos)
            pos += _COL.size
            cols.append((z, dp))
        (res,) = struct.unpack_from("<d", raw, pos)
        pos += 8
        act = np.frombuffer(raw, "<u4", na, pos).astype(np.int64)
        pos += 4 * na
        cnt = n_int * Nt * na * nc
        xi = np.frombuffer(raw, "<f8", cnt, pos).reshape(n_int, Nt, na, nc).copy()
        pos += 8 * cnt
        templates.append(ChainTemplate(K, i0, cols, act, xi, res))
    blocks = {}
    for _ in range(n_b):
        K, i, z, p, tid, col, n_used, ramp = _BLOCK.unpack_from(raw, pos)
        pos += _BLOCK.size
        blocks[(K, i, z, p)] = BlockRef(tid, col, n_used, bool(ramp))
    return templates, blocks, pos


def load_operator(path, disc: Discretization) -> CorrectorOperator:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size or raw[:9] != MAGIC:
        raise InvalidArgumentError(f"{path}: not a corrector cache file")
    (magic, version, k, ell, nH, nh, NT, Nt, T, reuse, fp, n_t, n_b) = _HEAD.unpack_from(raw)
    if version != VERSION:
        raise InvalidArgumentError(f"{path}: unsupported corrector cache version {version}")
    if fp != disc.fingerprint:
        raise FingerprintMismatch(f"{path}: corrector cache fingerprint does not match the configured discretization")
    try:
        templates, blocks, pos = _read_body(raw, n_t, n_b, Nt)
    except (struct.error, ValueError) as exc:
        raise InvalidArgumentError(f"{path}: truncated corrector cache") from exc
    if pos != len(raw):
        raise InvalidArgumentError(f"{path}: trailing bytes in corrector cache")
    STATS["cache_loads"] += 1
    return CorrectorOperator(k, ell, NT, Nt, fp, bool(reuse), templates, blocks,
                             {"max_constraint_residual": max((t.residual for t in templates), default=0.0)})
