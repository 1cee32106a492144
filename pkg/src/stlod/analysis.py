"""Discrete norms and a posteriori localization indicators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import splu

from . import assembly
from .corrector import DOWN, UP, CorrectorOperator, check_operator
from .discretization import Discretization
from .errors import InvalidArgumentError, NumericalFailure
from .grid import patch_elements


@dataclass(eq=False)
class NormContext:
    disc: Discretization
    M: object
    K_lap: object
    tau: float

    def __post_init__(self):
        self._lu = splu(self.K_lap.tocsc())

    def lap_solve(self, r):
        return self._lu.solve(np.ascontiguousarray(r))

    def restricted(self, coarse_elements):
        """(mass, unit stiffness) integrating only over the given coarse elements, interior dofs."""
        fine = self.disc.pair.fine
        el = np.sort(self.disc.pair.element_children[np.asarray(coarse_elements, dtype=int)].ravel())
        M = assembly.assemble(fine, self.disc.local_mass, None, el, "interior")
        L = assembly.assemble(fine, self.disc.local_stiffness, None, el, "interior")
        return M, L


def norm_context(disc: Discretization) -> NormContext:
    K = assembly.stiffness_from_values(disc.pair.fine, 1.0, "interior")
    return NormContext(disc, disc.M, K, disc.tgrid.fine_step)


def hminus1_norm(ctx: NormContext, g) -> float:
    r = ctx.M @ np.asarray(g, dtype=float)
    return float(np.sqrt(max(r @ ctx.lap_solve(r), 0.0)))


def _energy(K, V):
    """Per-row ``v^T K v`` for the rows of ``V``."""
    return np.einsum("ij,ij->i", V, (K @ V.T).T)


def trial_norm(ctx: NormContext, U) -> float:
    U = np.asarray(U, dtype=float)
    tau = ctx.tau
    D = np.diff(U, axis=0)
    R = (ctx.M @ D.T)
    h = np.einsum("ij,ij->", R, ctx.lap_solve(R)) / tau
    avg = 0.5 * (U[1:] + U[:-1])
    g = tau * _energy(ctx.K_lap, avg).sum()
    return float(np.sqrt(max(h + g, 0.0)))


def test_norm(ctx: NormContext, V) -> float:
    """Norm of a function that is constant on each fine step (rows of ``V``)."""
    V = np.asarray(V, dtype=float)
    return float(np.sqrt(max(ctx.tau * _energy(ctx.K_lap, V).sum(), 0.0)))


def l2h1_norm(ctx: NormContext, U) -> float:
    """Exact ``L2(H1_0)`` norm of a function that is linear in time on each fine step."""
    U = np.asarray(U, dtype=float)
    KU = (ctx.K_lap @ U.T).T
    e = np.einsum("ij,ij->i", U, KU)
    cross = np.einsum("ij,ij->i", U[:-1], KU[1:])
    return float(np.sqrt(max(ctx.tau / 3.0 * (e[:-1] + cross + e[1:]).sum(), 0.0)))


def trial_gram(ctx: NormContext, W: np.ndarray, M_r=None, L_r=None) -> np.ndarray:
    """Gram matrix of the trial-norm quadratic form for the columns of ``W`` (``(L+1, n_h, c)``).

    ``M_r``/``L_r`` restrict the H^-1 load and the gradient integral to a subdomain.
    """
    M_r = ctx.M if M_r is None else M_r
    L_r = ctx.K_lap if L_r is None else L_r
    tau = ctx.tau
    steps, n, c = W.shape[0] - 1, W.shape[1], W.shape[2]
    D = np.diff(W, axis=0).transpose(1, 0, 2).reshape(n, steps * c)
    R = M_r @ D
    Z = ctx.lap_solve(R)
    Gh = np.einsum("nsa,nsb->ab", R.reshape(n, steps, c), Z.reshape(n, steps, c)) / tau
    A = (0.5 * (W[1:] + W[:-1])).transpose(1, 0, 2).reshape(n, steps * c)
    LA = L_r @ A
    Gg = tau * np.einsum("nsa,nsb->ab", A.reshape(n, steps, c), LA.reshape(n, steps, c))
    G = Gh + Gg
    return 0.5 * (G + G.T)


def max_generalized_ratio(G_out, G_in, where: str = "") -> float:
    """``sqrt`` of the largest eigenvalue of ``G_out x = lam G_in x``.

    Directions in the null space of ``G_in`` are discarded; they must carry no
    ``G_out`` energy either, otherwise the ratio is unbounded.
    """
    G_out = 0.5 * (G_out + G_out.T)
    w, V = np.linalg.eigh(0.5 * (G_in + G_in.T))
    scale = max(w.max(initial=0.0), 1e-300)
    keep = w > 1e-12 * scale
    if not keep.any():
        raise NumericalFailure(f"degenerate denominator form {where}")
    N = V[:, ~keep]
    out_scale = max(np.abs(G_out).max(initial=0.0), 1e-300)
    if N.size and np.abs(N.T @ G_out @ N).max() > 1e-9 * out_scale:
        raise NumericalFailure(f"unbounded indicator ratio {where}")
    Z = V[:, keep]
    lam = sla.eigh(Z.T @ G_out @ Z, np.diag(w[keep]), eigvals_only=True)
    return float(np.sqrt(max(lam.max(), 0.0)))


def _group_blocks(op: CorrectorOperator):
    groups = {}
    for key in sorted(op.blocks):
        groups.setdefault((key[0], key[1]), []).append(key)
    return groups


def _indicator_columns(op, disc, keys):
    """Correctors of the time-constant sources ``phi_z 1_{D_{K,i}}``, one column per interior vertex of ``K``.

    Returns the global series ``(L+1, n_h, c)`` from ``T_{i-1}``, the values at the last
    solved time, whether a down-ramp follows, and the vertices.
    """
    ref = op.blocks[keys[0]]
    tmpl = op.templates[ref.template]
    n_used, ramp = ref.n_used, ref.ramp
    idx = {col: c for c, col in enumerate(tmpl.cols)}
    zs = [z for z, dp in tmpl.cols if dp == UP]
    combo = np.zeros((len(tmpl.cols), len(zs)))
    for c, z in enumerate(zs):
        combo[idx[(z, UP)], c] = 1.0
        combo[idx[(z, DOWN)], c] = 1.0
    W_loc = tmpl.series(n_used, ramp) @ combo
    n = disc.pair.fine.n_interior
    W = np.zeros((W_loc.shape[0], n, len(zs)))
    W[:, tmpl.act] = W_loc
    end = np.zeros((n, len(zs)))
    end[tmpl.act] = tmpl.xi[n_used - 1, -1] @ combo
    return W, end, ramp, zs


def _source_gram(ctx, disc, zs, restricted):
    """Trial-norm Gram of ``phi_z`` held constant over one coarse interval and cut off to ``K``."""
    Nt = disc.tgrid.fine_per_coarse
    fine = disc.pair.fine
    phi = disc.P_all[:, zs].toarray()[fine.interior_nodes]
    W = np.broadcast_to(phi[None], (Nt + 1,) + phi.shape)
    M_K, L_K = restricted
    return trial_gram(ctx, np.ascontiguousarray(W), M_K, L_K)


def delta_estimator(op: CorrectorOperator, disc: Discretization, K: int, i: int, ctx: NormContext | None = None,
                    groups=None) -> float:
    """Spatial indicator: corrector energy on the ring ``N^k(K) minus N^{k-3}(K)`` over the source energy."""
    check_operator(op, disc)
    if op.k < 3:
        raise InvalidArgumentError(f"the spatial indicator needs k >= 3, got k={op.k}")
    ctx = ctx or norm_context(disc)
    keys = (groups if groups is not None else _group_blocks(op)).get((K, i))
    if not keys:
        return 0.0
    coarse = disc.pair.coarse
    outer = patch_elements(coarse, K, op.k)
    inner = patch_elements(coarse, K, op.k - 3)
    ring = np.setdiff1d(outer, inner)
    if ring.size == 0:
        return 0.0
    W, _, _, zs = _indicator_columns(op, disc, keys)
    G_out = trial_gram(ctx, W, *ctx.restricted(ring))
    G_in = _source_gram(ctx, disc, zs, ctx.restricted([K]))
    return max_generalized_ratio(G_out, G_in, f"for element {K}, interval {i}")


def theta_estimator(op: CorrectorOperator, disc: Discretization, K: int, i: int, ctx: NormContext | None = None,
                    groups=None) -> float:
    """Temporal indicator: gradient of the corrector at the truncation time over the source energy."""
    check_operator(op, disc)
    ctx = ctx or norm_context(disc)
    keys = (groups if groups is not None else _group_blocks(op)).get((K, i))
    if not keys:
        return 0.0
    W, end, ramp, zs = _indicator_columns(op, disc, keys)
    if not ramp:
        return 0.0
    T = disc.tgrid.coarse_step
    H = disc.pair.coarse.spacing
    factor = H / np.sqrt(T) + np.sqrt(T)
    G_out = factor**2 * (end.T @ (ctx.K_lap @ end))
    G_in = _source_gram(ctx, disc, zs, ctx.restricted([K]))
    return max_generalized_ratio(G_out, G_in, f"for element {K}, interval {i}")


def estimate_all(op: CorrectorOperator, disc: Discretization, which=("delta", "theta"), pairs=None):
    """Indicators for every (K, i) (or the given pairs); returns ``{(K, i): {name: value}}``."""
    ctx = norm_context(disc)
    groups = _group_blocks(op)
    out = {}
    for K, i in (sorted(groups) if pairs is None else pairs):
        row = {}
        if "delta" in which:
            row["delta"] = delta_estimator(op, disc, K, i, ctx, groups) if op.k >= 3 else float("nan")
        if "theta" in which:
            row["theta"] = theta_estimator(op, disc, K, i, ctx, groups)
        out[(K, i)] = row
    return out
