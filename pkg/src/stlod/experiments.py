"""Experiment drivers: localization decay, convergence, multiple right-hand sides, indicators."""
from __future__ import annotations

import io
import math

import numpy as np

from . import analysis, corrector, solver
from .coefficient import generate_random
from .config import ExperimentConfig
from .discretization import Discretization
from .errors import InvalidArgumentError
from .grid import build_mesh_pair, build_temporal_grid, saturating_radius


def build_discretization(cfg: ExperimentConfig) -> Discretization:
    pair = build_mesh_pair(cfg.coarse_exponent, cfg.fine_exponent)
    tgrid = build_temporal_grid(cfg.t_final, cfg.coarse_steps, cfg.fine_per_coarse)
    coeff = generate_random(cfg.seed, cfg.eps_x, cfg.eps_t, cfg.coef_low, cfg.coef_high,
                            periodic=cfg.periodic, period=cfg.coefficient_period, t_final=cfg.t_final)
    return Discretization(pair, tgrid, coeff)


def rhs_function(cfg: ExperimentConfig):
    if cfg.rhs == "one":
        return lambda x, y, t: np.ones_like(x)
    rng = np.random.default_rng(cfg.rhs_seed)
    a, b, c = rng.random(3)
    return lambda x, y, t: a + b * t + c * t * t + np.sin(np.pi * x) * np.sin(np.pi * y)


def compute_correctors(cfg: ExperimentConfig, disc: Discretization, workers: int = 1):
    return corrector.assemble_corrector_operator(disc, cfg.k_value, cfg.ell, workers, reuse=cfg.reuse)


def relative_errors(disc, ctx, U, U_ref) -> tuple[float, float]:
    e = U - U_ref
    return (analysis.trial_norm(ctx, e) / analysis.trial_norm(ctx, U_ref),
            analysis.l2h1_norm(ctx, e) / analysis.l2h1_norm(ctx, U_ref))


def run_solve(cfg: ExperimentConfig, disc, op):
    """Coarse solution rows and (trial, L2(H1)) errors against the fine reference."""
    f = rhs_function(cfg)
    system = solver.assemble_coarse_system(op, disc)
    u = solver.solve_multiscale(system, f, rule=cfg.quadrature)
    U = solver.reconstruct_fine(system, u)
    U_ref = solver.solve_reference_fine(disc, f, rule=cfg.quadrature)
    errs = relative_errors(disc, analysis.norm_context(disc), U, U_ref)
    coarse = disc.pair.coarse
    rows = []
    for p in range(1, disc.tgrid.coarse_steps + 1):
        t = p * disc.tgrid.coarse_step
        for y, node in enumerate(coarse.interior_nodes):
            x0, x1 = coarse.nodes[node]
            rows.append((t, x0, x1, u[p - 1, y]))
    return rows, errs


# ---- decay study


def _node_at(mesh, point) -> int:
    d = np.abs(mesh.nodes - np.asarray(point)[None, :]).max(axis=1)
    z = int(np.argmin(d))
    if d[z] > 1e-12 or mesh.boundary_mask[z]:
        raise InvalidArgumentError(f"no interior coarse node at {tuple(point)}")
    return z


def _basis_vector(disc, z, p):
    e = np.zeros((disc.tgrid.coarse_steps, disc.pair.coarse.n_interior))
    e[p - 1, disc.pair.coarse.interior_index[z]] = 1.0
    return e


def run_decay(cfg: ExperimentConfig, workers: int = 1, disc=None):
    """Rows ``(kind, parameter, relative localization error, indicator)`` for one basis function."""
    disc = disc or build_discretization(cfg)
    NT = disc.tgrid.coarse_steps
    z = _node_at(disc.pair.coarse, cfg.decay_node)
    p = cfg.decay_time_index
    if not 1 <= p <= NT:
        raise InvalidArgumentError(f"decay_time_index must lie in 1..{NT}")
    keys = corrector.basis_keys(disc, z, p)
    pairs = sorted({(K, i) for K, i, _, _ in keys})
    ctx = analysis.norm_context(disc)
    e = _basis_vector(disc, z, p)
    lam = solver.prolongate_coarse(disc, e)
    lam_norm = analysis.trial_norm(ctx, lam)
    k_sat = saturating_radius(disc.pair.coarse)

    def q_of(op):
        return corrector.apply_corrector(op, e, disc)

    ref_op = corrector.assemble_corrector_operator(disc, k_sat, NT, workers, pairs=pairs)
    ref = q_of(ref_op)
    rows = []
    groups = analysis._group_blocks
    for k in cfg.k_values:
        op = corrector.assemble_corrector_operator(disc, k, NT, workers, pairs=pairs)
        err = analysis.trial_norm(ctx, ref - q_of(op)) / lam_norm
        if op.k >= 3:
            g = groups(op)
            delta = max(analysis.delta_estimator(op, disc, K, i, ctx, g) for K, i in pairs)
        else:
            delta = math.nan
        rows.append(("space", k, err, delta))
    g = groups(ref_op)
    for ell in cfg.ell_values:
        if ell > NT:
            raise InvalidArgumentError(f"ell value {ell} exceeds the number of coarse steps {NT}")
        op = corrector.truncate_operator(ref_op, ell)
        err = analysis.trial_norm(ctx, ref - q_of(op)) / lam_norm
        theta = max(analysis.theta_estimator(op, disc, K, i, ctx, g) for K, i in pairs)
        rows.append(("time", ell, err, theta))
    return rows


# ---- convergence study


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log2 y`` against ``log2 x``."""
    lx, ly = np.log2(np.asarray(x, float)), np.log2(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])


def run_convergence(cfg: ExperimentConfig, workers: int = 1, progress=None):
    """Rows ``(H, trial error, L2(H1) error)`` with ``H`` equal to the coarse time step."""
    if not cfg.coarse_exponents:
        raise InvalidArgumentError("convergence needs a coarse_exponents list")
    rows = []
    for n in cfg.coarse_exponents:
        lvl = cfg.at_level(n)
        disc = build_discretization(lvl)
        op = compute_correctors(lvl, disc, workers)
        _, errs = run_solve(lvl, disc, op)
        rows.append((2.0 ** -n, errs[0], errs[1]))
        if progress is not None:
            progress(n, errs)
        del op
    return rows


# ---- multiple right-hand sides


def random_loads(disc: Discretization, count: int, seed: int):
    """Fine loads for ``f = g(x) + a + b t + c t^2`` with ``g`` nodal and everything uniform in [0, 1)."""
    rng = np.random.default_rng(seed)
    fine = disc.pair.fine
    tau = disc.tgrid.fine_step
    tm = disc.tgrid.fine_nodes[:-1] + 0.5 * tau
    ones = (disc.M_all @ np.ones(fine.n_nodes))[fine.interior_nodes]
    loads = np.empty((len(tm), fine.n_interior, count))
    for r in range(count):
        g = rng.random(fine.n_nodes)
        a, b, c = rng.random(3)
        mg = (disc.M_all @ g)[fine.interior_nodes]
        loads[:, :, r] = tau * (mg[None, :] + (a + b * tm + c * tm * tm)[:, None] * ones[None, :])
    return loads


def run_multirhs(cfg: ExperimentConfig, disc, op):
    """Relative trial-norm errors for ``rhs_count`` random sources, plus online bookkeeping."""
    system = solver.assemble_coarse_system(op, disc)
    loads = random_loads(disc, cfg.rhs_count, cfg.rhs_seed)
    chains_before = corrector.STATS["chains_computed"]
    F = [solver.coarse_loads(disc, loads=loads[..., r]) for r in range(cfg.rhs_count)]
    coarse = solver.solve_multi_rhs(system, F)
    online = {
        "chains_computed": corrector.STATS["chains_computed"] - chains_before,
        "solve_shapes": sorted(set(system.solve_log)),
        "n_coarse": system.n_coarse,
    }
    U_ref = solver.solve_reference_fine(disc, loads=loads)
    ctx = analysis.norm_context(disc)
    errs = []
    for r, u in enumerate(coarse):
        U = solver.reconstruct_fine(system, u)
        errs.append(analysis.trial_norm(ctx, U - U_ref[..., r]) / analysis.trial_norm(ctx, U_ref[..., r]))
    return np.array(errs), online


def histogram_rows(errors, bins: int):
    counts, edges = np.histogram(errors, bins=bins)
    return [(float(edges[b]), int(counts[b])) for b in range(bins)]


# ---- indicators


def run_estimate(op, disc):
    est = analysis.estimate_all(op, disc)
    rows = [(K, i, v["delta"], v["theta"]) for (K, i), v in sorted(est.items())]
    return rows


# ---- CSV


def fmt_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(fmt_value(v) for v in row) + "\n")
    return buf.getvalue()
