import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import stlod.corrector as corrector
from stlod.coefficient import generate_random
from stlod.discretization import Discretization
from stlod.errors import FingerprintMismatch, InvalidArgumentError
from stlod.grid import build_mesh_pair, build_temporal_grid, patch, saturating_radius

from conftest import desk_disc
from oracles import dense_fem, dense_kkt_interval

INTERIOR_K = 10  # lower triangle of square (1, 1) on the 4x4 coarse grid: all vertices interior


def _disc(T, NT, Nt, periodic=True, seed=4, eps_t=0.125):
    pair = build_mesh_pair(2, 4)
    tgrid = build_temporal_grid(T, NT, Nt)
    if periodic:
        coeff = generate_random(seed, 0.125, eps_t, 0.01, 0.1, periodic=True, period=T / NT)
    else:
        coeff = generate_random(seed, 0.125, eps_t, 0.01, 0.1, periodic=False, t_final=T)
    return Discretization(pair, tgrid, coeff)


def _kkt_pieces(disc, pt, j):
    fine, coarse = disc.pair.fine, disc.pair.coarse
    nodes = fine.interior_nodes[pt.fine_dofs]
    M_all = dense_fem(fine)[0]
    cn = coarse.interior_nodes[pt.coarse_dofs]
    MH = dense_fem(coarse)[0][np.ix_(cn, cn)]
    I = disc.I_H[pt.coarse_dofs][:, pt.fine_dofs].toarray()
    g = disc.tgrid
    cent = fine.nodes[fine.elements].mean(axis=1)
    steps = [(j - 1) * g.fine_per_coarse + n for n in range(1, g.fine_per_coarse + 1)]
    kap = [disc.coeff.values_at(cent, (s - 0.5) * g.fine_step) for s in steps]
    S = [dense_fem(fine, k)[1][np.ix_(nodes, nodes)] for k in kap]
    return nodes, M_all[np.ix_(nodes, nodes)], S, I, MH, kap


def test_zero_drive_gives_zero(desk):
    psys = corrector.PatchSystem(desk, patch(desk.pair, INTERIOR_K, 1))
    sig = desk.interval_signature(1)
    xi, lam = psys.solve_interval(sig, np.zeros((4, psys.n_fine, 2)))
    assert not xi.any() and not lam.any()


def test_single_step_interval_matches_kkt():
    disc = _disc(0.75, 3, 1, eps_t=0.25)
    pt = patch(disc.pair, INTERIOR_K, 1)
    j = 2
    nodes, M, S, I, MH, kap = _kkt_pieces(disc, pt, j)
    tau = disc.tgrid.fine_step
    z = int(disc.pair.coarse.elements[INTERIOR_K][0])
    phi = disc.P_all[:, z].toarray().ravel()
    ch = disc.pair.element_children[INTERIOR_K]
    MK = dense_fem(disc.pair.fine, None, ch)[0]
    SK = dense_fem(disc.pair.fine, kap[0], ch)[1]
    for p, dz, zsum in ((j, 1.0, 1.0), (j - 1, -1.0, 1.0)):
        F = -(MK @ phi * dz + 0.5 * tau * SK @ phi * zsum)[nodes][None]
        x_ref, lam_ref = dense_kkt_interval(M, S, I, MH, tau, F)
        x, lam = corrector.solve_constrained_interval(disc, pt, j, corrector.BasisDrive(INTERIOR_K, j, z, p))
        assert np.allclose(x, x_ref, rtol=0, atol=1e-12 * np.abs(x_ref).max())
        assert np.allclose(lam, lam_ref, rtol=0, atol=1e-10 * np.abs(lam_ref).max())
        assert np.abs(I @ x[-1]).max() < 1e-12


def test_carry_equals_initial_value_problem(desk):
    pt = patch(desk.pair, INTERIOR_K, 2)
    nodes, M, S, I, MH, _ = _kkt_pieces(desk, pt, 2)
    x0 = np.random.default_rng(3).standard_normal(len(nodes))
    xi, _ = corrector.solve_constrained_interval(desk, pt, 2, corrector.Carry(x0))
    Nt = desk.tgrid.fine_per_coarse
    r = 1.0 - np.arange(1, Nt + 1) / Nt
    total = xi + r[:, None] * x0[None]
    ref, _ = dense_kkt_interval(M, S, I, MH, desk.tgrid.fine_step, np.zeros((Nt, len(nodes))), x0)
    assert np.allclose(total, ref, atol=1e-12 * np.abs(ref).max())


def test_bad_drive(desk):
    pt = patch(desk.pair, INTERIOR_K, 1)
    with pytest.raises(InvalidArgumentError):
        corrector.solve_constrained_interval(desk, pt, 2, corrector.BasisDrive(INTERIOR_K, 2, 6, 3))
    with pytest.raises(InvalidArgumentError):
        corrector.solve_constrained_interval(desk, pt, 2, "drive")


def test_chain_extent():
    assert corrector.chain_extent(3, 3, 2) == (1, False)
    assert corrector.chain_extent(3, 1, 2) == (2, True)
    assert corrector.chain_extent(3, 1, 3) == (3, False)
    assert corrector.chain_extent(10, 4, 3) == (3, True)


def test_block_counts(desk):
    op = corrector.assemble_corrector_operator(desk, 1, 2)
    per = {}
    for K, i, z, p in op.blocks:
        per.setdefault((K, i), []).append((z, p))
    assert len(per[(INTERIOR_K, 2)]) == 6
    assert len(per[(INTERIOR_K, 1)]) == 3
    coarse = desk.pair.coarse
    expected = sum(len(corrector.interior_vertices(desk, K)) * (1 if i == 1 else 2)
                   for K in range(coarse.n_elements) for i in range(1, 4))
    assert len(op.blocks) == expected


def test_basis_corrector_matches_operator(desk):
    op = corrector.assemble_corrector_operator(desk, 2, 2)
    for key in [(INTERIOR_K, 1, 6, 1), (INTERIOR_K, 2, 12, 1), (INTERIOR_K, 3, 7, 3)]:
        blk = corrector.compute_basis_corrector(desk, *key, 2, 2)
        _, act, W = op.block_values(key)
        assert np.array_equal(act, blk.patch.fine_dofs)
        assert np.allclose(W, blk.values, atol=1e-14 * np.abs(W).max())
    last = corrector.compute_basis_corrector(desk, INTERIOR_K, 3, 6, 3, 2, 2)
    assert len(last.interval_series) == 1 and last.ramp_tail is None
    with pytest.raises(InvalidArgumentError):
        corrector.compute_basis_corrector(desk, INTERIOR_K, 1, 6, 0, 2, 2)
    with pytest.raises(InvalidArgumentError):
        corrector.compute_basis_corrector(desk, INTERIOR_K, 1, 0, 1, 2, 2)


def test_saturated_block_is_global(desk):
    """A saturated patch equals the element corrector computed on the whole domain."""
    NT = desk.tgrid.coarse_steps
    blk = corrector.compute_basis_corrector(desk, INTERIOR_K, 1, 6, 1, saturating_radius(desk.pair.coarse), NT)
    assert blk.patch.is_global
    big = corrector.compute_basis_corrector(desk, INTERIOR_K, 1, 6, 1, 50, NT)
    assert np.array_equal(blk.values, big.values)


def test_temporal_decay_of_chain():
    disc = _disc(1.5, 6, 4, periodic=False, seed=8)
    k = saturating_radius(disc.pair.coarse)
    blk = corrector.compute_basis_corrector(disc, INTERIOR_K, 1, 6, 1, k, 6)
    energy = [np.linalg.norm(x) for x in blk.interval_series]
    assert all(b < a for a, b in zip(energy[1:], energy[2:])), energy


def test_workers_bitwise(desk):
    a = corrector.assemble_corrector_operator(desk, 2, 2, worker_count=1)
    b = corrector.assemble_corrector_operator(desk, 2, 2, worker_count=4)
    assert a.blocks == b.blocks
    for s, t in zip(a.templates, b.templates):
        assert np.array_equal(s.xi, t.xi) and s.cols == t.cols


def test_reuse_matches_recomputation(desk_periodic):
    disc = desk_periodic
    a = corrector.assemble_corrector_operator(disc, 2, 2, reuse=True)
    b = corrector.assemble_corrector_operator(disc, 2, 2, reuse=False)
    assert len(a.templates) < len(b.templates)
    assert a.blocks.keys() == b.blocks.keys()
    for key in a.blocks:
        _, act_a, Wa = a.block_values(key)
        _, act_b, Wb = b.block_values(key)
        assert np.array_equal(act_a, act_b)
        assert np.linalg.norm(Wa - Wb) <= 1e-12 * max(np.linalg.norm(Wb), 1e-300)


def test_reuse_needs_periodic(desk):
    with pytest.raises(InvalidArgumentError):
        corrector.assemble_corrector_operator(desk, 1, 1, reuse=True)
    with pytest.raises(InvalidArgumentError):
        corrector.assemble_corrector_operator(desk, 0, 1)
    with pytest.raises(InvalidArgumentError):
        corrector.assemble_corrector_operator(desk, 1, 0)


def test_truncation_equals_fresh_assembly(desk):
    full = corrector.assemble_corrector_operator(desk, 2, 3)
    for ell in (1, 2):
        cut = corrector.truncate_operator(full, ell)
        fresh = corrector.assemble_corrector_operator(desk, 2, ell)
        for key in fresh.blocks:
            _, _, Wc = cut.block_values(key)
            _, _, Wf = fresh.block_values(key)
            assert np.allclose(Wc, Wf, atol=1e-14 * np.abs(Wf).max())
    with pytest.raises(InvalidArgumentError):
        corrector.truncate_operator(cut, 3)


def test_apply_corrector(desk):
    op = corrector.assemble_corrector_operator(desk, 1, 2)
    NT, nH = desk.tgrid.coarse_steps, desk.pair.coarse.n_interior
    assert not corrector.apply_corrector(op, np.zeros((NT, nH)), desk).any()
    z, p = 12, 2
    e = np.zeros((NT, nH))
    e[p - 1, desk.pair.coarse.interior_index[z]] = 1.0
    ref = np.zeros((NT * 4 + 1, desk.pair.fine.n_interior))
    for key in corrector.basis_keys(desk, z, p):
        t0, act, W = op.block_values(key)
        ref[t0:t0 + len(W), act] += W
    assert np.allclose(corrector.apply_corrector(op, e, desk), ref, atol=1e-15)
    with pytest.raises(InvalidArgumentError):
        corrector.apply_corrector(op, np.zeros((NT, nH + 1)), desk)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32))
def test_apply_linear(seed):
    disc = desk_disc()
    op = _OPS.setdefault("desk", corrector.assemble_corrector_operator(disc, 1, 2))
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, 3, 9))
    lhs = corrector.apply_corrector(op, u + v, disc)
    rhs = corrector.apply_corrector(op, u, disc) + corrector.apply_corrector(op, v, disc)
    assert np.abs(lhs - rhs).max() <= 1e-13 * max(np.abs(lhs).max(), 1.0)


_OPS = {}


def test_cache_roundtrip(desk, desk_periodic, tmp_path):
    for disc, reuse in ((desk, False), (desk_periodic, True)):
        op = corrector.assemble_corrector_operator(disc, 2, 2, reuse=reuse)
        path = tmp_path / "ops.bin"
        corrector.save_operator(op, disc, path)
        before = corrector.STATS["cache_loads"]
        back = corrector.load_operator(path, disc)
        assert corrector.STATS["cache_loads"] == before + 1
        assert (back.k, back.ell, back.reuse, back.fingerprint) == (op.k, op.ell, op.reuse, op.fingerprint)
        assert back.blocks == op.blocks
        for s, t in zip(op.templates, back.templates):
            assert np.array_equal(s.xi, t.xi) and np.array_equal(s.act, t.act) and s.cols == t.cols
        corrector.save_operator(back, disc, tmp_path / "again.bin")
        assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()
    with pytest.raises(FingerprintMismatch):
        corrector.load_operator(path, desk)
    raw = path.read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-3])
    with pytest.raises(InvalidArgumentError):
        corrector.load_operator(tmp_path / "cut.bin", desk_periodic)
    (tmp_path / "junk.bin").write_bytes(b"nothing here")
    with pytest.raises(InvalidArgumentError):
        corrector.load_operator(tmp_path / "junk.bin", desk_periodic)


def test_zeroed(desk):
    op = corrector.assemble_corrector_operator(desk, 1, 1).zeroed()
    assert all(not t.xi.any() for t in op.templates)
    assert op.max_constraint_residual == 0.0
