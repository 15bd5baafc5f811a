import math
import warnings

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from sbe2d import fock as Fk
from sbe2d import hermite as H
from sbe2d.noise import ScaleParams


@pytest.fixture(scope="module")
def grid():
    return Fk.FockGrid(K=2, n_max=3, tau=10.0)


@pytest.fixture(scope="module")
def tiny():
    return Fk.FockGrid(K=1, n_max=2, tau=10.0)


def rand(grid, levels, seed, radius=None):
    return Fk.ChaosVector.random(grid, levels, np.random.default_rng(seed), radius)


def dense_matrix(grid, fn):
    cols = []
    for k in range(grid.size):
        e = np.zeros(grid.size, dtype=complex)
        e[k] = 1.0
        cols.append(fn(Fk.ChaosVector.from_iso(grid, e)).to_iso())
    return np.array(cols).T


# grid and storage


def test_lattice_symmetric_and_weights_positive(grid):
    pts = {tuple(c) for c in grid.coords}
    assert all((-a, -b) in pts for a, b in pts)
    assert np.all(grid.w > 0)
    neg = Fk._negate_index(grid)
    assert np.array_equal(grid.coords[neg], -grid.coords)


def test_multiplicities_count_ordered_tuples(grid):
    for n in range(grid.n_max + 1):
        assert grid.mult[n].sum() == pytest.approx(grid.P**n)


def test_dense_roundtrip_is_symmetric(grid):
    v = rand(grid, [3], 0).levels[3]
    D = grid.to_dense(v, 3)
    assert np.array_equal(D, D.transpose(1, 0, 2))
    assert np.array_equal(D, D.transpose(2, 1, 0))
    assert np.array_equal(grid.from_dense(D, 3), v)


def test_inner_product_matches_ordered_sum(grid):
    a, b = rand(grid, [2], 1).levels[2], rand(grid, [2], 2).levels[2]
    Da, Db = grid.to_dense(a, 2), grid.to_dense(b, 2)
    direct = 2 * np.sum(np.outer(grid.w, grid.w) * Da * np.conj(Db))
    u, v = Fk.ChaosVector.pure(grid, 2, a), Fk.ChaosVector.pure(grid, 2, b)
    assert u.inner(v) == pytest.approx(direct, rel=1e-13)


def test_bad_grids():
    with pytest.raises(ValueError):
        Fk.FockGrid(K=0)
    with pytest.raises(ValueError):
        Fk.FockGrid(K=1, n_max=9)
    with pytest.raises(ValueError):
        Fk.FockGrid(K=1, tau=math.inf)


# norms and diagonal operators


def test_level_zero_norms_equal(grid):
    v = Fk.ChaosVector.pure(grid, 0, [3 - 4j])
    vals = Fk.norms(v)
    assert vals["L2"] == pytest.approx(5.0)
    assert vals["H1"] == pytest.approx(5.0)
    assert vals["H-1"] == pytest.approx(5.0)


def test_norm_ordering_and_reflection(grid):
    v = rand(grid, [0, 1, 2, 3], 3)
    vals = Fk.norms(v)
    assert vals["H1"] >= vals["L2"] >= vals["H-1"]
    refl = Fk.ChaosVector(grid, [np.conj(Fk.reflect_conj(grid, a, n)) for n, a in enumerate(v.levels)])
    assert refl.norm() == pytest.approx(v.norm(), rel=1e-13)


def test_number_operator(grid):
    v = rand(grid, [2], 4)
    out = Fk.apply_diagonal(Fk.NUMBER, v)
    assert np.allclose(out.levels[2], 2 * v.levels[2])


def test_S_kernel_sign_and_zero(grid):
    for n in range(1, grid.n_max + 1):
        assert np.all(Fk.S_TAU.values(grid, n) <= 0)
    zero = grid.ext_index(np.array([0, 0]), grid.K)
    k = Fk.S_TAU.values(grid, 1)
    assert k[zero] == 0.0


def test_G_and_projection_ranges(grid):
    G = Fk.G_kernel(1.0, 1.0)
    for n in range(grid.n_max + 1):
        vals = G.values(grid, n)
        assert np.all(vals > 0) and np.all(vals <= 1)
        pl = Fk.pi_low(0.3).values(grid, n)
        assert set(np.unique(pl)) <= {0.0, 1.0}
        assert np.array_equal(pl + Fk.pi_high(0.3).values(grid, n), np.ones_like(pl))


def test_diag_g_examples():
    s = ScaleParams(1e4)
    g, gM, L = Fk.diag_g(0.0, s, 2.0, 1.5)
    assert g == pytest.approx(0.0, abs=1e-15)
    assert gM == pytest.approx(2.0 * s.nu)
    assert L == pytest.approx(1.5**2 * s.nu**1.5 / math.pi * math.log(1 + 1e4))
    with pytest.raises(ValueError):
        Fk.diag_g(-1.0, s, 1.0, 1.0)


@given(st.floats(0, 1e6), st.floats(1.0, 1e12))
def test_g_monotone_nonnegative(x, tau):
    s = ScaleParams(tau)
    g1 = Fk.diag_g(x, s, 1.0, 1.0)[0]
    g2 = Fk.diag_g(x + 1.0, s, 1.0, 1.0)[0]
    assert g1 >= -1e-15 and g2 >= g1


# generator pieces


def test_invalid_shift():
    g = Fk.FockGrid(K=1, n_max=2)
    v = rand(g, [1], 0)
    for m, a in [(2, 0), (3, 1), (1, 1), (0, 0), (3, 4)]:
        with pytest.raises(ValueError):
            Fk.apply_A(m, a, v)


def test_A1_vanishes_where_theta_is_one(grid):
    g = Fk.FockGrid(K=2, n_max=2, tau=10.0)
    g.theta = np.ones_like(g.theta)
    v = rand(g, [1, 2], 5)
    out = Fk.apply_A(1, 0, v).vector
    assert out.norm() == 0.0


def test_A2_up_level_and_adjoint(grid):
    psi = rand(grid, [1], 6)
    out = Fk.apply_A(2, 1, psi).vector
    assert out.active_levels() == [2]
    phi = rand(grid, [2], 7)
    lhs = out.inner(phi)
    rhs = psi.inner(Fk.apply_A(2, -1, phi).vector)
    assert abs(lhs + rhs) <= 1e-10 * psi.norm() * phi.norm()
    assert abs(lhs) > 1e-6 * psi.norm() * phi.norm()


def test_A3_on_level_one_only_raises_by_two(grid):
    psi = rand(grid, [1], 8)
    assert Fk.apply_A(3, 2, psi).vector.active_levels() == [3]
    assert Fk.apply_A(3, 0, psi).vector.norm() == 0
    assert Fk.apply_A(3, -2, psi).vector.norm() == 0


def test_overflow_levels_reported(grid):
    psi = rand(grid, [3], 9)
    res = Fk.apply_A(2, 1, psi)
    assert res.dropped == [4] and res.vector.norm() == 0


@settings(max_examples=12, deadline=None)
@given(st.integers(1, 4), st.data())
def test_skew_symmetry_property(m, data):
    g = Fk.FockGrid(K=1, n_max=3, tau=data.draw(st.sampled_from([10.0, 1e3])))
    a = data.draw(st.sampled_from(Fk.valid_shifts(m)))
    seed = data.draw(st.integers(0, 2**31))
    psi, phi = rand(g, range(4), seed), rand(g, range(4), seed + 1)
    lhs = Fk.apply_A(m, a, psi).vector.inner(phi)
    rhs = psi.inner(Fk.apply_A(m, -a, phi).vector)
    assert abs(lhs + rhs) <= 1e-10 * psi.norm() * phi.norm()


def test_A_matches_bruteforce_kernel(tiny):
    # direct evaluation of the m = 2, a = +1 kernel on ordered tuples
    g = tiny
    psi = rand(g, [1], 10).levels[1]
    out = Fk.apply_A(2, 1, Fk.ChaosVector.pure(g, 1, psi)).vector.levels[2]
    s = g.scale
    pref = -1j * s.nu**0.75 / (2 * math.pi) / 2
    for row, (i, j) in enumerate(g.tuples[2]):
        c = g.coords[i] + g.coords[j]
        k = g.ext_index(c, g.K)
        want = 0 if k < 0 else pref * g.dp * c[0] * g.theta[k] * psi[k]
        assert out[row] == pytest.approx(want, abs=1e-15)


def test_norm_formula_matches_dense(grid):
    for n, m in [(1, 2), (2, 2), (2, 3), (3, 2), (1, 3)]:
        psi = rand(grid, [n], 20 + n + m)
        formula = Fk.a_norm_sq(grid, m, n, psi.levels[n])
        j_list = [j for j in range(min(n, m)) if n + m - 2 * j - 1 <= grid.n_max]
        for j in j_list:
            a = m - 2 * j - 1
            dense = Fk.apply_A(m, a, psi).vector.norm() ** 2
            assert formula[j] == pytest.approx(dense, rel=1e-10)


def test_sharp_plus_flat(grid):
    v = rand(grid, [1, 2], 11)
    for d in (1, -1):
        total = Fk.apply_sharp(d, v).vector + Fk.apply_flat(d, v).vector
        ref = Fk.apply_A(2, d, v).vector
        assert (total - ref).norm() <= 1e-12 * ref.norm()


def test_sharp_vanishes_off_multiplier(grid):
    # the largest momenta cannot split into two momenta twice as large
    big = np.max(grid.rn2)
    vals = rand(grid, [1], 12).levels[1] * (grid.rn2 >= big / 4)
    v = Fk.ChaosVector.pure(grid, 1, vals)
    assert Fk.apply_sharp(1, v).vector.norm() == 0.0


def test_sharp_adjoint_dense_oracle():
    # on a 3 x 3 lattice the multiplier only fires at zero total momentum, where e1.P = 0
    g = Fk.FockGrid(K=2, n_max=2, tau=10.0)
    up = dense_matrix(g, lambda x: Fk.apply_sharp(1, x).vector)
    down = dense_matrix(g, lambda x: Fk.apply_sharp(-1, x).vector)
    assert np.abs(up).max() > 0
    assert np.abs(down + up.conj().T).max() <= 1e-10 * np.abs(up).max()


def test_generator_is_dissipative(tiny):
    A = Fk.dense_generator_matrix(tiny, 2.0)
    sym = (A + A.conj().T) / 2
    d = 1 + Fk._minus_S_iso(tiny)
    assert np.allclose(sym, np.diag(d), atol=1e-12)


# assembly


def test_assemble_quadratic_is_c2_A2(grid):
    table = H.hermite_coeffs(H.polynomial([0, 0, 1]), 8)
    v = rand(grid, [1, 2], 13)
    asm = Fk.assemble_A(table, v, 6)
    ref = table.c[2] * Fk.apply_A_full(2, v).vector
    assert asm.degrees == [2]
    assert (asm.vector - ref).norm() <= 1e-12 * ref.norm()
    neq2 = Fk.assemble_A_neq2(table, v, 6)
    assert neq2.vector.norm() == 0.0


def test_assemble_odd_F_has_no_even_degrees(grid):
    table = H.hermite_coeffs(H.polynomial([0, 1, 0, 1]), 8)
    asm = Fk.assemble_A(table, rand(grid, [1], 14), 5)
    assert all(m % 2 == 1 for m in asm.degrees)


def test_tail_report_decreases():
    g = Fk.FockGrid(K=1, n_max=2, tau=10.0)
    table = H.hermite_coeffs(H.sqrt_shift(1.0), 40)
    v = rand(g, [1], 15)
    C = Fk.assemble_A(table, v, 5).envelope_constant
    tails = [Fk.assemble_A(table, v, M, envelope_constant=C).tail for M in (2, 4, 6, 8, 10)]
    assert all(b <= a for a, b in zip(tails, tails[1:]))
    assert tails[-1] < tails[0]


# resolvent


def test_resolvent_diagonal_case(grid):
    rhs = rand(grid, [1, 2], 16)
    sol = Fk.resolvent_solve(rhs, 0.0, tol=1e-12)
    want = Fk.ChaosVector(grid, [a / (1 + Fk._minus_S(grid, n)) for n, a in enumerate(rhs.levels)])
    assert (sol.x - want).norm() <= 1e-11 * want.norm()


def test_resolvent_recovers_known_solution(grid):
    v = rand(grid, [1, 2, 3], 17)
    rhs = v - Fk.apply_L2(v, 1.5)
    sol = Fk.resolvent_solve(rhs, 1.5, tol=1e-11)
    assert (sol.x - v).norm() <= 1e-9 * v.norm()
    assert sol.residual <= 1e-11


def test_resolvent_dense_lu_oracle(tiny):
    rhs = rand(tiny, [1, 2], 18)
    A = Fk.dense_generator_matrix(tiny, 1.0)
    x = sla.lu_solve(sla.lu_factor(A), rhs.to_iso())
    sol = Fk.resolvent_solve(rhs, 1.0, tol=1e-12)
    assert np.abs(sol.x.to_iso() - x).max() <= 1e-8 * np.abs(x).max()


def test_resolvent_failure_reports_history(grid):
    rhs = rand(grid, [1, 2, 3], 19)
    with pytest.raises(Fk.SolverError) as info:
        Fk.resolvent_solve(rhs, 3.0, tol=1e-14, maxiter=1, restart=2)
    assert len(info.value.history) >= 1


# ansatz


def test_ansatz_zero_terms(grid):
    phi = rand(grid, [1], 21, radius=1.0)
    ans = Fk.build_ansatz(phi, 1.0, 0)
    want = Fk.apply_diagonal(Fk.G_kernel(1.0, 1.0), phi)
    assert (ans.tilde - want).norm() == 0.0


def test_ansatz_levels_and_truncation(grid):
    phi = rand(grid, [1], 22, radius=1.0)
    ans = Fk.build_ansatz(phi, 1.0, 2)
    assert ans.levels == [1, 2, 3]
    assert set(ans.tilde.active_levels()) <= {1, 2, 3}
    assert ans.tilde.level(2).norm() > 0
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        long = Fk.build_ansatz(phi, 1.0, 5)
    assert long.truncated and long.K_terms == 2 and len(w) == 1


def test_projection_keeps_low_frequency_at_large_tau():
    g = Fk.FockGrid(K=2, n_max=2, tau=1e8)
    phi = rand(g, [1], 23, radius=1.0)
    ans = Fk.build_ansatz(phi, 1.0, 0)
    assert (ans.amended - ans.tilde).norm() == 0.0


def test_residual_report_decomposition(grid):
    phi = rand(grid, [1], 24, radius=1.0)
    rep = Fk.ansatz_residual(phi, 1.0, 2)
    assert rep.residual <= rep.g_term + rep.remainder + 1e-14
    assert rep.g_term > 0


# Wiener-Ito products


@pytest.mark.parametrize("n1,n2", [(1, 1), (1, 2), (2, 2), (1, 3)])
def test_product_rule_matches_isserlis(n1, n2):
    g = Fk.FockGrid(K=1, n_max=4, tau=10.0)
    rng = np.random.default_rng(n1 * 10 + n2)
    f = rng.normal(size=g.level_size(n1)) + 1j * rng.normal(size=g.level_size(n1))
    h = rng.normal(size=g.level_size(n2)) + 1j * rng.normal(size=g.level_size(n2))
    prod = Fk.wick_product(g, f, n1, h, n2)
    assert prod.dropped == []
    for N in range(n1 + n2 + 1):
        test = rng.normal(size=g.level_size(N)) + 1j * rng.normal(size=g.level_size(N))
        brute = Fk.isserlis_moment(g, [(f, n1), (h, n2), (Fk.reflect_conj(g, test, N), N)])
        formula = prod.vector.inner(Fk.ChaosVector.pure(g, N, test))
        assert abs(brute - formula) <= 1e-8 * max(1.0, abs(formula))


def test_isserlis_second_moment_is_inner_product(tiny):
    f = rand(tiny, [2], 25).levels[2]
    h = rand(tiny, [2], 26).levels[2]
    brute = Fk.isserlis_moment(tiny, [(f, 2), (Fk.reflect_conj(tiny, h, 2), 2)])
    assert brute == pytest.approx(Fk.ChaosVector.pure(tiny, 2, f).inner(Fk.ChaosVector.pure(tiny, 2, h)))


# support-sensitive estimate


def test_support_envelope_prediction():
    g = Fk.FockGrid(K=2, n_max=4, tau=10.0)
    for n in (1, 2):
        phi = rand(g, [n], 27 + n, radius=1.0)
        rows = Fk.support_measurements(phi, n, range(1, 6), chi=1.0)
        ratios = [val / env for _, val, env in rows]
        assert len(ratios) >= 3
        C = max(ratios[:2])
        assert all(r <= C for r in ratios[2:])
