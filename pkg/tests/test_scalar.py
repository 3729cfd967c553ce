import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kraichnan import rng as rngmod
from kraichnan.covariance import CovarianceSpec
from kraichnan.exact_laws import lambda_ds
from kraichnan.scalar import (ForcingMode, ForcingSpec, GaussianBump, MixingConfig,
                              ScalarFieldState, ScalarStepper, TorusGrid, VelocityModeSet,
                              _departure_grid, _departure_points, _departure_points_reference,
                              dt_max, effective_structure_fit, expected_spectrum, forcing_fs,
                              hs_norm, read_krgrid, riesz_pairing_quadrature, run_mixing_experiment,
                              shell_energy, snapshot, spectral_divergence, spectrum_norm,
                              structure_fit, synthesize_velocity_modes, write_krgrid)

SPEC2 = CovarianceSpec(2, 1.0)
SPEC3 = CovarianceSpec(3, 1.0)


def _cos_state(grid, m, amp=1.0):
    x = [np.arange(grid.n) * grid.h] * grid.d
    X = np.meshgrid(*x, indexing="ij")
    phase = sum(2 * math.pi / grid.L * mj * Xj for mj, Xj in zip(m, X))
    return ScalarFieldState.from_real(grid, amp * np.cos(phase))


# ---------------------------------------------------------------- grid, norms

@pytest.mark.parametrize("args", [(4, 64), (2, 48), (2, 16), (3, 100)])
def test_grid_validation(args):
    with pytest.raises(ValueError):
        TorusGrid(*args)


def test_grid_dealias_boundary():
    g = TorusGrid(2, 64)
    assert g.dealias_index == 21
    assert not g.dealias_mask[22, 0] and g.dealias_mask[21, 21]


def test_state_is_mean_zero_and_masked():
    g = TorusGrid(2, 32)
    st_ = ScalarFieldState.from_real(g, np.ones(g.shape) + _cos_state(g, (15, 0)).real())
    assert st_.coeffs.flat[0] == 0
    assert np.all(st_.coeffs[~g.dealias_mask] == 0)


@settings(max_examples=25, deadline=None)
@given(mx=st.integers(-10, 10), my=st.integers(1, 10), s=st.floats(-1.0, 0.99), L=st.floats(1.0, 10.0))
def test_single_mode_norm(mx, my, s, L):
    g = TorusGrid(2, 32, L)
    state = _cos_state(g, (mx, my), amp=1.7)
    l2 = 1.7**2 * L**2 / 2
    k2 = (2 * math.pi / L) ** 2 * (mx * mx + my * my)
    assert hs_norm(state, s) == pytest.approx(k2 ** (-s) * l2, rel=1e-12)


def test_l2_norm_matches_physical_space():
    g = TorusGrid(3, 32, 2.0)
    f = rngmod.stream(0, 0).standard_normal(g.shape)
    state = ScalarFieldState.from_real(g, f)
    direct = np.mean(state.real() ** 2) * g.volume
    assert hs_norm(state, 0.0) == pytest.approx(direct, rel=1e-12)
    with pytest.raises(ValueError):
        hs_norm(state, 1.5)


def test_shell_energy_counts_axis_modes():
    g = TorusGrid(2, 32)
    state = ScalarFieldState.from_real(g, _cos_state(g, (1, 0)).real() + _cos_state(g, (1, 1)).real())
    assert shell_energy(state, 1) == pytest.approx(g.volume / 2, rel=1e-12)
    assert shell_energy(state, 2) == pytest.approx(g.volume / 2, rel=1e-12)


@pytest.mark.parametrize("d,n", [(2, 256), (3, 64)])
def test_riesz_quadrature_matches_fourier_norm(d, n):
    L = 2 * math.pi
    bump = GaussianBump(d, L / (72 if d == 2 else 40))
    g = TorusGrid(d, n, L)
    state = ScalarFieldState.from_real(g, bump.evaluate(g))
    s = 0.5 if d == 2 else 1.0
    assert hs_norm(state, s) == pytest.approx(riesz_pairing_quadrature(bump, s), rel=1e-3)


def test_bump_is_mean_zero_and_localized():
    bump = GaussianBump(2, 0.1)
    assert bump.support_diameter == pytest.approx(6 * math.sqrt(2) * 0.1)
    g = TorusGrid(2, 128)
    f = bump.evaluate(g)
    assert abs(f.mean()) < 1e-12 * np.abs(f).max()
    # free-space autocorrelation at zero equals the L^2 norm
    assert bump.autocorrelation(0.0) == pytest.approx(hs_norm(ScalarFieldState.from_real(g, f), 0.0), rel=1e-6)


# ---------------------------------------------------------------- velocity modes

@pytest.mark.parametrize("spec,n,kmax", [(SPEC2, 64, 2), (SPEC2, 64, 4), (SPEC3, 32, 2)])
def test_synthesized_modes(spec, n, kmax):
    g = TorusGrid(spec.d, n)
    modes = synthesize_velocity_modes(spec, g, 1, kmax, seed=0)
    assert np.max(np.abs(np.einsum("mi,mpi->mp", modes.index, modes.polarizations))) <= 1e-12
    D1, iso = effective_structure_fit(modes, g)
    assert D1 == pytest.approx(spec.D1, rel=0.02)
    fit = structure_fit(modes, g)
    assert abs(fit.directional[0] - fit.directional[1]) / D1 < 0.05
    assert fit.transverse_ratio == pytest.approx((spec.d + 1) / (spec.d - 1), rel=0.10)
    assert np.allclose(modes.structure_function(np.zeros(spec.d)), 0.0, atol=0)
    d0 = modes.one_point_covariance()
    assert np.allclose(d0, modes.effective_D0 * np.eye(spec.d), rtol=0.05)


def test_synthesis_errors():
    g = TorusGrid(2, 32)
    with pytest.raises(ValueError):
        synthesize_velocity_modes(SPEC2, g, 2, 2, 0)
    with pytest.raises(ValueError):
        synthesize_velocity_modes(SPEC2, g, 1, 30, 0)
    with pytest.raises(ValueError):
        synthesize_velocity_modes(SPEC3, g, 1, 2, 0)


def test_velocity_spectral_matches_direct_sum():
    g = TorusGrid(3, 32)
    modes = synthesize_velocity_modes(SPEC3, g, 1, 2, 0)
    xi = modes.draw(rngmod.stream(0, 1))
    direct = modes.velocity_at(g.points(), xi)
    spec = snapshot(modes, xi).reshape(3, -1).T
    assert np.allclose(spec, direct, atol=1e-12)
    assert spectral_divergence(g, snapshot(modes, xi)) <= 1e-12 * np.abs(direct).max()


def test_departure_kernels_agree():
    g = TorusGrid(2, 128)
    modes = synthesize_velocity_modes(SPEC2, g, 1, 2, 0)
    xi = modes.draw(rngmod.stream(0, 2))
    x = g.points()[::37]
    fast = _departure_points(modes, xi, x, 0.05)
    ref = _departure_points_reference(modes, xi, x, 0.05)
    assert np.max(np.abs(fast - ref)) < 1e-12
    full = _departure_grid(modes, xi, 0.05, coarse=32)
    direct = _departure_points(modes, xi, g.points(), 0.05)
    assert np.max(np.abs(full - direct)) < 1e-10


# ---------------------------------------------------------------- stepping

@pytest.mark.parametrize("scheme", ["characteristic", "ito_euler"])
def test_heat_equation_decay(scheme):
    g = TorusGrid(2, 32)
    state = ScalarFieldState(g, _cos_state(g, (3, 1)).coeffs, kappa=0.01)
    new = ScalarStepper(g, None, scheme=scheme).step(state, 0.01, rngmod.stream(0, 0))
    factor = math.exp(-0.01 * 10 * 0.01)
    c0 = state.coeffs[3, 1]
    # exact for the characteristic scheme, first order (error (kappa k^2 dt)^2 / 2) for Ito-Euler
    assert abs(new.coeffs[3, 1] / c0 - factor) <= (1e-14 if scheme == "characteristic" else 6e-7)


def test_no_op_dynamics_keeps_norms():
    g = TorusGrid(2, 64)
    state = ScalarFieldState.from_real(g, GaussianBump(2, g.L / 72).evaluate(g))
    stepper = ScalarStepper(g, None)
    new = state
    for _ in range(10):
        new = stepper.step(new, 0.01, rngmod.stream(0, 0))
    for s in (-1.0, 0.0, 0.5):
        assert abs(hs_norm(new, s) - hs_norm(state, s)) <= 1e-12 * hs_norm(state, s)


def test_mean_stays_zero_with_velocity():
    g = TorusGrid(2, 64)
    modes = synthesize_velocity_modes(SPEC2, g, 1, 2, 0)
    state = ScalarFieldState.from_real(g, GaussianBump(2, g.L / 16).evaluate(g))
    stepper = ScalarStepper(g, modes)
    gen = rngmod.stream(0, 3)
    for _ in range(5):
        state = stepper.step(state, 0.005, gen)
        assert state.coeffs.flat[0] == 0
        assert abs(snapshot(state).mean()) <= 1e-12 * np.abs(snapshot(state)).max()


def test_ito_isometry_single_mode():
    # theta = cos(k0.x), one velocity mode: E||sqrt(dt) u.grad theta||^2 = dt a^2 (e.k0)^2 L^d / 2
    g = TorusGrid(2, 32)
    k0 = np.array([2, 1])
    pol = np.array([[[0.6, 0.8]]])
    modes = VelocityModeSet(g, np.array([[1, 0]]), pol, np.array([0.9]), 1.0, 0.9**2 / 2, 0.0)
    state = _cos_state(g, k0)
    stepper = ScalarStepper(g, modes, scheme="ito_euler")
    dt = 1e-3
    gen = rngmod.stream(0, 4)
    base = stepper.step(state, dt, gen, xi=np.zeros((2, 1, 1))).coeffs
    # drift-only part: dt * D0_eff / 2 * laplacian
    k0phys = 2 * math.pi / g.L * k0
    assert np.allclose(base - state.coeffs, -dt * 0.5 * modes.effective_D0 * (k0phys @ k0phys) * state.coeffs,
                       atol=1e-15)
    # increments are linear in the draw: g_j = step(e_j) - base
    basis = []
    for j in range(2):
        e = np.zeros((2, 1, 1))
        e[j, 0, 0] = 1.0
        basis.append(stepper.step(state, dt, gen, xi=e).coeffs - base)
    basis = np.stack(basis)
    draws = rngmod.stream(0, 5).standard_normal((100_000, 2))
    weights = g.half_weight * g.volume
    gram = np.real(np.einsum("ixy,jxy,xy->ij", basis, np.conj(basis), weights))
    sq = np.einsum("ni,ij,nj->n", draws, gram, draws)
    exact = dt * 0.9**2 * (pol[0, 0] @ (2 * math.pi / g.L * k0)) ** 2 * g.volume / 2
    assert abs(sq.mean() - exact) <= 3 * sq.std(ddof=1) / math.sqrt(sq.size)


def test_characteristic_scheme_matches_exact_mean_spectrum():
    g = TorusGrid(2, 64)
    modes = synthesize_velocity_modes(SPEC2, g, 1, 2, 0)
    state0 = ScalarFieldState.from_real(g, GaussianBump(2, g.L / 24).evaluate(g))
    dt, steps, M = 0.005, 20, 48
    H = []
    for i in range(M):
        gen = rngmod.stream(7, rngmod.MIXING, i)
        stepper = ScalarStepper(g, modes)
        st_ = state0
        for _ in range(steps):
            st_ = stepper.step(st_, dt, gen)
        H.append(hs_norm(st_, 0.5))
    H = np.array(H)
    oracle = spectrum_norm(expected_spectrum(modes, state0, [dt * steps], dt=1e-3), g, 0.5)[0]
    assert abs(H.mean() - oracle) <= 3 * H.std(ddof=1) / math.sqrt(M)


def test_expected_spectrum_pure_diffusion():
    g = TorusGrid(2, 32)
    still = VelocityModeSet(g, np.array([[1, 0]]), np.array([[[0.0, 1.0]]]), np.array([0.0]), 1.0, 0.0, 0.0)
    state = ScalarFieldState(g, _cos_state(g, (3, 0)).coeffs, kappa=0.02)
    S = expected_spectrum(still, state, [0.0, 0.5], dt=1e-3)
    ratio = spectrum_norm(S, g, 0.0)
    assert ratio[1] / ratio[0] == pytest.approx(math.exp(-2 * 0.02 * 9 * 0.5), rel=1e-6)


def test_dt_max_bounds():
    g = TorusGrid(2, 64)
    modes = synthesize_velocity_modes(SPEC2, g, 1, 2, 0)
    assert dt_max(modes, 0.0, g, "characteristic") == pytest.approx(0.25 / 8)
    kc2 = 21.0**2
    assert dt_max(modes, 0.0, g, "ito_euler") == pytest.approx(0.1 / (modes.effective_D0 * kc2))
    assert dt_max(None, 0.0, g, "characteristic") == math.inf


# ---------------------------------------------------------------- forcing and files

def test_forcing_fs():
    g = TorusGrid(2, 32, 3.0)
    assert forcing_fs(ForcingSpec(), 0.5, g) == 0.0
    one = ForcingSpec((ForcingMode((2, 1), 1.5, 0.3),))
    k2 = (2 * math.pi / 3.0) ** 2 * 5
    assert forcing_fs(one, 0.5, g) == pytest.approx(k2**-0.5 * 1.5**2 * 9 / 2, rel=1e-12)
    two = ForcingSpec((ForcingMode((2, 1), 1.5, 0.3), ForcingMode((0, 3), 0.5)))
    other = forcing_fs(ForcingSpec((ForcingMode((0, 3), 0.5),)), 0.5, g)
    assert forcing_fs(two, 0.5, g) == pytest.approx(forcing_fs(one, 0.5, g) + other, rel=1e-12)
    with pytest.raises(ValueError):
        ForcingSpec((ForcingMode((0, 0), 1.0),))
    with pytest.raises(ValueError):
        forcing_fs(ForcingSpec((ForcingMode((15, 0), 1.0),)), 0.5, g)


def test_forcing_increment_is_the_mode():
    g = TorusGrid(2, 32)
    forcing = ForcingSpec((ForcingMode((3, -2), 2.0, 0.7),))
    zero = ScalarFieldState(g, np.zeros(g.spectral_shape, complex))
    new = ScalarStepper(g, None, forcing).step(zero, 0.04, rngmod.stream(0, 0), eta=np.array([1.0]))
    X, Y = np.meshgrid(*([np.arange(32) * g.h] * 2), indexing="ij")
    expect = 0.2 * 2.0 * np.cos(3 * X - 2 * Y + 0.7)
    assert np.allclose(snapshot(new), expect, atol=1e-13)


def test_krgrid_round_trip(tmp_path):
    data = rngmod.stream(0, 0).standard_normal((8, 8, 8))
    write_krgrid(tmp_path / "a.krgrid", data, 6.5, 0.25)
    raw = (tmp_path / "a.krgrid").read_bytes()
    assert len(raw) == 32 + 8 * 512 and raw[:8] == b"KRGRID01"
    back, d, n, L, t = read_krgrid(tmp_path / "a.krgrid")
    assert np.array_equal(back, data) and (d, n, L, t) == (3, 8, 6.5, 0.25)
    (tmp_path / "b.krgrid").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        read_krgrid(tmp_path / "b.krgrid")
    with pytest.raises(ValueError):
        write_krgrid(tmp_path / "c.krgrid", np.zeros((4, 5)), 1.0, 0.0)


def test_snapshot_round_trip():
    g = TorusGrid(2, 64)
    state = ScalarFieldState.from_real(g, GaussianBump(2, g.L / 20).evaluate(g))
    back = ScalarFieldState.from_real(g, snapshot(state))
    assert np.max(np.abs(back.coeffs - state.coeffs)) <= 1e-12 * np.max(np.abs(state.coeffs))
    with pytest.raises(TypeError):
        snapshot(3.0)


# ---------------------------------------------------------------- mixing experiment

SMALL = dict(n=64, M=16, T=0.05, dt=0.005, record_every=1, bump_width=2 * math.pi / 24 / math.sqrt(2) / 3 * 0.75)


def test_mixing_config_validation():
    with pytest.raises(ValueError):
        run_mixing_experiment(MixingConfig(M=8))
    with pytest.raises(ValueError):
        run_mixing_experiment(MixingConfig(bump_width=1.0))
    with pytest.raises(ValueError):
        run_mixing_experiment(MixingConfig(**{**SMALL, "dt": 0.1, "T": 0.2}))
    with pytest.raises(ValueError):
        run_mixing_experiment(MixingConfig(**{**SMALL, "fit_window": (0.01, 0.2)}))
    with pytest.raises(ValueError):
        MixingConfig(refine=3).validate()


def test_small_mixing_run_is_deterministic_across_workers():
    a = run_mixing_experiment(MixingConfig(**SMALL), workers=1)
    b = run_mixing_experiment(MixingConfig(**SMALL), workers=4)
    assert [r.estimate for r in a.rows] == [r.estimate for r in b.rows]
    t, res, se = a.series("identity_residual")
    assert res[0] == 0.0
    assert a.rates["mixing_rate"]["exact"] == pytest.approx(lambda_ds(2, 0.5, a.diagnostics["effective_D1"]))


def test_bridged_substeps_compose_exactly_for_a_shear():
    # fields along e that depend only on k.x commute, so two bridged half steps
    # must reproduce the coarse step up to the interpolation tolerance
    g = TorusGrid(2, 64)
    shear = VelocityModeSet(g, np.array([[1, 0]]), np.array([[[0.0, 1.0]]]), np.array([0.8]), 1.0, 0.32, 0.0)
    state = ScalarFieldState.from_real(g, GaussianBump(2, g.L / 24).evaluate(g))
    stepper = ScalarStepper(g, shear)
    xi = shear.draw(rngmod.stream(0, 8))
    coarse = stepper.step(state, 0.01, None, xi=xi)
    fine = state
    for part in rngmod.bridge_split(xi, rngmod.stream(0, rngmod.BRIDGE), 1):
        fine = stepper.step(fine, 0.005, None, xi=part)
    assert np.max(np.abs(fine.coeffs - coarse.coeffs)) < 1e-7 * np.max(np.abs(state.coeffs))


def test_diffusive_run_reports_share():
    cfg = MixingConfig(**{**SMALL, "kappa": 0.05})
    rep = run_mixing_experiment(cfg)
    names = {v.name for v in rep.verdicts}
    assert "diffusive_share" in names and "mixing_rate" not in names
    t, D, _ = rep.series("diffusive_term")
    assert D[0] == 0 and np.all(np.diff(D) > 0)
