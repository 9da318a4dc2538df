import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enfpf import dynamics as dyn
from enfpf.errors import ContractViolation, DivergenceError


def linear_decay():
    # dv/dt = -v as an OU process with zero noise
    return dyn.ornstein_uhlenbeck(theta=1.0, sigma_noise=0.0)


def taylor_exp(x, order=4):
    return sum(x**k / math.factorial(k) for k in range(order + 1))


# --- drift ------------------------------------------------------------------------


def test_lorenz63_drift_examples():
    m = dyn.lorenz63()
    assert np.array_equal(dyn.drift_eval(m, np.zeros(3)), np.zeros(3))
    np.testing.assert_allclose(dyn.drift_eval(m, np.ones(3)), [0.0, 26.0, -5.0 / 3.0], atol=1e-14)


def test_lorenz63_fixed_points():
    m = dyn.lorenz63()
    s, r, b = 10.0, 28.0, 8.0 / 3.0
    q = math.sqrt(b * (r - 1))
    for sign in (1, -1):
        x = np.array([sign * q, sign * q, r - 1])
        np.testing.assert_allclose(dyn.drift_eval(m, x), 0.0, atol=1e-12)


def test_lorenz96_equilibrium_and_convention():
    m = dyn.lorenz96(D=40, F=8.0)
    np.testing.assert_allclose(dyn.drift_eval(m, np.full(40, 8.0)), 0.0, atol=1e-13)
    rng = np.random.default_rng(3)
    x = rng.normal(size=40)
    i = 7
    expected = x[i - 1] * (x[i + 1] - x[i - 2]) - x[i] + 8.0
    assert dyn.drift_eval(m, x)[i] == pytest.approx(expected, abs=1e-13)


def test_forcing_r():
    assert dyn.forcing_r(0.0) == 28.0
    expected = 28.0 + 1.0 + math.sin(math.sqrt(3) / 4) + math.sin(math.sqrt(17) / 4)
    assert dyn.forcing_r(0.25) == pytest.approx(expected, abs=1e-14)
    t = 1.37
    assert math.sin(2 * math.pi * t) == pytest.approx(math.sin(2 * math.pi * (t + 1)), abs=1e-12)


def test_forced_lorenz_uses_time_dependent_r():
    m = dyn.lorenz63(forced=True)
    x = np.array([1.0, 2.0, 3.0])
    t = 0.25
    y_dot = x[0] * (dyn.forcing_r(t) - x[2]) - x[1]
    assert dyn.drift_eval(m, x, t)[1] == pytest.approx(y_dot, abs=1e-13)


def test_dimension_mismatch_is_rejected():
    with pytest.raises(ContractViolation):
        dyn.drift_eval(dyn.lorenz63(), np.zeros(4))
    with pytest.raises(ContractViolation):
        dyn.ModelSystem("lorenz96", 10, {"F": 8.0, "D": 40})
    with pytest.raises(ContractViolation):
        dyn.ModelSystem("lorenz63", 3, {"sigma": 10.0})


def test_drift_is_vectorised_over_members():
    m = dyn.lorenz96(D=12)
    x = np.random.default_rng(0).normal(size=(5, 12))
    stacked = dyn.drift_eval(m, x)
    for j in range(5):
        np.testing.assert_array_equal(stacked[j], dyn.drift_eval(m, x[j]))


# --- RK4 --------------------------------------------------------------------------


def test_rk4_matches_taylor_polynomial():
    out = dyn.rk4_step(linear_decay(), np.array([1.0]), 0.0, 0.1)
    assert out[0] == pytest.approx(taylor_exp(-0.1), abs=1e-15)
    assert out[0] == pytest.approx(0.9048375, abs=5e-8)


def test_rk4_zero_step_is_identity():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(dyn.rk4_step(dyn.lorenz63(), x, 0.0, 0.0), x)


def test_rk4_one_step_error_ratio():
    m = linear_decay()
    errs = [abs(dyn.rk4_step(m, np.array([1.0]), 0.0, h)[0] - math.exp(-h)) for h in (0.1, 0.05)]
    assert 28 < errs[0] / errs[1] < 36


def rk4_global_error(h, T=1.0):
    m = linear_decay()
    x = np.array([1.0])
    for _ in range(int(round(T / h))):
        x = dyn.rk4_step(m, x, 0.0, h)
    return abs(x[0] - math.exp(-T))


def test_rk4_empirical_order():
    e = [rk4_global_error(h) for h in (0.1, 0.05, 0.025)]
    orders = [math.log2(e[0] / e[1]), math.log2(e[1] / e[2])]
    assert min(orders) >= 3.9


def test_rk4_rejects_stochastic_model():
    with pytest.raises(ContractViolation):
        dyn.rk4_step(dyn.ornstein_uhlenbeck(), np.zeros(1), 0.0, 0.1)


# --- Euler-Maruyama ---------------------------------------------------------------


def test_em_without_noise_is_explicit_euler():
    m = dyn.ornstein_uhlenbeck(theta=2.0, sigma_noise=0.0)
    out = dyn.em_step(m, np.array([1.5]), 0.0, 0.1, np.array([0.7]))
    assert out[0] == pytest.approx(1.5 - 0.1 * 2.0 * 1.5, abs=1e-15)


def test_em_identity_diffusion():
    m = dyn.ornstein_uhlenbeck(theta=0.0, sigma_noise=1.0, dim=3)
    out = dyn.em_step(m, np.array([1.0, 2.0, 3.0]), 0.0, 1.0, np.ones(3))
    np.testing.assert_allclose(out, [2.0, 3.0, 4.0], atol=1e-15)


def test_em_ou_stationary_variance():
    theta, sigma = 1.0, math.sqrt(2.0)
    m = dyn.ornstein_uhlenbeck(theta=theta, sigma_noise=sigma)
    stepper = dyn.make_stepper(m, 0.01)
    rng = np.random.default_rng(11)
    x = np.zeros((10_000, 1))
    x = dyn.advance(m, stepper, x, 0.0, 500, rng.standard_normal((500, 10_000, 1)))
    assert x.var() == pytest.approx(sigma**2 / (2 * theta), rel=0.05)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=2),
    st.lists(st.floats(-3, 3), min_size=2, max_size=2),
    st.floats(1e-4, 0.5),
)
def test_em_is_pure(state, draw, dt):
    m = dyn.ornstein_uhlenbeck(theta=0.5, sigma_noise=0.3, dim=2)
    a = dyn.em_step(m, np.array(state), 0.0, dt, np.array(draw))
    b = dyn.em_step(m, np.array(state), 0.0, dt, np.array(draw))
    np.testing.assert_array_equal(a, b)


def test_psd_sqrt_rejects_indefinite():
    with pytest.raises(np.linalg.LinAlgError):
        dyn.psd_sqrt(np.array([[1.0, 2.0], [2.0, 1.0]]))


# --- Kuramoto-Sivashinsky ETDRK4 ----------------------------------------------------


def ks_model():
    return dyn.kuramoto_sivashinsky(L=22.0, n_modes=64)


def ifrk4_reference(u0, L, dt_total, h=1e-3):
    """Integrating-factor RK4 for u_t = -u_xx - u_xxxx - u u_x with 2/3 dealiasing."""
    n = len(u0)
    idx = np.fft.fftfreq(n, 1.0 / n)
    k = 2 * np.pi * idx / L
    keep = np.abs(idx) <= n / 3
    lin = k**2 - k**4

    E, E2 = np.exp(lin * h), np.exp(lin * h / 2)

    def nonlin(v):
        u = np.fft.ifft(v * keep).real
        return -0.5j * k * keep * np.fft.fft(u * u)

    v = np.fft.fft(u0).astype(complex)
    for _ in range(int(round(dt_total / h))):
        # integrating factor applied over each substep
        Nv = nonlin(v)
        a = E2 * (v + 0.5 * h * Nv)
        Na = nonlin(a)
        b = E2 * v + 0.5 * h * Na
        Nb = nonlin(b)
        c = E * v + h * E2 * Nb
        Nc = nonlin(c)
        v = E * v + h / 6 * (E * Nv + 2 * E2 * (Na + Nb) + Nc)
    return np.fft.ifft(v).real


def test_etdrk4_zero_field_is_fixed():
    m = ks_model()
    c = dyn.etdrk4_coefficients(m, 0.25)
    assert np.array_equal(dyn.etdrk4_step(m, np.zeros(64, complex), 0.25, c), np.zeros(64, complex))


def test_etdrk4_matches_integrating_factor_reference():
    m = ks_model()
    L = 22.0
    x = L * np.arange(64) / 64
    u0 = np.cos(2 * np.pi * x / L)
    c = dyn.etdrk4_coefficients(m, 0.25)
    out = np.fft.ifft(dyn.etdrk4_step(m, np.fft.fft(u0), 0.25, c))
    assert np.abs(out.imag).max() <= 1e-10
    ref = ifrk4_reference(u0, L, 0.25)
    assert np.abs(out.real - ref).max() <= 1e-5


def test_etdrk4_conjugate_symmetry_and_mean_over_100_steps():
    m = ks_model()
    c = dyn.etdrk4_coefficients(m, 0.25)
    rng = np.random.default_rng(5)
    u = rng.normal(size=64)
    u -= u.mean() - 0.3
    v = np.fft.fft(u)
    for _ in range(100):
        v = dyn.etdrk4_step(m, v, 0.25, c)
    mirror = (-np.arange(64)) % 64
    np.testing.assert_allclose(v, np.conj(v[mirror]), atol=1e-10)
    assert np.abs(np.fft.ifft(v).imag).max() <= 1e-10
    assert np.fft.ifft(v).real.mean() == pytest.approx(0.3, abs=1e-12)


def test_etdrk4_requires_coefficients():
    m = ks_model()
    with pytest.raises(ContractViolation):
        dyn.etdrk4_step(m, np.zeros(64, complex), 0.25, None)
    c = dyn.etdrk4_coefficients(m, 0.25)
    with pytest.raises(ContractViolation):
        dyn.etdrk4_step(m, np.zeros(64, complex), 0.5, c)


def test_ks_long_run_stays_bounded_and_real():
    m = ks_model()
    stepper = dyn.make_stepper(m, 0.25)
    u = np.random.default_rng(2).normal(size=(3, 64))
    u -= u.mean(axis=1, keepdims=True)
    u = dyn.advance(m, stepper, u, 0.0, 2400)  # 600 time units
    assert np.all(np.isfinite(u)) and np.abs(u).max() < 10


# --- stepper plumbing ----------------------------------------------------------------


def test_stepper_selection_and_compatibility():
    assert dyn.make_stepper(ks_model(), 0.25).scheme == "etdrk4"
    assert dyn.make_stepper(dyn.ornstein_uhlenbeck(), 0.01).scheme == "euler_maruyama"
    assert dyn.make_stepper(dyn.lorenz63(), 0.05).scheme == "rk4"
    with pytest.raises(ContractViolation):
        dyn.check_stepper(ks_model(), dyn.StepperConfig("rk4", 0.25))
    with pytest.raises(ContractViolation):
        dyn.check_stepper(dyn.ornstein_uhlenbeck(), dyn.StepperConfig("rk4", 0.01))
    with pytest.raises(ContractViolation):
        dyn.StepperConfig("rk4", 0.0)


def test_substeps_for():
    assert dyn.substeps_for(0.2, 0.05) == 4
    assert dyn.substeps_for(2.0, 0.25) == 8
    with pytest.raises(ContractViolation):
        dyn.substeps_for(0.23, 0.05)


def test_advance_reports_divergence():
    m = dyn.lorenz63()
    stepper = dyn.make_stepper(m, 0.05)
    x = np.array([[1.0, 1.0, 1.0], [1e200, 1e200, 1e200]])
    with pytest.raises(DivergenceError) as info:
        dyn.advance(m, stepper, x, 0.0, 10, where="forecast")
    assert info.value.member == 1
    assert "forecast" in str(info.value)
