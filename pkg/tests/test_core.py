import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enfpf import core
from enfpf import dynamics as dyn
from enfpf.errors import ContractViolation, SingularCovarianceError
from enfpf.observe import ObservationSpec, apply_observable, moment_spec


def identity_model(dim=1):
    # f = 0, no noise: the forecast leaves members where they are
    return dyn.ornstein_uhlenbeck(theta=0.0, sigma_noise=0.0, dim=dim)


def random_spec(rng, d, p):
    comps = []
    while len(comps) < p:
        order = int(rng.integers(1, 4))
        c = tuple(sorted(int(i) for i in rng.integers(0, d, size=order)))
        if c not in comps:
            comps.append(c)
    gamma = np.diag(rng.uniform(0.1, 2.0, size=p))
    return ObservationSpec(tuple(comps), gamma)


def oracle_gain(ens, spec, gamma):
    """Gain from explicit sample covariances and an explicit inverse."""
    J = ens.shape[0]
    hv = apply_observable(spec, ens)
    dv = ens - ens.mean(axis=0)
    dh = hv - hv.mean(axis=0)
    Cvh = sum(np.outer(dv[j], dh[j]) for j in range(J)) / (J - 1)
    Chh = sum(np.outer(dh[j], dh[j]) for j in range(J)) / (J - 1)
    return Cvh @ np.linalg.inv(Chh + gamma)


# --- means and covariances ------------------------------------------------------------


def test_ensemble_mean():
    np.testing.assert_array_equal(core.ensemble_mean([[0.0, 0.0], [2.0, 2.0]]), [1.0, 1.0])
    np.testing.assert_array_equal(core.ensemble_mean([[3.0, -1.0]]), [3.0, -1.0])
    with pytest.raises(ContractViolation):
        core.ensemble_mean(np.empty((0, 2)))


def test_cross_covariances_hand_values():
    sq = moment_spec([0], [2])
    g = core.cross_covariances(np.array([[-1.0], [1.0]]), sq)
    assert g.Cvh[0, 0] == 0.0
    g = core.cross_covariances(np.array([[0.0], [2.0]]), sq)
    assert g.Cvh[0, 0] == 4.0 and g.Chh[0, 0] == 8.0
    # observed coordinate constant across members
    ens = np.array([[0.0, 3.0], [1.0, 3.0], [5.0, 3.0]])
    g = core.cross_covariances(ens, moment_spec([1], [1, 2]))
    assert np.all(g.Cvh == 0.0) and np.all(g.Chh == 0.0)
    with pytest.raises(ContractViolation):
        core.cross_covariances(np.array([[1.0]]), sq)


def test_gain_direct_examples():
    assert core.gain_direct(4.0, 8.0, 2.0)[0, 0] == pytest.approx(0.4, abs=1e-15)
    assert np.all(core.gain_direct(np.zeros((3, 2)), np.eye(2), np.eye(2)) == 0.0)
    big = core.gain_direct(np.ones((2, 2)), np.eye(2), 1e12 * np.eye(2))
    assert np.abs(big).max() < 1e-11
    with pytest.raises(ContractViolation):
        core.gain_direct(np.array([[np.nan]]), 1.0, 1.0)


def test_square_root_gain_two_members():
    spec = moment_spec([0], [2], gamma_d=np.array([[2.0]]))
    K = core.gain_square_root(np.array([[0.0], [2.0]]), spec, core.diagonal_inverse(spec.gamma_d))
    assert K[0, 0] == pytest.approx(0.4, abs=1e-14)


def test_square_root_gain_zero_cross_covariance():
    spec = moment_spec([1], [1], gamma_d=np.eye(1))
    ens = np.array([[0.0, 3.0], [1.0, 3.0], [5.0, 3.0]])
    assert np.all(core.gain_square_root(ens, spec, core.diagonal_inverse(spec.gamma_d)) == 0.0)


def test_gain_matches_explicit_inverse_oracle():
    rng = np.random.default_rng(0)
    ens = rng.normal(size=(5, 3))
    spec = random_spec(rng, 3, 2)
    g = core.cross_covariances(ens, spec)
    K = core.gain_direct(g.Cvh, g.Chh, spec.gamma_d)
    np.testing.assert_allclose(K, oracle_gain(ens, spec, spec.gamma_d), rtol=1e-10, atol=1e-12)
    Ks = core.gain_square_root(ens, spec, core.diagonal_inverse(spec.gamma_d))
    assert np.abs(Ks - K).max() <= 1e-10


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from([2, 5, 20]),
    st.sampled_from([1, 3, 10]),
    st.sampled_from([1, 2, 6]),
    st.integers(0, 2**31 - 1),
)
def test_gain_equivalence_sweep(J, d, p, seed):
    rng = np.random.default_rng(seed)
    if p > d + d * (d + 1) // 2 + d * (d + 1) * (d + 2) // 6:
        p = d
    ens = rng.normal(size=(J, d))
    spec = random_spec(rng, d, p)
    g = core.cross_covariances(ens, spec)
    K = core.gain_direct(g.Cvh, g.Chh, spec.gamma_d)
    Ks = core.gain_square_root(ens, spec, core.diagonal_inverse(spec.gamma_d))
    assert np.abs(Ks - K).max() <= 1e-8 * (1 + np.abs(K).max())


def test_diagonal_inverse_rejects_dense():
    with pytest.raises(ContractViolation):
        core.diagonal_inverse(np.array([[1.0, 0.1], [0.1, 1.0]]))


# --- score ---------------------------------------------------------------------------


def test_gaussian_score_examples():
    ens = np.array([[-1.0], [1.0], [0.0]])
    np.testing.assert_allclose(core.gaussian_score(ens, ens.mean(axis=0)), 0.0, atol=1e-15)
    two = np.array([[-1.0], [1.0]])
    assert core.gaussian_score(two, np.array([1.0]))[0] == pytest.approx(-0.5, abs=1e-15)


def test_gaussian_score_singular_covariance():
    ens = np.random.default_rng(2).normal(size=(6, 3))
    ens[:, 2] = ens[:, 0] + ens[:, 1]
    with pytest.raises(SingularCovarianceError):
        core.gaussian_score(ens, ens[0])
    with pytest.raises(SingularCovarianceError):
        core.gaussian_score(ens[:3], ens[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 30), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_gaussian_score_sums_to_zero(J, d, seed):
    if J <= d:
        J = d + 2
    ens = np.random.default_rng(seed).normal(size=(J, d)) * 3.0 + 1.0
    s = core.gaussian_score(ens, ens)
    assert np.abs(s.sum(axis=0)).max() <= 1e-10 * (1 + np.abs(s).max())


def test_score_correction_matches_explicit_form():
    rng = np.random.default_rng(7)
    ens = rng.normal(size=(12, 3))
    spec = random_spec(rng, 3, 4)
    g = core.cross_covariances(ens, spec)
    K = core.gain_direct(g.Cvh, g.Chh, spec.gamma_d)
    explicit = core.gaussian_score(ens, ens) @ (K @ spec.gamma_d @ K.T).T
    np.testing.assert_allclose(core.score_correction(ens, spec, spec.gamma_d), explicit, rtol=1e-10, atol=1e-13)


def test_score_correction_in_a_subspace():
    # members confined to a plane: the restricted Gaussian score stays finite and in-plane
    rng = np.random.default_rng(8)
    coeffs = rng.normal(size=(15, 2))
    basis = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]])
    ens = coeffs @ basis
    spec = moment_spec([0, 1, 2], [1, 2], gamma_d=np.diag(rng.uniform(0.1, 1.0, 6)))
    with pytest.raises(SingularCovarianceError):
        core.gaussian_score(ens, ens)
    corr = core.score_correction(ens, spec, spec.gamma_d)
    normal = np.cross(basis[0], basis[1])
    assert np.abs(corr @ normal).max() <= 1e-10 * np.abs(corr).max()
    # oracle: explicit score inside plane coordinates
    Q, _ = np.linalg.qr(basis.T)
    z = ens @ Q
    g = core.cross_covariances(ens, spec)
    K = core.gain_direct(g.Cvh, g.Chh, spec.gamma_d)
    Kz = Q.T @ K
    explicit = core.gaussian_score(z, z) @ (Kz @ spec.gamma_d @ Kz.T).T @ Q.T
    np.testing.assert_allclose(corr, explicit, rtol=1e-9, atol=1e-12)


def test_score_correction_needs_more_members_than_dimensions():
    spec = moment_spec([0], [1], gamma_d=np.eye(1))
    with pytest.raises(SingularCovarianceError):
        core.score_correction(np.random.default_rng(0).normal(size=(3, 3)), spec, spec.gamma_d)


# --- analysis and cycle -----------------------------------------------------------------


def test_analysis_hand_example():
    spec = moment_spec([0], [1], gamma_d=np.array([[2.0]]))
    out, gain = core.analysis_update(np.array([[0.0], [2.0]]), spec, [3.0], np.zeros((2, 1)))
    assert gain.K[0, 0] == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(out[:, 0], [1.0, 3.0], atol=1e-14)


def test_enfpf_cycle_hand_example():
    model = identity_model()
    stepper = dyn.make_stepper(model, 0.1)
    settings_ = core.FilterSettings(tau=0.2, substeps=2)
    spec = moment_spec([0], [1], gamma_d=np.array([[2.0]]))
    noise = np.zeros((2, 2, 1))
    out = core.enfpf_cycle(np.array([[0.0], [2.0]]), model, stepper, settings_, spec, [3.0], noise, np.zeros((2, 1)))
    np.testing.assert_allclose(out[:, 0], [1.0, 3.0], atol=1e-14)


def test_zero_spread_ensemble_is_unchanged():
    spec = moment_spec([0, 1], [1, 2], gamma_d=0.3 * np.eye(4))
    ens = np.tile([1.0, -2.0], (5, 1))
    draws = np.random.default_rng(0).standard_normal((5, 4))
    out, gain = core.analysis_update(ens, spec, [0.0, 0.0, 9.0, 9.0], draws)
    assert np.all(gain.K == 0.0)
    np.testing.assert_array_equal(out, ens)


def test_large_gamma_leaves_forecast():
    rng = np.random.default_rng(3)
    ens = rng.normal(size=(8, 2))
    spec = moment_spec([0, 1], [1, 2], gamma_d=1e14 * np.eye(4))
    draws = rng.standard_normal((8, 4))
    out, _ = core.analysis_update(ens, spec, np.zeros(4), draws * 1e-7)
    np.testing.assert_allclose(out, ens, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.integers(1, 4), st.integers(0, 2**31 - 1), st.sampled_from(core.GAIN_MODES))
def test_analysis_mean_identity(J, d, seed, mode):
    rng = np.random.default_rng(seed)
    ens = rng.normal(size=(J, d))
    spec = random_spec(rng, d, min(3, d + 1))
    y = rng.normal(size=spec.p)
    draws = rng.standard_normal((J, spec.p))
    out, gain = core.analysis_update(ens, spec, y, draws, gain_mode=mode)
    eta_bar = (draws @ np.sqrt(spec.gamma_d).T).mean(axis=0)
    h_bar = apply_observable(spec, ens).mean(axis=0)
    expected = ens.mean(axis=0) + gain.K @ (y - h_bar - eta_bar)
    np.testing.assert_allclose(out.mean(axis=0), expected, rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 25), st.integers(0, 2**31 - 1))
def test_score_term_keeps_the_mean(J, seed):
    rng = np.random.default_rng(seed)
    ens = rng.normal(size=(J, 3))
    spec = random_spec(rng, 3, 3)
    y = rng.normal(size=3)
    draws = rng.standard_normal((J, 3))
    plain, _ = core.analysis_update(ens, spec, y, draws)
    scored, _ = core.analysis_update(ens, spec, y, draws, use_score=True)
    np.testing.assert_allclose(scored.mean(axis=0), plain.mean(axis=0), atol=1e-10)


def test_gain_modes_agree_in_analysis():
    rng = np.random.default_rng(4)
    ens = rng.normal(size=(20, 3))
    spec = random_spec(rng, 3, 6)
    y, draws = rng.normal(size=6), rng.standard_normal((20, 6))
    a, _ = core.analysis_update(ens, spec, y, draws, gain_mode="direct")
    b, _ = core.analysis_update(ens, spec, y, draws, gain_mode="square_root")
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_cycle_is_deterministic():
    model = dyn.lorenz63()
    stepper = dyn.make_stepper(model, 0.05)
    s = core.FilterSettings(tau=0.2, substeps=4, use_score=True)
    rng = np.random.default_rng(5)
    ens = rng.normal(size=(10, 3)) + [0.0, 0.0, 25.0]
    spec = moment_spec([0, 1, 2], [1, 2], gamma_d=0.5 * np.eye(6))
    y, draws = rng.normal(size=6), rng.standard_normal((10, 6))
    a = core.enfpf_cycle(ens, model, stepper, s, spec, y, None, draws)
    b = core.enfpf_cycle(ens.copy(), model, stepper, s, spec, y.copy(), None, draws.copy())
    assert np.array_equal(a, b)


def test_cycle_contracts():
    model = identity_model()
    stepper = dyn.make_stepper(model, 0.1)
    spec = moment_spec([0], [1], gamma_d=np.eye(1))
    with pytest.raises(ContractViolation):
        core.enfpf_cycle(np.zeros((2, 1)), model, stepper, core.FilterSettings(0.3, 2), spec, [0.0], None, np.zeros((2, 1)))
    with pytest.raises(ContractViolation):
        core.enfpf_cycle(np.zeros((2, 1)), model, stepper, core.FilterSettings(0.2, 2), spec, [0.0], np.zeros((2, 2, 1)))
    with pytest.raises(ContractViolation):
        core.FilterSettings(0.2, 0)
    with pytest.raises(ContractViolation):
        core.FilterSettings(0.2, 2, gain_mode="qr")
    with pytest.raises(ContractViolation):
        core.analysis_update(np.zeros((2, 1)), moment_spec([0], [1]), [0.0], np.zeros((2, 1)))


def test_spd_solve_jitter_fallback():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])  # singular PSD
    x = core.spd_solve(A, np.array([1.0, 1.0]))
    assert np.all(np.isfinite(x))
