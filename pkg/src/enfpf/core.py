"""The ensemble Fokker-Planck filter: covariances, gains, score term and cycle.

Ensembles are plain ``(J, d)`` arrays with one member per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .dynamics import ModelSystem, StepperConfig, advance, psd_sqrt
from .errors import ContractViolation, SingularCovarianceError
from .observe import ObservationSpec, apply_observable

GAIN_MODES = ("direct", "square_root")


@dataclass(frozen=True)
class FilterSettings:
    tau: float
    substeps: int
    use_score: bool = False
    gain_mode: str = "direct"

    def __post_init__(self):
        if self.substeps < 1:
            raise ContractViolation("substeps must be at least 1")
        if self.gain_mode not in GAIN_MODES:
            raise ContractViolation(f"gain_mode must be one of {GAIN_MODES}")

    def check_stepper(self, stepper: StepperConfig):
        if abs(self.substeps * stepper.dt - self.tau) > 1e-9 * max(1.0, self.tau):
            raise ContractViolation(
                f"tau={self.tau} != substeps*dt={self.substeps}*{stepper.dt}"
            )


@dataclass
class GainResult:
    Cvh: np.ndarray
    Chh: np.ndarray
    K: np.ndarray | None = None


def _members(ensemble, min_size=1) -> np.ndarray:
    ens = np.asarray(ensemble, dtype=float)
    if ens.ndim == 1:
        ens = ens[:, None]
    if ens.ndim != 2 or ens.shape[0] < min_size:
        raise ContractViolation(f"need an ensemble of at least {min_size} member(s), got shape {ens.shape}")
    return ens


def ensemble_mean(ensemble) -> np.ndarray:
    return _members(ensemble).mean(axis=0)


def cross_covariances(ensemble, spec: ObservationSpec) -> GainResult:
    """State/observable cross-covariance and observable covariance (1/(J-1))."""
    ens = _members(ensemble, min_size=2)
    J = ens.shape[0]
    hv = apply_observable(spec, ens)
    V = ens - ens.mean(axis=0)
    Y = hv - hv.mean(axis=0)
    Chh = Y.T @ Y / (J - 1)
    return GainResult(Cvh=V.T @ Y / (J - 1), Chh=0.5 * (Chh + Chh.T))


def spd_solve(A, B):
    """Solve ``A X = B`` for symmetric positive-definite ``A``.

    On factorisation failure a jitter of ``1e-10 * trace(A) / n`` is added to
    the diagonal and the factorisation retried once.
    """
    A = np.atleast_2d(A)
    try:
        factor = linalg.cho_factor(A, check_finite=False)
    except linalg.LinAlgError:
        n = A.shape[0]
        jitter = 1e-10 * max(np.trace(A) / n, np.finfo(float).tiny)
        factor = linalg.cho_factor(A + jitter * np.eye(n), check_finite=False)
    return linalg.cho_solve(factor, B, check_finite=False)


def gain_direct(Cvh, Chh, gamma_d) -> np.ndarray:
    """K = Cvh (Chh + gamma_d)^{-1} via a Cholesky solve."""
    Cvh = np.atleast_2d(np.asarray(Cvh, dtype=float))
    S = np.atleast_2d(np.asarray(Chh, dtype=float)) + np.atleast_2d(np.asarray(gamma_d, dtype=float))
    if not (np.all(np.isfinite(Cvh)) and np.all(np.isfinite(S))):
        raise ContractViolation("non-finite entries in gain inputs")
    # S symmetric, so K^T = S^{-1} Cvh^T
    return spd_solve(S, Cvh.T).T


def diagonal_inverse(gamma_d):
    """Cheap application of ``gamma_d^{-1}`` for a diagonal ``gamma_d``."""
    g = np.atleast_2d(np.asarray(gamma_d, dtype=float))
    if np.count_nonzero(g - np.diag(np.diagonal(g))):
        raise ContractViolation("diagonal_inverse needs a diagonal matrix")
    inv = 1.0 / np.diagonal(g)
    return lambda X: inv[:, None] * X if np.ndim(X) == 2 else inv * X


def gain_square_root(ensemble, spec: ObservationSpec, gamma_inv_apply) -> np.ndarray:
    """Gain computed in ensemble space through the Woodbury identity.

    With scaled anomalies V (d x J) and Y (p x J), ``K = V Y^T W`` where
    ``W = G - G Y (I + Y^T G Y)^{-1} Y^T G`` and ``G = gamma_d^{-1}``. The
    product ``Y^T W`` collapses to ``(I + Y^T G Y)^{-1} Y^T G``, so only a
    J x J system is factorised. Cost is O(J^3 + J^2 p + J p^2 + d J p)
    (the J p^2 term only if ``gamma_inv_apply`` is dense).
    """
    ens = _members(ensemble, min_size=2)
    J = ens.shape[0]
    hv = apply_observable(spec, ens)
    scale = 1.0 / np.sqrt(J - 1)
    V = ((ens - ens.mean(axis=0)) * scale).T
    Y = ((hv - hv.mean(axis=0)) * scale).T
    GY = np.asarray(gamma_inv_apply(Y), dtype=float)
    if not (np.all(np.isfinite(V)) and np.all(np.isfinite(GY))):
        raise ContractViolation("non-finite entries in gain inputs")
    S = np.eye(J) + Y.T @ GY
    return V @ spd_solve(0.5 * (S + S.T), GY.T)


def gaussian_score(ensemble, point) -> np.ndarray:
    """Gaussian approximation of the score, -(C^{vv})^{-1} (point - mean).

    ``point`` may be a single state or a ``(k, d)`` stack.

    Raises
    ------
    SingularCovarianceError
        If the empirical covariance is singular (always the case for J <= d).
    """
    ens = _members(ensemble, min_size=2)
    J, d = ens.shape
    if J <= d:
        raise SingularCovarianceError(f"empirical covariance is singular for J={J} <= d={d}")
    mean = ens.mean(axis=0)
    A = ens - mean
    Cvv = A.T @ A / (J - 1)
    try:
        factor = linalg.cho_factor(Cvv, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularCovarianceError("empirical covariance is not positive definite") from exc
    diag = np.abs(np.diag(factor[0]))
    if diag.min() <= 1e-10 * diag.max():
        raise SingularCovarianceError("empirical covariance is numerically singular")
    pts = np.asarray(point, dtype=float)
    delta = np.atleast_2d(pts - mean)
    out = -linalg.cho_solve(factor, delta.T, check_finite=False).T
    return out[0] if pts.ndim == 1 else out


def score_correction(ensemble, spec: ObservationSpec, gamma_d) -> np.ndarray:
    """``K gamma_d K^T`` times the Gaussian score at every member, one row per member.

    With anomalies A (J x d) and observable anomalies Y (J x p) the gain is
    ``K = A^T G`` with ``G = Y (Chh + gamma_d)^{-1} / (J - 1)``, and
    ``A C^+ A^T = (J - 1) P`` where P projects onto the column space of A.
    The stacked term is therefore ``-(J - 1) P G gamma_d G^T A``, which needs
    no inverse of C. It equals ``gaussian_score(ens, ens) @ (K gamma_d K^T)^T``
    whenever C is invertible and, when the members span a proper subspace
    (conserved quantities, dealiased modes), it is the score of the Gaussian
    restricted to that subspace.

    Raises
    ------
    SingularCovarianceError
        For J <= d, where the sample covariance cannot be full rank.
    """
    ens = _members(ensemble, min_size=2)
    J, d = ens.shape
    if J <= d:
        raise SingularCovarianceError(f"empirical covariance is singular for J={J} <= d={d}")
    gamma_d = np.atleast_2d(np.asarray(gamma_d, dtype=float))
    A = ens - ens.mean(axis=0)
    hv = apply_observable(spec, ens)
    Y = hv - hv.mean(axis=0)
    Chh = Y.T @ Y / (J - 1)
    G = spd_solve(0.5 * (Chh + Chh.T) + gamma_d, Y.T).T / (J - 1)
    U, sv, _ = np.linalg.svd(A, full_matrices=False)
    # numerical rank with the usual max(J, d) * eps tolerance
    rank = int(np.sum(sv > sv[0] * max(J, d) * np.finfo(float).eps)) if sv[0] > 0 else 0
    Uk = U[:, :rank]
    return -(J - 1) * Uk @ (Uk.T @ (G @ (gamma_d @ (G.T @ A))))


def analysis_update(
    forecast,
    spec: ObservationSpec,
    y_obs,
    noise_obs_draws,
    use_score=False,
    gain_mode="direct",
):
    """Statistic-space analysis of a forecast ensemble.

    Each member moves by ``K (y_obs - yhat_j)`` where the predicted
    observation ``yhat_j`` is the ensemble mean of the statistic map plus a
    perturbation ``sqrt(gamma_d) @ noise_obs_draws[j]``. With ``use_score``
    the Gaussian score term ``K gamma_d K^T grad log rho(vhat_j)`` is added,
    evaluated with forecast statistics (see :func:`score_correction`).

    Returns the analysis ensemble and the :class:`GainResult` used.
    """
    ens = _members(forecast, min_size=2)
    gamma_d = spec.gamma_d
    if gamma_d is None:
        raise ContractViolation("observation spec has no gamma_d")
    J = ens.shape[0]
    noise_obs_draws = np.asarray(noise_obs_draws, dtype=float).reshape(J, spec.p)
    y_obs = np.asarray(y_obs, dtype=float).reshape(spec.p)

    gain = cross_covariances(ens, spec)
    if gain_mode == "direct":
        gain.K = gain_direct(gain.Cvh, gain.Chh, gamma_d)
    elif gain_mode == "square_root":
        gain.K = gain_square_root(ens, spec, diagonal_inverse(gamma_d))
    else:
        raise ContractViolation(f"unknown gain_mode {gain_mode!r}")

    h_mean = apply_observable(spec, ens).mean(axis=0)
    y_hat = h_mean + noise_obs_draws @ psd_sqrt(gamma_d).T
    out = ens + (y_obs - y_hat) @ gain.K.T
    if use_score:
        out = out + score_correction(ens, spec, gamma_d)
    return out, gain


def enfpf_cycle(
    ensemble,
    model: ModelSystem,
    stepper: StepperConfig,
    settings: FilterSettings,
    spec: ObservationSpec,
    y_obs,
    noise_state_draws=None,
    noise_obs_draws=None,
    t=0.0,
):
    """One forecast/analysis cycle of length ``settings.tau``.

    Parameters
    ----------
    ensemble : ndarray, shape (J, d)
    noise_state_draws : ndarray, shape (substeps, J, d), optional
        Standard normal draws for the model noise; only read for
        stochastic models.
    noise_obs_draws : ndarray, shape (J, p)
        Standard normal draws for the predicted-observation perturbations.
    t : float
        Model time at the start of the cycle.

    Returns
    -------
    ndarray, shape (J, d)
        The analysis ensemble.
    """
    settings.check_stepper(stepper)
    ens = _members(ensemble, min_size=2)
    if noise_obs_draws is None:
        raise ContractViolation("noise_obs_draws are required")
    forecast = advance(
        model, stepper, ens, t, settings.substeps, noise_state_draws, where="forecast"
    )
    analysis, _ = analysis_update(
        forecast, spec, y_obs, noise_obs_draws, settings.use_score, settings.gain_mode
    )
    return analysis
