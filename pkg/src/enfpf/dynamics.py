"""Test dynamical systems and their time-steppers.

Every function here accepts either a single state of shape ``(d,)`` or a
stack of states of shape ``(..., d)``; ensembles are advanced in one
vectorised call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractViolation, DivergenceError

MODEL_NAMES = (
    "lorenz63",
    "lorenz63_qp",
    "lorenz96",
    "kuramoto_sivashinsky",
    "ornstein_uhlenbeck",
)
SCHEMES = ("rk4", "etdrk4", "euler_maruyama")

_REQUIRED_PARAMS = {
    "lorenz63": ("sigma", "r", "beta"),
    "lorenz63_qp": ("sigma", "r", "beta"),
    "lorenz96": ("F", "D"),
    "kuramoto_sivashinsky": ("L", "n_modes"),
    "ornstein_uhlenbeck": ("theta", "sigma_noise"),
}


@dataclass(frozen=True)
class ModelSystem:
    """Drift/diffusion definition of one of the supported models.

    ``diffusion`` is the d x d covariance rate of the Brownian forcing; it is
    all zeros for the deterministic models.
    """

    name: str
    dim: int
    params: Mapping[str, float]
    diffusion: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.name not in MODEL_NAMES:
            raise ContractViolation(f"unknown model {self.name!r}")
        if self.dim < 1:
            raise ContractViolation("dim must be positive")
        missing = [k for k in _REQUIRED_PARAMS[self.name] if k not in self.params]
        if missing:
            raise ContractViolation(f"{self.name} is missing parameters {missing}")
        expected = {
            "lorenz63": 3,
            "lorenz63_qp": 3,
            "lorenz96": int(self.params.get("D", -1)),
            "kuramoto_sivashinsky": int(self.params.get("n_modes", -1)),
        }.get(self.name, self.dim)
        if self.dim != expected:
            raise ContractViolation(f"{self.name} requires dim={expected}, got {self.dim}")

        diffusion = self.diffusion
        if diffusion is None:
            diffusion = np.zeros((self.dim, self.dim))
        diffusion = np.array(diffusion, dtype=float)
        if diffusion.shape != (self.dim, self.dim):
            raise ContractViolation("diffusion must be a dim x dim matrix")
        if not np.allclose(diffusion, diffusion.T):
            raise ContractViolation("diffusion must be symmetric")
        diffusion.setflags(write=False)
        object.__setattr__(self, "diffusion", diffusion)
        object.__setattr__(self, "params", dict(self.params))

    @property
    def deterministic(self) -> bool:
        return not np.any(self.diffusion)


def lorenz63(sigma=10.0, r=28.0, beta=8.0 / 3.0, forced=False) -> ModelSystem:
    """Lorenz (1963); ``forced=True`` replaces r by the quasiperiodic r(t)."""
    name = "lorenz63_qp" if forced else "lorenz63"
    return ModelSystem(name, 3, {"sigma": sigma, "r": r, "beta": beta})


def lorenz96(D=40, F=8.0) -> ModelSystem:
    return ModelSystem("lorenz96", int(D), {"F": F, "D": int(D)})


def kuramoto_sivashinsky(L=22.0, n_modes=64) -> ModelSystem:
    return ModelSystem("kuramoto_sivashinsky", int(n_modes), {"L": L, "n_modes": int(n_modes)})


def ornstein_uhlenbeck(theta=1.0, sigma_noise=1.0, dim=1) -> ModelSystem:
    dim = int(dim)
    return ModelSystem(
        "ornstein_uhlenbeck",
        dim,
        {"theta": theta, "sigma_noise": sigma_noise},
        diffusion=sigma_noise**2 * np.eye(dim),
    )


def forcing_r(t):
    """Quasiperiodic Rayleigh parameter of the forced Lorenz63 model."""
    return 28.0 + np.sin(2 * np.pi * t) + np.sin(np.sqrt(3.0) * t) + np.sin(np.sqrt(17.0) * t)


def _check_state(model: ModelSystem, state) -> np.ndarray:
    state = np.asarray(state)
    if state.ndim == 0 or state.shape[-1] != model.dim:
        raise ContractViolation(
            f"{model.name} expects states with trailing dimension {model.dim}, got shape {state.shape}"
        )
    return state


def drift_eval(model: ModelSystem, state, t=0.0) -> np.ndarray:
    """Evaluate the drift f(state, t)."""
    state = _check_state(model, state)
    p = model.params
    name = model.name
    if name in ("lorenz63", "lorenz63_qp"):
        x, y, z = state[..., 0], state[..., 1], state[..., 2]
        r = forcing_r(t) if name == "lorenz63_qp" else p["r"]
        return np.stack(
            [p["sigma"] * (y - x), x * (r - z) - y, x * y - p["beta"] * z], axis=-1
        )
    if name == "lorenz96":
        # standard form: (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F
        return (
            (np.roll(state, -1, axis=-1) - np.roll(state, 2, axis=-1)) * np.roll(state, 1, axis=-1)
            - state
            + p["F"]
        )
    if name == "ornstein_uhlenbeck":
        return -p["theta"] * state
    # Kuramoto-Sivashinsky in physical space, evaluated spectrally
    k, mask = ks_wavenumbers(p["L"], model.dim)
    u_hat = np.fft.fft(state, axis=-1)
    lin = (k**2 - k**4) * u_hat
    return np.real(np.fft.ifft(lin + _ks_nonlinear(u_hat, k, mask), axis=-1))


def rk4_step(model: ModelSystem, state, t, dt) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step of the drift."""
    if not model.deterministic:
        raise ContractViolation("rk4_step requires a deterministic model (diffusion = 0)")
    state = _check_state(model, state)
    k1 = drift_eval(model, state, t)
    k2 = drift_eval(model, state + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = drift_eval(model, state + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = drift_eval(model, state + dt * k3, t + dt)
    return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def psd_sqrt(matrix) -> np.ndarray:
    """Symmetric square root of a positive-semidefinite matrix.

    Raises ``np.linalg.LinAlgError`` if the matrix has a clearly negative
    eigenvalue.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if np.count_nonzero(matrix - np.diag(np.diagonal(matrix))) == 0:
        diag = np.diagonal(matrix)
        if np.any(diag < 0):
            raise np.linalg.LinAlgError("matrix is not positive semidefinite")
        return np.diag(np.sqrt(diag))
    vals, vecs = np.linalg.eigh(0.5 * (matrix + matrix.T))
    tol = 1e-10 * max(1.0, np.abs(vals).max())
    if vals.min() < -tol:
        raise np.linalg.LinAlgError("matrix is not positive semidefinite")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def em_step(model: ModelSystem, state, t, dt, noise_draw) -> np.ndarray:
    """Euler-Maruyama step with caller-supplied standard normal ``noise_draw``.

    The discrete noise covariance is ``diffusion * dt``.
    """
    state = _check_state(model, state)
    noise_draw = np.asarray(noise_draw, dtype=float)
    if noise_draw.shape[-1] != model.dim:
        raise ContractViolation("noise_draw must have trailing dimension model.dim")
    root = psd_sqrt(model.diffusion * dt)
    return state + dt * drift_eval(model, state, t) + noise_draw @ root.T


# --- Kuramoto-Sivashinsky / ETDRK4 -------------------------------------------------


def ks_wavenumbers(L, n):
    """Angular wavenumbers in FFT order and the 2/3-rule dealiasing mask."""
    m = np.fft.fftfreq(n, d=1.0 / n)
    k = 2 * np.pi * m / L
    mask = np.abs(m) <= n / 3.0
    return k, mask


def _ks_nonlinear(u_hat, k, mask):
    """Fourier transform of -u u_x = -(u^2)_x / 2, dealiased."""
    u = np.real(np.fft.ifft(u_hat * mask, axis=-1))
    return -0.5j * k * mask * np.fft.fft(u * u, axis=-1)


@dataclass(frozen=True)
class ETDRK4Coefficients:
    """Per-mode coefficient table for one ETDRK4 step of size ``dt``."""

    dt: float
    k: np.ndarray
    mask: np.ndarray
    E: np.ndarray
    E2: np.ndarray
    Q: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray


def etdrk4_coefficients(model: ModelSystem, dt, n_contour=32) -> ETDRK4Coefficients:
    """Precompute ETDRK4 coefficients for the Kuramoto-Sivashinsky model.

    The phi-functions are evaluated as means over ``n_contour`` points on a
    unit circle around each scaled eigenvalue, which avoids the cancellation
    of the closed forms near zero.
    """
    if model.name != "kuramoto_sivashinsky":
        raise ContractViolation("ETDRK4 is only defined for the Kuramoto-Sivashinsky model")
    k, mask = ks_wavenumbers(model.params["L"], model.dim)
    lin = k**2 - k**4
    roots = np.exp(1j * np.pi * (np.arange(1, n_contour + 1) - 0.5) / (n_contour / 2))
    LR = dt * lin[:, None] + roots[None, :]
    eLR = np.exp(LR)
    Q = dt * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=1))
    f1 = dt * np.real(np.mean((-4 - LR + eLR * (4 - 3 * LR + LR**2)) / LR**3, axis=1))
    f2 = dt * np.real(np.mean((2 + LR + eLR * (LR - 2)) / LR**3, axis=1))
    f3 = dt * np.real(np.mean((-4 - 3 * LR - LR**2 + eLR * (4 - LR)) / LR**3, axis=1))
    return ETDRK4Coefficients(
        dt=float(dt),
        k=k,
        mask=mask,
        E=np.exp(dt * lin),
        E2=np.exp(dt * lin / 2),
        Q=Q,
        f1=f1,
        f2=f2,
        f3=f3,
    )


def etdrk4_step(model: ModelSystem, spectral_state, dt, coeffs: ETDRK4Coefficients | None):
    """Advance Fourier coefficients (full FFT ordering) by one ETDRK4 step."""
    if coeffs is None:
        raise ContractViolation("etdrk4_step needs precomputed coefficients")
    if not np.isclose(coeffs.dt, dt):
        raise ContractViolation(f"coefficients were built for dt={coeffs.dt}, not {dt}")
    v = _check_state(model, spectral_state)
    c = coeffs
    Nv = _ks_nonlinear(v, c.k, c.mask)
    a = c.E2 * v + c.Q * Nv
    Na = _ks_nonlinear(a, c.k, c.mask)
    b = c.E2 * v + c.Q * Na
    Nb = _ks_nonlinear(b, c.k, c.mask)
    cc = c.E2 * a + c.Q * (2 * Nb - Nv)
    Nc = _ks_nonlinear(cc, c.k, c.mask)
    out = c.E * v + Nv * c.f1 + 2 * (Na + Nb) * c.f2 + Nc * c.f3
    return _conjugate_symmetric(out)


def _conjugate_symmetric(v):
    # The linearly unstable low modes would otherwise amplify round-off in the
    # antisymmetric (imaginary-field) part, which the real nonlinearity never damps.
    n = v.shape[-1]
    mirror = (-np.arange(n)) % n
    return 0.5 * (v + np.conj(v[..., mirror]))


# --- stepper configuration -----------------------------------------------------------


@dataclass(frozen=True)
class StepperConfig:
    scheme: str
    dt: float
    etdrk4_coeffs: ETDRK4Coefficients | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractViolation(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ContractViolation("dt must be positive")


def make_stepper(model: ModelSystem, dt) -> StepperConfig:
    """Pick the scheme each model requires and precompute what it needs."""
    if model.name == "kuramoto_sivashinsky":
        return StepperConfig("etdrk4", float(dt), etdrk4_coefficients(model, dt))
    if not model.deterministic:
        return StepperConfig("euler_maruyama", float(dt))
    return StepperConfig("rk4", float(dt))


def check_stepper(model: ModelSystem, stepper: StepperConfig):
    if model.name == "kuramoto_sivashinsky" and stepper.scheme != "etdrk4":
        raise ContractViolation("the Kuramoto-Sivashinsky model requires etdrk4")
    if stepper.scheme == "etdrk4" and stepper.etdrk4_coeffs is None:
        raise ContractViolation("etdrk4 stepper is missing its coefficient table")
    if not model.deterministic and stepper.scheme != "euler_maruyama":
        raise ContractViolation("stochastic models require euler_maruyama")


def substeps_for(tau, dt) -> int:
    """Number of stepper steps in a cycle of length ``tau``; must be integral."""
    n = int(round(tau / dt))
    if n < 1 or abs(n * dt - tau) > 1e-9 * max(1.0, tau):
        raise ContractViolation(f"cycle length {tau} is not an integer multiple of dt={dt}")
    return n


def advance(model, stepper, states, t, n_steps, noise=None, where="", observer=None):
    """Advance a state or stack of states by ``n_steps`` stepper steps.

    Parameters
    ----------
    states : ndarray, shape (d,) or (J, d)
        Physical-space states.
    t : float
        Model time at the start.
    noise : ndarray, shape (n_steps, ..., d), optional
        Standard normal draws, required for stochastic models.
    observer : callable, optional
        Called as ``observer(state, time)`` after every step with the
        physical-space state.

    Returns
    -------
    ndarray
        States at ``t + n_steps * dt``.

    Raises
    ------
    DivergenceError
        If any state becomes non-finite; the first offending member and
        substep are reported.
    """
    check_stepper(model, stepper)
    states = _check_state(model, np.asarray(states, dtype=float))
    dt = stepper.dt
    root = None
    if stepper.scheme == "euler_maruyama":
        if noise is None:
            raise ContractViolation("stochastic models need noise draws")
        noise = np.asarray(noise)
        if noise.shape[0] < n_steps:
            raise ContractViolation("not enough noise draws for the requested substeps")
        root = psd_sqrt(model.diffusion * dt).T
    spectral = stepper.scheme == "etdrk4"
    x = np.fft.fft(states, axis=-1) if spectral else states
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(n_steps):
            ts = t + s * dt
            if spectral:
                x = etdrk4_step(model, x, dt, stepper.etdrk4_coeffs)
            elif stepper.scheme == "rk4":
                x = rk4_step(model, x, ts, dt)
            else:
                x = x + dt * drift_eval(model, x, ts) + noise[s] @ root
            if not np.all(np.isfinite(x)):
                bad = ~np.isfinite(x)
                member = int(np.argmax(bad.reshape(-1, model.dim).any(axis=1))) if x.ndim > 1 else None
                raise DivergenceError(member, s, ts + dt, where)
            if observer is not None:
                observer(np.real(np.fft.ifft(x, axis=-1)) if spectral else x, ts + dt)
    if spectral:
        x = np.real(np.fft.ifft(x, axis=-1))
    return x
