"""Statistical observation operators, reference statistics and noise calibration."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dynamics import ModelSystem, StepperConfig, advance, psd_sqrt, substeps_for
from .errors import ContractViolation, DivergenceError

GAMMA_FLOOR = 1e-12


@dataclass(frozen=True)
class ObservationSpec:
    """The observed statistic map and its noise covariance.

    Each component is a tuple of variable indices whose product is observed:
    ``(i,)`` is x_i, ``(i, i)`` is x_i^2, ``(i, j)`` a cross second moment.
    Moments are uncentred.
    """

    components: tuple
    gamma_d: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        comps = tuple(tuple(int(i) for i in c) for c in self.components)
        if not comps:
            raise ContractViolation("an observation spec needs at least one component")
        for c in comps:
            if not 1 <= len(c) <= 3 or min(c) < 0:
                raise ContractViolation(f"invalid component {c}")
        object.__setattr__(self, "components", comps)
        if self.gamma_d is not None:
            g = np.atleast_2d(np.asarray(self.gamma_d, dtype=float))
            if g.shape != (self.p, self.p):
                raise ContractViolation(f"gamma_d must be {self.p}x{self.p}")
            if not np.allclose(g, g.T) or np.linalg.eigvalsh(g).min() <= 0:
                raise ContractViolation("gamma_d must be symmetric positive definite")
            object.__setattr__(self, "gamma_d", g)

    @property
    def p(self) -> int:
        return len(self.components)

    @property
    def max_index(self) -> int:
        return max(max(c) for c in self.components)

    def with_gamma(self, gamma_d) -> "ObservationSpec":
        return ObservationSpec(self.components, gamma_d)

    def labels(self, names="xyz"):
        def name(i):
            return names[i] if len(names) > i else f"v{i}"

        out = []
        for c in self.components:
            if len(set(c)) == 1:
                out.append(name(c[0]) + ("" if len(c) == 1 else f"^{len(c)}"))
            else:
                out.append("*".join(name(i) for i in c))
        return out


def moment_spec(variables: Sequence[int], orders: Sequence[int], cross=(), gamma_d=None):
    """Marginal moments ``E[x_i^k]`` for every i in ``variables`` and k in ``orders``.

    Components are ordered by moment order, then variable; ``cross`` appends
    ``E[x_i x_j]`` pairs.
    """
    comps = [(i,) * k for k in orders for i in variables]
    comps += [tuple(pair) for pair in cross]
    return ObservationSpec(tuple(comps), gamma_d)


def apply_observable(spec: ObservationSpec, state) -> np.ndarray:
    """Evaluate the statistic map on a state ``(d,)`` or stack of states ``(..., d)``."""
    state = np.asarray(state, dtype=float)
    if state.ndim == 0 or state.shape[-1] <= spec.max_index:
        raise ContractViolation(
            f"state dimension {state.shape[-1] if state.ndim else 0} too small for index {spec.max_index}"
        )
    cols = []
    for c in spec.components:
        val = state[..., c[0]]
        for i in c[1:]:
            val = val * state[..., i]
        cols.append(val)
    return np.stack(cols, axis=-1)


def ensemble_statistics(spec: ObservationSpec, ensemble) -> np.ndarray:
    """Mean of the statistic map over ensemble members (rows)."""
    ensemble = np.atleast_2d(np.asarray(ensemble, dtype=float))
    if ensemble.shape[0] < 1:
        raise ContractViolation("empty ensemble")
    return apply_observable(spec, ensemble).mean(axis=0)


@dataclass
class StatSeries:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if len(self.times) != len(self.values):
            raise ContractViolation("times and values must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ContractViolation("times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def to_csv(self, path):
        p = self.values.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"s{i + 1}" for i in range(p)])
            for t, row in zip(self.times, self.values):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:])


def ergodic_reference(
    model: ModelSystem,
    stepper: StepperConfig,
    spec: ObservationSpec,
    T_total,
    T_burn,
    init,
    rng: np.random.Generator | None = None,
    chunk=1000,
) -> np.ndarray:
    """Time average of the statistic map along one long trajectory.

    The observable is sampled after every stepper step once ``T_burn`` has
    elapsed. Stochastic models draw their noise from ``rng``.
    """
    if not T_total > T_burn >= 0:
        raise ContractViolation("need T_total > T_burn >= 0")
    dt = stepper.dt
    n_burn = int(round(T_burn / dt))
    n_total = int(round(T_total / dt))
    x = np.asarray(init, dtype=float)
    stochastic = not model.deterministic
    if stochastic and rng is None:
        raise ContractViolation("stochastic models need an rng")
    t = 0.0

    def noise(n):
        return rng.standard_normal((n, model.dim)) if stochastic else None

    step = 0
    while step < n_burn:
        n = min(chunk, n_burn - step)
        x = advance(model, stepper, x, t, n, noise(n), where="ergodic_reference")
        t += n * dt
        step += n
    acc = np.zeros(spec.p)
    count = 0

    def accumulate(state, _time):
        nonlocal acc, count
        acc += apply_observable(spec, state)
        count += 1

    while step < n_total:
        n = min(chunk, n_total - step)
        x = advance(model, stepper, x, t, n, noise(n), where="ergodic_reference", observer=accumulate)
        t += n * dt
        step += n
    return acc / count


def ensemble_reference_series(
    model: ModelSystem,
    stepper: StepperConfig,
    spec: ObservationSpec,
    J_ref: int,
    n_cycles: int,
    tau,
    init_sampler: Callable[[int], np.ndarray] | np.ndarray,
    t0=0.0,
    rng: np.random.Generator | None = None,
    return_ensembles=False,
):
    """Evolve a reference ensemble and record its statistics every ``tau``.

    ``init_sampler`` is either a callable ``J -> (J, d) array`` or the initial
    ensemble itself. With ``return_ensembles=True`` the ensembles at every
    recorded time are returned as a second value.
    """
    if J_ref < 1:
        raise ContractViolation("J_ref must be positive")
    members = init_sampler(J_ref) if callable(init_sampler) else np.asarray(init_sampler, float)
    members = np.atleast_2d(members)
    n_sub = substeps_for(tau, stepper.dt)
    times = [t0]
    values = [ensemble_statistics(spec, members)]
    kept = [members] if return_ensembles else None
    t = t0
    for _ in range(n_cycles):
        noise = None
        if not model.deterministic:
            noise = rng.standard_normal((n_sub,) + members.shape)
        members = advance(model, stepper, members, t, n_sub, noise, where="reference ensemble")
        t = t0 + (len(times)) * tau
        times.append(t)
        values.append(ensemble_statistics(spec, members))
        if return_ensembles:
            kept.append(members)
    series = StatSeries(np.array(times), np.array(values))
    if return_ensembles:
        return series, np.array(kept)
    return series


def calibrate_gamma(reference: StatSeries, fraction, floor=GAMMA_FLOOR) -> np.ndarray:
    """Diagonal noise covariance: (fraction * temporal std of each statistic)^2.

    Entries below ``floor`` are clamped to it; a warning is emitted if that
    happens (typically a constant statistic).
    """
    if len(reference) < 2:
        raise ContractViolation("need at least two reference entries")
    if not fraction > 0:
        raise ContractViolation("fraction must be positive")
    std = reference.values.std(axis=0, ddof=1)
    var = (fraction * std) ** 2
    clamped = var < floor
    if np.any(clamped):
        warnings.warn(
            f"{int(clamped.sum())} statistic(s) have no temporal variability; "
            f"observation variance clamped to {floor:g}",
            RuntimeWarning,
            stacklevel=2,
        )
    return np.diag(np.where(clamped, floor, var))


def synthesize_observation(truth_stats, gamma_d, noise_draw) -> np.ndarray:
    """Truth statistics plus ``sqrt(gamma_d) @ noise_draw``."""
    truth_stats = np.asarray(truth_stats, dtype=float)
    return truth_stats + np.asarray(noise_draw, dtype=float) @ psd_sqrt(gamma_d).T


__all__ = [
    "DivergenceError",
    "GAMMA_FLOOR",
    "ObservationSpec",
    "StatSeries",
    "apply_observable",
    "calibrate_gamma",
    "ensemble_reference_series",
    "ensemble_statistics",
    "ergodic_reference",
    "moment_spec",
    "synthesize_observation",
]
