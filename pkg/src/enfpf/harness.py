"""Experiment protocols: references, seeded replicates, per-cycle metrics and CSV output.

Every experiment follows one loop. Arms start from the same initial ensemble
and see the same observation and perturbation draws, which are keyed by
(replicate seed, stream, cycle) rather than drawn from a shared sequence.
Cycle ``c`` is assimilated iff the arm is filtered and
``start < c <= end`` for the configured ``filter_window``; otherwise the
ensemble is only propagated.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core
from .config import ArmConfig, ExperimentConfig, KBConfig, ObservationConfig, build_model, config_hash, dump_config
from .dynamics import ModelSystem, StepperConfig, advance, make_stepper, substeps_for
from .errors import ContractViolation, DivergenceError, SingularCovarianceError
from .metrics import marginal_w1_mean, stat_rmse, w1_assignment
from .observe import (
    ObservationSpec,
    calibrate_gamma,
    ensemble_reference_series,
    ensemble_statistics,
    ergodic_reference,
    moment_spec,
    synthesize_observation,
)

STREAMS = {
    "init": 1,
    "reference": 2,
    "observation": 3,
    "perturbation": 4,
    "model_noise": 5,
    "floor": 6,
    "subsample": 7,
    "ergodic": 8,
}
TIME_VARYING = ("track_stats", "pullback")
CENTER_SPINUP = 100.0
METRICS = ("rmse_mean", "rmse_second", "w1_joint", "w1_marginal")


def stream_rng(seed, stream, *index) -> np.random.Generator:
    """Counter-based generator for one named stream, optionally indexed (e.g. by cycle)."""
    ss = np.random.SeedSequence([int(seed), STREAMS[stream], *(int(i) for i in index)])
    return np.random.Generator(np.random.Philox(ss))


def replicate_seed(seed, replicate) -> int:
    return int(seed) + int(replicate)


# --- observation specs --------------------------------------------------------------


def observation_spec(obs: ObservationConfig, dim) -> ObservationSpec:
    variables = list(range(dim)) if obs.variables is None else list(obs.variables)
    if max(variables) >= dim or any(max(c) >= dim for c in obs.cross):
        raise ContractViolation(f"observed variable index out of range for dim={dim}")
    return moment_spec(variables, obs.orders, cross=[tuple(c) for c in obs.cross])


def metric_spec(dim) -> ObservationSpec:
    """Means and uncentred second moments of every variable (used for RMSE scoring)."""
    return moment_spec(range(dim), (1, 2))


class _SpecUnion:
    """All distinct components used by an experiment, with column lookups per spec."""

    def __init__(self, specs):
        comps = []
        for s in specs:
            for c in s.components:
                if c not in comps:
                    comps.append(c)
        self.spec = ObservationSpec(tuple(comps))
        self._index = {c: i for i, c in enumerate(comps)}

    def columns(self, spec: ObservationSpec) -> np.ndarray:
        return np.array([self._index[c] for c in spec.components])


# --- initial ensembles ----------------------------------------------------------------


def _zero_mean_field(model: ModelSystem) -> bool:
    # the KS spatial mean is conserved, so perturbations must not change it
    return model.name == "kuramoto_sivashinsky"


def generic_initial(model: ModelSystem, rng, n) -> np.ndarray:
    """Rough starting points from which spin-up reaches the attractor."""
    d = model.dim
    if model.name in ("lorenz63", "lorenz63_qp"):
        return rng.normal(0.0, 1.0, (n, d)) + np.array([0.0, 0.0, 25.0])
    if model.name == "lorenz96":
        return model.params["F"] + rng.normal(0.0, 1.0, (n, d))
    x = rng.normal(0.0, 1.0, (n, d))
    if _zero_mean_field(model):
        x -= x.mean(axis=1, keepdims=True)
    return x


def spin_up(model, stepper, states, t_start, duration, rng=None, chunk=2000):
    """Advance ``states`` by ``duration`` time units starting at ``t_start``."""
    n = int(round(duration / stepper.dt))
    t = t_start
    done = 0
    while done < n:
        k = min(chunk, n - done)
        noise = None if model.deterministic else rng.standard_normal((k,) + np.shape(states))
        states = advance(model, stepper, states, t, k, noise, where="spin-up")
        done += k
        t = t_start + done * stepper.dt
    return states


def cold_start(model, stepper, rng, J, t0, spread, fraction) -> np.ndarray:
    """Gaussian ball (std = fraction * spread) around one attractor point at time t0."""
    center = generic_initial(model, rng, 1)
    center = spin_up(model, stepper, center, t0 - CENTER_SPINUP, CENTER_SPINUP, rng)[0]
    pert = rng.standard_normal((J, model.dim)) * (fraction * spread)
    if _zero_mean_field(model):
        pert -= pert.mean(axis=1, keepdims=True)
    return center + pert


# --- shared references -----------------------------------------------------------------


@dataclass
class SharedContext:
    """Quantities computed once per experiment and reused by every replicate."""

    model: ModelSystem
    stepper: StepperConfig
    substeps: int
    t0: float
    union: _SpecUnion
    metric: ObservationSpec
    arm_specs: dict
    gammas: dict
    # time-varying experiments: statistics/ensembles per cycle; otherwise a single row
    truth_stats: np.ndarray
    reference: np.ndarray
    spread: np.ndarray
    floor: np.ndarray | None = None

    def truth_at(self, cycle) -> np.ndarray:
        return self.truth_stats[cycle] if self.truth_stats.ndim == 2 else self.truth_stats

    def reference_at(self, cycle) -> np.ndarray:
        return self.reference[cycle] if self.reference.ndim == 3 else self.reference


def build_context(cfg: ExperimentConfig) -> SharedContext:
    model = build_model(cfg.model)
    stepper = make_stepper(model, cfg.model.step)
    substeps = substeps_for(cfg.tau, stepper.dt)
    if cfg.J_ref < cfg.J:
        raise ContractViolation("J_ref must be at least J (references are subsampled to J)")
    arm_specs = {a.label: observation_spec(cfg.arm_observation(a), model.dim) for a in cfg.arms}
    metric = metric_spec(model.dim)
    union = _SpecUnion([metric, *arm_specs.values()])
    t0 = cfg.spinup_time
    rng = stream_rng(cfg.seed, "reference")
    reference0 = spin_up(model, stepper, generic_initial(model, rng, cfg.J_ref), 0.0, t0, rng)

    floor = None
    if cfg.experiment in TIME_VARYING:
        series, ensembles = ensemble_reference_series(
            model, stepper, union.spec, cfg.J_ref, cfg.n_cycles, cfg.tau, reference0, t0=t0, rng=rng,
            return_ensembles=True,
        )
        truth, reference, calibration = series.values, ensembles, series
        if cfg.experiment == "pullback":
            frng = stream_rng(cfg.seed, "floor")
            other = spin_up(model, stepper, generic_initial(model, frng, cfg.J_ref), 0.0, t0, frng)
            _, other_ens = ensemble_reference_series(
                model, stepper, union.spec, cfg.J_ref, cfg.n_cycles, cfg.tau, other, t0=t0, rng=frng,
                return_ensembles=True,
            )
            sub = stream_rng(cfg.seed, "subsample").permutation(cfg.J_ref)[: cfg.J]
            floor = np.array([w1_assignment(a[sub], b[sub]) for a, b in zip(reference, other_ens)])
        spread = reference[0].std(axis=0, ddof=1)
    else:
        erng = stream_rng(cfg.seed, "ergodic")
        start = spin_up(model, stepper, generic_initial(model, erng, 1)[0], 0.0, CENTER_SPINUP, erng)
        truth = ergodic_reference(
            model, stepper, union.spec, cfg.ergodic_time, cfg.ergodic_burn, start, rng=erng
        )
        calibration = ensemble_reference_series(
            model, stepper, union.spec, cfg.J_ref, cfg.calibration_cycles, cfg.tau, reference0, t0=t0, rng=rng
        )
        reference = reference0
        spread = reference0.std(axis=0, ddof=1)

    gammas = {}
    for a in cfg.arms:
        spec = arm_specs[a.label]
        sub_series = type(calibration)(calibration.times, calibration.values[:, union.columns(spec)])
        gammas[a.label] = calibrate_gamma(sub_series, cfg.arm_observation(a).gamma_fraction)
    return SharedContext(
        model, stepper, substeps, t0, union, metric, arm_specs, gammas, np.asarray(truth), np.asarray(reference),
        spread, floor,
    )


# --- per-replicate runs ------------------------------------------------------------------


@dataclass
class RunRecord:
    """Per-cycle metrics of one arm in one replicate."""

    arm: str
    replicate: int
    seed: int
    filtered_flags: np.ndarray
    metrics: dict
    statistics: list = field(default_factory=list, repr=False)
    analysis_calls: int = 0
    status: str = "ok"

    @property
    def n_recorded(self) -> int:
        return len(self.metrics["w1_joint"])


def initial_ensemble(cfg: ExperimentConfig, ctx: SharedContext, rseed) -> np.ndarray:
    rng = stream_rng(rseed, "init")
    if cfg.experiment == "track_stats":
        return spin_up(ctx.model, ctx.stepper, generic_initial(ctx.model, rng, cfg.J), 0.0, ctx.t0, rng)
    return cold_start(ctx.model, ctx.stepper, rng, cfg.J, ctx.t0, ctx.spread, cfg.cold_start_fraction)


def _record_cycle(rec: RunRecord, ens, ctx: SharedContext, cycle, sub, spec_cols, metric_cols, y, first, second):
    stats = ensemble_statistics(ctx.union.spec, ens)
    truth = ctx.truth_at(cycle)
    m_stats, m_truth = stats[metric_cols], truth[metric_cols]
    rec.metrics["rmse_mean"].append(stat_rmse(m_stats[first], m_truth[first]))
    rec.metrics["rmse_second"].append(stat_rmse(m_stats[second], m_truth[second]))
    ref = ctx.reference_at(cycle)[sub]
    rec.metrics["w1_joint"].append(w1_assignment(ens, ref))
    rec.metrics["w1_marginal"].append(marginal_w1_mean(ens, ref))
    rec.statistics.append((cycle, stats[spec_cols], y, truth[spec_cols]))


def run_arm(cfg: ExperimentConfig, ctx: SharedContext, arm: ArmConfig, replicate, init) -> RunRecord:
    rseed = replicate_seed(cfg.seed, replicate)
    spec = ctx.arm_specs[arm.label].with_gamma(ctx.gammas[arm.label])
    settings = core.FilterSettings(cfg.tau, ctx.substeps, cfg.arm_score(arm), cfg.gain_mode)
    start, end = cfg.window
    flags = np.array([arm.filtered and start < c <= end for c in range(cfg.n_cycles + 1)])
    rec = RunRecord(arm.label, replicate, rseed, flags, {k: [] for k in METRICS})
    sub = stream_rng(rseed, "subsample").permutation(cfg.J_ref)[: cfg.J]
    spec_cols = ctx.union.columns(spec)
    metric_cols = ctx.union.columns(ctx.metric)
    orders = np.array([len(c) for c in ctx.metric.components])
    first, second = orders == 1, orders == 2

    ens = np.array(init, dtype=float)
    _record_cycle(rec, ens, ctx, 0, sub, spec_cols, metric_cols, None, first, second)
    for c in range(1, cfg.n_cycles + 1):
        t = ctx.t0 + (c - 1) * cfg.tau
        noise = None
        if not ctx.model.deterministic:
            noise = stream_rng(rseed, "model_noise", c).standard_normal((ctx.substeps,) + ens.shape)
        y = None
        try:
            if flags[c]:
                truth = ctx.truth_at(c)[spec_cols]
                y = truth
                if cfg.perturb_observations:
                    draw = stream_rng(rseed, "observation", c).standard_normal(spec.p)
                    y = synthesize_observation(truth, spec.gamma_d, draw)
                eta = stream_rng(rseed, "perturbation", c).standard_normal((cfg.J, spec.p))
                ens = core.enfpf_cycle(ens, ctx.model, ctx.stepper, settings, spec, y, noise, eta, t)
                rec.analysis_calls += 1
            else:
                ens = advance(ctx.model, ctx.stepper, ens, t, ctx.substeps, noise, where="forecast")
            if not np.all(np.isfinite(ens)):
                bad = int(np.argmax(~np.all(np.isfinite(ens), axis=1)))
                raise DivergenceError(bad, ctx.substeps, t + cfg.tau, "analysis")
        except DivergenceError as exc:
            rec.status = f"diverged: member {exc.member} cycle {c} substep {exc.step} ({exc.where})"
            break
        except SingularCovarianceError as exc:
            rec.status = f"failed: cycle {c}: {exc}"
            break
        _record_cycle(rec, ens, ctx, c, sub, spec_cols, metric_cols, y, first, second)
    return rec


def run_replicate(cfg: ExperimentConfig, ctx: SharedContext, replicate) -> list:
    init = initial_ensemble(cfg, ctx, replicate_seed(cfg.seed, replicate))
    return [run_arm(cfg, ctx, arm, replicate, init) for arm in cfg.arms]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    context: SharedContext
    records: list
    wall_time: float = 0.0

    def arm_records(self, label) -> list:
        return [r for r in self.records if r.arm == label]

    def mean_series(self, label, metric) -> np.ndarray:
        """Replicate mean of a metric per cycle (NaN where no replicate reached the cycle)."""
        n = self.config.n_cycles + 1
        rows = np.full((len(self.arm_records(label)), n), np.nan)
        for i, r in enumerate(self.arm_records(label)):
            vals = r.metrics[metric]
            rows[i, : len(vals)] = vals
        with np.errstate(invalid="ignore"):
            counts = np.sum(np.isfinite(rows), axis=0)
            return np.where(counts > 0, np.nansum(rows, axis=0) / np.maximum(counts, 1), np.nan)


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads=1) -> ExperimentResult:
    """Run every arm of every replicate; write CSV outputs if ``out_dir`` is given.

    Replicates may run on several threads; results are identical for any
    thread count because every draw is keyed by (seed, stream, cycle).
    """
    if cfg.experiment == "kb_verify":
        raise ContractViolation("use run_kb_verify for kb_verify configs")
    t_start = time.perf_counter()
    ctx = build_context(cfg)
    reps = range(cfg.replicates)
    if threads > 1 and cfg.replicates > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_rep = list(pool.map(lambda r: run_replicate(cfg, ctx, r), reps))
    else:
        per_rep = [run_replicate(cfg, ctx, r) for r in reps]
    records = [rec for recs in per_rep for rec in recs]
    result = ExperimentResult(cfg, ctx, records, time.perf_counter() - t_start)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


# --- summaries and output ------------------------------------------------------------------


def reach_cycle(series, floor, factor, smoothing=1) -> int:
    """First cycle at which the (moving-average smoothed) series is <= factor * floor.

    Returns ``len(series)`` if the level is never reached.
    """
    s = np.asarray(series, dtype=float)
    if smoothing > 1:
        kernel = np.ones(smoothing) / smoothing
        s = np.convolve(s, kernel, mode="valid")
    hit = np.flatnonzero(s <= factor * floor)
    return int(hit[0]) if hit.size else len(series)


def _mean_over(values, window):
    a, b = window
    chunk = np.asarray(values[a : b + 1], dtype=float)
    chunk = chunk[np.isfinite(chunk)]
    return float(chunk.mean()) if chunk.size else float("nan")


def observation_error_scale(gamma, spec: ObservationSpec) -> float:
    """Root of the mean observation variance of the first-moment components."""
    idx = [i for i, c in enumerate(spec.components) if len(c) == 1]
    if not idx:
        return float("nan")
    return float(np.sqrt(np.mean(np.diagonal(gamma)[idx])))


SUMMARY_COLUMNS = (
    "arm",
    "filtered_cycles",
    "gamma_fraction",
    "obs_error_means",
    "rmse_mean",
    "rmse_second",
    "w1_joint",
    "w1_marginal",
    "w1_joint_final",
    "w1_marginal_final",
    "floor",
    "reach_cycle",
    "analysis_calls",
    "replicates_ok",
    "config_hash",
)


def emit_summary(result: ExperimentResult, path=None) -> tuple:
    """Replicate-averaged end-state summary, one row per arm.

    Returns ``(rows, table)`` where ``rows`` is a list of dicts keyed by
    :data:`SUMMARY_COLUMNS` and ``table`` a printable text table. Written as
    CSV when ``path`` is given.
    """
    cfg, ctx = result.config, result.context
    window = cfg.scoring
    floor = float(_mean_over(ctx.floor, window)) if ctx.floor is not None else float("nan")
    chash = config_hash(cfg)
    rows = []
    for arm in cfg.arms:
        recs = result.arm_records(arm.label)
        row = {
            "arm": arm.label,
            "filtered_cycles": int(recs[0].filtered_flags.sum()) if recs else 0,
            "gamma_fraction": cfg.arm_observation(arm).gamma_fraction,
            "obs_error_means": observation_error_scale(ctx.gammas[arm.label], ctx.arm_specs[arm.label]),
        }
        for m in METRICS:
            series = result.mean_series(arm.label, m)
            row[m] = _mean_over(series, window)
            if m.startswith("w1"):
                row[m + "_final"] = float(series[-1])
        row["floor"] = floor
        if ctx.floor is not None:
            row["reach_cycle"] = reach_cycle(
                result.mean_series(arm.label, "w1_joint"), floor, cfg.reach_factor, cfg.reach_smoothing
            )
        else:
            row["reach_cycle"] = ""
        row["analysis_calls"] = sum(r.analysis_calls for r in recs)
        row["replicates_ok"] = sum(r.status == "ok" for r in recs)
        row["config_hash"] = chash
        rows.append(row)
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow({k: _fmt(v) for k, v in row.items()})
    return rows, format_table(rows, cfg)


def format_table(rows, cfg: ExperimentConfig) -> str:
    cols = ["arm", "gamma_fraction", "obs_error_means", "rmse_mean", "rmse_second", "w1_joint", "w1_joint_final"]
    if any(r["reach_cycle"] != "" for r in rows):
        cols += ["floor", "reach_cycle"]
    cols.append("replicates_ok")
    cells = [[_short(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = [
        f"{cfg.experiment}: scoring cycles {cfg.scoring[0]}-{cfg.scoring[1]}, {cfg.replicates} replicate(s)",
        "  ".join(c.ljust(w) for c, w in zip(cols, widths)),
    ]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _short(v) -> str:
    if isinstance(v, float):
        return "nan" if not np.isfinite(v) else f"{v:.4g}"
    return str(v)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_outputs(result: ExperimentResult, out_dir) -> Path:
    """Write ``<out>/<experiment>/<seed>/`` series, summary and config echo."""
    cfg, ctx = result.config, result.context
    target = Path(out_dir) / cfg.experiment / str(cfg.seed)
    target.mkdir(parents=True, exist_ok=True)
    times = ctx.t0 + cfg.tau * np.arange(cfg.n_cycles + 1)

    with open(target / "series.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate", "arm", "cycle", "t", "filtered", *METRICS, "status"])
        for r in result.records:
            for c in range(r.n_recorded):
                w.writerow(
                    [r.replicate, r.arm, c, _fmt(times[c]), int(r.filtered_flags[c])]
                    + [_fmt(r.metrics[m][c]) for m in METRICS]
                    + [r.status]
                )

    with open(target / "series_mean.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "cycle", "t", *METRICS])
        for arm in cfg.arms:
            means = [result.mean_series(arm.label, m) for m in METRICS]
            for c in range(cfg.n_cycles + 1):
                w.writerow([arm.label, c, _fmt(times[c])] + [_fmt(s[c]) for s in means])

    with open(target / "statistics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate", "arm", "cycle", "component", "ensemble", "observation", "truth"])
        for r in result.records:
            labels = [_component_label(c) for c in ctx.arm_specs[r.arm].components]
            for cycle, stats, y, truth in r.statistics:
                for k, lab in enumerate(labels):
                    w.writerow(
                        [r.replicate, r.arm, cycle, lab, _fmt(stats[k]), "" if y is None else _fmt(y[k]), _fmt(truth[k])]
                    )

    if ctx.floor is not None:
        with open(target / "floor.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["cycle", "t", "w1_joint"])
            for c, v in enumerate(ctx.floor):
                w.writerow([c, _fmt(times[c]), _fmt(v)])

    emit_summary(result, target / "summary.csv")
    (target / "config.echo.json").write_text(json.dumps(dump_config(cfg), indent=2, sort_keys=True) + "\n")
    meta = {"config_hash": config_hash(cfg), "seed": cfg.seed, "wall_time_s": round(result.wall_time, 3)}
    (target / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return target


def _component_label(c) -> str:
    return "x" + "*x".join(str(i) for i in c) if len(set(c)) > 1 else f"x{c[0]}^{len(c)}"


# --- density-space Kalman-Bucy verification -------------------------------------------------


@dataclass
class KBVerifyResult:
    checks: list
    runs: dict

    @property
    def passed(self) -> bool:
        return all(c["passed"] in ("yes", "n/a") for c in self.checks)


def _check(name, value, threshold=None, passed=None):
    if passed is None:
        passed = "n/a" if threshold is None else ("yes" if value <= threshold else "no")
    return {"check": name, "value": float(value), "threshold": "" if threshold is None else threshold, "passed": passed}


def kb_equivalence_runs(kb: KBConfig, seed, nonlinear=None) -> dict:
    """Grid KB vs moment filter with sigma = 0 at ``kb.n`` and ``kb.coarse_n`` cells (plus v**2 if ``nonlinear``)."""
    from .kb_oracle import Grid1D, run_kb_pair

    nonlinear = kb.nonlinear if nonlinear is None else nonlinear
    runs = {}
    grid = Grid1D.symmetric(kb.half_width, kb.n)
    runs["equivalence"] = run_kb_pair(grid, kb.theta, 0.0, kb.gamma, kb.T, kb.dt, rank=kb.rank, seed=seed)
    coarse = Grid1D.symmetric(kb.half_width, kb.coarse_n)
    runs["equivalence_coarse"] = run_kb_pair(coarse, kb.theta, 0.0, kb.gamma, kb.T, kb.dt, rank=kb.rank, seed=seed)
    if nonlinear:
        runs["equivalence_nonlinear"] = run_kb_pair(
            coarse, kb.theta, 0.0, kb.gamma, kb.T, kb.dt, order=2, rank=kb.rank, seed=seed
        )
    return runs


def kb_normalization_run(kb: KBConfig, seed):
    """Diffusive run (sigma = normalization_sigma) on a domain normalization_width_std stationary stds wide."""
    from .kb_oracle import Grid1D, diffusive_dt, run_kb_pair, stationary_std

    half = kb.normalization_width_std * stationary_std(kb.theta, kb.normalization_sigma)
    grid = Grid1D.symmetric(half, kb.normalization_n)
    dt = diffusive_dt(grid, kb.normalization_sigma, kb.theta)
    return run_kb_pair(
        grid, kb.theta, kb.normalization_sigma, kb.gamma, kb.normalization_steps * dt, dt, rank=kb.rank, seed=seed,
        m0=(0.5, 0.5), truth=(-0.3, 0.6),
    )


def sample_normalization_error(run, n_samples, seed) -> float:
    """Largest |<rho, 1> - 1| over densities sampled from the final KB state."""
    from .kb_oracle import sample_densities

    samples = sample_densities(run.final, n_samples, stream_rng(seed, "init"))
    return float(np.abs(run.grid.integrate(samples) - 1.0).max())


def run_kb_verify(cfg: ExperimentConfig, out_dir=None) -> KBVerifyResult:
    """Normalization and observation-space equivalence checks of the grid KB filter.

    Raises
    ------
    StabilityError
        If a configured dt is too large for the explicit scheme; the error
        carries a suggested dt.
    """
    kb = cfg.kb
    runs = kb_equivalence_runs(kb, cfg.seed)
    runs["normalization"] = norm = kb_normalization_run(kb, cfg.seed)

    rel_m, rel_c = runs["equivalence"].report.max_relative()
    crel_m, crel_c = runs["equivalence_coarse"].report.max_relative()
    sample_err = sample_normalization_error(norm, kb.n_samples, cfg.seed)
    checks = [
        _check(f"equivalence_mean_rel_n{kb.n}", rel_m, 1e-2),
        _check(f"equivalence_cov_rel_n{kb.n}", rel_c, 1e-2),
        _check(f"equivalence_mean_rel_n{kb.coarse_n}", crel_m),
        _check(f"equivalence_cov_rel_n{kb.coarse_n}", crel_c),
        _check(
            "equivalence_error_shrinks_with_n",
            max(rel_m / crel_m, rel_c / crel_c),
            passed="yes" if (rel_m < crel_m and rel_c < crel_c) == (kb.n > kb.coarse_n) else "no",
        ),
        _check("mass_drift_max", norm.mass_drift.max(), 1e-6),
        _check("null_leak_max", norm.null_leak.max(), 1e-6),
        _check(f"sample_normalization_max_{kb.n_samples}", sample_err, 1e-6),
    ]
    if "equivalence_nonlinear" in runs:
        nm, nc = runs["equivalence_nonlinear"].report.max_relative()
        checks += [_check("nonlinear_mean_rel", nm), _check("nonlinear_cov_rel", nc)]
    result = KBVerifyResult(checks, runs)
    if out_dir is not None:
        write_kb_outputs(result, cfg, out_dir)
    return result


def write_kb_outputs(result: KBVerifyResult, cfg: ExperimentConfig, out_dir) -> Path:
    target = Path(out_dir) / cfg.experiment / str(cfg.seed)
    target.mkdir(parents=True, exist_ok=True)
    for name, run in result.runs.items():
        run.report.to_csv(target / f"{name}.csv")
    norm = result.runs["normalization"]
    with open(target / "normalization_drift.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mass_drift", "null_leak"])
        for t, a, b in zip(norm.report.t, norm.mass_drift, norm.null_leak):
            w.writerow([_fmt(t), _fmt(a), _fmt(b)])
    with open(target / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["check", "value", "threshold", "passed"])
        w.writeheader()
        for c in result.checks:
            w.writerow({**c, "value": _fmt(c["value"])})
    (target / "config.echo.json").write_text(json.dumps(dump_config(cfg), indent=2, sort_keys=True) + "\n")
    return target


def format_kb_checks(result: KBVerifyResult) -> str:
    width = max(len(c["check"]) for c in result.checks)
    lines = [f"{'check'.ljust(width)}  value        threshold  passed"]
    for c in result.checks:
        lines.append(f"{c['check'].ljust(width)}  {c['value']:<11.4g}  {str(c['threshold']):<9}  {c['passed']}")
    return "\n".join(lines)
