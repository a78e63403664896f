"""Finite-sample surrogates for the rate, concentration and moment results.

* ``fit_as_rate`` turns "``t^zeta ||w_t - w*||^2 -> 0`` almost surely" into
  a falsifiable check on one path: the running supremum of the weighted
  error from ``t`` onwards must halve every decade.
* ``concentration_ensemble`` measures, per seed, the maximal error weighted
  by ``exp(-b(t))`` with ``b(t) = ln^{1-nu}(t + 1) / (1 - nu)`` and fits the
  unknown constants of a bound of the form
  ``scale exp(-b(t)) [ln(1/delta) + c' + b(t)]^C_ind``.
* ``lp_moment_curve`` averages ``||w_t - w*||^{2p}`` across seeds.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .chain import TransitionKernel
from .engine import DivergenceError, TrajectoryRecord, UpdateMap, run_sa
from .rng import member_seed
from .schedule import StepSizeSchedule, regime_parameters

DEFAULT_DELTAS = (0.5, 0.2, 0.1, 0.05, 0.02, 0.01)
MAX_C_IND = 6
C_PRIME = 1.0


class AnalysisError(ValueError):
    pass


class InsufficientCheckpoints(AnalysisError):
    pass


# ---------------------------------------------------------------- rates


@dataclass(frozen=True, eq=False)
class RateFit:
    zeta_target: float
    regime: str  # "poly" or "exp"
    envelope: np.ndarray  # (n, 2): t, sup_{s >= t} weight(s) error^2(s)
    slope: float  # least-squares slope of log error^2 against log t over the fitted decades
    decade_ratios: tuple  # envelope(T / 10^(k-1)) / envelope(T / 10^k), latest decade first
    verdict: bool

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "envelope"])
            for t, v in self.envelope:
                w.writerow([int(t), f"{v:.17g}"])


def _rate_regime(schedule: StepSizeSchedule, regime: str | None) -> str:
    if regime is not None:
        if regime not in ("poly", "exp"):
            raise AnalysisError(f"unknown regime {regime!r}")
        return regime
    if schedule.family != "LR1":
        raise AnalysisError("almost-sure rates are stated for LR1 schedules; pass regime explicitly")
    return "exp" if schedule.nu == 1.0 else "poly"


def _value_at(times: np.ndarray, values: np.ndarray, t: float) -> float:
    """Value at the last checkpoint not after ``t``."""
    i = int(np.searchsorted(times, t, side="right")) - 1
    return float(values[max(i, 0)])


def fit_as_rate(record: TrajectoryRecord, zeta: float, w_star=None, regime: str | None = None,
                nu1: float | None = None, decades: int = 1, min_decades: float = 3.0) -> RateFit:
    """Envelope and verdict for the weighted error of one trajectory.

    ``poly`` weighs by ``t^zeta``; ``exp`` weighs by ``exp(zeta ln^{1/(1+nu1)} t)``
    and only asks the envelope to decrease strictly over the last two decades.
    ``w_star`` recomputes the errors from stored iterates.
    """
    regime = _rate_regime(record.schedule, regime)
    sched = record.schedule
    if regime == "poly" and sched.family == "LR1" and not 0 < zeta < 1.5 * sched.nu - 1:
        raise AnalysisError(f"zeta={zeta} is outside (0, 3/2 nu - 1) for nu={sched.nu}")
    times = np.asarray(record.times, dtype=float)
    if w_star is None:
        err = np.asarray(record.errors, dtype=float)
    else:
        if record.iterates is None:
            raise AnalysisError("w_star given but the record holds no iterates")
        err = np.abs(record.iterates - np.asarray(w_star, dtype=float)).max(axis=1) ** 2
    keep = times >= 1
    times, err = times[keep], err[keep]
    if times.size < 2 or math.log10(times[-1] / times[0]) < min_decades:
        raise InsufficientCheckpoints(f"checkpoints must span {min_decades} decades")
    if regime == "poly":
        weight = times**zeta
    else:
        if nu1 is None:
            nu1 = regime_parameters(sched)[0] if sched.family == "LR1" and sched.nu == 1.0 else 0.5
        weight = np.exp(zeta * np.log(times) ** (1.0 / (1.0 + nu1)))
    stat = weight * err
    env = np.maximum.accumulate(stat[::-1])[::-1]
    T = times[-1]
    spans = 2 if regime == "exp" else decades
    marks = [_value_at(times, env, T / 10**k) for k in range(spans + 1)]
    ratios = tuple(marks[k] / marks[k + 1] if marks[k + 1] > 0 else math.inf
                   for k in range(spans))
    if regime == "poly":
        verdict = all(r <= 0.5 for r in ratios)
    else:
        verdict = all(marks[k] < marks[k + 1] for k in range(spans))
    fit_from = T / 10**max(decades, 1)
    sel = (times >= fit_from) & (err > 0)
    slope = float(np.polyfit(np.log(times[sel]), np.log(err[sel]), 1)[0]) if sel.sum() >= 2 else math.nan
    return RateFit(float(zeta), regime, np.column_stack([times, env]), slope, ratios, bool(verdict))


# ------------------------------------------------------------- ensembles


def _pool(jobs: int | None) -> int:
    return max(1, jobs if jobs else (os.cpu_count() or 1))


def run_ensemble(umap: UpdateMap, chain: TransitionKernel, schedule: StepSizeSchedule,
                 steps: int, n_seeds: int, master_seed: int, w0=None, checkpoints=1.1,
                 jobs: int | None = None) -> list[TrajectoryRecord]:
    """``n_seeds`` independent runs; member ``i`` uses ``member_seed(master_seed, i)``.

    Divergent members come back as ``None``.
    """
    w0 = np.zeros(umap.dim) if w0 is None else w0

    def one(i):
        try:
            return run_sa(umap, chain, schedule, w0, steps, member_seed(master_seed, i),
                          checkpoints=checkpoints, store_iterates=False)
        except DivergenceError:
            return None

    with ThreadPoolExecutor(_pool(jobs)) as ex:
        return list(ex.map(one, range(n_seeds)))


def concentration_shape(t, nu: float) -> tuple[np.ndarray, np.ndarray]:
    """``(exp(-b(t)), b(t))`` with ``b(t) = ln^{1-nu}(t + 1) / (1 - nu)``."""
    b = np.log1p(np.asarray(t, dtype=float)) ** (1.0 - nu) / (1.0 - nu)
    return np.exp(-b), b


@dataclass(frozen=True, eq=False)
class EnsembleSummary:
    n_seeds: int
    seeds: np.ndarray
    max_weighted: np.ndarray  # per seed M = max_t error^2(t) / exp(-b(t)); NaN if divergent
    deltas: np.ndarray
    quantiles: np.ndarray  # (1 - delta)-quantile of M for each delta
    quantile_slope: float  # slope of log quantile against log ln(1/delta)
    c_ind: int
    c_prime: float
    scale: float  # smallest constant with the bound covering a (1 - delta) fraction at every delta
    coverage: np.ndarray  # fraction of seeds covered at each delta
    holdout_coverage: np.ndarray  # scale fitted on even seeds, scored on odd seeds
    n_divergent: int
    polylog_ok: bool  # quantiles monotone and slope <= c_ind <= MAX_C_IND
    weighted_at: np.ndarray = field(repr=False)  # (n_seeds, MAX_C_IND, n_delta) S(seed, C, delta)

    @property
    def ok(self) -> bool:
        return self.n_divergent == 0 and self.polylog_ok

    def coverage_at(self, delta: float) -> float:
        return float(self.coverage[int(np.argmin(np.abs(self.deltas - delta)))])

    def to_dict(self) -> dict:
        return {
            "n_seeds": self.n_seeds,
            "n_divergent": self.n_divergent,
            "deltas": self.deltas.tolist(),
            "quantiles": self.quantiles.tolist(),
            "quantile_slope": self.quantile_slope,
            "c_ind": self.c_ind,
            "c_prime": self.c_prime,
            "scale": self.scale,
            "coverage": self.coverage.tolist(),
            "holdout_coverage": self.holdout_coverage.tolist(),
            "polylog_ok": self.polylog_ok,
        }

    def quantiles_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta", "quantile", "coverage", "holdout_coverage"])
            for row in zip(self.deltas, self.quantiles, self.coverage, self.holdout_coverage):
                w.writerow([f"{float(x):.17g}" for x in row])

    def seeds_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "seed", "max_weighted"])
            for i, (s, m) in enumerate(zip(self.seeds, self.max_weighted)):
                w.writerow([i, int(s), f"{float(m):.17g}"])


def _seed_statistics(record: TrajectoryRecord, nu: float, deltas: np.ndarray) -> tuple[float, np.ndarray]:
    t = record.times.astype(float)
    shape, b = concentration_shape(t, nu)
    ratio = record.errors / shape
    M = float(ratio.max())
    logs = np.log(1.0 / deltas)
    S = np.empty((MAX_C_IND, deltas.size))
    for c in range(1, MAX_C_IND + 1):
        base = logs[None, :] + C_PRIME + b[:, None]
        S[c - 1] = (ratio[:, None] / base**c).max(axis=0)
    return M, S


def _higher_quantile(x: np.ndarray, level: float) -> float:
    return float(np.quantile(x, level, method="higher"))


def concentration_ensemble(umap: UpdateMap, chain: TransitionKernel, schedule: StepSizeSchedule,
                           n_seeds: int, steps: int, master_seed: int, anchors=None,
                           deltas=DEFAULT_DELTAS, w0=None, jobs: int | None = None,
                           min_seeds: int = 100) -> EnsembleSummary:
    """Maximal weighted errors over every step of ``n_seeds`` runs and the fitted bound.

    ``anchors`` is accepted for interface symmetry with the skeleton tools;
    the maximum runs over every step so it is not needed.
    """
    if schedule.family != "LR2":
        raise AnalysisError("the concentration bound is stated for LR2 schedules")
    if n_seeds < min_seeds:
        raise AnalysisError(f"need at least {min_seeds} seeds, got {n_seeds}")
    deltas = np.asarray(deltas, dtype=float)
    if np.any(np.diff(deltas) >= 0):
        raise AnalysisError("deltas must be strictly decreasing")
    w0 = np.zeros(umap.dim) if w0 is None else w0
    seeds = np.array([member_seed(master_seed, i) for i in range(n_seeds)], dtype=np.uint64)

    def one(i):
        try:
            rec = run_sa(umap, chain, schedule, w0, steps, int(seeds[i]), checkpoints=None,
                         store_iterates=False)
        except DivergenceError:
            return math.nan, np.full((MAX_C_IND, deltas.size), math.nan)
        return _seed_statistics(rec, schedule.nu, deltas)

    with ThreadPoolExecutor(_pool(jobs)) as ex:
        results = list(ex.map(one, range(n_seeds)))
    M = np.array([r[0] for r in results])
    S = np.stack([r[1] for r in results])
    n_div = int(np.sum(~np.isfinite(M)))
    return summarize_concentration(M, S, deltas, seeds, n_div)


def summarize_concentration(M: np.ndarray, S: np.ndarray, deltas: np.ndarray, seeds, n_div: int) -> EnsembleSummary:
    n = M.size
    # a divergent seed counts as uncovered at every level
    Mf = np.where(np.isfinite(M), M, np.inf)
    q = np.array([_higher_quantile(Mf, 1.0 - d) for d in deltas])
    logs = np.log(np.log(1.0 / deltas))
    if np.all(q == q[0]) and np.isfinite(q[0]):
        slope = 0.0
    elif np.all(np.isfinite(q)) and np.all(q > 0):
        slope = float(np.polyfit(logs, np.log(q), 1)[0])
    else:
        slope = math.inf
    c_ind = max(1, math.ceil(slope - 1e-12)) if math.isfinite(slope) else MAX_C_IND + 1
    monotone = bool(np.all(np.diff(q) >= 0))
    polylog_ok = monotone and slope <= c_ind <= MAX_C_IND
    C = min(c_ind, MAX_C_IND)
    Sc = np.where(np.isfinite(S[:, C - 1, :]), S[:, C - 1, :], np.inf)
    scale = _fit_scale(Sc, deltas)
    coverage = _covered(Sc, scale)
    even, odd = Sc[0::2], Sc[1::2]
    holdout = _covered(odd, _fit_scale(even, deltas)) if odd.size else coverage
    return EnsembleSummary(n, np.asarray(seeds), M, deltas, q, slope, c_ind, C_PRIME, scale,
                           coverage, holdout, n_div, polylog_ok, S)


def _covered(Sc: np.ndarray, scale: float) -> np.ndarray:
    return np.mean(np.isfinite(Sc) & (Sc <= scale), axis=0)


def _fit_scale(Sc: np.ndarray, deltas: np.ndarray) -> float:
    return max(_higher_quantile(Sc[:, j], 1.0 - d) for j, d in enumerate(deltas))


# --------------------------------------------------------------- moments


@dataclass(frozen=True, eq=False)
class MomentCurve:
    p: int
    times: np.ndarray
    mean: np.ndarray  # E ||w_t - w*||^{2p}
    stderr: np.ndarray
    n_seeds: int
    decreasing: bool  # strictly decreasing over the final decade of checkpoints

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "moment", "stderr"])
            for t, m, s in zip(self.times, self.mean, self.stderr):
                w.writerow([int(t), f"{m:.17g}", f"{s:.17g}"])

    def to_dict(self) -> dict:
        return {"p": self.p, "n_seeds": self.n_seeds, "final_decade_decreasing": self.decreasing,
                "final_moment": float(self.mean[-1])}


def moment_curve(times, errors_sq, p: int, min_seeds: int = 100) -> MomentCurve:
    """Moments of ``||w_t - w*||^{2p}`` from a ``(n_seeds, n_times)`` table of squared errors."""
    if p < 2 or int(p) != p:
        raise AnalysisError("p must be an integer >= 2")
    errors_sq = np.asarray(errors_sq, dtype=float)
    n = errors_sq.shape[0]
    if n < min_seeds:
        raise AnalysisError(f"need at least {min_seeds} seeds, got {n}")
    times = np.asarray(times)
    x = errors_sq**p
    mean = x.mean(axis=0)
    stderr = x.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    final = times >= times[-1] / 10.0
    tail = mean[final]
    decreasing = bool(tail.size >= 2 and np.all(np.diff(tail) < 0))
    return MomentCurve(int(p), times.copy(), mean, stderr, n, decreasing)


def lp_moment_curve(records, p: int, w_star=None, min_seeds: int = 100) -> MomentCurve:
    """Sample moments across ``records`` at their shared checkpoints.

    Divergent members (``None``) make the whole curve fail.
    """
    if any(r is None for r in records):
        raise AnalysisError("ensemble contains divergent seeds")
    if not records:
        raise AnalysisError("no records")
    times = records[0].times
    if any(not np.array_equal(r.times, times) for r in records):
        raise AnalysisError("records do not share checkpoints")
    if w_star is None:
        err = np.stack([r.errors for r in records])
    else:
        if any(r.iterates is None for r in records):
            raise AnalysisError("w_star given but records hold no iterates")
        w_star = np.asarray(w_star, dtype=float)
        err = np.stack([np.abs(r.iterates - w_star).max(axis=1) ** 2 for r in records])
    return moment_curve(times, err, p, min_seeds)


def write_summary_json(path, rate_fits=None, concentration: EnsembleSummary | None = None,
                       lp: MomentCurve | None = None) -> None:
    doc = {}
    if rate_fits is not None:
        doc["rate_fit"] = [
            {"seed": int(seed), "zeta": f.zeta_target, "slope": f.slope, "verdict": f.verdict,
             "decade_ratios": list(f.decade_ratios)}
            for seed, f in rate_fits
        ]
    if concentration is not None:
        doc["concentration"] = concentration.to_dict()
    if lp is not None:
        doc["lp"] = lp.to_dict()
    with open(path, "w") as fh:
        fh.write(dumps(doc) + "\n")


def dumps(doc) -> str:
    """JSON with numpy scalars unwrapped; floats keep their shortest round-trip repr."""
    return json.dumps(_plain(doc), indent=2, sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x)
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    return x
