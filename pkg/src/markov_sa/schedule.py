"""Learning-rate schedules and skeleton anchors.

Two schedule families are supported::

    LR1: alpha_t = C / (t + 3)^nu               nu in (2/3, 1]
    LR2: alpha_t = C / ((t + 3) ln^nu (t + 3))  nu in (0, 1)

Anchors split the time axis into intervals whose step-size mass
``bar_alpha_m`` just exceeds the shrinking target ``T_m``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Literal

import numba
import numpy as np

Family = Literal["LR1", "LR2"]

#: ranges at least this long that start past EM_MIN_START use Euler-Maclaurin
EM_MIN_LENGTH = 4096
EM_MIN_START = 1000


class ScheduleError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class StepSizeSchedule:
    family: Family
    c_alpha: float
    nu: float

    def __post_init__(self):
        if self.family not in ("LR1", "LR2"):
            raise ScheduleError("family", f"unknown schedule family {self.family!r}")
        if not (self.c_alpha > 0 and math.isfinite(self.c_alpha)):
            raise ScheduleError("c_alpha", "must be a positive finite number")
        if self.family == "LR1" and not (2 / 3 < self.nu <= 1):
            raise ScheduleError("nu", f"LR1 requires nu in (2/3, 1], got {self.nu}")
        if self.family == "LR2" and not (0 < self.nu < 1):
            raise ScheduleError("nu", f"LR2 requires nu in (0, 1), got {self.nu}")

    # f(t) = c_alpha * x^-power * ln(x)^-log_power with x = t + 3
    @property
    def _power(self) -> float:
        return self.nu if self.family == "LR1" else 1.0

    @property
    def _log_power(self) -> float:
        return 0.0 if self.family == "LR1" else self.nu


@numba.njit(cache=True)
def _alpha(lr2, c_alpha, nu, t):
    x = t + 3.0
    if lr2:
        return c_alpha / (x * math.log(x) ** nu)
    return c_alpha / x**nu


@numba.njit(cache=True)
def _fill_alphas(lr2, c_alpha, nu, t, out):
    for i in range(t.shape[0]):
        out[i] = _alpha(lr2, c_alpha, nu, float(t[i]))
    return out


def step_sizes(schedule: StepSizeSchedule, t) -> np.ndarray:
    """``alpha_t`` elementwise; scalar-exact, so chunking never changes a value."""
    t = np.ascontiguousarray(np.asarray(t, dtype=np.int64).reshape(-1))
    return _fill_alphas(schedule.family == "LR2", float(schedule.c_alpha), float(schedule.nu),
                        t, np.empty(t.shape[0]))


def step_size(schedule: StepSizeSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be nonnegative")
    return float(step_sizes(schedule, np.array([t]))[0])


def _derivative(terms):
    out: dict[tuple[float, float], float] = {}
    for c, k, p in terms:
        out[(k + 1, p)] = out.get((k + 1, p), 0.0) - c * k
        if p:
            out[(k + 1, p + 1)] = out.get((k + 1, p + 1), 0.0) - c * p
    return [(c, k, p) for (k, p), c in out.items()]


def _eval_terms(terms, x: float) -> float:
    lx = math.log(x)
    return sum(c * x ** (-k) * lx ** (-p) for c, k, p in terms)


def _integral(schedule: StepSizeSchedule, a: int, b: int) -> float:
    """Closed-form integral of the step-size density over ``[a, b]``."""
    C, nu = schedule.c_alpha, schedule.nu
    xa = a + 3.0
    rel = math.log1p((b - a) / xa)
    if schedule.family == "LR1":
        if nu == 1.0:
            return C * rel
        return C * xa ** (1 - nu) * math.expm1((1 - nu) * rel) / (1 - nu)
    la = math.log(xa)
    return C * la ** (1 - nu) * math.expm1((1 - nu) * math.log1p(rel / la)) / (1 - nu)


class _IntervalSum:
    """``sum_{t=a}^{b-1} alpha_t``: exact fsum on short ranges, Euler-Maclaurin on long ones."""

    def __init__(self, schedule: StepSizeSchedule):
        self.schedule = schedule
        f = [(schedule.c_alpha, schedule._power, schedule._log_power)]
        d1 = _derivative(f)
        d3 = _derivative(_derivative(d1))
        d5 = _derivative(_derivative(d3))
        self._d = (d1, d3, d5)

    def __call__(self, a: int, b: int) -> float:
        if b <= a:
            return 0.0
        if a < EM_MIN_START or b - a < EM_MIN_LENGTH:
            return math.fsum(step_sizes(self.schedule, np.arange(a, b)).tolist())
        d1, d3, d5 = self._d
        xa, xb = a + 3.0, b + 3.0
        fa = step_size(self.schedule, a)
        fb = step_size(self.schedule, b)
        return math.fsum(
            [
                _integral(self.schedule, a, b),
                (fa - fb) / 2,
                (_eval_terms(d1, xb) - _eval_terms(d1, xa)) / 12,
                -(_eval_terms(d3, xb) - _eval_terms(d3, xa)) / 720,
                (_eval_terms(d5, xb) - _eval_terms(d5, xa)) / 30240,
            ]
        )


def regime_parameters(schedule: StepSizeSchedule, nu1_choice: float | None = None,
                      nu2_choice: float | None = None) -> tuple[float, float]:
    """Exponents ``(nu1, nu2)`` of the anchor targets for this schedule.

    LR1 with nu = 1 needs ``nu1`` in (0, 1) (0.5 when not given); LR1 with
    nu < 1 takes ``nu2`` in ``(1/2, nu / (2 - nu))`` (midpoint when not
    given); LR2 always uses (0, 1).
    """
    if schedule.family == "LR2":
        return 0.0, 1.0
    if schedule.nu == 1.0:
        nu1 = 0.5 if nu1_choice is None else float(nu1_choice)
        if not 0 < nu1 < 1:
            raise ScheduleError("nu1", f"must lie in (0, 1), got {nu1}")
        return nu1, 1.0
    hi = schedule.nu / (2 - schedule.nu)
    nu2 = (0.5 + hi) / 2 if nu2_choice is None else float(nu2_choice)
    if not 0.5 < nu2 < hi:
        raise ScheduleError("nu2", f"must lie in (0.5, {hi:.6g}), got {nu2}")
    return 0.0, nu2


def big_t(schedule: StepSizeSchedule, nu1: float, nu2: float, m: int) -> float:
    x = m + 3.0
    return schedule.c_alpha * math.log(x) ** nu1 / x**nu2


@dataclass(frozen=True, eq=False)
class SkeletonAnchors:
    schedule: StepSizeSchedule
    nu1: float
    nu2: float
    big_t: np.ndarray  # T_0 .. T_{M-1}
    anchors: np.ndarray  # t_0 .. t_M
    bar_alpha: np.ndarray  # bar_alpha_0 .. bar_alpha_{M-1}

    @property
    def n_intervals(self) -> int:
        return self.big_t.shape[0]

    def ratio(self) -> np.ndarray:
        return self.bar_alpha / self.big_t

    def truncated(self, n_intervals: int) -> "SkeletonAnchors":
        return SkeletonAnchors(self.schedule, self.nu1, self.nu2, self.big_t[:n_intervals],
                               self.anchors[: n_intervals + 1], self.bar_alpha[:n_intervals])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["m", "T_m", "t_m", "bar_alpha_m", "ratio"])
            for m in range(self.n_intervals):
                w.writerow([m, f"{self.big_t[m]:.17g}", int(self.anchors[m]),
                            f"{self.bar_alpha[m]:.17g}", f"{self.bar_alpha[m] / self.big_t[m]:.17g}"])


def _integral_inverse(schedule: StepSizeSchedule, a: int, mass: float) -> float:
    """``b`` with ``integral_a^b alpha = mass``."""
    C, nu = schedule.c_alpha, schedule.nu
    xa = a + 3.0
    if schedule.family == "LR1":
        if nu == 1.0:
            return xa * math.exp(mass / C) - 3.0
        return (xa ** (1 - nu) + (1 - nu) * mass / C) ** (1 / (1 - nu)) - 3.0
    la = math.log(xa)
    return math.exp((la ** (1 - nu) + (1 - nu) * mass / C) ** (1 / (1 - nu))) - 3.0


def _next_anchor(isum: _IntervalSum, a: int, target: float) -> int:
    """``min{k : sum_{t=a}^{k-1} alpha_t >= target}``."""
    first = step_size(isum.schedule, a)
    if first >= target:
        return a + 1
    # alpha is decreasing, so fewer than target / alpha_a terms cannot reach it
    floor = max(1, math.ceil(target / first)) - 1
    lo = floor
    try:
        guess = int(_integral_inverse(isum.schedule, a, target)) - a - 2
    except OverflowError:
        guess = floor
    if guess > lo and isum(a, a + guess) < target:
        lo = guess
    if isum(a, a + lo) >= target:
        lo = 0
    step = 1
    hi = lo + step
    while isum(a, a + hi) < target:
        lo, step = hi, 2 * step
        hi = lo + step
    # invariant: sum over lo terms < target <= sum over hi terms
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if isum(a, a + mid) >= target:
            hi = mid
        else:
            lo = mid
    return a + hi


def compute_anchors(schedule: StepSizeSchedule, horizon_m: int, nu1: float | None = None,
                    nu2: float | None = None, t_cover: int | None = None) -> SkeletonAnchors:
    """Anchors ``t_0 = 0 < t_1 < ... < t_M``.

    ``M = horizon_m`` unless ``t_cover`` is given, in which case anchors
    are extended (past ``horizon_m`` if needed) until ``t_M >= t_cover``.
    """
    if horizon_m < 1:
        raise ValueError("horizon_m must be positive")
    nu1, nu2 = regime_parameters(schedule, nu1, nu2)
    isum = _IntervalSum(schedule)
    Ts, ts, bars = [], [0], []
    m = 0
    while m < horizon_m or (t_cover is not None and ts[-1] < t_cover):
        T = big_t(schedule, nu1, nu2, m)
        nxt = _next_anchor(isum, ts[-1], T)
        Ts.append(T)
        bars.append(isum(ts[-1], nxt))
        ts.append(nxt)
        m += 1
    return SkeletonAnchors(schedule, nu1, nu2, np.array(Ts), np.array(ts, dtype=np.int64),
                           np.array(bars))


@dataclass(frozen=True)
class LrBoundsCheck:
    c_fit: float
    m0: int
    ratio: np.ndarray  # alpha_{t_m} / T_m^2
    bounded: bool

    def __iter__(self):
        return iter((self.c_fit, self.m0))


class LemmaCheckFailure(RuntimeError):
    pass


def verify_lemma_lr_bounds(anchors: SkeletonAnchors, schedule: StepSizeSchedule | None = None) -> LrBoundsCheck:
    """Smallest ``m0`` with ``alpha_{t_m} <= c_fit T_m^2 <= T_m`` for all ``m >= m0``.

    ``c_fit`` is the supremum of ``alpha_{t_m} / T_m^2`` over ``m >= m0``.
    Since alpha is decreasing, ``alpha_{t_m}`` dominates every ``alpha_t``
    in the interval. The ratio's maximum over the last half of the horizon
    must not exceed its maximum over ``[m0, M/2)``, otherwise the envelope
    is still growing and ``LemmaCheckFailure`` is raised.
    """
    schedule = schedule or anchors.schedule
    T = anchors.big_t
    M = T.shape[0]
    ratio = step_sizes(schedule, anchors.anchors[:-1]) / T**2
    tail_sup = np.maximum.accumulate(ratio[::-1])[::-1]
    ok = tail_sup * T <= 1.0
    # smallest m0 such that ok holds for every m >= m0
    bad = np.flatnonzero(~ok)
    m0 = int(bad[-1] + 1) if bad.size else 0
    if m0 >= M:
        raise LemmaCheckFailure("no finite envelope alpha_{t_m} <= C T_m^2 <= T_m within the horizon")
    c_fit = float(tail_sup[m0])
    mid = max(m0 + 1, (m0 + M) // 2)
    bounded = bool(mid >= M or ratio[mid:].max() <= ratio[m0:mid].max())
    if not bounded:
        raise LemmaCheckFailure("alpha_{t_m} / T_m^2 keeps growing over the tail")
    return LrBoundsCheck(c_fit, m0, ratio, bounded)
