"""Interval-level noise analysis of a skeleton run.

Each interval ``[t_m, t_{m+1})`` contributes the noise

    z_m = w_{t_{m+1}} - w_{t_m} - bar_alpha_m g(w_{t_m})
        = z1 + z2 + z3

with ``z1`` the drift of the iterate inside the interval, ``z2`` the
deviation of the anchored updates from their conditional mean given the
state at ``t_m`` and ``z3`` the bias of that conditional mean relative to
the stationary one. Conditional means are recomputed here from kernel
powers, independently of the propagation done inside the engine, so the
two routes cross-check each other.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .chain import TransitionKernel, kernel_powers
from .engine import TrajectoryRecord, UpdateMap, gronwall_constant, measure_lipschitz
from .lyapunov import MoreauConfig, fd_grad, moreau_value, norm_m, pick_xi
from .schedule import SkeletonAnchors, step_sizes

#: ratio excursions allowed above the tail maximum when locating m0
TAIL_SLACK = 1.05
#: relative central-difference step for the gradient of the squared m-norm
FD_STEP = 1e-5


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IntervalDiagnostics:
    m: int
    z: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    z3: np.ndarray
    bounds: tuple  # (||z1||_m, ||z2||_m, ||z3||_m, T_m, e_m)
    e_next: float  # ||w_{t_{m+1}} - w*||_m
    e_sup: float  # ||w_{t_m} - w*||_inf
    bar_alpha: float
    max_drift: float  # max_t ||w_t - w_{t_m}||_inf inside the interval
    w_err: np.ndarray  # w_{t_m} - w*
    w_next_err: np.ndarray  # w_{t_{m+1}} - w*
    reconstruction_error: float
    centering_error: float


def _interval_law(powers: np.ndarray, y: int, alphas: np.ndarray) -> np.ndarray:
    """``sum_k alphas[k-1] P^k(y, .)``, reading ``P^k`` as ``P^K`` past the stack."""
    K = powers.shape[0] - 1
    n = alphas.size
    head = min(n, K)
    out = alphas[:head] @ powers[1 : head + 1, y]
    if n > K:
        out = out + math.fsum(alphas[K:]) * powers[K, y]
    return out


def decompose_noise(record: TrajectoryRecord, umap: UpdateMap, chain: TransitionKernel,
                    anchors: SkeletonAnchors, lyap: MoreauConfig | None = None,
                    max_power: int = 100_000) -> list[IntervalDiagnostics]:
    """Per-interval ``z1, z2, z3`` with reconstruction and centering residuals.

    ``centering_error`` compares the engine's conditional mean of the
    anchored updates with one rebuilt here from ``P^k``; ``z2`` is centered
    exactly when the two agree.
    """
    log = record.interval_log
    if log is None:
        raise DiagnosticsError("record has no interval log; run it through run_skeleton")
    if not np.array_equal(log.t_m, anchors.anchors[: log.t_m.size]):
        raise DiagnosticsError("anchors do not match the logged run")
    lyap = lyap or MoreauConfig(umap.dim, pick_xi(umap.kappa, umap.dim)[0])
    powers = kernel_powers(chain, max_power)
    w_star = umap.fixed_point
    out = []
    for m in range(log.n_intervals):
        a, b = int(log.t_m[m]), int(log.t_m[m + 1])
        alphas = step_sizes(record.schedule, np.arange(a, b))
        table = umap.g_table(log.w_at[m])
        cond = _interval_law(powers, int(log.y_at[m]), alphas) @ table
        z1, z2, z3, z = log.z1[m], log.z2[m], log.z3[m], log.z[m]
        centering = float(np.abs((log.anchor_sum[m] - cond) - z2).max())
        recon = float(np.abs(z1 + z2 + z3 - z).max())
        err = log.w_at[m] - w_star
        bounds = (norm_m(lyap, z1), norm_m(lyap, z2), norm_m(lyap, z3),
                  float(anchors.big_t[m]), norm_m(lyap, err))
        out.append(IntervalDiagnostics(
            m, z, z1, z2, z3, bounds, norm_m(lyap, log.w_at[m + 1] - w_star),
            float(np.abs(err).max()), float(log.bar_alpha[m]), float(log.max_drift[m]),
            err, log.w_at[m + 1] - w_star, recon, centering))
    return out


@dataclass(frozen=True, eq=False)
class ConstantFit:
    c: float
    m0: int
    c_tail: float  # max of the ratio over the last half
    ratios: np.ndarray
    stable: bool


def fit_constant(ratios) -> ConstantFit:
    """``c = max_{m >= m0} ratio`` where after ``m0`` the ratio never exceeds
    ``TAIL_SLACK`` times its maximum over the last half.

    The fit is stable when ``c`` is within a factor 2 of the last-half
    maximum and the ratio is not still climbing (last-quarter maximum at
    most twice the maximum over the quarter before it).
    """
    r = np.asarray(ratios, dtype=float)
    M = r.size
    if M == 0:
        raise DiagnosticsError("no ratios to fit")
    if not np.all(np.isfinite(r)):
        return ConstantFit(math.inf, M, math.inf, r, False)
    half = M // 2
    c_tail = float(r[half:].max())
    over = np.flatnonzero(r > TAIL_SLACK * c_tail)
    m0 = int(over[-1]) + 1 if over.size else 0
    c = float(r[m0:].max())
    q3 = (3 * M) // 4
    climbing = M >= 8 and r[q3:].max() > 2.0 * r[half:q3].max() and r[q3:].max() > 0
    stable = c <= 2.0 * c_tail and not climbing
    return ConstantFit(c, m0, c_tail, r, bool(stable))


@dataclass(frozen=True, eq=False)
class NoiseBoundFit:
    c1: ConstantFit
    c2: ConstantFit
    c3: ConstantFit

    @property
    def m0(self) -> int:
        return max(self.c1.m0, self.c2.m0, self.c3.m0)

    @property
    def constants(self) -> tuple[float, float, float]:
        return self.c1.c, self.c2.c, self.c3.c

    @property
    def stable(self) -> bool:
        return self.c1.stable and self.c2.stable and self.c3.stable

    def __iter__(self):
        return iter((self.c1.c, self.c2.c, self.c3.c, self.m0))


def _bounds(diags, lyap):
    if lyap is None:
        return np.array([d.bounds for d in diags], dtype=float)
    return np.array([(norm_m(lyap, d.z1), norm_m(lyap, d.z2), norm_m(lyap, d.z3),
                      d.bounds[3], norm_m(lyap, d.w_err)) for d in diags])


def verify_noise_bounds(diags, anchors: SkeletonAnchors | None = None,
                        lyap: MoreauConfig | None = None, min_intervals: int = 100) -> NoiseBoundFit:
    """Fit ``c1, c2, c3`` in

    ``||z1||_m <= c1 T_m^2 (e_m + 1)``, ``||z2||_m <= c2 T_m (e_m + 1)``,
    ``||z3||_m <= c3 T_m^2 (e_m + 1)``.

    ``lyap=None`` reuses the norms stored in ``diags``.
    """
    if len(diags) < min_intervals:
        raise DiagnosticsError(f"need at least {min_intervals} intervals, got {len(diags)}")
    b = _bounds(diags, lyap)
    if anchors is not None and not np.allclose(b[:, 3], anchors.big_t[: len(diags)], rtol=0, atol=0):
        raise DiagnosticsError("anchors do not match the diagnostics")
    n1, n2, n3, T, e = b.T
    scale = e + 1.0
    return NoiseBoundFit(fit_constant(n1 / (T**2 * scale)), fit_constant(n2 / (T * scale)),
                         fit_constant(n3 / (T**2 * scale)))


def squared_norm_grad(lyap: MoreauConfig, w) -> np.ndarray:
    """Central-difference gradient of ``||.||_m^2`` with step ``1e-5 max(||w||_2, 1)``."""
    w = np.asarray(w, dtype=float)
    h = FD_STEP * max(float(np.linalg.norm(w)), 1.0)
    return fd_grad(lambda x: 2.0 * moreau_value(lyap, x), w, h)


@dataclass(frozen=True, eq=False)
class DriftCheck:
    c: float
    m0: int
    coverage: float  # fraction of m >= m0 where the inequality holds with c
    holdout_coverage: float  # c fitted on the first half of m >= m0, scored on the second
    lhs: np.ndarray
    rhs: np.ndarray  # evaluated with the fitted c
    residual_ratio: np.ndarray  # (lhs - contraction - inner) / T_m^2

    def __float__(self):
        return self.coverage


def verify_drift_inequality(diags, anchors: SkeletonAnchors | None, lyap: MoreauConfig,
                            kappa_prime: float) -> DriftCheck:
    """Coverage of

    ``||w_{t_{m+1}} - w*||_m^2 <= (1 - T_m kappa') e_m^2 + <grad ||.||_m^2 (w_{t_m} - w*), z2> + C T_m^2``

    with ``C`` fitted by the same tail rule as the noise constants.
    """
    if not diags:
        raise DiagnosticsError("no diagnostics")
    M = len(diags)
    lhs = np.empty(M)
    base = np.empty(M)
    T = np.empty(M)
    for i, d in enumerate(diags):
        T[i] = d.bounds[3] if anchors is None else anchors.big_t[d.m]
        e2 = 2.0 * moreau_value(lyap, d.w_err)
        lhs[i] = 2.0 * moreau_value(lyap, d.w_next_err)
        base[i] = (1.0 - T[i] * kappa_prime) * e2 + float(squared_norm_grad(lyap, d.w_err) @ d.z2)
    ratio = (lhs - base) / T**2
    fit = fit_constant(np.maximum(ratio, 0.0))
    c, m0 = fit.c, fit.m0
    tail = ratio[m0:]
    coverage = float(np.mean(tail <= c * (1 + 1e-12))) if tail.size else 1.0
    half = tail.size // 2
    if half and tail.size - half:
        c_first = max(float(tail[:half].max()), 0.0)
        holdout = float(np.mean(tail[half:] <= c_first * (1 + 1e-12)))
    else:
        holdout = coverage
    rhs = base + c * T**2
    return DriftCheck(c, m0, coverage, holdout, lhs, rhs, ratio)


@dataclass(frozen=True, eq=False)
class GronwallCheck:
    c_fit: float  # max_m max_drift / (bar_alpha (e_sup + 1))
    c_bound: float  # C exp((L + 1) max bar_alpha) from the Lipschitz constants of the map
    holds: bool


def verify_interval_drift(diags, umap: UpdateMap, lipschitz: float | None = None) -> GronwallCheck:
    """``||w_t - w_{t_m}|| <= bar_alpha_m C (||w_{t_m} - w*|| + 1)`` inside every interval.

    ``C`` is fitted from the log and compared with the bound that follows
    from ``||G(w, y)|| <= (L + 1) ||w - w_{t_m}|| + C_0 (e_m + 1)``.
    """
    L = lipschitz if lipschitz is not None else lipschitz_bound(umap)
    c0 = gronwall_constant(umap, L)
    drift = np.array([d.max_drift for d in diags])
    bar = np.array([d.bar_alpha for d in diags])
    e = np.array([d.e_sup for d in diags])
    c_fit = float(np.max(drift / (bar * (e + 1.0))))
    c_bound = c0 * math.exp((L + 1.0) * float(bar.max()))
    return GronwallCheck(c_fit, c_bound, c_fit <= c_bound)


def lipschitz_bound(umap: UpdateMap) -> float:
    """Sup-norm Lipschitz constant of ``H(., y)`` uniformly in ``y``.

    Exact for tabular maps: the touched coordinate moves with factor
    ``|1 - c| + c gamma``, every other coordinate is copied.
    """
    tb = umap.tables
    if tb is None:
        return measure_lipschitz(umap)
    return float(max(1.0, np.max(np.abs(1.0 - tb.coef) + tb.coef * tb.gamma)))


def write_diagnostics_csv(path, diags, fit: NoiseBoundFit, drift: DriftCheck | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "T_m", "e_m", "z1_m_norm", "z2_m_norm", "z3_m_norm",
                    "ratio1", "ratio2", "ratio3", "drift_lhs", "drift_rhs"])
        for i, d in enumerate(diags):
            n1, n2, n3, T, e = d.bounds
            row = [d.m, T, e, n1, n2, n3, fit.c1.ratios[i], fit.c2.ratios[i], fit.c3.ratios[i]]
            row += [drift.lhs[i], drift.rhs[i]] if drift is not None else [math.nan, math.nan]
            w.writerow([row[0]] + [f"{float(x):.17g}" for x in row[1:]])
