"""Stochastic approximation over a Markovian noise stream.

``w_{t+1} = w_t + alpha_t (H(w_t, Y_{t+1}) - w_t)``

Tabular Q-learning and off-policy TD share one structure: ``H(w, y)``
moves a single coordinate ``i(y)`` by ``c(y) (r(y) + gamma B(w, y) - w_i)``
where ``B`` is a max over a few coordinates. Maps with that structure carry
``IndicatorTables`` and run through a compiled kernel; any other map runs
through the plain Python loop with identical semantics.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np

from .chain import TransitionKernel, is_ergodic, stationary_distribution
from .mdp import Mdp, Policy, importance_ratios, induced_triple_chain, solve_q_star, solve_v_pi
from .rng import CHUNK, make_rng
from .schedule import SkeletonAnchors, StepSizeSchedule, step_sizes


#: the propagated conditional law counts as stationary once a step moves it less than this
SETTLE_TOL = 1e-16


class DivergenceError(FloatingPointError):
    def __init__(self, t: int):
        super().__init__(f"non-finite iterate at t={t}")
        self.t = t


@dataclass(frozen=True, eq=False)
class IndicatorTables:
    idx: np.ndarray  # (n_noise,) coordinate touched by noise y
    coef: np.ndarray  # (n_noise,) multiplier, 1 for Q-learning, rho for TD
    rew: np.ndarray  # (n_noise,)
    succ: np.ndarray  # (n_noise, k) coordinates maximized over for the bootstrap
    gamma: float

    def g_table(self, w: np.ndarray) -> np.ndarray:
        """``G(w, y) = H(w, y) - w`` for every noise state, shape ``(n_noise, dim)``."""
        delta = self.coef * (self.rew + self.gamma * w[self.succ].max(axis=1) - w[self.idx])
        out = np.zeros((self.idx.size, w.size))
        out[np.arange(self.idx.size), self.idx] = delta
        return out


@dataclass(frozen=True, eq=False)
class UpdateMap:
    """``H`` together with its stationary mean ``h`` and fixed point."""

    dim: int
    n_noise: int
    apply: Callable[[np.ndarray, int], np.ndarray]
    expected: Callable[[np.ndarray], np.ndarray]
    fixed_point: np.ndarray
    kappa: float
    contraction_norm: str = "sup"
    name: str = "custom"
    tables: IndicatorTables | None = None

    def g_table(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if self.tables is not None:
            return self.tables.g_table(w)
        return np.stack([self.apply(w, y) - w for y in range(self.n_noise)])

    def norm(self, x) -> float:
        return float(np.abs(x).max())


def _indicator_map(name, tables: IndicatorTables, dim: int, d: np.ndarray, w_star, kappa) -> UpdateMap:
    def apply(w, y):
        w = np.asarray(w, dtype=float)
        out = w.copy()
        i = tables.idx[y]
        out[i] += tables.coef[y] * (tables.rew[y] + tables.gamma * w[tables.succ[y]].max() - w[i])
        return out

    def expected(w):
        w = np.asarray(w, dtype=float)
        return w + d @ tables.g_table(w)

    w_star = np.asarray(w_star, dtype=float)
    w_star.setflags(write=False)
    return UpdateMap(dim, tables.idx.size, apply, expected, w_star, kappa, "sup", name, tables)


def _require_ergodic(chain) -> np.ndarray:
    if not is_ergodic(chain.kernel):
        raise ValueError("induced (s, a, s') chain is not irreducible and aperiodic")
    return stationary_distribution(chain.kernel).probs


def q_learning_map(mdp: Mdp, mu: Policy, chain=None) -> UpdateMap:
    """Tabular Q-learning with ``q`` flattened as ``q[s * n_actions + a]``.

    ``kappa`` is the sup-norm modulus ``1 - (1 - gamma) min d(s, a)`` of ``h``.
    """
    chain = chain or induced_triple_chain(mdp, mu)
    d = _require_ergodic(chain)
    A = mdp.n_actions
    s0, a0, s1 = chain.triples.T
    tables = IndicatorTables(
        idx=(s0 * A + a0).astype(np.int64),
        coef=np.ones(s0.size),
        rew=mdp.reward[s0, a0].astype(float),
        succ=(s1[:, None] * A + np.arange(A)[None, :]).astype(np.int64),
        gamma=mdp.gamma,
    )
    d_sa = np.bincount(tables.idx, weights=d, minlength=mdp.n_states * A)
    kappa = 1.0 - (1.0 - mdp.gamma) * d_sa.min()
    q_star = solve_q_star(mdp, tol=1e-12).reshape(-1)
    return _indicator_map("q-learning", tables, mdp.n_states * A, d, q_star, kappa)


def off_policy_td_map(mdp: Mdp, mu: Policy, pi: Policy, chain=None) -> UpdateMap:
    """Off-policy TD(0) with per-step importance ratio ``pi / mu``.

    ``kappa`` is the sup-norm modulus ``1 - (1 - gamma) min d_mu(s)`` of ``h``.
    """
    ratios = importance_ratios(pi, mu)
    chain = chain or induced_triple_chain(mdp, mu)
    d = _require_ergodic(chain)
    s0, a0, s1 = chain.triples.T
    tables = IndicatorTables(
        idx=s0.astype(np.int64),
        coef=ratios.rho[s0, a0].astype(float),
        rew=mdp.reward[s0, a0].astype(float),
        succ=s1[:, None].astype(np.int64),
        gamma=mdp.gamma,
    )
    d_s = np.bincount(tables.idx, weights=d, minlength=mdp.n_states)
    kappa = 1.0 - (1.0 - mdp.gamma) * d_s.min()
    return _indicator_map("off-policy-td", tables, mdp.n_states, d, solve_v_pi(mdp, pi), kappa)


def checkpoint_times(steps: int, ratio: float | None = 1.1) -> np.ndarray:
    """Geometric grid ``{0} U {round(ratio^k)} U {steps}``; ``ratio=None`` keeps every step."""
    if ratio is None:
        return np.arange(steps + 1, dtype=np.int64)
    if ratio <= 1:
        raise ValueError("checkpoint ratio must exceed 1")
    k = np.arange(int(np.ceil(np.log(max(steps, 1)) / np.log(ratio))) + 1)
    grid = np.round(ratio**k).astype(np.int64)
    return np.unique(np.concatenate([[0], grid[grid <= steps], [steps]]))


@dataclass(frozen=True, eq=False)
class IntervalLog:
    """Per-interval quantities of the skeleton recursion (row ``m`` = interval ``m``)."""

    t_m: np.ndarray  # (M + 1,)
    y_at: np.ndarray  # (M + 1,) noise state at each anchor
    w_at: np.ndarray  # (M + 1, dim)
    bar_alpha: np.ndarray  # (M,)
    g_at: np.ndarray  # (M, dim) g(w_{t_m})
    z: np.ndarray  # (M, dim)
    z1: np.ndarray
    z2: np.ndarray
    z3: np.ndarray
    path_sum: np.ndarray  # (M, dim) sum alpha_t G(w_t, Y_{t+1})
    anchor_sum: np.ndarray  # (M, dim) sum alpha_t G(w_{t_m}, Y_{t+1})
    weighted_law: np.ndarray  # (M, n_noise) sum alpha_t P^{t+1-t_m}(y_{t_m}, .)
    max_drift: np.ndarray  # (M,) max over the interval of ||w_t - w_{t_m}||_inf

    @property
    def n_intervals(self) -> int:
        return self.bar_alpha.shape[0]


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    seed: int
    schedule: StepSizeSchedule
    times: np.ndarray
    errors: np.ndarray  # ||w_t - w*||^2 in the map's norm at each checkpoint
    iterates: np.ndarray | None
    final: np.ndarray
    y0: int
    interval_log: IntervalLog | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "error_sq"])
            for t, e in zip(self.times, self.errors):
                w.writerow([int(t), f"{e:.17g}"])

    def intervals_to_csv(self, path, fixed_point) -> None:
        """Per-interval sup-norms of the skeleton log."""
        log = self.interval_log
        if log is None:
            raise ValueError("record has no interval log")
        sup = lambda x: np.abs(x).max(axis=1)  # noqa: E731
        err = sup(log.w_at[:-1] - np.asarray(fixed_point)) ** 2
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["m", "t_m", "err_sq_at_anchor", "z_norm", "z1_norm", "z2_norm", "z3_norm"])
            cols = (err, sup(log.z), sup(log.z1), sup(log.z2), sup(log.z3))
            for m in range(log.n_intervals):
                w.writerow([m, int(log.t_m[m])] + [f"{c[m]:.17g}" for c in cols])


@numba.njit(cache=True, nogil=True)
def _tabular_steps(w, y, t0, u, alphas, cum, idx, coef, rew, succ, gamma, w_star,
                   ck_times, ck_ptr, ck_err, ck_snap, snap,
                   skel, w_anchor, path_sum, anchor_sum, law, P, weighted_law, drift, mixed):
    """Advance ``u.size`` steps from time ``t0``; returns ``(y, ck_ptr, bad_t)``."""
    n_ck = ck_times.shape[0]
    k = succ.shape[1]
    for j in range(u.shape[0]):
        t = t0 + j
        a = alphas[j]
        y = np.searchsorted(cum[y], u[j], side="right")
        i = idx[y]
        boot = w[succ[y, 0]]
        for c in range(1, k):
            v = w[succ[y, c]]
            if v > boot:
                boot = v
        delta = coef[y] * (rew[y] + gamma * boot - w[i])
        if skel:
            path_sum[i] += a * delta
            ab = w_anchor[succ[y, 0]]
            for c in range(1, k):
                v = w_anchor[succ[y, c]]
                if v > ab:
                    ab = v
            anchor_sum[i] += a * coef[y] * (rew[y] + gamma * ab - w_anchor[i])
            if mixed[0] == 0.0:
                nxt = law @ P
                gap = np.abs(nxt - law).max()
                law[:] = nxt
                weighted_law += a * nxt
                if gap <= SETTLE_TOL:
                    mixed[0] = 1.0
            else:
                mixed[1] += a
        w[i] = w[i] + a * delta
        if not np.isfinite(w[i]):
            return y, ck_ptr, t
        if skel:
            dv = abs(w[i] - w_anchor[i])
            if dv > drift[0]:
                drift[0] = dv
        while ck_ptr < n_ck and ck_times[ck_ptr] == t + 1:
            e = 0.0
            for c in range(w.shape[0]):
                dv = abs(w[c] - w_star[c])
                if dv > e:
                    e = dv
            ck_err[ck_ptr] = e * e
            if snap:
                ck_snap[ck_ptr, :] = w
            ck_ptr += 1
    return y, ck_ptr, -1


class _Runner:
    """Shared state of one seeded trajectory, advanced chunk by chunk."""

    def __init__(self, umap: UpdateMap, chain: TransitionKernel, schedule: StepSizeSchedule,
                 w0, y0, seed: int, times: np.ndarray, store_iterates: bool):
        if chain.n_states != umap.n_noise:
            raise ValueError("chain size does not match the map's noise space")
        self.umap, self.chain, self.schedule = umap, chain, schedule
        self.rng = make_rng(seed)
        self.seed = seed
        if y0 is None:
            d = stationary_distribution(chain).probs
            cdf = np.cumsum(d)
            cdf[-1] = 1.0
            y0 = int(np.searchsorted(cdf, self.rng.random(), side="right"))
        self.y = self.y0 = int(y0)
        self.w = np.array(w0, dtype=float).reshape(-1)
        if self.w.size != umap.dim:
            raise ValueError(f"w0 must have length {umap.dim}")
        self.t = 0
        self.times = times
        self.errors = np.empty(times.size)
        self.snaps = np.empty((times.size, umap.dim)) if store_iterates else np.empty((0, umap.dim))
        self.store = store_iterates
        self.ck = 0
        self._record_at_start()
        self._dummy = np.empty(0)
        self._dummy2 = np.empty((0, 0))

    def _record_at_start(self):
        while self.ck < self.times.size and self.times[self.ck] == 0:
            self.errors[self.ck] = np.square(np.float64(self.umap.norm(self.w - self.umap.fixed_point)))
            if self.store:
                self.snaps[self.ck] = self.w
            self.ck += 1

    def advance(self, n: int, skel=None) -> None:
        """Run ``n`` steps.

        ``skel`` is ``(w_anchor, path_sum, anchor_sum, law, weighted_law, drift, mixed)``,
        accumulated in place. Once ``law`` stops moving (``mixed[0] = 1``) the
        remaining step-size mass collects in ``mixed[1]`` instead of
        ``weighted_law``.
        """
        done = 0
        while done < n:
            k = min(CHUNK, n - done)
            u = self.rng.random(k)
            alphas = step_sizes(self.schedule, np.arange(self.t, self.t + k))
            if self.umap.tables is not None:
                self._advance_compiled(u, alphas, skel)
            else:
                self._advance_python(u, alphas, skel)
            self.t += k
            done += k

    def _advance_compiled(self, u, alphas, skel):
        tb = self.umap.tables
        if skel is None:
            args = (False, self._dummy, self._dummy, self._dummy, self._dummy, self._dummy2,
                    self._dummy, self._dummy, self._dummy)
        else:
            w_anchor, path_sum, anchor_sum, law, weighted_law, drift, mixed = skel
            args = (True, w_anchor, path_sum, anchor_sum, law, self.chain.rows, weighted_law, drift,
                    mixed)
        y, ck, bad = _tabular_steps(
            self.w, self.y, self.t, u, alphas, self.chain.cumulative, tb.idx, tb.coef, tb.rew,
            tb.succ, tb.gamma, self.umap.fixed_point, self.times, self.ck, self.errors, self.snaps,
            self.store, *args)
        if bad >= 0:
            raise DivergenceError(int(bad))
        self.y, self.ck = int(y), int(ck)

    def _advance_python(self, u, alphas, skel):
        cum = self.chain.cumulative
        for j in range(u.size):
            t = self.t + j
            a = alphas[j]
            self.y = int(np.searchsorted(cum[self.y], u[j], side="right"))
            G = self.umap.apply(self.w, self.y) - self.w
            if skel is not None:
                w_anchor, path_sum, anchor_sum, law, weighted_law, drift, mixed = skel
                path_sum += a * G
                anchor_sum += a * (self.umap.apply(w_anchor, self.y) - w_anchor)
                if mixed[0] == 0.0:
                    nxt = law @ self.chain.rows
                    gap = np.abs(nxt - law).max()
                    law[:] = nxt
                    weighted_law += a * law
                    if gap <= SETTLE_TOL:
                        mixed[0] = 1.0
                else:
                    mixed[1] += a
            self.w = self.w + a * G
            if not np.all(np.isfinite(self.w)):
                raise DivergenceError(t)
            if skel is not None:
                drift[0] = max(drift[0], float(np.abs(self.w - w_anchor).max()))
            while self.ck < self.times.size and self.times[self.ck] == t + 1:
                self.errors[self.ck] = np.square(np.float64(self.umap.norm(self.w - self.umap.fixed_point)))
                if self.store:
                    self.snaps[self.ck] = self.w
                self.ck += 1

    def record(self, log=None) -> TrajectoryRecord:
        return TrajectoryRecord(self.seed, self.schedule, self.times.copy(), self.errors.copy(),
                                self.snaps.copy() if self.store else None, self.w.copy(),
                                self.y0, log)


def run_sa(umap: UpdateMap, chain: TransitionKernel, schedule: StepSizeSchedule, w0, steps: int,
           seed: int, y0: int | None = None, checkpoints=1.1, store_iterates: bool = True) -> TrajectoryRecord:
    """Run ``steps`` SA updates.

    ``checkpoints`` is a geometric ratio, ``None`` for every step, or an
    explicit increasing array of times in ``[0, steps]``. ``y0=None`` draws
    the initial noise state from the stationary law.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    times = _resolve_checkpoints(checkpoints, steps)
    runner = _Runner(umap, chain, schedule, w0, y0, seed, times, store_iterates)
    runner.advance(steps)
    return runner.record()


def _resolve_checkpoints(checkpoints, steps) -> np.ndarray:
    if checkpoints is None or np.isscalar(checkpoints):
        return checkpoint_times(steps, checkpoints)
    times = np.asarray(checkpoints, dtype=np.int64)
    if times.size and (np.any(np.diff(times) <= 0) or times[0] < 0 or times[-1] > steps):
        raise ValueError("checkpoint times must be strictly increasing within [0, steps]")
    return times


def run_skeleton(umap: UpdateMap, chain: TransitionKernel, schedule: StepSizeSchedule,
                 anchors: SkeletonAnchors, w0, seed: int, y0: int | None = None,
                 checkpoints=1.1, store_iterates: bool = False) -> TrajectoryRecord:
    """``run_sa`` over ``t_M`` steps with the skeleton recursion logged per interval.

    For interval ``m`` the log holds ``z_m = w_{t_{m+1}} - w_{t_m} - bar_alpha_m g(w_{t_m})``
    and its parts: ``z1`` (drift inside the interval), ``z2`` (deviation of
    the anchored updates from their conditional mean given ``Y_{t_m}``) and
    ``z3`` (gap between that conditional mean and the stationary mean). The
    conditional mean is propagated exactly through the kernel alongside the
    run. The iterate path is the one ``run_sa`` produces for the same seed.
    """
    t_m = anchors.anchors
    M = anchors.n_intervals
    steps = int(t_m[-1])
    times = _resolve_checkpoints(checkpoints, steps)
    runner = _Runner(umap, chain, schedule, w0, y0, seed, times, store_iterates)
    d = stationary_distribution(chain).probs
    dim, n_y = umap.dim, umap.n_noise
    y_at = np.empty(M + 1, dtype=np.int64)
    w_at = np.empty((M + 1, dim))
    bar = np.empty(M)
    g_at, z, z1, z2, z3, path_sums, anchor_sums = (np.empty((M, dim)) for _ in range(7))
    wlaws = np.empty((M, n_y))
    drifts = np.zeros(M)
    for m in range(M):
        y_at[m] = runner.y
        w_at[m] = runner.w
        w_anchor = runner.w.copy()
        path_sum = np.zeros(dim)
        anchor_sum = np.zeros(dim)
        law = np.zeros(n_y)
        law[runner.y] = 1.0
        wlaw = np.zeros(n_y)
        drift = drifts[m : m + 1]
        mixed = np.zeros(2)
        n = int(t_m[m + 1] - t_m[m])
        runner.advance(n, (w_anchor, path_sum, anchor_sum, law, wlaw, drift, mixed))
        wlaw += mixed[1] * law
        bar[m] = float(np.sum(step_sizes(schedule, np.arange(t_m[m], t_m[m + 1]))))
        table = umap.g_table(w_anchor)
        g = d @ table
        cond = wlaw @ table
        g_at[m] = g
        z[m] = runner.w - w_anchor - bar[m] * g
        z1[m] = path_sum - anchor_sum
        z2[m] = anchor_sum - cond
        z3[m] = cond - bar[m] * g
        path_sums[m], anchor_sums[m], wlaws[m] = path_sum, anchor_sum, wlaw
    y_at[M] = runner.y
    w_at[M] = runner.w
    log = IntervalLog(t_m.copy(), y_at, w_at, bar, g_at, z, z1, z2, z3, path_sums, anchor_sums, wlaws, drifts)
    return runner.record(log)


def measure_contraction(fn: Callable, dim: int, pairs: int = 10_000, seed: int = 0,
                        scale: float = 1.0, center=None) -> float:
    """Largest ``||fn(w) - fn(w')||_inf / ||w - w'||_inf`` over random pairs."""
    rng = np.random.default_rng(seed)
    center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    worst = 0.0
    for _ in range(pairs):
        w = center + rng.normal(scale=scale, size=dim)
        wp = center + rng.normal(scale=scale, size=dim)
        diff = np.abs(w - wp).max()
        if diff > 0:
            worst = max(worst, float(np.abs(fn(w) - fn(wp)).max() / diff))
    return worst


def measure_lipschitz(umap: UpdateMap, pairs: int = 2000, seed: int = 0, scale: float = 1.0) -> float:
    """Largest ``||H(w, y) - H(w', y)|| / ||w - w'||`` over random pairs and noise states."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        w = rng.normal(scale=scale, size=umap.dim)
        wp = rng.normal(scale=scale, size=umap.dim)
        diff = umap.norm(w - wp)
        Gw, Gwp = umap.g_table(w) + w, umap.g_table(wp) + wp
        worst = max(worst, float(np.abs(Gw - Gwp).max(axis=1).max() / diff))
    return worst


def gronwall_constant(umap: UpdateMap, lipschitz: float) -> float:
    """``C`` with ``||G(w, y)|| <= C (||w - w*|| + 1)`` for every ``y``."""
    g_star = np.abs(umap.g_table(umap.fixed_point)).max()
    return max(lipschitz + 1.0, float(g_star))
