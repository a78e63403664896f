"""Finite-state Markov kernels.

Stationary distributions, n-step kernels, total-variation mixing profiles
and seeded path sampling for the noise process driving the SA iterates.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.sparse.csgraph import connected_components

from .rng import CHUNK, make_rng

STOCHASTIC_TOL = 1e-12
DIRECT_SOLVE_MAX = 2000
#: total-variation values below this are rounding noise and recorded as 0
TV_FLOOR = 1e-13


class ChainError(ValueError):
    """Raised for invalid kernels or chains that violate a precondition."""


def _validate_rows(rows: np.ndarray, what: str = "kernel") -> np.ndarray:
    rows = np.array(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[0] != rows.shape[1] or rows.shape[0] < 1:
        raise ChainError(f"{what} must be a non-empty square matrix, got shape {rows.shape}")
    if not np.all(np.isfinite(rows)):
        raise ChainError(f"{what} has non-finite entries")
    if rows.min() < 0.0 or rows.max() > 1.0:
        raise ChainError(f"{what} entries must lie in [0, 1]")
    bad = np.flatnonzero(np.abs(rows.sum(axis=1) - 1.0) > STOCHASTIC_TOL)
    if bad.size:
        raise ChainError(f"{what} row {bad[0]} sums to {rows[bad[0]].sum()!r}, not 1")
    return rows


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Row-stochastic matrix over states ``0..n_states-1``."""

    rows: np.ndarray
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rows = _validate_rows(self.rows)
        rows.setflags(write=False)
        cum = np.cumsum(rows, axis=1)
        # searchsorted needs the last column to be exactly 1
        cum[:, -1] = 1.0
        cum.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "_cum", cum)

    @property
    def n_states(self) -> int:
        return self.rows.shape[0]

    @property
    def cumulative(self) -> np.ndarray:
        return self._cum

    @classmethod
    def from_csv(cls, path) -> "TransitionKernel":
        with open(path, newline="") as fh:
            rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
        return cls(np.array(rows))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in self.rows:
                writer.writerow([repr(float(x)) for x in row])


@dataclass(frozen=True, eq=False)
class StationaryDistribution:
    probs: np.ndarray
    residual: float


@dataclass(frozen=True, eq=False)
class MixingProfile:
    c_mix: float
    rho: float
    tv_curve: np.ndarray  # shape (max_n + 1, 2): columns n, tv(n)

    @property
    def mixes(self) -> bool:
        return self.rho < 1.0


def is_irreducible(kernel: TransitionKernel) -> bool:
    n, _ = connected_components(kernel.rows > 0, directed=True, connection="strong")
    return n == 1


def period(kernel: TransitionKernel) -> int:
    """Period of an irreducible kernel (gcd of cycle lengths through state 0)."""
    adj = kernel.rows > 0
    level = np.full(kernel.n_states, -1)
    level[0] = 0
    queue = deque([0])
    g = 0
    while queue:
        u = queue.popleft()
        for v in np.flatnonzero(adj[u]):
            if level[v] < 0:
                level[v] = level[u] + 1
                queue.append(v)
            else:
                g = math.gcd(g, int(level[u] + 1 - level[v]))
    return g


def is_ergodic(kernel: TransitionKernel) -> bool:
    """Irreducible and aperiodic."""
    return is_irreducible(kernel) and period(kernel) == 1


def stationary_distribution(kernel: TransitionKernel, max_iter: int = 100_000) -> StationaryDistribution:
    """Unique stationary law of an irreducible kernel.

    Small kernels are solved directly from ``(P^T - I) pi = 0`` with the
    last equation replaced by normalization. Kernels above
    ``DIRECT_SOLVE_MAX`` states fall back to power iteration, which fails
    to converge on periodic chains.
    """
    P = kernel.rows
    n = kernel.n_states
    if not is_irreducible(kernel):
        raise ChainError("kernel is reducible; stationary distribution is not unique")
    if n <= DIRECT_SOLVE_MAX:
        A = P.T - np.eye(n)
        A[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        pi = np.linalg.solve(A, b)
    else:
        pi = np.full(n, 1.0 / n)
        for _ in range(max_iter):
            nxt = pi @ P
            if np.abs(nxt - pi).sum() < 1e-14:
                pi = nxt
                break
            pi = nxt
        else:
            raise ChainError("power iteration did not converge; chain may be periodic")
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    residual = float(np.abs(pi @ P - pi).max())
    if residual > 1e-10:
        raise ChainError(f"stationary residual {residual:.3e} exceeds 1e-10")
    pi.setflags(write=False)
    return StationaryDistribution(pi, residual)


def n_step_kernel(kernel: TransitionKernel, n: int) -> TransitionKernel:
    if n < 0:
        raise ValueError("n must be nonnegative")
    Pn = np.linalg.matrix_power(kernel.rows, int(n))
    # matrix powers drift off the simplex by a few ulps; renormalize rows
    Pn = np.clip(Pn, 0.0, 1.0)
    Pn /= Pn.sum(axis=1, keepdims=True)
    return TransitionKernel(Pn)


def kernel_powers(kernel: TransitionKernel, n_max: int, settle_tol: float = 1e-15):
    """Stack ``[P^0, P^1, ..., P^K]`` with ``K <= n_max``.

    Stops early once ``P^K`` equals its successor to ``settle_tol`` in every
    entry; callers treat ``P^n`` for ``n > K`` as ``P^K``.
    """
    P = kernel.rows
    out = [np.eye(kernel.n_states)]
    cur = out[0]
    for _ in range(n_max):
        nxt = cur @ P
        out.append(nxt)
        if np.abs(nxt - cur).max() <= settle_tol:
            break
        cur = nxt
    return np.stack(out)


def _tv_rows(Pn: np.ndarray, d: np.ndarray) -> float:
    return float(np.abs(Pn - d[None, :]).sum(axis=1).max())


def mixing_profile(kernel: TransitionKernel, max_n: int, rho_step: float = 1e-3) -> MixingProfile:
    """Total-variation decay of ``P^n`` to stationarity and a geometric envelope.

    ``tv(n) = max_y sum_y' |P^n(y, y') - d(y')|`` (no factor 1/2). ``rho`` is
    the smallest grid value for which the envelope fitted on the first half
    of the decaying part of the curve still dominates its last point; a
    chain that does not decay reports ``rho = 1``.
    """
    if max_n < 1:
        raise ValueError("max_n must be positive")
    d = stationary_distribution(kernel).probs
    tv = np.empty(max_n + 1)
    Pn = np.eye(kernel.n_states)
    for n in range(max_n + 1):
        tv[n] = _tv_rows(Pn, d)
        Pn = Pn @ kernel.rows
    tv = np.minimum.accumulate(tv)
    tv[tv < TV_FLOOR] = 0.0
    ns = np.arange(max_n + 1)
    curve = np.column_stack([ns, tv])

    positive = np.flatnonzero(tv > 0)
    if positive.size == 0:
        return MixingProfile(0.0, 0.0, curve)
    last = int(positive[-1])
    if last == 0:
        return MixingProfile(float(tv[0]), 0.0, curve)
    if last == max_n and tv[last] >= tv[0] * (1 - 1e-12):
        return MixingProfile(float(tv[0]), 1.0, curve)

    head = ns[: last // 2 + 1]
    grid = np.arange(1, int(round(1.0 / rho_step))) * rho_step
    for rho in grid:
        logr = math.log(rho)
        with np.errstate(divide="ignore"):
            head_env = np.max(np.log(tv[head]) - head * logr)
        if math.log(tv[last]) - last * logr <= head_env + 1e-12:
            pos = tv > 0
            c_mix = float(np.max(tv[pos] / rho ** ns[pos]))
            return MixingProfile(c_mix, float(rho), curve)
    return MixingProfile(float(tv[0]), 1.0, curve)


@numba.njit(cache=True)
def _walk(cum, start, u, out):
    y = start
    for i in range(u.shape[0]):
        y = np.searchsorted(cum[y], u[i], side="right")
        out[i] = y
    return y


def sample_path(kernel: TransitionKernel, start: int, length: int, seed: int) -> np.ndarray:
    """``length`` states of the chain beginning at ``start``."""
    if not 0 <= start < kernel.n_states:
        raise ChainError(f"start state {start} out of range")
    if length < 1:
        raise ValueError("length must be positive")
    rng = make_rng(seed)
    path = np.empty(length, dtype=np.int64)
    path[0] = start
    y = start
    pos = 1
    while pos < length:
        k = min(CHUNK, length - pos)
        y = _walk(kernel.cumulative, y, rng.random(k), path[pos : pos + k])
        pos += k
    return path


def load_kernel(path: str | Path) -> TransitionKernel:
    return TransitionKernel.from_csv(path)
