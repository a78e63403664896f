"""Moreau-envelope Lyapunov norm for a sup-norm contraction.

``M(w) = inf_u 1/2 ||u||_inf^2 + 1/(2 xi) ||w - u||_2^2``

For this norm pair the infimum reduces to a scalar problem in
``r = ||u||_inf``: the minimizing ``u`` clips ``w`` to ``[-r, r]`` and

``M(w) = min_{r >= 0} r^2 / 2 + 1/(2 xi) sum_i max(|w_i| - r, 0)^2``

whose stationarity condition is piecewise linear in ``r`` and is solved
exactly after sorting ``|w|``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

#: smoothness constant of 1/2 ||.||_2^2
SMOOTH_L = 1.0


@dataclass(frozen=True)
class MoreauConfig:
    dim: int
    xi: float = 1.0
    base_norm: str = "sup"
    smooth_norm: str = "l2"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if (self.base_norm, self.smooth_norm) != ("sup", "l2"):
            raise NotImplementedError("only the sup-norm / Euclidean pair is supported")

    # l_cs ||w||_2 <= ||w||_inf <= u_cs ||w||_2
    @property
    def l_cs(self) -> float:
        return 1.0 / math.sqrt(self.dim)

    @property
    def u_cs(self) -> float:
        return 1.0

    @property
    def l_cm(self) -> float:
        return math.sqrt(1 + self.xi * self.l_cs**2)

    @property
    def u_cm(self) -> float:
        return math.sqrt(1 + self.xi * self.u_cs**2)

    def kappa_prime(self, kappa: float) -> float:
        return 1.0 - self.u_cm / self.l_cm * kappa


def _radius(a_sorted: np.ndarray, xi: float) -> float:
    """Root of ``r - sum(max(a - r, 0)) / xi`` for ``a`` sorted descending."""
    csum = np.cumsum(a_sorted)
    k = np.arange(1, a_sorted.size + 1)
    r = csum / (xi + k)
    nxt = np.append(a_sorted[1:], 0.0)
    # the active set is the first k whose root clears a_{k+1}; that root also lies below a_k
    return float(r[np.argmax(r >= nxt)])


def _inner(cfg: MoreauConfig, w) -> tuple[np.ndarray, float]:
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size != cfg.dim:
        raise ValueError(f"expected a vector of length {cfg.dim}")
    a = np.sort(np.abs(w))[::-1]
    if a[0] == 0.0:
        return w, 0.0
    return w, _radius(a, cfg.xi)


def moreau_value(cfg: MoreauConfig, w) -> float:
    w, r = _inner(cfg, w)
    excess = np.maximum(np.abs(w) - r, 0.0)
    return 0.5 * r * r + float(excess @ excess) / (2 * cfg.xi)


def moreau_grad(cfg: MoreauConfig, w) -> np.ndarray:
    """Exact gradient ``(w - u*) / xi`` with ``u*`` the clipped minimizer."""
    w, r = _inner(cfg, w)
    return (w - np.clip(w, -r, r)) / cfg.xi


def norm_m(cfg: MoreauConfig, w) -> float:
    return math.sqrt(2.0 * moreau_value(cfg, w))


def fd_grad(f, w, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of ``f`` at ``w``."""
    w = np.asarray(w, dtype=float)
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def pick_xi(kappa: float, dim: int, grid=None) -> tuple[float, float]:
    """Largest ``xi`` on a decreasing grid with ``kappa' >= (1 - kappa) / 2``.

    Returns ``(xi, kappa')``.
    """
    if not 0 <= kappa < 1:
        raise ValueError("kappa must lie in [0, 1)")
    grid = np.logspace(3, -12, 301) if grid is None else np.asarray(grid)
    target = (1 - kappa) / 2
    for xi in grid:
        kp = MoreauConfig(dim, float(xi)).kappa_prime(kappa)
        if kp >= target:
            return float(xi), kp
    raise RuntimeError("no xi on the grid reaches the target kappa'")


@dataclass(frozen=True)
class SmoothnessReport:
    max_violation: float  # descent-lemma orientation <grad f(w), w' - w>
    max_violation_flipped: float  # displayed orientation <grad f(w), w - w'>, logged only
    samples: int


def check_smoothness(cfg: MoreauConfig, samples: int = 1000, h_fd: float = 1e-4,
                     seed: int = 0, scale: float = 1.0) -> SmoothnessReport:
    """Largest relative violation of ``(L/xi)``-smoothness of ``M`` on random pairs.

    Checks ``M(w') <= M(w) + <grad M(w), w' - w> + L/(2 xi) ||w' - w||_2^2``
    with the gradient from central differences. Violations are divided by
    ``M(w) + M(w')``.
    """
    rng = np.random.default_rng(seed)
    f = lambda x: moreau_value(cfg, x)  # noqa: E731
    mod = SMOOTH_L / cfg.xi
    worst = worst_flipped = 0.0
    for _ in range(samples):
        w = rng.normal(scale=scale, size=cfg.dim)
        wp = w + rng.normal(scale=scale * rng.uniform(0.01, 1.0), size=cfg.dim)
        g = fd_grad(f, w, h_fd)
        fw, fwp = f(w), f(wp)
        quad = 0.5 * mod * float((wp - w) @ (wp - w))
        denom = max(fw + fwp, 1e-300)
        worst = max(worst, (fwp - (fw + g @ (wp - w) + quad)) / denom)
        worst_flipped = max(worst_flipped, (fwp - (fw + g @ (w - wp) + quad)) / denom)
    return SmoothnessReport(float(max(worst, 0.0)), float(max(worst_flipped, 0.0)), samples)


def with_xi(cfg: MoreauConfig, xi: float) -> MoreauConfig:
    return replace(cfg, xi=xi)
