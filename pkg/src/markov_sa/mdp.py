"""Finite MDPs, Bellman operators and exact solvers.

Also builds the (s, a, s') triple chain that plays the role of the noise
process for both tabular Q-learning and off-policy TD.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .chain import STOCHASTIC_TOL, TransitionKernel


class MdpError(ValueError):
    pass


class CoverageError(MdpError):
    """The behavior policy does not cover the target policy."""

    def __init__(self, state: int, action: int):
        super().__init__(f"mu(a={action}|s={state}) = 0 but pi(a={action}|s={state}) > 0")
        self.state = state
        self.action = action


@dataclass(frozen=True, eq=False)
class Mdp:
    reward: np.ndarray  # (S, A)
    transition: np.ndarray  # (A, S, S); transition[a, s, s'] = p(s'|s, a)
    gamma: float

    def __post_init__(self):
        r = np.array(self.reward, dtype=float)
        p = np.array(self.transition, dtype=float)
        if r.ndim != 2:
            raise MdpError("reward must be an n_states x n_actions matrix")
        S, A = r.shape
        if p.shape != (A, S, S):
            raise MdpError(f"transition must have shape {(A, S, S)}, got {p.shape}")
        if p.min() < 0 or p.max() > 1 or np.any(np.abs(p.sum(axis=2) - 1) > STOCHASTIC_TOL):
            raise MdpError("every transition[a] must be row-stochastic")
        if not 0.0 <= self.gamma < 1.0:
            raise MdpError(f"gamma must lie in [0, 1), got {self.gamma}")
        r.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    def p_sas(self) -> np.ndarray:
        """``p[s, a, s']`` layout."""
        return self.transition.transpose(1, 0, 2)

    @classmethod
    def from_dict(cls, doc: dict) -> "Mdp":
        mdp = cls(np.array(doc["reward"]), np.array(doc["transition"]), float(doc["gamma"]))
        if mdp.n_states != int(doc["n_states"]) or mdp.n_actions != int(doc["n_actions"]):
            raise MdpError("n_states / n_actions disagree with the reward table")
        return mdp

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "reward": self.reward.tolist(),
            "transition": self.transition.tolist(),
        }

    @classmethod
    def from_json(cls, path) -> "Mdp":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2 or p.min() < 0 or p.max() > 1:
            raise MdpError("policy must be an n_states x n_actions matrix of probabilities")
        if np.any(np.abs(p.sum(axis=1) - 1) > STOCHASTIC_TOL):
            raise MdpError("policy rows must sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def from_json(cls, path) -> "Policy":
        with open(path) as fh:
            return cls(np.array(json.load(fh)))


@dataclass(frozen=True, eq=False)
class TripleChain:
    kernel: TransitionKernel
    triples: np.ndarray  # (n, 3) rows (s, a, s')

    @property
    def n_triples(self) -> int:
        return self.triples.shape[0]

    def index(self, s: int, a: int, s_next: int) -> int:
        hit = np.flatnonzero((self.triples == (s, a, s_next)).all(axis=1))
        if hit.size == 0:
            raise KeyError((s, a, s_next))
        return int(hit[0])


@dataclass(frozen=True, eq=False)
class ImportanceRatios:
    rho: np.ndarray
    rho_max: float


def _check_q(mdp: Mdp, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise MdpError(f"q must have shape {(mdp.n_states, mdp.n_actions)}, got {q.shape}")
    return q


def bellman_optimality(mdp: Mdp, q) -> np.ndarray:
    q = _check_q(mdp, q)
    return mdp.reward + mdp.gamma * mdp.p_sas() @ q.max(axis=1)


def bellman_policy(mdp: Mdp, pi: Policy, v) -> np.ndarray:
    """One application of the policy Bellman operator.

    The bootstrap uses the successor value ``v(s')``.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,) or pi.probs.shape != mdp.reward.shape:
        raise MdpError("shape mismatch between mdp, policy and v")
    q = mdp.reward + mdp.gamma * mdp.p_sas() @ v
    return (pi.probs * q).sum(axis=1)


def solve_q_star(mdp: Mdp, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Value iteration until ``||T q - q|| <= tol (1 - gamma) / (2 gamma)``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros_like(mdp.reward)
    if mdp.gamma == 0.0:
        return mdp.reward.copy()
    stop = tol * (1 - mdp.gamma) / (2 * mdp.gamma)
    for _ in range(max_iter):
        nxt = bellman_optimality(mdp, q)
        if np.abs(nxt - q).max() <= stop:
            return nxt
        q = nxt
    raise RuntimeError("value iteration hit max_iter")


def policy_matrices(mdp: Mdp, pi: Policy):
    """``(r_pi, P_pi)`` for the linear system ``v = r_pi + gamma P_pi v``."""
    r_pi = (pi.probs * mdp.reward).sum(axis=1)
    P_pi = np.einsum("sa,sat->st", pi.probs, mdp.p_sas())
    return r_pi, P_pi


def solve_v_pi(mdp: Mdp, pi: Policy) -> np.ndarray:
    r_pi, P_pi = policy_matrices(mdp, pi)
    v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
    resid = np.abs(r_pi + mdp.gamma * P_pi @ v - v).max()
    if resid > 1e-10:
        raise RuntimeError(f"v_pi residual {resid:.3e}")
    return v


def induced_triple_chain(mdp: Mdp, mu: Policy) -> TripleChain:
    """Chain over positive-probability triples ``(S_t, A_t, S_{t+1})``.

    ``(s, a, s') -> (s', a', s'')`` with probability ``mu(a'|s') p(s''|s', a')``.
    """
    p = mdp.p_sas()
    support = (mu.probs[:, :, None] > 0) & (p > 0)
    triples = np.argwhere(support)
    n = triples.shape[0]
    lookup = -np.ones(support.shape, dtype=np.int64)
    lookup[tuple(triples.T)] = np.arange(n)
    P = np.zeros((n, n))
    for i, (_, _, s1) in enumerate(triples):
        for a1 in np.flatnonzero(mu.probs[s1] > 0):
            for s2 in np.flatnonzero(p[s1, a1] > 0):
                P[i, lookup[s1, a1, s2]] = mu.probs[s1, a1] * p[s1, a1, s2]
    # rows come out stochastic up to summation rounding
    P /= P.sum(axis=1, keepdims=True)
    return TripleChain(TransitionKernel(P), triples)


def importance_ratios(pi: Policy, mu: Policy) -> ImportanceRatios:
    bad = np.argwhere((mu.probs == 0) & (pi.probs > 0))
    if bad.size:
        s, a = bad[0]
        raise CoverageError(int(s), int(a))
    rho = np.divide(pi.probs, mu.probs, out=np.zeros_like(pi.probs), where=mu.probs > 0)
    return ImportanceRatios(rho, float(rho.max()))


def random_mdp(n_states: int, n_actions: int, gamma: float, seed: int) -> Mdp:
    """Dirichlet(1, ..., 1) transition rows and Uniform[0, 1] rewards."""
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n_states), size=(n_actions, n_states))
    p /= p.sum(axis=2, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return Mdp(r, p, gamma)


def random_policy(n_states: int, n_actions: int, seed: int) -> Policy:
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(n_actions), size=n_states)
    return Policy(probs / probs.sum(axis=1, keepdims=True))
