"""Forward-backward smoothing for the switching model.

Messages are scaled (normalized per step, with per-row max subtraction on the
log evidence), so likelihoods of any length stay finite: alpha_hat rows are
filtered regime beliefs, log_norms accumulate the observed-data log-likelihood.
The brute-force path enumeration below is the correctness oracle for all of it.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ._linalg import logsumexp
from .model import Dataset, HybridModel, Trajectory, log_local_evidence
from .transition import transition_matrices

BRUTE_FORCE_MAX_PATHS = 10 ** 6


@dataclass(frozen=True, eq=False)
class Posterior:
    """Smoothed regime marginals for one trajectory.

    gamma[t, k] = p(z_t = k | trajectory); xi[t, j, i] = p(z_t = j, z_{t+1} = i
    | trajectory); loglik is the observed-data log-likelihood.
    """
    gamma: np.ndarray  # (T, K)
    xi: np.ndarray     # (T-1, K, K), indexed [t, source, destination]
    loglik: float

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        object.__setattr__(self, "loglik", float(self.loglik))

    @property
    def T(self) -> int:
        return len(self.gamma)

    @property
    def K(self) -> int:
        return self.gamma.shape[1]


def _check_evidence(ev: np.ndarray):
    if np.isnan(ev).any():
        raise ValueError("evidence contains NaN")
    if not np.all(np.max(ev, axis=-1) > -np.inf):
        raise ValueError("evidence row with no finite entry (impossible observation)")


def local_quantities(model: HybridModel, traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Log evidence (T, K) and transition matrices (T-1, K, K) for one trajectory.

    Transition features are evaluated at the source step (x_t, u_t) for the
    step t -> t+1.
    """
    ev = log_local_evidence(model, traj)
    trans = transition_matrices(model.transition, traj.xs[:-1], traj.us[:-1])
    return ev, trans


# -- batched scaled recursions ------------------------------------------------
# All cores take (B, T, K) evidence and (B, T-1, K, K) transition stacks so a
# dataset of equal-length trajectories runs through numpy in lockstep; the
# public single-trajectory API wraps a batch of one.

def _forward_batch(ev, trans, pi):
    B, T, K = ev.shape
    alpha = np.empty((B, T, K))
    log_norms = np.empty((B, T))
    pred = np.broadcast_to(pi, (B, K))
    for t in range(T):
        if t > 0:
            pred = np.einsum("bij,bj->bi", trans[:, t - 1], alpha[:, t - 1])
        # combine prediction and evidence in log space: rescaling by the joint
        # max keeps steps alive where the predicted-mass regimes sit hundreds
        # of nats below the best-evidence regime
        with np.errstate(divide="ignore"):
            la = np.log(pred) + ev[:, t]
        m = la.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise FloatingPointError(f"forward normalizer degenerate at step {t}")
        a = np.exp(la - m)
        c = a.sum(axis=1, keepdims=True)
        alpha[:, t] = a / c
        log_norms[:, t] = np.log(c[:, 0]) + m[:, 0]
    return alpha, log_norms


def _backward_batch(ev, trans, log_norms):
    B, T, K = ev.shape
    beta = np.empty((B, T, K))
    beta[:, -1] = 1.0
    for t in range(T - 2, -1, -1):
        w = np.exp(ev[:, t + 1] - log_norms[:, t + 1, None]) * beta[:, t + 1]
        beta[:, t] = np.einsum("bij,bi->bj", trans[:, t], w)
    return beta


def _smooth_batch(ev, trans, pi):
    _check_evidence(ev)
    alpha, log_norms = _forward_batch(ev, trans, pi)
    beta = _backward_batch(ev, trans, log_norms)
    gamma = alpha * beta
    gamma /= gamma.sum(axis=2, keepdims=True)
    w = np.exp(ev[:, 1:] - log_norms[:, 1:, None]) * beta[:, 1:]  # (B, T-1, K)
    xi = np.einsum("btj,btij,bti->btji", alpha[:, :-1], trans, w)
    xi /= xi.sum(axis=(2, 3), keepdims=True)
    loglik = log_norms.sum(axis=1)
    return gamma, xi, loglik


# -- public API ----------------------------------------------------------------

def forward_pass(evidence, trans_mats, pi):
    """Scaled forward recursion.

    Returns (alpha_hat (T, K) row-normalized filtered beliefs, log_norms (T,),
    loglik) with loglik = sum of log normalizers.
    """
    ev = np.asarray(evidence, dtype=float)[None]
    _check_evidence(ev)
    alpha, log_norms = _forward_batch(ev, np.asarray(trans_mats, dtype=float)[None],
                                      np.asarray(pi, dtype=float))
    return alpha[0], log_norms[0], float(log_norms[0].sum())


def backward_pass(evidence, trans_mats, log_norms):
    """Scaled backward recursion consistent with forward_pass scaling; beta_T = 1."""
    ev = np.asarray(evidence, dtype=float)[None]
    _check_evidence(ev)
    beta = _backward_batch(ev, np.asarray(trans_mats, dtype=float)[None],
                           np.asarray(log_norms, dtype=float)[None])
    return beta[0]


def smooth(model: HybridModel, traj: Trajectory) -> Posterior:
    """Full forward-backward smoothing of one trajectory."""
    ev, trans = local_quantities(model, traj)
    gamma, xi, loglik = _smooth_batch(ev[None], trans[None], model.init.pi)
    return Posterior(gamma=gamma[0], xi=xi[0], loglik=float(loglik[0]))


def estep(model: HybridModel, dataset: Dataset):
    """Smooth every trajectory. Returns (list of Posterior, total log-likelihood).

    Equal-length trajectories are stacked and smoothed in one batch; results
    are identical to per-trajectory smoothing.
    """
    evs, transs = zip(*(local_quantities(model, traj) for traj in dataset.trajectories))
    posteriors: list[Posterior | None] = [None] * len(dataset)
    by_length: dict[int, list[int]] = {}
    for n, ev in enumerate(evs):
        by_length.setdefault(len(ev), []).append(n)
    for idxs in by_length.values():
        ev = np.stack([evs[n] for n in idxs])
        trans = np.stack([transs[n] for n in idxs])
        gamma, xi, loglik = _smooth_batch(ev, trans, model.init.pi)
        for row, n in enumerate(idxs):
            posteriors[n] = Posterior(gamma=gamma[row], xi=xi[row],
                                      loglik=float(loglik[row]))
    total = float(sum(p.loglik for p in posteriors))
    return posteriors, total


def brute_force_posterior(model: HybridModel, traj: Trajectory) -> Posterior:
    """Exact posterior by enumerating all K^T regime paths. Oracle only.

    Refuses instances with more than 10^6 paths.
    """
    ev, trans = local_quantities(model, traj)
    T, K = ev.shape
    n_paths = K ** T
    if n_paths > BRUTE_FORCE_MAX_PATHS:
        raise ValueError(f"K^T = {n_paths} exceeds the brute-force budget")
    paths = np.array(list(itertools.product(range(K), repeat=T)), dtype=int)
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.init.pi)
        log_trans = np.log(trans)
    logp = log_pi[paths[:, 0]].copy()
    for t in range(T):
        logp += ev[t, paths[:, t]]
    for t in range(T - 1):
        logp += log_trans[t, paths[:, t + 1], paths[:, t]]
    loglik = logsumexp(logp)
    post = np.exp(logp - loglik)
    gamma = np.zeros((T, K))
    for t in range(T):
        for k in range(K):
            gamma[t, k] = post[paths[:, t] == k].sum()
    xi = np.zeros((T - 1, K, K))
    for t in range(T - 1):
        for j in range(K):
            for i in range(K):
                xi[t, j, i] = post[(paths[:, t] == j) & (paths[:, t + 1] == i)].sum()
    return Posterior(gamma=gamma, xi=xi, loglik=float(loglik))


def viterbi(model: HybridModel, traj: Trajectory) -> np.ndarray:
    """Most likely regime path (debugging utility, not a learning path)."""
    ev, trans = local_quantities(model, traj)
    T, K = ev.shape
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.init.pi)
        log_trans = np.log(trans)
    delta = log_pi + ev[0]
    back = np.zeros((T, K), dtype=int)
    for t in range(1, T):
        scores = log_trans[t - 1] + delta[None, :]   # [i, j] = trans j->i + delta_j
        back[t] = np.argmax(scores, axis=1)
        delta = ev[t] + np.max(scores, axis=1)
    path = np.empty(T, dtype=int)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 2, -1, -1):
        path[t] = back[t + 1][path[t + 1]]
    return path
