"""Regime transition links: probabilities of the next regime given the previous
regime and the current state and control.

Logits for destination regime i from source regime j at input (x, u) are

    logit[i, j] = bias[i, j] + g_i(s(x, u))

where s standardizes the raw (x, u) vector with the stored mean/std and g is a
kind-specific map sharing parameters across source regimes:

    stationary   g = 0                          (classic HMM)
    linear       g = W s                        (optionally per-source W via per_prev)
    polynomial   g = W poly(s)                  (monomials up to `degree`)
    perceptron   g = W2 tanh(W1 s + b1) + b2    (`hidden_units` wide)

Columns of the resulting matrix are probability distributions over the next
regime. feature_params is the flat parameter vector of g (empty when
stationary); the trainable vector for the M-step is bias (row-major) followed
by feature_params.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .features import n_monomials, polynomial_features

KINDS = ("stationary", "linear", "polynomial", "perceptron")


def _input_dim(d_x: int, d_u: int) -> int:
    return d_x + d_u


def _feature_dim(kind: str, d_x: int, d_u: int, degree: int) -> int:
    f = _input_dim(d_x, d_u)
    if kind == "polynomial":
        return n_monomials(f, degree)
    return f


def n_feature_params(kind: str, K: int, d_x: int, d_u: int, degree: int = 1,
                     hidden_units: int = 0, per_prev: bool = False) -> int:
    f = _feature_dim(kind, d_x, d_u, degree)
    if kind == "stationary":
        return 0
    if kind == "linear":
        return K * K * f if per_prev else K * f
    if kind == "polynomial":
        return K * f
    if kind == "perceptron":
        return hidden_units * f + hidden_units + K * hidden_units + K
    raise ValueError(f"unknown transition kind {kind!r}")


@dataclass(frozen=True)
class TransitionModel:
    kind: str
    K: int
    d_x: int
    d_u: int
    bias: np.ndarray            # (K, K), bias[i, j] for source j -> destination i
    feature_params: np.ndarray  # flat vector, layout per kind
    feat_mean: np.ndarray       # (d_x + d_u,)
    feat_std: np.ndarray        # (d_x + d_u,), all > 0
    degree: int = 1
    hidden_units: int = 0
    per_prev: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transition kind {self.kind!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.kind == "polynomial" and self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")
        if self.kind == "perceptron" and self.hidden_units < 1:
            raise ValueError("perceptron needs hidden_units >= 1")
        if self.per_prev and self.kind != "linear":
            raise ValueError("per_prev weights are only supported for the linear kind")
        # drop metadata that is inert for this kind so equality and
        # serialization are canonical
        if self.kind != "polynomial":
            object.__setattr__(self, "degree", 1)
        if self.kind != "perceptron":
            object.__setattr__(self, "hidden_units", 0)
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=float))
        object.__setattr__(self, "feature_params", np.asarray(self.feature_params, dtype=float).ravel())
        object.__setattr__(self, "feat_mean", np.asarray(self.feat_mean, dtype=float).ravel())
        object.__setattr__(self, "feat_std", np.asarray(self.feat_std, dtype=float).ravel())
        if self.bias.shape != (self.K, self.K):
            raise ValueError(f"bias must be (K, K), got {self.bias.shape}")
        if not np.all(np.isfinite(self.bias)):
            raise ValueError("bias must be finite")
        expected = n_feature_params(self.kind, self.K, self.d_x, self.d_u,
                                    self.degree, self.hidden_units, self.per_prev)
        if self.feature_params.size != expected:
            raise ValueError(f"feature_params has {self.feature_params.size} entries, "
                             f"expected {expected} for kind {self.kind!r}")
        if not np.all(np.isfinite(self.feature_params)):
            raise ValueError("feature_params must be finite")
        f = _input_dim(self.d_x, self.d_u)
        if self.feat_mean.shape != (f,) or self.feat_std.shape != (f,):
            raise ValueError("standardizer mean/std must have d_x + d_u entries")
        if not np.all(self.feat_std > 0):
            raise ValueError("standardizer std must be positive")

    @property
    def n_params(self) -> int:
        return self.K * self.K + self.feature_params.size


def make_transition(kind: str, K: int, d_x: int, d_u: int, *, degree: int = 1,
                    hidden_units: int = 0, per_prev: bool = False,
                    feat_mean=None, feat_std=None, bias=None,
                    rng: np.random.Generator | None = None,
                    init_scale: float = 0.01) -> TransitionModel:
    """Build a transition model, drawing small random feature weights if rng given."""
    f = _input_dim(d_x, d_u)
    if feat_mean is None:
        feat_mean = np.zeros(f)
    if feat_std is None:
        feat_std = np.ones(f)
    if bias is None:
        bias = np.zeros((K, K))
    n = n_feature_params(kind, K, d_x, d_u, degree, hidden_units, per_prev)
    if rng is not None:
        params = init_scale * rng.standard_normal(n)
    else:
        params = np.zeros(n)
    return TransitionModel(kind=kind, K=K, d_x=d_x, d_u=d_u, bias=bias,
                           feature_params=params, feat_mean=feat_mean,
                           feat_std=feat_std, degree=degree,
                           hidden_units=hidden_units, per_prev=per_prev)


# -- feature pipeline ---------------------------------------------------------

def standardize_inputs(tm: TransitionModel, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    us = np.asarray(us, dtype=float).reshape(xs.shape[0], tm.d_u)
    raw = np.concatenate([xs, us], axis=1)
    if not np.all(np.isfinite(raw)):
        raise ValueError("transition inputs must be finite")
    return (raw - tm.feat_mean) / tm.feat_std


def transition_features(tm: TransitionModel, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
    """(M, F) feature matrix for the link, standardized then expanded per kind."""
    s = standardize_inputs(tm, xs, us)
    if tm.kind == "polynomial":
        return polynomial_features(s, tm.degree)
    return s


def _unpack(tm: TransitionModel, params: np.ndarray):
    """Split the flat feature_params per kind. Returns a tuple of views."""
    f = _feature_dim(tm.kind, tm.d_x, tm.d_u, tm.degree)
    K, H = tm.K, tm.hidden_units
    if tm.kind == "stationary":
        return ()
    if tm.kind == "linear" and tm.per_prev:
        return (params.reshape(K, K, f),)
    if tm.kind in ("linear", "polynomial"):
        return (params.reshape(K, f),)
    w1 = params[: H * f].reshape(H, f)
    b1 = params[H * f: H * f + H]
    w2 = params[H * f + H: H * f + H + K * H].reshape(K, H)
    b2 = params[H * f + H + K * H:]
    return (w1, b1, w2, b2)


def _logits(tm: TransitionModel, feats: np.ndarray, bias: np.ndarray,
            params: np.ndarray) -> np.ndarray:
    """(M, K, K) logits [m, i, j] for inputs already passed through the feature map."""
    M = feats.shape[0]
    out = np.broadcast_to(bias, (M, tm.K, tm.K)).copy()
    if tm.kind == "stationary":
        return out
    parts = _unpack(tm, params)
    if tm.kind == "linear" and tm.per_prev:
        out += np.einsum("mf,ijf->mij", feats, parts[0])
        return out
    if tm.kind in ("linear", "polynomial"):
        out += (feats @ parts[0].T)[:, :, None]
        return out
    w1, b1, w2, b2 = parts
    h = np.tanh(feats @ w1.T + b1)
    out += (h @ w2.T + b2)[:, :, None]
    return out


def _log_softmax_dest(logits: np.ndarray) -> np.ndarray:
    """Normalize logits (M, K, K) over the destination axis (axis 1)."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def transition_matrices(tm: TransitionModel, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Column-stochastic matrices (M, K, K): entry [m, i, j] = p(next = i | prev = j)."""
    feats = transition_features(tm, xs, us)
    return np.exp(_log_softmax_dest(_logits(tm, feats, tm.bias, tm.feature_params)))


def transition_matrix(tm: TransitionModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return transition_matrices(tm, np.asarray(x, dtype=float)[None, :],
                               np.asarray(u, dtype=float).reshape(1, -1))[0]


def transition_probs(tm: TransitionModel, z_prev: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    if not 0 <= z_prev < tm.K:
        raise ValueError(f"z_prev {z_prev} out of range for K = {tm.K}")
    return transition_matrix(tm, x, u)[:, z_prev]


# -- M-step objective ---------------------------------------------------------

def params_to_vector(tm: TransitionModel) -> np.ndarray:
    return np.concatenate([tm.bias.ravel(), tm.feature_params])


def vector_to_params(tm: TransitionModel, vec: np.ndarray) -> TransitionModel:
    vec = np.asarray(vec, dtype=float)
    kk = tm.K * tm.K
    if vec.size != kk + tm.feature_params.size:
        raise ValueError("parameter vector length mismatch")
    return replace(tm, bias=vec[:kk].reshape(tm.K, tm.K).copy(),
                   feature_params=vec[kk:].copy())


def stack_transition_stats(tm: TransitionModel, dataset, xis) -> tuple[np.ndarray, np.ndarray]:
    """Stack link features at source steps and xi tables across trajectories.

    xis holds one (T-1, K, K) pairwise-marginal array per trajectory, indexed
    [t, j, i] for source j -> destination i. Returns feats (M, F) and
    xi_di (M, K, K) with xi_di[m, i, j] the expected count of j -> i at
    stacked step m.
    """
    feats, xs = [], []
    for traj, xi in zip(dataset.trajectories, xis):
        feats.append(transition_features(tm, traj.xs[:-1], traj.us[:-1]))
        xs.append(np.swapaxes(xi, 1, 2))
    return np.concatenate(feats, axis=0), np.concatenate(xs, axis=0)


def _nll_grad_packed(tm: TransitionModel, vec: np.ndarray, feats: np.ndarray,
                     xi_di: np.ndarray, src_mass: np.ndarray | None = None
                     ) -> tuple[float, np.ndarray]:
    """Expected transition NLL and its gradient at parameter vector `vec`.

    feats and xi_di come from stack_transition_stats; src_mass is the optional
    precomputed xi_di.sum(axis=1), invariant across evaluations. The objective
    is -sum_m sum_ij xi_di[m, i, j] log psi[m, i, j].
    """
    kk = tm.K * tm.K
    bias = vec[:kk].reshape(tm.K, tm.K)
    params = vec[kk:]
    logits = _logits(tm, feats, bias, params)
    logpsi = _log_softmax_dest(logits)
    nll = -float(np.vdot(xi_di, logpsi))

    # d nll / d logits[m, i, j] = src_mass[m, j] * psi[m, i, j] - xi_di[m, i, j]
    if src_mass is None:
        src_mass = xi_di.sum(axis=1)                  # (M, K)
    g = np.exp(logpsi, out=logpsi)                    # psi; logpsi not used again
    g *= src_mass[:, None, :]
    g -= xi_di

    grad_bias = g.sum(axis=0)
    if tm.kind == "stationary":
        return nll, grad_bias.ravel()
    if tm.kind == "linear" and tm.per_prev:
        grad_w = np.einsum("mij,mf->ijf", g, feats)
        return nll, np.concatenate([grad_bias.ravel(), grad_w.ravel()])
    g_dest = g.sum(axis=2)                            # (M, K), shared across sources
    if tm.kind in ("linear", "polynomial"):
        grad_w = g_dest.T @ feats
        return nll, np.concatenate([grad_bias.ravel(), grad_w.ravel()])
    w1, b1, w2, _ = _unpack(tm, params)
    h = np.tanh(feats @ w1.T + b1)
    grad_w2 = g_dest.T @ h
    grad_b2 = g_dest.sum(axis=0)
    back = (g_dest @ w2) * (1.0 - h * h)              # (M, H)
    grad_w1 = back.T @ feats
    grad_b1 = back.sum(axis=0)
    return nll, np.concatenate([grad_bias.ravel(), grad_w1.ravel(), grad_b1,
                                grad_w2.ravel(), grad_b2])


def weighted_nll_and_grad(tm: TransitionModel, dataset, xis) -> tuple[float, np.ndarray]:
    """Expected negative log-likelihood of transitions under pairwise marginals.

    The gradient is with respect to the trainable vector params_to_vector(tm):
    bias entries row-major, then feature_params.
    """
    feats, xi_di = stack_transition_stats(tm, dataset, xis)
    return _nll_grad_packed(tm, params_to_vector(tm), feats, xi_di)
