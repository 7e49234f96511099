"""EM fitting of switching linear-Gaussian models.

The E-step is exact forward-backward smoothing; Gaussian blocks (initial model,
dynamics, controllers) have closed-form weighted least-squares M-steps;
transition links are improved by gradient descent with backtracking
(improvement-or-keep, so the observed-data log-likelihood never decreases
beyond floating-point noise). Covariances are projected onto the SPD cone
with a minimum-eigenvalue floor, which is the constrained argmax, so the
monotonicity guarantee survives the projection.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from ._linalg import floor_spd
from .features import controller_feature_dim
from .inference import Posterior, _smooth_batch, local_quantities
from .model import (CLOSED_LOOP, MODES, OPEN_LOOP, Dataset, HybridModel,
                    InitialModel, RegimeController, RegimeDynamics,
                    controller_feature_series)
from .transition import (TransitionModel, _nll_grad_packed, make_transition,
                         params_to_vector, stack_transition_stats,
                         vector_to_params)

RIDGE = 1e-8
EMPTY_WEIGHT = 1e-12
KMEANS_ITERS = 50
STICKY_LOGIT = 2.0
FEATURE_INIT_SCALE = 0.01
MAX_HALVINGS = 20


def parse_transition_spec(spec: str) -> tuple[str, int | None, int | None]:
    """Parse 'stationary', 'linear', 'polynomial:2', 'perceptron:16' into
    (kind, degree, hidden_units); the numeric parts are None when absent."""
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower()
    degree: int | None = None
    hidden: int | None = None
    if kind == "polynomial":
        degree = int(arg) if arg else None
    elif kind == "perceptron":
        hidden = int(arg) if arg else None
    elif arg:
        raise ValueError(f"transition kind {kind!r} takes no argument")
    return kind, degree, hidden


@dataclass
class FitConfig:
    K: int
    mode: str = OPEN_LOOP
    transition_kind: str = "stationary"
    lag: int = 0
    poly_degree: int = 1
    max_iters: int = 200
    rel_tol: float = 1e-6
    restarts: int = 5
    seed: int = 0
    covariance_floor: float = 1e-6
    glm_steps: int = 100
    glm_step_size: float = 1e-2
    per_prev: bool = False
    constrain_offset_zero: bool = False
    # filled from transition_kind strings like "perceptron:16"
    transition_degree: int = field(default=1)
    hidden_units: int = field(default=0)

    def __post_init__(self):
        kind, degree, hidden = parse_transition_spec(self.transition_kind)
        self.transition_kind = kind
        if degree is not None:
            self.transition_degree = degree
        if hidden is not None:
            self.hidden_units = hidden
        if kind == "polynomial" and self.transition_degree < 1:
            raise ValueError("polynomial transition needs degree >= 1")
        if kind == "perceptron" and self.hidden_units < 1:
            self.hidden_units = 16
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.K < 1 or self.max_iters < 1 or self.restarts < 1:
            raise ValueError("K, max_iters, restarts must be positive")
        if self.rel_tol <= 0 or self.covariance_floor <= 0 or self.glm_step_size <= 0:
            raise ValueError("tolerances must be positive")
        if self.glm_steps < 0 or self.lag < 0 or self.poly_degree < 1:
            raise ValueError("glm_steps >= 0, lag >= 0, poly_degree >= 1 required")


@dataclass
class FitHistory:
    loglik: list[float] = field(default_factory=list)
    q_value: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, loglik: float, q_value: float, seconds: float):
        self.loglik.append(float(loglik))
        self.q_value.append(float(q_value))
        self.seconds.append(float(seconds))

    def __len__(self):
        return len(self.loglik)

    def to_csv(self, path=None, include_timings: bool = True, header_lines=()):
        """CSV with columns iter, loglik, q_value, seconds. Returns the text
        when path is None. include_timings=False writes 0.0 seconds so outputs
        of identical runs are byte-identical."""
        lines = [f"# {h}" for h in header_lines]
        lines.append("iter,loglik,q_value,seconds")
        for i, (ll, q, s) in enumerate(zip(self.loglik, self.q_value, self.seconds)):
            sec = repr(float(s)) if include_timings else "0.0"
            lines.append(f"{i},{ll!r},{q!r},{sec}")
        text = "\n".join(lines) + "\n"
        if path is None:
            return text
        with open(path, "w") as f:
            f.write(text)
        return None


# -- initialization ------------------------------------------------------------

def _kmeans(points: np.ndarray, K: int, rng: np.random.Generator,
            iters: int = KMEANS_ITERS) -> np.ndarray:
    """Plain Lloyd iteration, fixed count, deterministic given the rng.

    Empty clusters are re-seeded with the point currently farthest from its
    assigned center.
    """
    distinct = np.unique(points, axis=0)
    if len(distinct) < K:
        raise ValueError(f"k-means needs at least {K} distinct points, "
                         f"got {len(distinct)}")
    centers = distinct[rng.choice(len(distinct), size=K, replace=False)]
    labels = np.zeros(len(points), dtype=int)
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        dist_own = d2[np.arange(len(points)), labels]
        taken: list[int] = []
        for k in range(K):
            if not np.any(labels == k):
                order = np.argsort(-dist_own)
                pick = next(int(i) for i in order if int(i) not in taken)
                labels[pick] = k
                taken.append(pick)
        for k in range(K):
            centers[k] = points[labels == k].mean(axis=0)
    return labels


class _HardPosterior:
    """Duck-typed stand-in for Posterior built from hard labels."""

    def __init__(self, labels: np.ndarray, K: int):
        T = len(labels)
        self.gamma = np.zeros((T, K))
        self.gamma[np.arange(T), labels] = 1.0
        self.xi = np.zeros((T - 1, K, K))
        self.xi[np.arange(T - 1), labels[:-1], labels[1:]] = 1.0
        self.loglik = np.nan


def _dataset_standardizer(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    raw = np.concatenate([np.concatenate([t.xs, t.us], axis=1)
                          for t in dataset.trajectories], axis=0)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def _global_initial(dataset: Dataset, K: int, floor: float) -> InitialModel:
    """Fallback initial Gaussian: global stats of the first states."""
    x1 = np.stack([t.xs[0] for t in dataset.trajectories])
    mu = x1.mean(axis=0)
    cov = floor_spd(np.cov(x1.T, ddof=0).reshape(x1.shape[1], x1.shape[1]), floor)
    return InitialModel(pi=np.full(K, 1.0 / K), mu=np.tile(mu, (K, 1)),
                        omega_cov=np.tile(cov, (K, 1, 1)))


def initialize(dataset: Dataset, config: FitConfig, rng: np.random.Generator) -> HybridModel:
    """Seeded k-means on [x_t; x_{t+1} - x_t] gives hard responsibilities; one
    M-step from those yields the starting model. Transition bias starts sticky
    (self-logit +2), feature weights small random."""
    K = config.K
    pts = np.concatenate([np.concatenate([t.xs[:-1], np.diff(t.xs, axis=0)], axis=1)
                          for t in dataset.trajectories], axis=0)
    labels = _kmeans(pts, K, rng)
    posts = []
    ofs = 0
    for traj in dataset.trajectories:
        lab = labels[ofs:ofs + traj.T - 1]
        ofs += traj.T - 1
        posts.append(_HardPosterior(np.append(lab, lab[-1]), K))

    floor = config.covariance_floor
    fallback_init = _global_initial(dataset, K, floor)
    fallback_dyn = tuple(RegimeDynamics(A=np.eye(dataset.d_x),
                                        B=np.zeros((dataset.d_x, dataset.d_u)),
                                        c=np.zeros(dataset.d_x),
                                        lam_cov=floor * np.eye(dataset.d_x))
                         for _ in range(K))
    init = mstep_initial(posts, dataset, floor, prev=fallback_init)
    dynamics = mstep_dynamics(posts, dataset, floor, prev=fallback_dyn)

    controllers = None
    if config.mode == CLOSED_LOOP:
        d_phi = controller_feature_dim(dataset.d_x, dataset.d_u, config.lag,
                                       config.poly_degree)
        fallback_ctl = tuple(RegimeController(gain=np.zeros((dataset.d_u, d_phi)),
                                              offset=np.zeros(dataset.d_u),
                                              sigma_cov=floor * np.eye(dataset.d_u),
                                              lag=config.lag,
                                              poly_degree=config.poly_degree)
                             for _ in range(K))
        controllers = mstep_controller(posts, dataset, config.lag, config.poly_degree,
                                       floor, prev=fallback_ctl,
                                       constrain_offset_zero=config.constrain_offset_zero)

    mean, std = _dataset_standardizer(dataset)
    tm = make_transition(config.transition_kind, K, dataset.d_x, dataset.d_u,
                         degree=config.transition_degree,
                         hidden_units=config.hidden_units,
                         per_prev=config.per_prev,
                         feat_mean=mean, feat_std=std,
                         bias=STICKY_LOGIT * np.eye(K),
                         rng=rng, init_scale=FEATURE_INIT_SCALE)
    return HybridModel(K=K, d_x=dataset.d_x, d_u=dataset.d_u, mode=config.mode,
                       init=init, dynamics=dynamics, transition=tm,
                       controllers=controllers)


# -- M-steps -------------------------------------------------------------------

def _weighted_lstsq(X: np.ndarray, Y: np.ndarray, w: np.ndarray, what: str) -> np.ndarray:
    G = X.T @ (w[:, None] * X) + RIDGE * np.eye(X.shape[1])
    try:
        coef = np.linalg.solve(G, X.T @ (w[:, None] * Y))
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"rank-deficient regression for {what}") from e
    if not np.all(np.isfinite(coef)):
        raise FloatingPointError(f"non-finite regression solution for {what}")
    return coef


def _weighted_residual_cov(resid: np.ndarray, w: np.ndarray, wsum: float,
                           floor: float) -> np.ndarray:
    cov = (w[:, None] * resid).T @ resid / wsum
    return floor_spd(cov, floor)


def mstep_initial(posteriors, dataset: Dataset, floor: float,
                  prev: InitialModel | None = None) -> InitialModel:
    """Initial regime probabilities and per-regime first-state Gaussians from
    gamma_1-weighted statistics. Regimes with vanishing weight keep their
    previous Gaussian (warning)."""
    K = posteriors[0].gamma.shape[1]
    g1 = np.stack([p.gamma[0] for p in posteriors])          # (N, K)
    x1 = np.stack([t.xs[0] for t in dataset.trajectories])   # (N, d_x)
    pi = g1.sum(axis=0)
    pi = pi / pi.sum()
    mu = np.empty((K, x1.shape[1]))
    om = np.empty((K, x1.shape[1], x1.shape[1]))
    for k in range(K):
        w = g1[:, k]
        wsum = w.sum()
        if wsum < EMPTY_WEIGHT:
            if prev is None:
                raise ValueError(f"regime {k} has no initial-state weight and "
                                 f"no previous parameters to keep")
            warnings.warn(f"regime {k}: no initial-state weight, keeping previous "
                          f"initial Gaussian")
            mu[k] = prev.mu[k]
            om[k] = prev.omega_cov[k]
            continue
        mu[k] = w @ x1 / wsum
        om[k] = _weighted_residual_cov(x1 - mu[k], w, wsum, floor)
    return InitialModel(pi=pi, mu=mu, omega_cov=om)


def _stack_dynamics_rows(dataset: Dataset):
    X, Y = [], []
    for traj in dataset.trajectories:
        X.append(np.concatenate([traj.xs[:-1], traj.us[:-1],
                                 np.ones((traj.T - 1, 1))], axis=1))
        Y.append(traj.xs[1:])
    return np.concatenate(X, axis=0), np.concatenate(Y, axis=0)


def mstep_dynamics(posteriors, dataset: Dataset, floor: float,
                   prev=None) -> tuple[RegimeDynamics, ...]:
    """Per-regime weighted least squares [x_t; u_t; 1] -> x_{t+1} with weights
    gamma_{t+1}(k); process noise is the weighted residual covariance, floored."""
    K = posteriors[0].gamma.shape[1]
    d_x, d_u = dataset.d_x, dataset.d_u
    X, Y = _stack_dynamics_rows(dataset)
    W = np.concatenate([p.gamma[1:] for p in posteriors], axis=0)  # (M, K)
    out = []
    for k in range(K):
        w = W[:, k]
        wsum = w.sum()
        if wsum < EMPTY_WEIGHT:
            if prev is None:
                raise ValueError(f"regime {k} has no dynamics weight and no "
                                 f"previous parameters to keep")
            warnings.warn(f"regime {k}: no dynamics weight, keeping previous parameters")
            out.append(prev[k])
            continue
        coef = _weighted_lstsq(X, Y, w, f"dynamics regime {k}")
        resid = Y - X @ coef
        lam = _weighted_residual_cov(resid, w, wsum, floor)
        out.append(RegimeDynamics(A=coef[:d_x].T, B=coef[d_x:d_x + d_u].T,
                                  c=coef[-1], lam_cov=lam))
    return tuple(out)


def mstep_controller(posteriors, dataset: Dataset, lag: int, poly_degree: int,
                     floor: float, prev=None,
                     constrain_offset_zero: bool = False) -> tuple[RegimeController, ...]:
    """Per-regime weighted least squares phi(x_t, past controls) -> u_t with
    weights gamma_t(k); action noise is the floored residual covariance."""
    K = posteriors[0].gamma.shape[1]
    d_u = dataset.d_u
    feats = np.concatenate([controller_feature_series(t.xs, t.us, lag, poly_degree)
                            for t in dataset.trajectories], axis=0)
    if not constrain_offset_zero:
        feats_full = np.concatenate([feats, np.ones((len(feats), 1))], axis=1)
    else:
        feats_full = feats
    U = np.concatenate([t.us for t in dataset.trajectories], axis=0)
    W = np.concatenate([p.gamma for p in posteriors], axis=0)
    out = []
    for k in range(K):
        w = W[:, k]
        wsum = w.sum()
        if wsum < EMPTY_WEIGHT:
            if prev is None:
                raise ValueError(f"regime {k} has no controller weight and no "
                                 f"previous parameters to keep")
            warnings.warn(f"regime {k}: no controller weight, keeping previous parameters")
            out.append(prev[k])
            continue
        coef = _weighted_lstsq(feats_full, U, w, f"controller regime {k}")
        resid = U - feats_full @ coef
        sig = _weighted_residual_cov(resid, w, wsum, floor)
        if constrain_offset_zero:
            gain, offset = coef.T, np.zeros(d_u)
        else:
            gain, offset = coef[:-1].T, coef[-1]
        out.append(RegimeController(gain=gain, offset=offset, sigma_cov=sig,
                                    lag=lag, poly_degree=poly_degree))
    return tuple(out)


def mstep_transitions(posteriors, dataset: Dataset, tm_hat: TransitionModel,
                      config: FitConfig) -> TransitionModel:
    """Transition update. Stationary links have the closed-form normalized-count
    solution; other kinds take up to glm_steps gradient-descent steps with
    backtracking (at most 20 halvings per step) on the expected transition NLL
    and return the best iterate, or tm_hat unchanged if nothing improved.

    The first trial length is normalized by the entry gradient's magnitude:
    warm-started calls arrive nearly converged with tiny gradients, and a raw
    glm_step_size trial would spend the whole budget re-doubling before any
    parameter moves a useful distance."""
    xis = [p.xi for p in posteriors]
    if tm_hat.kind == "stationary":
        counts = sum(xi.sum(axis=0) for xi in xis)           # (K, K) [source, dest]
        probs = counts / np.maximum(counts.sum(axis=1, keepdims=True), EMPTY_WEIGHT)
        bias = np.log(np.maximum(probs.T, 1e-300))           # bias[i, j], column j
        return replace(tm_hat, bias=bias)
    if config.glm_steps == 0:
        return tm_hat

    feats, xi_di = stack_transition_stats(tm_hat, dataset, xis)
    src_mass = xi_di.sum(axis=1)
    scale = 1.0 / len(feats)  # optimize the mean NLL so step sizes are data-size-free
    start = params_to_vector(tm_hat)
    vec = start
    nll, grad = _nll_grad_packed(tm_hat, vec, feats, xi_di, src_mass)
    nll, grad = nll * scale, grad * scale
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(
            f"non-finite transition gradient (kind={tm_hat.kind}, "
            f"|params|={np.abs(vec).max():.3e}, nll={nll:.6e})")
    step = config.glm_step_size / max(np.abs(grad).max(), 1e-12)
    improved = False
    for _ in range(config.glm_steps):
        accepted = False
        trial = step
        for _ in range(MAX_HALVINGS + 1):
            cand = vec - trial * grad
            cand_nll, cand_grad = _nll_grad_packed(tm_hat, cand, feats, xi_di,
                                                   src_mass)
            cand_nll, cand_grad = cand_nll * scale, cand_grad * scale
            if cand_nll < nll and np.all(np.isfinite(cand_grad)):
                vec, nll, grad = cand, cand_nll, cand_grad
                step = trial * 2.0
                accepted = improved = True
                break
            trial *= 0.5
        if not accepted:
            break
    # accepted steps strictly decrease the objective, so the last iterate is
    # the best one; without any acceptance keep tm_hat (generalized EM)
    if not improved:
        return tm_hat
    return vector_to_params(tm_hat, vec)


def _mstep_all(model: HybridModel, posteriors, dataset: Dataset,
               config: FitConfig) -> HybridModel:
    floor = config.covariance_floor
    init = mstep_initial(posteriors, dataset, floor, prev=model.init)
    dynamics = mstep_dynamics(posteriors, dataset, floor, prev=model.dynamics)
    controllers = None
    if model.mode == CLOSED_LOOP:
        controllers = mstep_controller(posteriors, dataset, config.lag,
                                       config.poly_degree, floor,
                                       prev=model.controllers,
                                       constrain_offset_zero=config.constrain_offset_zero)
    tm = mstep_transitions(posteriors, dataset, model.transition, config)
    return HybridModel(K=model.K, d_x=model.d_x, d_u=model.d_u, mode=model.mode,
                       init=init, dynamics=dynamics, transition=tm,
                       controllers=controllers)


# -- EM driver -----------------------------------------------------------------

def _estep_stats(model: HybridModel, dataset: Dataset):
    """E-step plus the EM lower-bound value Q(theta; posteriors) computed from
    the same local quantities."""
    evs, transs = zip(*(local_quantities(model, traj) for traj in dataset.trajectories))
    posteriors: list = [None] * len(dataset)
    total_ll = 0.0
    total_q = 0.0
    # clipped log keeps 0 * log(0) contributions finite; gamma_1(k) > 0 forces
    # pi_k > 0, so the clip never distorts a term that actually contributes
    log_pi = np.log(np.maximum(model.init.pi, 1e-300))
    by_length: dict[int, list[int]] = {}
    for n, ev in enumerate(evs):
        by_length.setdefault(len(ev), []).append(n)
    for idxs in by_length.values():
        ev = np.stack([evs[n] for n in idxs])
        trans = np.stack([transs[n] for n in idxs])
        gamma, xi, loglik = _smooth_batch(ev, trans, model.init.pi)
        with np.errstate(divide="ignore"):
            log_trans = np.log(np.maximum(trans, 1e-300))
        # Q = E_q[log p(x, u, z)] under the freshly smoothed posterior
        q_init = float(np.sum(gamma[:, 0] * log_pi))
        q_ev = float(np.sum(gamma * ev))
        q_trans = float(np.einsum("btji,btij->", xi, log_trans))
        total_q += q_init + q_ev + q_trans
        total_ll += float(loglik.sum())
        for row, n in enumerate(idxs):
            posteriors[n] = Posterior(gamma=gamma[row], xi=xi[row],
                                      loglik=float(loglik[row]))
    return posteriors, total_ll, total_q


_RESTART_ERRORS = (np.linalg.LinAlgError, FloatingPointError, ValueError,
                   RuntimeError, OverflowError)


def _run_em(dataset: Dataset, config: FitConfig, rng: np.random.Generator,
            init_model: HybridModel | None):
    model = init_model if init_model is not None else initialize(dataset, config, rng)
    history = FitHistory()
    prev_ll = -np.inf
    converged = False
    for _ in range(config.max_iters):
        t0 = time.perf_counter()
        posteriors, loglik, q = _estep_stats(model, dataset)
        converged = np.isfinite(prev_ll) and \
            (loglik - prev_ll) < config.rel_tol * (1.0 + abs(prev_ll))
        if not converged:
            model = _mstep_all(model, posteriors, dataset, config)
        history.append(loglik, q, time.perf_counter() - t0)
        if converged:
            break
        prev_ll = loglik
    if not converged:
        # max_iters exhausted after an M-step: record the returned model's
        # likelihood so the history ends at the model actually returned
        t0 = time.perf_counter()
        _, loglik, q = _estep_stats(model, dataset)
        history.append(loglik, q, time.perf_counter() - t0)
    return model, history


def fit_em(dataset: Dataset, config: FitConfig,
           init_model: HybridModel | None = None) -> tuple[HybridModel, FitHistory]:
    """Fit by EM with seeded restarts (seeds seed..seed+restarts-1), keeping the
    run with the highest final log-likelihood. Passing init_model skips
    initialization and runs a single EM chain from it."""
    if init_model is not None:
        return _run_em(dataset, config, np.random.default_rng(config.seed), init_model)
    best = None
    errors: list[str] = []
    for r in range(config.restarts):
        rng = np.random.default_rng(config.seed + r)
        try:
            model, history = _run_em(dataset, config, rng, None)
        except _RESTART_ERRORS as e:
            warnings.warn(f"restart {r} (seed {config.seed + r}) failed: {e}")
            errors.append(f"seed {config.seed + r}: {e}")
            continue
        if best is None or history.loglik[-1] > best[1].loglik[-1]:
            best = (model, history)
    if best is None:
        raise RuntimeError("all EM restarts failed: " + "; ".join(errors))
    return best
