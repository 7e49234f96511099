"""Forecasting protocol: prefix filtering, h-step open-loop prediction, NMSE
scoring, split-averaged report tables, and parameter counting.

Forecasts start from the filtered regime belief at the prefix end, then
alternate belief propagation through the state-dependent transition with a
one-step state prediction. Scoring happens at the final step of each horizon
window, once per start index, normalized by per-dimension test-set variance
so a mean predictor scores 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._linalg import mvn_sample
from .inference import forward_pass, local_quantities
from .model import Dataset, HybridModel, Trajectory
from .transition import transition_matrices

MODE_MARGINAL = "marginal"
MODE_ARGMAX = "argmax"
MODE_SAMPLE = "sample"
FORECAST_MODES = (MODE_MARGINAL, MODE_ARGMAX, MODE_SAMPLE)


def filter_all(model: HybridModel, traj: Trajectory) -> np.ndarray:
    """Filtered regime posterior at every step, (T, K); row t-1 is
    p(z_t | x_{1:t}, u_{1:t})."""
    ev, trans = local_quantities(model, traj)
    alpha, _, _ = forward_pass(ev, trans, model.init.pi)
    return alpha


def filter_prefix(model: HybridModel, traj: Trajectory, t: int) -> np.ndarray:
    """Filtered belief after the first t steps (1-based, 1 <= t <= T)."""
    if not 1 <= t <= traj.T:
        raise ValueError(f"prefix length t={t} outside 1..{traj.T}")
    ev, trans = local_quantities(model, traj)
    alpha, _, _ = forward_pass(ev[:t], trans[:max(t - 1, 0)], model.init.pi)
    return alpha[-1]


def _dynamics_stack(model: HybridModel):
    A = np.stack([d.A for d in model.dynamics])
    B = np.stack([d.B for d in model.dynamics])
    c = np.stack([d.c for d in model.dynamics])
    return A, B, c


def _forecast_batch(model: HybridModel, x0: np.ndarray, b0: np.ndarray,
                    us: np.ndarray, mode: str,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Forecast h steps from M starts at once.

    x0 (M, d_x) states, b0 (M, K) beliefs, us (M, h, d_u) recorded actions.
    Returns (M, h, d_x). Marginal propagates the full belief and predicts the
    belief-weighted mean; argmax collapses the belief to its best regime each
    step; sample draws a regime path and adds process noise (row-major draw
    order, so results are rng-deterministic).
    """
    if mode not in FORECAST_MODES:
        raise ValueError(f"mode must be one of {FORECAST_MODES}, got {mode!r}")
    if mode == MODE_SAMPLE and rng is None:
        raise ValueError("sample mode needs an rng")
    M, h = us.shape[:2]
    K = model.K
    x = np.array(x0, dtype=float)
    b = np.array(b0, dtype=float)
    A, B, c = _dynamics_stack(model)
    out = np.empty((M, h, x.shape[1]))
    for i in range(h):
        u = us[:, i, :]
        psi = transition_matrices(model.transition, x, u)     # (M, K, K) [dest, src]
        b = np.einsum("mij,mj->mi", psi, b)
        b /= b.sum(axis=1, keepdims=True)
        # per-regime one-step means: (M, K, d_x)
        means = np.einsum("kde,me->mkd", A, x) + np.einsum("kdu,mu->mkd", B, u) + c
        if mode == MODE_MARGINAL:
            x = np.einsum("mk,mkd->md", b, means)
        else:
            if mode == MODE_ARGMAX:
                ks = b.argmax(axis=1)
            else:
                cum = np.cumsum(b, axis=1)
                draws = rng.random(M)
                ks = (draws[:, None] < cum).argmax(axis=1)
            x = means[np.arange(M), ks]
            if mode == MODE_SAMPLE:
                for m in range(M):
                    x[m] = mvn_sample(rng, x[m], model.dynamics[ks[m]].lam_cov)
            b = np.zeros((M, K))
            b[np.arange(M), ks] = 1.0
        out[:, i, :] = x
    return out


def forecast(model: HybridModel, traj: Trajectory, t: int, h: int,
             actions: np.ndarray | None = None, mode: str = MODE_MARGINAL,
             rng: np.random.Generator | None = None) -> np.ndarray:
    """Predict states t+1 .. t+h from the filtered belief at step t (1-based).

    actions defaults to the recorded controls u_t .. u_{t+h-1}; an explicit
    (h, d_u) array overrides them. Returns (h, d_x).
    """
    if h < 1:
        raise ValueError("horizon must be >= 1")
    if t + h > traj.T:
        raise ValueError(f"start t={t} with horizon h={h} overruns T={traj.T}")
    if actions is None:
        actions = traj.us[t - 1:t - 1 + h]
    actions = np.asarray(actions, dtype=float).reshape(1, h, traj.d_u)
    b = filter_prefix(model, traj, t)
    x = traj.xs[t - 1]
    return _forecast_batch(model, x[None], b[None], actions, mode, rng)[0]


def nmse(preds: np.ndarray, truths: np.ndarray, normalizer: np.ndarray) -> float:
    """Mean over points of the per-dimension variance-normalized squared
    error, averaged over dimensions; a test-set-mean predictor scores 1."""
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    truths = np.atleast_2d(np.asarray(truths, dtype=float))
    if preds.shape != truths.shape or preds.size == 0:
        raise ValueError(f"preds {preds.shape} and truths {truths.shape} must "
                         f"match and be nonempty")
    normalizer = np.asarray(normalizer, dtype=float)
    if np.any(normalizer <= 0):
        raise ValueError("zero-variance dimension in the normalizer")
    err = (preds - truths) ** 2 / normalizer
    return float(np.mean(err.sum(axis=1) / preds.shape[1]))


def dataset_normalizer(test: Dataset) -> np.ndarray:
    """Per-dimension variance of all test-set states."""
    xs = np.concatenate([t.xs for t in test.trajectories], axis=0)
    var = xs.var(axis=0)
    if np.any(var <= 0):
        raise ValueError("test set has a zero-variance state dimension")
    return var


@dataclass
class EvalReport:
    """Split-averaged NMSE table plus per-split long rows and param counts."""
    rows: list = field(default_factory=list)        # dicts: tag, K, h, mean, std, n
    per_split: list = field(default_factory=list)   # dicts: tag, K, split, h, nmse
    param_counts: dict = field(default_factory=dict)

    def to_csv(self, path=None, header_lines=()):
        lines = [f"# {h}" for h in header_lines]
        lines.append("model_tag,K,h,nmse_mean,nmse_std,n_splits")
        for r in self.rows:
            lines.append(f"{r['tag']},{r['K']},{r['h']},{r['mean']!r},"
                         f"{r['std']!r},{r['n']}")
        text = "\n".join(lines) + "\n"
        if path is None:
            return text
        with open(path, "w") as f:
            f.write(text)
        return None

    def to_long_csv(self, path=None, header_lines=()):
        lines = [f"# {h}" for h in header_lines]
        lines.append("model_tag,K,split,h,nmse")
        for r in self.per_split:
            lines.append(f"{r['tag']},{r['K']},{r['split']},{r['h']},{r['nmse']!r}")
        text = "\n".join(lines) + "\n"
        if path is None:
            return text
        with open(path, "w") as f:
            f.write(text)
        return None

    def summary(self) -> str:
        out = []
        for r in self.rows:
            out.append(f"{r['tag']:24s} K={r['K']:<2d} h={r['h']:<3d} "
                       f"nmse={r['mean']:.6g} +- {r['std']:.3g} "
                       f"(n={r['n']})")
        for tag, count in self.param_counts.items():
            out.append(f"{tag:24s} params={count}")
        return "\n".join(out)


def _final_step_scores(model: HybridModel, test: Dataset, h: int, mode: str,
                       rng: np.random.Generator | None = None):
    """(preds, truths) at the final step of every h-window over every test
    trajectory and every valid 1-based start t with t + h <= T."""
    preds, truths = [], []
    for traj in test.trajectories:
        if traj.T <= h:
            continue
        alpha = filter_all(model, traj)
        starts = np.arange(1, traj.T - h + 1)           # 1-based
        x0 = traj.xs[starts - 1]
        b0 = alpha[starts - 1]
        us = np.stack([traj.us[s - 1:s - 1 + h] for s in starts])
        out = _forecast_batch(model, x0, b0, us, mode, rng)
        preds.append(out[:, -1, :])
        truths.append(traj.xs[starts - 1 + h])
    if not preds:
        raise ValueError(f"no trajectory is longer than horizon {h}")
    return np.concatenate(preds), np.concatenate(truths)


def evaluate(models_by_tag: dict, test: Dataset, horizons,
             mode: str = MODE_MARGINAL,
             rng: np.random.Generator | None = None) -> EvalReport:
    """Score each tag's per-split models on the test set at every horizon.

    models_by_tag maps a tag to the list of fitted models, one per split.
    Aggregation is the mean and population std over splits.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    horizons = [int(h) for h in horizons]
    if not horizons or min(horizons) < 1:
        raise ValueError("need at least one horizon >= 1")
    normalizer = dataset_normalizer(test)
    report = EvalReport()
    for tag, models in models_by_tag.items():
        if not models:
            raise ValueError(f"tag {tag!r} has no models")
        K = models[0].K
        scores = np.empty((len(models), len(horizons)))
        for s, model in enumerate(models):
            for j, h in enumerate(horizons):
                preds, truths = _final_step_scores(model, test, h, mode, rng)
                scores[s, j] = nmse(preds, truths, normalizer)
                report.per_split.append(dict(tag=tag, K=model.K, split=s, h=h,
                                             nmse=float(scores[s, j])))
        for j, h in enumerate(horizons):
            report.rows.append(dict(tag=tag, K=K, h=h,
                                    mean=float(scores[:, j].mean()),
                                    std=float(scores[:, j].std()),
                                    n=len(models)))
        report.param_counts[tag] = count_params(models[0])
    return report


def count_params(model: HybridModel) -> int:
    """Documented counting convention: initial regime probabilities (K) plus
    transition (K^2 bias + feature parameters) plus, per regime, A (d_x^2),
    B (d_x d_u), c (d_x) and a diagonal process noise (d_x); closed-loop
    controllers add gain, offset and diagonal noise analogously. The
    initial-state Gaussians are excluded."""
    return sum(count_params_breakdown(model).values())


def count_params_breakdown(model: HybridModel) -> dict:
    K, d_x, d_u = model.K, model.d_x, model.d_u
    out = {
        "initial_probs": K,
        "transition_bias": K * K,
        "transition_features": int(model.transition.feature_params.size),
        "dynamics": K * (d_x * d_x + d_x * d_u + d_x + d_x),
    }
    if model.controllers is not None:
        d_phi = model.controllers[0].gain.shape[1]
        out["controllers"] = K * (d_u * d_phi + d_u + d_u)
    return out
