"""Distill expert demonstrations into a switching linear policy and run it.

The distilled policy is the controller bank of a closed-loop hybrid model;
at run time a filtered belief over regimes is maintained from the transition
link and the dynamics evidence, and the action is a belief-weighted (or
regime-selected) linear feedback law.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._linalg import logsumexp, mvn_logpdf, mvn_sample
from .envs import (ENV_BOUNCING_BALL, ENV_CARTPOLE, ENV_PENDULUM, OBS_JOINT,
                   EnvConfig, clip_control, env_dims, hanging_state, observe,
                   save_dataset, step_env, wrap_angle)
from .learning import FitConfig, fit_em
from .model import (CLOSED_LOOP, Dataset, HybridModel, Trajectory,
                    _control_mean)
from .transition import transition_matrix

ACT_MEAN = "mean"
ACT_ARGMAX = "argmax"
ACT_SAMPLE = "sample"
ACT_MODES = (ACT_MEAN, ACT_ARGMAX, ACT_SAMPLE)

# success: over the final fifth of the rollout the pole stays within 0.2 rad
# of upright at angular speed <= 1 rad/s (closed thresholds); the cart must
# additionally stay on the track
SUCCESS_FINAL_FRACTION = 0.2
SUCCESS_ANGLE_TOL = 0.2
SUCCESS_SPEED_TOL = 1.0
SUCCESS_CART_LIMIT = 2.4


def default_distill_config(**overrides) -> FitConfig:
    """Five switching linear laws over one step of control history."""
    base = dict(K=5, mode=CLOSED_LOOP, transition_kind="linear", lag=1)
    base.update(overrides)
    return FitConfig(**base)


def distill(expert_dataset: Dataset, config: FitConfig | None = None) -> HybridModel:
    """Fit a closed-loop hybrid model to demonstrations; the fitted controller
    bank is the distilled policy."""
    if config is None:
        config = default_distill_config()
    if config.mode != CLOSED_LOOP:
        raise ValueError("distillation needs a closed-loop fit configuration")
    model, _ = fit_em(expert_dataset, config)
    return model


def _check_belief(model: HybridModel, belief) -> np.ndarray:
    b = np.asarray(belief, dtype=float).ravel()
    if b.shape != (model.K,) or np.any(b < -1e-12) or abs(b.sum() - 1.0) > 1e-6:
        raise ValueError(f"belief must be a {model.K}-simplex, got {b}")
    return np.maximum(b, 0.0) / b.sum()


def act(model: HybridModel, belief, x, past_us, mode: str = ACT_MEAN,
        rng: np.random.Generator | None = None) -> tuple[np.ndarray, int]:
    """One control from the switching policy. Returns (u, regime index).

    Mean blends the regime laws by the belief (the logged regime is the
    belief argmax); Argmax commits to the most likely regime; Sample draws
    the regime from the belief and adds the controller noise. The caller is
    responsible for actuator clipping.
    """
    if model.mode != CLOSED_LOOP:
        raise ValueError("act needs a closed-loop model with controllers")
    if mode not in ACT_MODES:
        raise ValueError(f"mode must be one of {ACT_MODES}, got {mode!r}")
    b = _check_belief(model, belief)
    if mode == ACT_MEAN:
        u = np.zeros(model.d_u)
        for k in range(model.K):
            u += b[k] * _control_mean(model, k, x, past_us)
        return u, int(np.argmax(b))
    if mode == ACT_ARGMAX:
        k = int(np.argmax(b))
        return _control_mean(model, k, x, past_us), k
    if rng is None:
        raise ValueError("sample mode needs an rng")
    k = int(rng.choice(model.K, p=b))
    u = mvn_sample(rng, _control_mean(model, k, x, past_us),
                   model.controllers[k].sigma_cov)
    return u, k


@dataclass
class RolloutResult:
    trajectory: Trajectory
    beliefs: np.ndarray           # (T, K) simplex rows
    regimes: np.ndarray           # (T,) regime used for control at each step
    success: bool
    criterion: dict = field(default_factory=dict)


def _wrap_if_needed(th: np.ndarray) -> np.ndarray:
    # wrap_angle is the identity on [-pi, pi) in exact arithmetic but not to
    # the ulp; skipping it there keeps the closed thresholds exact
    th = np.asarray(th, dtype=float)
    inside = (th >= -np.pi) & (th < np.pi)
    return np.where(inside, th, wrap_angle(th))


def success_criterion(traj: Trajectory, config: EnvConfig) -> bool:
    """Upright over the final fifth of the rollout, per the tolerances above."""
    if config.env == ENV_BOUNCING_BALL:
        raise ValueError("success is defined for the swing-up tasks only")
    xs = traj.xs[int(np.floor((1.0 - SUCCESS_FINAL_FRACTION) * traj.T)):]
    if config.env == ENV_PENDULUM:
        if config.obs == OBS_JOINT:
            th, om = xs[:, 0], xs[:, 1]
        else:
            th, om = np.arctan2(xs[:, 1], xs[:, 0]), xs[:, 2]
        on_track = True
    else:
        if config.obs == OBS_JOINT:
            p, th, om = xs[:, 0], xs[:, 2], xs[:, 3]
        else:
            p, th, om = xs[:, 0], np.arctan2(xs[:, 3], xs[:, 2]), xs[:, 4]
        on_track = bool(np.all(np.abs(p) < SUCCESS_CART_LIMIT))
    upright = bool(np.all(np.abs(_wrap_if_needed(th)) <= SUCCESS_ANGLE_TOL))
    slow = bool(np.all(np.abs(om) <= SUCCESS_SPEED_TOL))
    return upright and slow and on_track


def _initial_belief(model: HybridModel, x: np.ndarray) -> np.ndarray:
    lb = np.log(np.maximum(model.init.pi, 1e-300))
    lb = lb + np.array([mvn_logpdf(x, model.init.mu[k], model.init.omega_cov[k])
                        for k in range(model.K)])
    return np.exp(lb - logsumexp(lb))


def _belief_step(model: HybridModel, b: np.ndarray, x_prev, u_prev,
                 x_next) -> np.ndarray:
    # runtime update deliberately excludes the control likelihood: u is our
    # own choice, so only the switching link and the dynamics evidence inform
    # the regime
    psi = transition_matrix(model.transition, x_prev, u_prev)
    pred = psi @ b
    le = np.array([mvn_logpdf(x_next,
                              model.dynamics[k].A @ x_prev
                              + model.dynamics[k].B @ u_prev
                              + model.dynamics[k].c,
                              model.dynamics[k].lam_cov)
                   for k in range(model.K)])
    lb = np.log(np.maximum(pred, 1e-300)) + le
    norm = logsumexp(lb)
    if not np.isfinite(norm):
        raise FloatingPointError("belief update collapsed: impossible evidence")
    return np.exp(lb - norm)


def rollout(config: EnvConfig, model: HybridModel, T: int | None = None,
            mode: str = ACT_MEAN, rng: np.random.Generator | None = None,
            x0=None, traj_id: str = "rollout") -> RolloutResult:
    """Run the switching policy on the live simulator with belief tracking.

    The model acts in the configured observation space; controls are clipped
    to the actuator limit before stepping. When x0 is not given the episode
    starts near hanging, matching the swing-up task the demonstrations solve.
    """
    d_x, d_u = env_dims(config)
    if model.d_x != d_x or model.d_u != d_u:
        raise ValueError(f"model dims ({model.d_x}, {model.d_u}) do not match "
                         f"environment observation dims ({d_x}, {d_u})")
    if T is None:
        T = config.horizon
    if T < 2:
        raise ValueError("T must be >= 2")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    state = np.asarray(x0, dtype=float) if x0 is not None else hanging_state(config, rng)

    x = observe(config, state)
    b = _initial_belief(model, x)
    past = [np.zeros(d_u)] * model.lag
    xs = np.empty((T, d_x))
    us = np.empty((T, d_u))
    beliefs = np.empty((T, model.K))
    regimes = np.empty(T, dtype=int)

    for t in range(T):
        xs[t], beliefs[t] = x, b
        u_raw, k = act(model, b, x, past, mode=mode, rng=rng)
        u = clip_control(config, u_raw)
        us[t], regimes[t] = u, k
        if t + 1 == T:
            break
        state = step_env(config, state, u)
        if not np.all(np.isfinite(state)):
            raise FloatingPointError(f"non-finite state at step {t + 1}")
        x_next = observe(config, state)
        b = _belief_step(model, b, x, u, x_next)
        x = x_next
        if model.lag > 0:
            past = past[1:] + [u.copy()]

    traj = Trajectory(xs=xs, us=us, dt=config.dt, id=traj_id)
    criterion = dict(final_fraction=SUCCESS_FINAL_FRACTION,
                     angle_tol=SUCCESS_ANGLE_TOL, speed_tol=SUCCESS_SPEED_TOL)
    if config.env == ENV_CARTPOLE:
        criterion["cart_limit"] = SUCCESS_CART_LIMIT
    return RolloutResult(trajectory=traj, beliefs=beliefs, regimes=regimes,
                         success=success_criterion(traj, config),
                         criterion=criterion)


def save_rollout(result: RolloutResult, traj_path, belief_path) -> None:
    """Trajectory in the dataset record format plus a parallel belief/regime
    table (t, b_1..b_K, regime; t is 1-based)."""
    save_dataset(traj_path, [result.trajectory])
    K = result.beliefs.shape[1]
    lines = ["t," + ",".join(f"b_{k + 1}" for k in range(K)) + ",regime"]
    for t in range(len(result.beliefs)):
        row = ",".join(repr(float(v)) for v in result.beliefs[t])
        lines.append(f"{t + 1},{row},{result.regimes[t]}")
    with open(belief_path, "w") as f:
        f.write("\n".join(lines) + "\n")
