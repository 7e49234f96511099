"""Shared builders for randomized test instances."""
import numpy as np

from rarhmm.features import controller_feature_dim
from rarhmm.model import (CLOSED_LOOP, OPEN_LOOP, Dataset, HybridModel,
                          InitialModel, RegimeController, RegimeDynamics,
                          Trajectory, sample_trajectory)
from rarhmm.transition import make_transition


def random_spd(rng, d, scale=1.0):
    m = rng.standard_normal((d, d))
    return scale * (m @ m.T / d + np.eye(d))


def random_model(K=2, d_x=2, d_u=1, mode=OPEN_LOOP, kind="linear", seed=0,
                 lag=0, poly_degree=1, degree=2, hidden_units=4, per_prev=False,
                 noise_scale=0.05):
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.full(K, 5.0))
    init = InitialModel(
        pi=pi,
        mu=rng.normal(size=(K, d_x)),
        omega_cov=np.stack([random_spd(rng, d_x, 0.3) for _ in range(K)]),
    )
    dynamics = []
    for _ in range(K):
        a = rng.standard_normal((d_x, d_x))
        a *= 0.85 / max(np.abs(np.linalg.eigvals(a)).max(), 1e-6)
        dynamics.append(RegimeDynamics(
            A=a, B=0.3 * rng.standard_normal((d_x, d_u)),
            c=0.2 * rng.standard_normal(d_x),
            lam_cov=random_spd(rng, d_x, noise_scale ** 2)))
    controllers = None
    if mode == CLOSED_LOOP:
        d_phi = controller_feature_dim(d_x, d_u, lag, poly_degree)
        controllers = tuple(RegimeController(
            gain=0.3 * rng.standard_normal((d_u, d_phi)),
            offset=0.1 * rng.standard_normal(d_u),
            sigma_cov=random_spd(rng, d_u, noise_scale ** 2),
            lag=lag, poly_degree=poly_degree) for _ in range(K))
    tm = make_transition(kind, K, d_x, d_u, degree=degree,
                         hidden_units=hidden_units, per_prev=per_prev,
                         bias=0.5 * rng.standard_normal((K, K)),
                         rng=rng, init_scale=0.5)
    return HybridModel(K=K, d_x=d_x, d_u=d_u, mode=mode, init=init,
                       dynamics=tuple(dynamics), transition=tm,
                       controllers=controllers)


def random_trajectory(model, T=8, seed=0, dt=0.1):
    rng = np.random.default_rng(seed)
    exo = None
    if model.mode == OPEN_LOOP:
        exo = 0.5 * rng.standard_normal((T, model.d_u))
    traj, zs = sample_trajectory(model, T, rng, exogenous_us=exo, dt=dt,
                                 traj_id=f"t{seed}")
    return traj, zs


def random_dataset(model, n=3, T=8, seed=0, dt=0.1):
    trajs = [random_trajectory(model, T=T, seed=seed + i, dt=dt)[0] for i in range(n)]
    return Dataset.from_trajectories(trajs)


def random_xis(rng, T, K):
    """Random valid pairwise marginals: each (K, K) slice sums to 1."""
    xi = rng.dirichlet(np.ones(K * K), size=T - 1).reshape(T - 1, K, K)
    return xi
