"""Inference attacks against the shared HDV data stream.

Two attackers from the evaluation protocol:

* a recursive-least-squares estimator of the FVD pair (m, n) with
  exponential forgetting, regressing finite-difference accelerations on the
  FVD error terms reconstructed from the shared stream;
* a Bayesian particle attacker that either treats received data as noisy
  state measurements (true-data stream) or reweights by the public policy
  kernel (distorted stream).

Privacy metrics: estimation RMSE sigma_e and its monotone map to the
success rate SR = exp(-sigma_e).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .belief import ParticleBelief, maybe_resample, propagate, reweight
from .dynamics import FvdThresholds, ScenarioParams, desired_velocity
from .policy import DistortionGrid, PolicyParams, mgf_features, particle_kernels

__all__ = [
    "RlsState",
    "AttackObservation",
    "rls_regressor",
    "rls_update",
    "bayes_attack_real_step",
    "bayes_attack_filtered_step",
    "estimation_rmse",
    "success_rate",
]

OBS_SIGMA_V = 0.3
OBS_SIGMA_S = 0.3


@dataclass
class RlsState:
    """Recursive least squares with exponential forgetting.

    P starts at (1/delta) * I; theta_hat starts at zero.
    """

    theta_hat: np.ndarray = field(default_factory=lambda: np.zeros(2))
    P: np.ndarray = None
    forgetting: float = 0.99
    delta: float = 1.0

    def __post_init__(self):
        if self.P is None:
            self.P = np.eye(2) / self.delta


@dataclass(frozen=True)
class AttackObservation:
    """One step of the attacker's view: shared HDV data plus the CAV speed."""

    v_hdv: float
    s_hdv: float
    v_cav: float
    dt: float = 0.2

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")


def rls_regressor(
    prev: AttackObservation,
    curr: AttackObservation,
    thr: FvdThresholds = FvdThresholds(),
) -> tuple[np.ndarray, float]:
    """Regression pair for the linear-in-theta FVD law.

    x = (V(s) - v, v_cav - v) at the previous step; y is the
    finite-difference acceleration of the shared velocity.
    """
    x = np.array(
        [desired_velocity(prev.s_hdv, thr) - prev.v_hdv, prev.v_cav - prev.v_hdv]
    )
    y = (curr.v_hdv - prev.v_hdv) / prev.dt
    return x, y


def rls_update(state: RlsState, x: np.ndarray, y: float) -> RlsState:
    """One gain-vector update; P is re-symmetrized so roundoff cannot
    accumulate into asymmetry."""
    P, lam = state.P, state.forgetting
    Px = P @ x
    k = Px / (lam + x @ Px)
    theta = state.theta_hat + k * (y - x @ state.theta_hat)
    P = (P - np.outer(k, Px)) / lam
    P = 0.5 * (P + P.T)
    return RlsState(theta_hat=theta, P=P, forgetting=lam, delta=state.delta)


def observation_likelihood(
    belief: ParticleBelief,
    v_obs: float,
    s_obs: float,
    sigma_v: float = OBS_SIGMA_V,
    sigma_s: float = OBS_SIGMA_S,
) -> np.ndarray:
    """exp(-2 ((dv/sigma_v)^2 + (ds/sigma_s)^2)) per particle."""
    dv = (belief.v - v_obs) / sigma_v
    ds = (belief.s - s_obs) / sigma_s
    return np.exp(-2.0 * (dv * dv + ds * ds))


def bayes_attack_real_step(
    belief: ParticleBelief,
    obs: tuple[float, float],
    sigmas: tuple[float, float] = (OBS_SIGMA_V, OBS_SIGMA_S),
) -> ParticleBelief:
    """Reweight by the Gaussian observation likelihood of true data (v, s)."""
    lik = observation_likelihood(belief, obs[0], obs[1], sigmas[0], sigmas[1])
    return reweight(belief, obs, lik)


def bayes_attack_filtered_step(
    belief: ParticleBelief,
    y: tuple[float, float],
    params: PolicyParams,
    grid: DistortionGrid,
) -> ParticleBelief:
    """Reweight by the public mean-kernel probability of the shared cell.

    The particle-independent factor of the full weight-update theorem is
    dropped (it cancels in the normalization), leaving the per-particle
    emission probability of the observed grid cell.
    """
    feats = mgf_features(belief, params)
    kernels = particle_kernels(feats, belief, params)
    cell = grid.state_to_cell(*y)
    return reweight(belief, y, kernels[:, cell])


def estimation_rmse(theta_hat: np.ndarray, theta_true) -> float:
    """sigma_e = sqrt(((m_hat - m)^2 + (n_hat - n)^2) / 2)."""
    m, n = (theta_true.m, theta_true.n) if hasattr(theta_true, "m") else theta_true
    return math.sqrt(((theta_hat[0] - m) ** 2 + (theta_hat[1] - n) ** 2) / 2.0)


def success_rate(sigma_e: float) -> float:
    """SR = exp(-sigma_e), mapping [0, inf) into (0, 1]."""
    if sigma_e < 0:
        raise ValueError("sigma_e must be nonnegative")
    return math.exp(-sigma_e)


def run_rls_attack(
    observations: list[AttackObservation],
    thr: FvdThresholds = FvdThresholds(),
    forgetting: float = 0.99,
    delta: float = 1.0,
) -> tuple[RlsState, list[np.ndarray]]:
    """Feed a whole observation stream through RLS; returns the final state
    and the per-step estimates."""
    state = RlsState(forgetting=forgetting, delta=delta)
    estimates = []
    for prev, curr in zip(observations, observations[1:]):
        x, y = rls_regressor(prev, curr, thr)
        state = rls_update(state, x, y)
        estimates.append(state.theta_hat.copy())
    return state, estimates


def run_bayes_attack(
    belief: ParticleBelief,
    observations: list[AttackObservation],
    scn: ScenarioParams,
    rng: np.random.Generator,
    params: PolicyParams | None = None,
    grid: DistortionGrid | None = None,
    theta_track=None,
) -> tuple[ParticleBelief, list[float]]:
    """Run the Bayesian attacker over a stream.

    With ``params``/``grid`` given, the shared data is treated as policy
    output (distorted stream); otherwise as noisy truth. Per step:
    reweight, record the tracked theta's marginal, propagate with the
    public CAV speed, resample on demand. Returns the final belief and the
    marginal trace.
    """
    from .belief import marginal_of

    trace = []
    for obs in observations:
        y = (obs.v_hdv, obs.s_hdv)
        if params is None:
            belief = bayes_attack_real_step(belief, y)
        else:
            belief = bayes_attack_filtered_step(belief, y, params, grid)
        if theta_track is not None:
            trace.append(marginal_of(belief, theta_track))
        belief = propagate(belief, obs.v_cav, scn, rng)
        belief = maybe_resample(belief, rng)
    return belief, trace
