"""Three-vehicle mixed-autonomy platoon dynamics.

Vehicle 1 is the lead (its speed wanders around the equilibrium speed as a
mean-reverting process), vehicle 2 is the connected automated vehicle (CAV)
driven by a linear feedback controller, and vehicle 3 is the human-driven
vehicle (HDV) governed by the Full Velocity Difference (FVD) car-following
law with sensitivity parameters (m, n).

The CAV controller consumes the HDV's *shared* (velocity, spacing) pair,
which is how distorted data enters the loop. All operations are pure given
an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ThetaParams",
    "PlatoonState",
    "ControllerGains",
    "EquilibriumPoint",
    "FvdThresholds",
    "NoiseSpec",
    "ScenarioParams",
    "THETA_GRID",
    "desired_velocity",
    "fvd_accel",
    "cav_control",
    "platoon_step",
    "fuel_rate",
    "distortion",
]

# The four (m, n) pairs used throughout the experiments.
THETA_GRID = ((0.4, 0.5), (0.7, 0.8), (1.0, 1.1), (1.3, 1.4))


@dataclass(frozen=True)
class ThetaParams:
    """FVD sensitivity pair: m to spacing error, n to velocity error (1/s)."""

    m: float
    n: float

    def __post_init__(self):
        if self.m <= 0 or self.n <= 0:
            raise ValueError(f"theta must be positive, got ({self.m}, {self.n})")

    def as_array(self) -> np.ndarray:
        return np.array([self.m, self.n])


@dataclass
class PlatoonState:
    """Spacings and velocities of the three vehicles at step ``t``.

    ``s[0]`` is the lead vehicle's spacing to a virtual reference point that
    moves at the equilibrium speed (there is no vehicle 0); ``s[1]``/``s[2]``
    are the front gaps of the CAV and the HDV.
    """

    s: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def at_equilibrium(cls, eq: "EquilibriumPoint") -> "PlatoonState":
        return cls(s=np.full(3, eq.s_star), v=np.full(3, eq.v_star), t=0)

    def copy(self) -> "PlatoonState":
        return PlatoonState(self.s.copy(), self.v.copy(), self.t)

    @property
    def hdv(self) -> tuple[float, float]:
        """The HDV's (velocity, spacing) pair, the datum being shared."""
        return float(self.v[2]), float(self.s[2])


@dataclass(frozen=True)
class ControllerGains:
    """Feedback gains (mu on spacing error, eta on velocity error) per vehicle.

    Defaults are the published table values. Note: under the controller
    formula these published signs for the CAV's own-state pair (mu[1],
    eta[1]) = (-0.5, 0.5) destabilize the closed loop; the experiment
    scenario uses (0.5, -0.5) instead (see ``ScenarioParams``).
    """

    mu: tuple[float, float, float] = (0.1, -0.5, -0.2)
    eta: tuple[float, float, float] = (0.0, 0.5, 0.2)


@dataclass(frozen=True)
class EquilibriumPoint:
    s_star: float = 20.0
    v_star: float = 15.0


@dataclass(frozen=True)
class FvdThresholds:
    """Stop/free-flow spacing thresholds and acceleration/velocity limits."""

    s_st: float = 5.0
    s_go: float = 35.0
    v_max: float = 30.0
    a_min: float = -5.0
    a_max: float = 5.0

    def __post_init__(self):
        if not self.s_st < self.s_go:
            raise ValueError(f"s_st ({self.s_st}) must be < s_go ({self.s_go})")
        if not self.a_min < 0 < self.a_max:
            raise ValueError("acceleration bounds must straddle zero")


@dataclass(frozen=True)
class NoiseSpec:
    """Disturbance variances.

    ``sigma_lead_sq`` is the stationary variance of the lead vehicle's speed
    tracking error; ``sigma_ga_sq``/``sigma_gs_sq`` are the HDV acceleration
    and spacing disturbance variances.
    """

    sigma_lead_sq: float = 0.1
    sigma_ga_sq: float = 0.1
    sigma_gs_sq: float = 0.5

    def __post_init__(self):
        if min(self.sigma_lead_sq, self.sigma_ga_sq, self.sigma_gs_sq) < 0:
            raise ValueError("variances must be nonnegative")

    @classmethod
    def silent(cls) -> "NoiseSpec":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ScenarioParams:
    """Everything the simulator needs, bundled.

    The default gains flip the CAV's own-state pair to (0.5, -0.5): the
    published (-0.5, 0.5) gives the linearized loop an eigenvalue at +1.0
    (exponential collapse within seconds), while the flipped pair is the
    spring-damper convention of the cited string-stable controller.

    The lead speed follows a discrete Ornstein-Uhlenbeck recursion
    ``v1' = v1 + dt*(k*(v* - v1) + w)`` whose acceleration-disturbance
    variance is derived from ``sigma_lead_sq`` so that the stationary
    tracking-error variance equals ``sigma_lead_sq`` exactly. With the
    defaults (k=1, dt=0.2) that disturbance variance is 0.9.
    """

    dt: float = 0.2
    eq: EquilibriumPoint = field(default_factory=EquilibriumPoint)
    thr: FvdThresholds = field(default_factory=FvdThresholds)
    gains: ControllerGains = field(
        default_factory=lambda: ControllerGains(mu=(0.1, 0.5, -0.2), eta=(0.0, -0.5, 0.2))
    )
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    lead_reversion_rate: float = 1.0
    lead_accel_bias: float = 0.0

    def __post_init__(self):
        if self.dt < 0:
            raise ValueError("dt must be nonnegative")
        if not 0 < self.lead_reversion_rate * self.dt <= 1 and self.dt > 0:
            raise ValueError("lead_reversion_rate*dt must lie in (0, 1]")

    @property
    def lead_w_var(self) -> float:
        """Lead acceleration-disturbance variance for the OU recursion."""
        if self.dt == 0:
            return 0.0
        k = self.lead_reversion_rate
        return self.noise.sigma_lead_sq * (2.0 * k - k * k * self.dt) / self.dt


def desired_velocity(s, thr: FvdThresholds = FvdThresholds()):
    """Spacing-dependent desired velocity: 0 below s_st, v_max above s_go,
    raised-cosine in between. Accepts scalars or arrays."""
    if np.ndim(s) == 0:
        s = float(s)
        if s <= thr.s_st:
            return 0.0
        if s >= thr.s_go:
            return thr.v_max
        return 0.5 * thr.v_max * (1.0 - math.cos(math.pi * (s - thr.s_st) / (thr.s_go - thr.s_st)))
    s = np.asarray(s, dtype=float)
    mid = 0.5 * thr.v_max * (1.0 - np.cos(np.pi * (s - thr.s_st) / (thr.s_go - thr.s_st)))
    return np.where(s <= thr.s_st, 0.0, np.where(s >= thr.s_go, thr.v_max, mid))


def fvd_accel(theta: ThetaParams, s, v_self, v_lead, thr: FvdThresholds = FvdThresholds()):
    """FVD acceleration m*(V(s) - v_self) + n*(v_lead - v_self), clamped."""
    a = theta.m * (desired_velocity(s, thr) - v_self) + theta.n * (v_lead - v_self)
    out = np.clip(a, thr.a_min, thr.a_max)
    return float(out) if np.ndim(out) == 0 else out


def cav_control(
    state: PlatoonState,
    gains: ControllerGains,
    eq: EquilibriumPoint,
    shared_hdv: tuple[float, float],
    thr: FvdThresholds = FvdThresholds(),
) -> float:
    """Linear feedback u = sum_i mu_i*(s_i - s*) + eta_i*(v_i - v*), clamped.

    ``shared_hdv`` is the (velocity, spacing) pair the HDV shares, which
    substitutes for the true vehicle-3 state in the summation.
    """
    v_sh, s_sh = shared_hdv
    u = 0.0
    for i in range(2):
        u += gains.mu[i] * (state.s[i] - eq.s_star) + gains.eta[i] * (state.v[i] - eq.v_star)
    u += gains.mu[2] * (s_sh - eq.s_star) + gains.eta[2] * (v_sh - eq.v_star)
    return float(min(max(u, thr.a_min), thr.a_max))


def platoon_step(
    state: PlatoonState,
    theta: ThetaParams,
    u_cav: float,
    scn: ScenarioParams,
    rng: np.random.Generator,
) -> tuple[PlatoonState, float]:
    """One explicit-Euler step of the platoon.

    Returns the next state and the HDV's FVD-model acceleration (clamped,
    before the additive disturbance), which is the acceleration used for
    the fuel-based control cost.
    """
    dt = scn.dt
    s, v = state.s, state.v
    eq, thr, noise = scn.eq, scn.thr, scn.noise

    # scalar FVD law (3-element numpy ops would dominate the step cost)
    vd = desired_velocity(float(s[2]), thr)
    a3 = theta.m * (vd - v[2]) + theta.n * (v[1] - v[2])
    a3 = min(max(a3, thr.a_min), thr.a_max)
    g_a = rng.normal(0.0, math.sqrt(noise.sigma_ga_sq)) if noise.sigma_ga_sq > 0 else 0.0
    g_s = rng.normal(0.0, math.sqrt(noise.sigma_gs_sq)) if noise.sigma_gs_sq > 0 else 0.0
    w_var = scn.lead_w_var
    w = scn.lead_accel_bias + (rng.normal(0.0, math.sqrt(w_var)) if w_var > 0 else 0.0)

    vmax = thr.v_max
    new_s = np.array(
        [
            max(s[0] + dt * (eq.v_star - v[0]), 0.0),
            max(s[1] + dt * (v[0] - v[1]), 0.0),
            max(s[2] + dt * (v[1] - v[2] + g_s), 0.0),
        ]
    )
    new_v = np.array(
        [
            min(max(v[0] + dt * (scn.lead_reversion_rate * (eq.v_star - v[0]) + w), 0.0), vmax),
            min(max(v[1] + dt * u_cav, 0.0), vmax),
            min(max(v[2] + dt * (a3 + g_a), 0.0), vmax),
        ]
    )
    return PlatoonState(new_s, new_v, state.t + 1), a3


def fuel_rate(v: float, a: float) -> float:
    """Instantaneous fuel consumption (mL/s) of one vehicle.

    R = 0.333 + 0.00108 v^2 + 1.200 a; 0.444 when R <= 0, otherwise
    0.444 + 0.090 R v plus 0.054 a^2 v for positive accelerations.
    """
    r = 0.333 + 0.00108 * v * v + 1.2 * a
    if r <= 0:
        return 0.444
    f = 0.444 + 0.090 * r * v
    if a > 0:
        f += 0.054 * a * a * v
    return f


def distortion(true_state: tuple[float, float], shared: tuple[float, float]) -> float:
    """Euclidean distance between true and shared (velocity, spacing)."""
    return math.hypot(true_state[0] - shared[0], true_state[1] - shared[1])
