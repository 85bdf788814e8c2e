"""Online advantage actor-critic training of the data-distortion policy.

Each step pays a cost combining (i) the one-step mutual information between
the sensitive parameter pair and the emitted datum under the public mean
kernel, (ii) the HDV fuel rate, and (iii) a Lagrangian distortion penalty
against a per-step budget. The TD error of the negated cost drives the
actor (policy-gradient on the Dirichlet log-density), the critic (squared
TD), and the MGF encoder (sum of both gradients at the respective learning
rates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .belief import (
    ParticleBelief,
    init_belief,
    marginal_of,
    maybe_resample,
    propagate,
    reweight,
    state_lattice,
)
from .dynamics import (
    PlatoonState,
    ScenarioParams,
    THETA_GRID,
    ThetaParams,
    cav_control,
    distortion,
    fuel_rate,
    platoon_step,
)
from .policy import (
    DirichletAction,
    DistortionGrid,
    MgfFeatures,
    PolicyParams,
    a2c_gradients,
    actor_forward,
    critic_forward,
    emit_distorted,
    mgf_features,
    particle_kernels,
    sample_kernel_row,
)

__all__ = [
    "StepCost",
    "TrainConfig",
    "Transition",
    "mutual_info_step",
    "step_cost",
    "td_error",
    "a2c_update",
    "run_training_episode",
    "train",
]


@dataclass(frozen=True)
class StepCost:
    mi: float
    control: float
    distortion_penalty: float
    total: float


@dataclass(frozen=True)
class TrainConfig:
    rho: float = 1.0
    lagrange: float = 1.0
    d_hat_total: float = 800.0
    horizon: int = 200
    episodes: int = 10_000
    discount: float = 0.99
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    grad_clip: float = 5.0
    seed: int = 0
    state_grid_per_side: int = 9
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    @property
    def d_hat_step(self) -> float:
        return self.d_hat_total / self.horizon


@dataclass
class Transition:
    features: MgfFeatures
    theta_true: tuple[float, float]
    x_true: tuple[float, float]  # (s, v)
    action: DirichletAction
    cost: StepCost
    next_features: MgfFeatures
    terminal: bool


def mutual_info_step(belief: ParticleBelief, kernels: np.ndarray, group_keys: np.ndarray | None = None) -> float:
    """One-step mutual information I(theta; Y) in nats under per-particle kernels.

    With p(theta) the belief's theta marginal and p(y | theta) the
    weight-averaged kernel row of each theta group, returns
    sum_theta sum_y p(theta, y) ln(p(y|theta) / p(y)) with 0 ln 0 = 0,
    floored at zero against roundoff. ``group_keys`` may carry the sorted
    distinct theta keys to skip recomputing them every step.
    """
    kernels = np.asarray(kernels, dtype=float)
    w = belief.weights
    # group particles by theta pair via a scalar key (distinct for any
    # non-pathological grid; 8191*(m-m') == n'-n exactly never holds there)
    key = belief.theta_m * 8191.0 + belief.theta_n
    uniq = np.unique(key) if group_keys is None else group_keys
    inv = np.searchsorted(uniq, key)
    n_g = len(uniq)
    onehot = np.zeros((n_g, len(w)))
    onehot[inv, np.arange(len(w))] = w
    joint = onehot @ kernels            # (n_g, n_cells): p(theta, y)
    p_theta = joint.sum(axis=1)
    p_y = joint.sum(axis=0)
    denom = p_theta[:, None] * p_y[None, :]
    ratio = np.divide(joint, denom, out=np.ones_like(joint), where=joint > 0)
    mi = float(np.sum(joint * np.log(ratio, out=np.zeros_like(ratio), where=joint > 0)))
    return max(mi, 0.0)


def step_cost(mi: float, fuel: float, dist: float, cfg: TrainConfig) -> StepCost:
    penalty = cfg.lagrange * (dist - cfg.d_hat_step)
    return StepCost(
        mi=mi,
        control=fuel,
        distortion_penalty=penalty,
        total=cfg.rho * mi + fuel + penalty,
    )


def td_error(cost: StepCost, value: float, next_value: float, discount: float, terminal: bool = False) -> float:
    """delta = reward + gamma * V(next) - V(current) with reward = -cost."""
    bootstrap = 0.0 if terminal else discount * next_value
    return -cost.total + bootstrap - value


def _clip_scale(grads: dict[str, np.ndarray], max_norm: float) -> float | None:
    """Scale factor implementing a global-norm clip; None if non-finite."""
    sq = 0.0
    for g in grads.values():
        flat = g.ravel()
        sq += float(np.dot(flat, flat))
    if not math.isfinite(sq):
        return None
    total = math.sqrt(sq)
    if total > max_norm > 0:
        return max_norm / total
    return 1.0


def a2c_update(
    transition: Transition,
    params: PolicyParams,
    cfg: TrainConfig,
    actor_cache: dict | None = None,
) -> tuple[PolicyParams, dict]:
    """One online update from a single transition; mutates and returns params.

    The bootstrap target is treated as a constant (no gradient through the
    next-state value). Non-finite gradients skip the step and are counted.
    ``actor_cache`` may carry the forward intermediates of the action's
    actor pass to avoid recomputing it.
    """
    from .policy import actor_backward, actor_loss_grad_alpha, critic_backward

    cache_c: dict = {}
    value = critic_forward(transition.features, params, cache=cache_c)
    next_value = critic_forward(transition.next_features, params)
    td = td_error(transition.cost, value, next_value, cfg.discount, transition.terminal)

    if actor_cache is None:
        actor_cache = {}
        actor_forward(transition.features, transition.theta_true, transition.x_true, params, cache=actor_cache)
    actor_grads = actor_backward(actor_cache, actor_loss_grad_alpha(transition.action, td), params)
    critic_grads = critic_backward(cache_c, -2.0 * td, params)

    scale_a = _clip_scale(actor_grads, cfg.grad_clip)
    scale_c = _clip_scale(critic_grads, cfg.grad_clip)
    skipped = scale_a is None or scale_c is None
    diag = {"td": td, "skipped": skipped}
    if skipped:
        return params, diag
    params.apply_update(actor_grads, cfg.lr_actor * scale_a)
    params.apply_update(critic_grads, cfg.lr_critic * scale_c)
    return params, diag


def draw_initial_state(scn: ScenarioParams, rng: np.random.Generator, half_s=4.0, half_v=2.0) -> PlatoonState:
    """Platoon at equilibrium except the HDV, drawn uniformly from the
    same box the particle prior covers."""
    state = PlatoonState.at_equilibrium(scn.eq)
    state.s[2] = scn.eq.s_star + rng.uniform(-half_s, half_s)
    state.v[2] = scn.eq.v_star + rng.uniform(-half_v, half_v)
    return state


def run_training_episode(
    cfg: TrainConfig,
    params: PolicyParams,
    theta_true: ThetaParams,
    rng: np.random.Generator,
    scn: ScenarioParams | None = None,
    grid: DistortionGrid | None = None,
    learn: bool = True,
) -> tuple[float, PolicyParams, dict]:
    """Roll one episode, updating the networks online after every step.

    Returns (summed reward, params, diagnostics with mi/fuel/distortion sums
    and the resample count).
    """
    scn = scn or ScenarioParams()
    grid = grid or DistortionGrid.centered(scn.eq)
    belief = init_belief(THETA_GRID, state_lattice(scn.eq, per_side=cfg.state_grid_per_side))
    state = draw_initial_state(scn, rng)

    total_reward = 0.0
    sums = {"mi": 0.0, "fuel": 0.0, "distortion": 0.0}
    resamples = 0
    skipped = 0

    feats = mgf_features(belief, params)
    theta = (theta_true.m, theta_true.n)
    group_keys = np.unique(belief.theta_m * 8191.0 + belief.theta_n)
    for t in range(cfg.horizon):
        x_true = (float(state.s[2]), float(state.v[2]))
        cache_a: dict = {}
        alpha = actor_forward(feats, theta, x_true, params, cache=cache_a)
        action = sample_kernel_row(alpha, rng)
        y = emit_distorted(action.sampled_simplex, grid, rng)

        kernels = particle_kernels(feats, belief, params)
        mi = mutual_info_step(belief, kernels, group_keys)
        dist = distortion(state.hdv, y)

        u = cav_control(state, scn.gains, scn.eq, y, scn.thr)
        cav_velocity = float(state.v[1])
        hdv_velocity = float(state.v[2])
        next_state, a3_model = platoon_step(state, theta_true, u, scn, rng)
        fuel = fuel_rate(hdv_velocity, a3_model)
        cost = step_cost(mi, fuel, dist, cfg)

        cell = grid.state_to_cell(*y)
        belief = reweight(belief, y, kernels[:, cell])
        belief = propagate(belief, cav_velocity, scn, rng)
        n_before = belief
        belief = maybe_resample(belief, rng)
        if belief is not n_before:
            resamples += 1

        next_feats = mgf_features(belief, params)
        if learn:
            transition = Transition(
                features=feats,
                theta_true=theta,
                x_true=x_true,
                action=action,
                cost=cost,
                next_features=next_feats,
                terminal=(t == cfg.horizon - 1),
            )
            params, diag = a2c_update(transition, params, cfg, actor_cache=cache_a)
            if diag["skipped"]:
                skipped += 1
            # params changed; same belief, so the standardized features carry over
            feats = mgf_features(belief, params, h_std=next_feats.h_std)
        else:
            feats = next_feats

        total_reward += -cost.total
        sums["mi"] += mi
        sums["fuel"] += fuel
        sums["distortion"] += dist
        state = next_state

    diagnostics = {
        "mi_sum": sums["mi"],
        "fuel_sum": sums["fuel"],
        "distortion_sum": sums["distortion"],
        "resamples": resamples,
        "skipped_updates": skipped,
        "p_theta_true_final": marginal_of(belief, theta),
    }
    return total_reward, params, diagnostics


def train(
    cfg: TrainConfig,
    scn: ScenarioParams | None = None,
    grid: DistortionGrid | None = None,
    params: PolicyParams | None = None,
    on_episode=None,
) -> tuple[PolicyParams, list[dict]]:
    """Iterate training episodes with theta* drawn uniformly from the grid.

    Returns the trained parameters and one reward-curve row per episode
    (episode, reward, mi_sum, fuel_sum, distortion_sum). ``on_episode`` is
    an optional callback (episode_index, params, row) used for periodic
    checkpointing.
    """
    scn = scn or ScenarioParams()
    grid = grid or DistortionGrid.centered(scn.eq)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = PolicyParams.init(rng, scn.eq)
    curve: list[dict] = []
    for episode in range(cfg.episodes):
        theta = ThetaParams(*THETA_GRID[int(rng.integers(len(THETA_GRID)))])
        reward, params, diag = run_training_episode(cfg, params, theta, rng, scn, grid)
        row = {
            "episode": episode,
            "reward": reward,
            "mi_sum": diag["mi_sum"],
            "fuel_sum": diag["fuel_sum"],
            "distortion_sum": diag["distortion_sum"],
        }
        curve.append(row)
        if on_episode is not None:
            on_episode(episode, params, row)
    return params, curve
