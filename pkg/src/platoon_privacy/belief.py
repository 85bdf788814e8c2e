"""Particle representation of the joint belief over (theta, HDV state).

The belief is a weighted particle set; theta values are immutable per
particle and drawn from a finite grid, while the (s, v) components evolve
through the HDV dynamics. Sequential importance resampling (systematic
scheme) is triggered when the effective sample size drops below a
threshold. A small exact discrete-Bayes recursion is included as the
validation oracle for the particle recursion.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import ScenarioParams, desired_velocity

__all__ = [
    "ParticleBelief",
    "DiscreteBelief",
    "DegenerateEvidenceError",
    "init_belief",
    "propagate",
    "reweight",
    "effective_sample_size",
    "maybe_resample",
    "theta_marginal",
    "exact_belief_update",
    "save_belief",
    "load_belief",
]


class DegenerateEvidenceError(ValueError):
    """Raised when every particle is assigned zero likelihood."""


@dataclass
class ParticleBelief:
    """Weighted particles over (theta_m, theta_n, s, v)."""

    theta_m: np.ndarray
    theta_n: np.ndarray
    s: np.ndarray
    v: np.ndarray
    weights: np.ndarray
    n_eff_threshold: float
    rough_s: float = 0.0   # optional post-resample jitter, off by default
    rough_v: float = 0.0
    degenerate_resets: int = 0

    def __post_init__(self):
        n = len(self.weights)
        if not (len(self.theta_m) == len(self.theta_n) == len(self.s) == len(self.v) == n):
            raise ValueError("particle arrays must have equal length")

    def __len__(self) -> int:
        return len(self.weights)

    def features(self) -> np.ndarray:
        """Particle feature matrix h with columns (m, n, s, v)."""
        return np.column_stack([self.theta_m, self.theta_n, self.s, self.v])

    def copy(self) -> "ParticleBelief":
        return replace(
            self,
            theta_m=self.theta_m.copy(),
            theta_n=self.theta_n.copy(),
            s=self.s.copy(),
            v=self.v.copy(),
            weights=self.weights.copy(),
        )


def init_belief(
    theta_grid,
    state_grid,
    count_per_cell: int = 1,
    n_eff_fraction: float = 1.0 / 3.0,
) -> ParticleBelief:
    """Uniform-weight belief covering theta_grid x state_grid.

    ``theta_grid`` is a sequence of (m, n) pairs; ``state_grid`` a sequence
    of (s, v) pairs. The resample threshold defaults to N/3.
    """
    theta_grid = list(theta_grid)
    state_grid = list(state_grid)
    if not theta_grid or not state_grid or count_per_cell < 1:
        raise ValueError("theta_grid and state_grid must be nonempty")
    cells = [
        (m, n, s, v) for (m, n) in theta_grid for (s, v) in state_grid for _ in range(count_per_cell)
    ]
    arr = np.asarray(cells, dtype=float)
    n = len(arr)
    return ParticleBelief(
        theta_m=np.ascontiguousarray(arr[:, 0]),
        theta_n=np.ascontiguousarray(arr[:, 1]),
        s=np.ascontiguousarray(arr[:, 2]),
        v=np.ascontiguousarray(arr[:, 3]),
        weights=np.full(n, 1.0 / n),
        n_eff_threshold=n * n_eff_fraction,
    )


def state_lattice(eq, half_s: float = 4.0, half_v: float = 2.0, per_side: int = 9):
    """Uniform (s, v) lattice centered on the equilibrium point."""
    svals = np.linspace(eq.s_star - half_s, eq.s_star + half_s, per_side)
    vvals = np.linspace(eq.v_star - half_v, eq.v_star + half_v, per_side)
    return [(float(s), float(v)) for s in svals for v in vvals]


def propagate(
    belief: ParticleBelief,
    cav_velocity: float,
    scn: ScenarioParams,
    rng: np.random.Generator,
) -> ParticleBelief:
    """Advance every particle's (s, v) through the HDV dynamics.

    Each particle gets an independent disturbance draw (the proposal is the
    transition prior); weights and theta values are untouched.
    """
    thr, noise, dt = scn.thr, scn.noise, scn.dt
    n = len(belief)
    a = belief.theta_m * (desired_velocity(belief.s, thr) - belief.v) + belief.theta_n * (
        cav_velocity - belief.v
    )
    np.clip(a, thr.a_min, thr.a_max, out=a)
    if noise.sigma_ga_sq > 0:
        a = a + rng.normal(0.0, math.sqrt(noise.sigma_ga_sq), n)
    ds = cav_velocity - belief.v
    if noise.sigma_gs_sq > 0:
        ds = ds + rng.normal(0.0, math.sqrt(noise.sigma_gs_sq), n)
    new_s = np.maximum(belief.s + dt * ds, 0.0)
    new_v = np.clip(belief.v + dt * a, 0.0, thr.v_max)
    return replace(belief, s=new_s, v=new_v, weights=belief.weights.copy())


def reweight(belief: ParticleBelief, y_prev, kernel) -> ParticleBelief:
    """Multiply weights by the per-particle emission probability of ``y_prev``.

    ``kernel`` is either a callable ``kernel(belief, y_prev) -> (N,) array``
    or a precomputed (N,) likelihood array. If every likelihood is zero the
    weights reset to uniform and a diagnostic counter is bumped.
    """
    lik = kernel(belief, y_prev) if callable(kernel) else np.asarray(kernel, dtype=float)
    if lik.shape != belief.weights.shape:
        raise ValueError(f"likelihood shape {lik.shape} != weights shape {belief.weights.shape}")
    if np.any(lik < 0):
        raise ValueError("negative emission probability")
    w = belief.weights * lik
    total = w.sum()
    if total <= 0.0 or not np.isfinite(total):
        n = len(belief)
        return replace(belief, weights=np.full(n, 1.0 / n), degenerate_resets=belief.degenerate_resets + 1)
    return replace(belief, weights=w / total)


def effective_sample_size(belief: ParticleBelief) -> float:
    """1 / sum(w^2), in [1, N] for normalized weights."""
    return float(1.0 / np.sum(belief.weights**2))


def maybe_resample(belief: ParticleBelief, rng: np.random.Generator) -> ParticleBelief:
    """Systematic resampling when N_eff <= threshold, else pass-through.

    Draws N particles with replacement proportional to the weights via a
    single uniform offset over a stratified cumulative traversal, then
    resets all weights to 1/N.
    """
    n = len(belief)
    if effective_sample_size(belief) > belief.n_eff_threshold:
        return belief
    positions = (rng.random() + np.arange(n)) / n
    cumw = np.cumsum(belief.weights)
    cumw[-1] = 1.0
    idx = np.searchsorted(cumw, positions)
    new = replace(
        belief,
        theta_m=belief.theta_m[idx],
        theta_n=belief.theta_n[idx],
        s=belief.s[idx],
        v=belief.v[idx],
        weights=np.full(n, 1.0 / n),
    )
    if belief.rough_s > 0:
        new.s = np.maximum(new.s + rng.normal(0.0, belief.rough_s, n), 0.0)
    if belief.rough_v > 0:
        new.v = np.maximum(new.v + rng.normal(0.0, belief.rough_v, n), 0.0)
    return new


def theta_marginal(belief: ParticleBelief) -> dict[tuple[float, float], float]:
    """Weights summed per distinct (m, n) value; sums to 1."""
    pairs = np.column_stack([belief.theta_m, belief.theta_n])
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    sums = np.bincount(inv, weights=belief.weights, minlength=len(uniq))
    return {(float(m), float(n)): float(p) for (m, n), p in zip(uniq, sums)}


def marginal_of(belief: ParticleBelief, theta) -> float:
    """Posterior mass of one (m, n) pair."""
    mask = (belief.theta_m == theta[0]) & (belief.theta_n == theta[1])
    return float(belief.weights[mask].sum())


# ---------------------------------------------------------------------------
# Exact discrete oracle


@dataclass
class DiscreteBelief:
    """Exact belief over a finite (theta, state) grid.

    ``probs[k, j]`` is the mass on theta index k and state index j.
    """

    probs: np.ndarray

    def __post_init__(self):
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1")

    def theta_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=1)


def exact_belief_update(
    belief: DiscreteBelief,
    y: int,
    kernel: np.ndarray,
    transition: np.ndarray,
) -> DiscreteBelief:
    """One exact Bayes step on the discrete grid.

    ``kernel[k, j, y]`` is the emission probability of observation ``y``
    from (theta_k, state_j); ``transition[k, j, j']`` the state transition
    under theta_k. New mass on (k, j') is
    sum_j transition[k, j, j'] * kernel[k, j, y] * probs[k, j], normalized.
    """
    kernel = np.asarray(kernel, dtype=float)
    transition = np.asarray(transition, dtype=float)
    weighted = belief.probs * kernel[:, :, y]
    new = np.einsum("kj,kjl->kl", weighted, transition)
    total = new.sum()
    if total <= 0:
        raise DegenerateEvidenceError("all posterior mass vanished")
    return DiscreteBelief(new / total)


# ---------------------------------------------------------------------------
# Columnar trace format

_BELIEF_HEADER = "theta_m theta_n s v weight"


def save_belief(belief: ParticleBelief, path_or_buf) -> None:
    """Write one row per particle: theta_m theta_n s v weight."""
    buf = io.StringIO()
    buf.write(_BELIEF_HEADER + "\n")
    for m, n, s, v, w in zip(belief.theta_m, belief.theta_n, belief.s, belief.v, belief.weights):
        buf.write(f"{m:.17g} {n:.17g} {s:.17g} {v:.17g} {w:.17g}\n")
    text = buf.getvalue()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)


def load_belief(path_or_buf, n_eff_fraction: float = 1.0 / 3.0) -> ParticleBelief:
    if hasattr(path_or_buf, "read"):
        lines = path_or_buf.read().splitlines()
    else:
        with open(path_or_buf) as fh:
            lines = fh.read().splitlines()
    if not lines or lines[0].strip() != _BELIEF_HEADER:
        raise ValueError("not a belief trace: missing header")
    rows = np.array([[float(x) for x in ln.split()] for ln in lines[1:] if ln.strip()])
    n = len(rows)
    return ParticleBelief(
        theta_m=rows[:, 0],
        theta_n=rows[:, 1],
        s=rows[:, 2],
        v=rows[:, 3],
        weights=rows[:, 4],
        n_eff_threshold=n * n_eff_fraction,
    )
