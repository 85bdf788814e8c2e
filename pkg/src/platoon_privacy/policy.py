"""Learnable data-distortion policy.

Three small fixed-topology networks operate on a particle belief:

* an MGF encoder that summarizes the belief permutation-invariantly as the
  weighted particle mean plus weighted exponential moments at learned
  location vectors, followed by one rectified dense layer;
* an actor that maps (encoded belief, theta, HDV state) to the 121
  concentration parameters of a Dirichlet distribution over the distortion
  grid (softplus output, floored);
* a scalar critic on the encoded belief.

Reverse-mode gradients for both losses are written out by hand; the
topology never changes, so no general autodiff is needed. Parameters
standardize their inputs with fixed scenario constants to keep the MGF
exponents bounded.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, expit, gammaln

from .belief import ParticleBelief
from .dynamics import EquilibriumPoint

__all__ = [
    "DistortionGrid",
    "FeatureScaler",
    "MgfFeatures",
    "PolicyParams",
    "DirichletAction",
    "mgf_features",
    "actor_forward",
    "particle_kernels",
    "sample_kernel_row",
    "mean_kernel_row",
    "dirichlet_log_density",
    "emit_distorted",
    "critic_forward",
    "a2c_gradients",
    "grad_check",
    "save_params",
    "load_params",
]

N_CELLS = 121
N_MGF = 10
HIDDEN = 64
ENC_DIM = 14  # 4 mean components + N_MGF moments
ACTOR_IN = ENC_DIM + 4
ALPHA_FLOOR = 1e-3


def softplus(x):
    # split form: np.log is SIMD-vectorized, np.logaddexp is not
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass(frozen=True)
class DistortionGrid:
    """11 x 11 grid of shareable (velocity, spacing) values.

    Cell indexing is velocity-major row-major: cell = i_v * 11 + i_s.
    """

    v_values: np.ndarray
    s_values: np.ndarray

    @classmethod
    def centered(cls, eq: EquilibriumPoint, half_v: float = 2.5, half_s: float = 5.0) -> "DistortionGrid":
        return cls(
            v_values=np.linspace(eq.v_star - half_v, eq.v_star + half_v, 11),
            s_values=np.linspace(eq.s_star - half_s, eq.s_star + half_s, 11),
        )

    def __post_init__(self):
        if len(self.v_values) * len(self.s_values) != N_CELLS:
            raise ValueError("grid must have 121 cells")

    def cell_to_state(self, cell: int) -> tuple[float, float]:
        n_s = len(self.s_values)
        return float(self.v_values[cell // n_s]), float(self.s_values[cell % n_s])

    def state_to_cell(self, v: float, s: float) -> int:
        """Nearest grid cell for an arbitrary (v, s) pair."""
        iv = int(np.argmin(np.abs(self.v_values - v)))
        i_s = int(np.argmin(np.abs(self.s_values - s)))
        return iv * len(self.s_values) + i_s

    def all_states(self) -> np.ndarray:
        """(121, 2) array of (v, s) per cell."""
        vv, ss = np.meshgrid(self.v_values, self.s_values, indexing="ij")
        return np.column_stack([vv.ravel(), ss.ravel()])


@dataclass(frozen=True)
class FeatureScaler:
    """Affine standardization of particle features (m, n, s, v)."""

    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def for_equilibrium(cls, eq: EquilibriumPoint) -> "FeatureScaler":
        return cls(
            center=np.array([1.0, 1.0, eq.s_star, eq.v_star]),
            scale=np.array([0.5, 0.5, 4.0, 2.0]),
        )

    def apply(self, h: np.ndarray) -> np.ndarray:
        return (h - self.center) / self.scale


@dataclass
class MgfFeatures:
    """Belief summary: weighted mean plus MGF moments of standardized particles.

    Carries the per-particle exponential terms so gradient passes can reach
    the learned locations without recomputing them.
    """

    mean: np.ndarray          # (4,)
    mgf: np.ndarray           # (N_MGF,)
    h_std: np.ndarray         # (N, 4) standardized particle features
    weights: np.ndarray       # (N,)
    exp_terms: np.ndarray     # (N, N_MGF) exp(h_std @ locations.T)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.mean, self.mgf])


class PolicyParams:
    """All learnable tensors, keyed by name.

    Groups: ``encoder`` (mgf_locations, enc_W, enc_b), ``actor`` (act_*),
    ``critic`` (cr_*). Dense weights start uniform scaled by fan-in, MGF
    locations start N(0, 0.5), and the critic output layer starts at zero.
    """

    ENCODER = ("mgf_locations", "enc_W", "enc_b")
    ACTOR = ("act_W1", "act_b1", "act_W2", "act_b2")
    CRITIC = ("cr_W1", "cr_b1", "cr_W2", "cr_b2")

    def __init__(self, tensors: dict[str, np.ndarray], scaler: FeatureScaler):
        self.tensors = tensors
        self.scaler = scaler
        self._version = 0
        self._f32: dict[str, tuple[int, np.ndarray]] = {}

    @classmethod
    def init(cls, rng: np.random.Generator, eq: EquilibriumPoint = EquilibriumPoint()) -> "PolicyParams":
        def dense(n_in, n_out):
            bound = 1.0 / np.sqrt(n_in)
            return rng.uniform(-bound, bound, (n_in, n_out))

        tensors = {
            "mgf_locations": rng.normal(0.0, 0.5, (N_MGF, 4)),
            "enc_W": dense(ENC_DIM, ENC_DIM),
            "enc_b": np.zeros(ENC_DIM),
            "act_W1": dense(ACTOR_IN, HIDDEN),
            "act_b1": np.zeros(HIDDEN),
            "act_W2": dense(HIDDEN, N_CELLS),
            "act_b2": np.zeros(N_CELLS),
            "cr_W1": dense(ENC_DIM, HIDDEN),
            "cr_b1": np.zeros(HIDDEN),
            "cr_W2": np.zeros((HIDDEN, 1)),
            "cr_b2": np.zeros(1),
        }
        return cls(tensors, FeatureScaler.for_equilibrium(eq))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.tensors.items()}, self.scaler)

    def apply_update(self, grads: dict[str, np.ndarray], lr: float) -> None:
        """Step tensors by -lr * grad. Consumes the gradient arrays."""
        for name, g in grads.items():
            np.multiply(g, lr, out=g)
            self.tensors[name] -= g
        self._version += 1

    def invalidate_cache(self) -> None:
        """Call after mutating ``tensors`` directly (bypassing apply_update)."""
        self._version += 1

    def f32(self, name: str) -> np.ndarray:
        """Float32 view of a tensor, cached until the next update."""
        entry = self._f32.get(name)
        if entry is None or entry[0] != self._version:
            arr = self.tensors[name].astype(np.float32)
            self._f32[name] = (self._version, arr)
            return arr
        return entry[1]

    def flat_names(self):
        return sorted(self.tensors)


class DirichletAction:
    """One sampled simplex row of the policy kernel.

    ``log_density`` (the Dirichlet log-pdf of the sample under alpha) is
    evaluated lazily; the training loop only needs ``log_simplex``.
    """

    __slots__ = ("alpha", "sampled_simplex", "log_simplex", "_log_density")

    def __init__(self, alpha, sampled_simplex, log_simplex):
        self.alpha = alpha
        self.sampled_simplex = sampled_simplex
        self.log_simplex = log_simplex
        self._log_density = None

    @property
    def log_density(self) -> float:
        if self._log_density is None:
            self._log_density = dirichlet_log_density(self.alpha, self.log_simplex)
        return self._log_density

    def __repr__(self):
        return f"DirichletAction(alpha_sum={self.alpha.sum():.3f}, log_density={self.log_density:.3f})"


# ---------------------------------------------------------------------------
# forward passes


def mgf_features(belief: ParticleBelief, params: PolicyParams, h_std: np.ndarray | None = None) -> MgfFeatures:
    if h_std is None:
        h_std = params.scaler.apply(belief.features())
    w = belief.weights
    exponents = h_std @ params["mgf_locations"].T  # (N, N_MGF)
    if np.max(np.abs(exponents)) > 500.0:
        raise FloatingPointError("MGF exponent overflow despite standardization")
    exp_terms = np.exp(exponents)
    return MgfFeatures(
        mean=w @ h_std,
        mgf=w @ exp_terms,
        h_std=h_std,
        weights=w,
        exp_terms=exp_terms,
    )


def _encode(features: MgfFeatures, params: PolicyParams):
    z_e = features.vector @ params["enc_W"] + params["enc_b"]
    return z_e, np.maximum(z_e, 0.0)


def actor_forward(features: MgfFeatures, theta, x, params: PolicyParams, cache: dict | None = None):
    """Concentrations of the Dirichlet policy row at one (theta, x) input.

    ``theta`` is an (m, n) pair and ``x`` an (s, v) pair; both are
    standardized with the shared scaler before entering the network.
    Pass a dict as ``cache`` to capture intermediates for the backward pass.
    """
    z_e, enc = _encode(features, params)
    p_std = params.scaler.apply(np.array([theta[0], theta[1], x[0], x[1]]))
    inp = np.concatenate([enc, p_std])
    z1 = inp @ params["act_W1"] + params["act_b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params["act_W2"] + params["act_b2"]
    alpha = softplus(z2) + ALPHA_FLOOR
    if not np.all(np.isfinite(alpha)):
        raise FloatingPointError("non-finite actor output")
    if cache is not None:
        cache.update(features=features, z_e=z_e, enc=enc, inp=inp, z1=z1, a1=a1, z2=z2, alpha=alpha)
    return alpha


def particle_kernels(features: MgfFeatures, belief: ParticleBelief, params: PolicyParams) -> np.ndarray:
    """Row-normalized mean kernels K_i(y) for every particle, shape (N, 121).

    This is the deterministic public kernel (Dirichlet mean alpha/sum alpha)
    evaluated in one batch across the particle set. The batch matmuls and
    softplus run in float32 (this is the training hot path); rows are
    normalized in float64 so they sum to 1 at double precision.
    """
    _, enc = _encode(features, params)
    p_std = features.h_std  # standardized (m, n, s, v) per particle
    w1 = params.f32("act_W1")
    base = (enc @ params["act_W1"][:ENC_DIM] + params["act_b1"]).astype(np.float32)
    z1 = p_std.astype(np.float32) @ w1[ENC_DIM:]
    z1 += base
    np.maximum(z1, np.float32(0.0), out=z1)
    z2 = z1 @ params.f32("act_W2")
    z2 += params.f32("act_b2")
    # fused in-place softplus: z2 <- max(z2,0) + log1p(exp(-|z2|))
    t = np.abs(z2)
    np.negative(t, out=t)
    np.exp(t, out=t)
    np.log1p(t, out=t)
    np.maximum(z2, np.float32(0.0), out=z2)
    z2 += t
    z2 += np.float32(ALPHA_FLOOR)
    sums = z2.sum(axis=1, dtype=np.float64)
    return z2 / sums[:, None]  # f32/f64 divide yields float64 rows


def mean_kernel_row(alpha: np.ndarray) -> np.ndarray:
    """Deterministic kernel row alpha / sum(alpha)."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("concentrations must be strictly positive")
    return alpha / alpha.sum()


def dirichlet_log_density(alpha: np.ndarray, log_p: np.ndarray) -> float:
    """Dirichlet log-pdf at the point whose componentwise logs are log_p."""
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum() + np.dot(alpha - 1.0, log_p))


def sample_kernel_row(alpha: np.ndarray, rng: np.random.Generator) -> DirichletAction:
    """Sample one simplex row from Dirichlet(alpha).

    Gamma draws are taken in log space (boost trick: G(a) = G(a+1) * U^{1/a})
    so the log-coordinates stay finite for concentrations near the floor;
    the simplex itself may then contain exact zeros after exponentiation,
    which is the correct limiting behavior.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("concentrations must be strictly positive")
    g = rng.standard_gamma(alpha + 1.0)
    u = rng.random(len(alpha))
    log_x = np.log(g) + np.log(u) / alpha
    m = log_x.max()
    log_norm = m + np.log(np.exp(log_x - m).sum())
    log_p = log_x - log_norm
    p = np.exp(log_p)
    p /= p.sum()
    return DirichletAction(alpha=alpha, sampled_simplex=p, log_simplex=log_p)


def emit_distorted(kernel_row: np.ndarray, grid: DistortionGrid, rng: np.random.Generator) -> tuple[float, float]:
    """Draw a grid cell from a simplex row and return its (velocity, spacing)."""
    cum = np.cumsum(kernel_row)
    cell = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return grid.cell_to_state(min(cell, N_CELLS - 1))


def critic_forward(features: MgfFeatures, params: PolicyParams, cache: dict | None = None) -> float:
    z_e, enc = _encode(features, params)
    z1 = enc @ params["cr_W1"] + params["cr_b1"]
    a1 = np.maximum(z1, 0.0)
    value = float((a1 @ params["cr_W2"])[0] + params["cr_b2"][0])
    if not np.isfinite(value):
        raise FloatingPointError("non-finite critic output")
    if cache is not None:
        cache.update(features=features, z_e=z_e, enc=enc, z1=z1, a1=a1, value=value)
    return value


# ---------------------------------------------------------------------------
# backward passes


def _encoder_backward(g_enc: np.ndarray, features: MgfFeatures, z_e: np.ndarray, params: PolicyParams):
    g_ze = g_enc * (z_e > 0)
    grads = {
        "enc_W": np.outer(features.vector, g_ze),
        "enc_b": g_ze,
    }
    g_feat = params["enc_W"] @ g_ze
    g_mgf = g_feat[4:]  # the mean block carries no parameters
    # d mgf_j / d location_j = sum_i w_i exp(loc_j . h_i) h_i
    weighted = features.weights[:, None] * features.exp_terms  # (N, N_MGF)
    grads["mgf_locations"] = (weighted * g_mgf).T @ features.h_std
    return grads


def actor_backward(cache: dict, g_alpha: np.ndarray, params: PolicyParams) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt actor and encoder tensors, given dL/dalpha."""
    g_z2 = g_alpha * expit(cache["z2"])
    g_a1 = params["act_W2"] @ g_z2
    g_z1 = g_a1 * (cache["z1"] > 0)
    g_inp = params["act_W1"] @ g_z1
    grads = {
        "act_W2": np.outer(cache["a1"], g_z2),
        "act_b2": g_z2,
        "act_W1": np.outer(cache["inp"], g_z1),
        "act_b1": g_z1,
    }
    grads.update(_encoder_backward(g_inp[:ENC_DIM], cache["features"], cache["z_e"], params))
    return grads


def critic_backward(cache: dict, g_value: float, params: PolicyParams) -> dict[str, np.ndarray]:
    g_z1 = g_value * params["cr_W2"][:, 0] * (cache["z1"] > 0)
    grads = {
        "cr_W2": g_value * cache["a1"][:, None],
        "cr_b2": np.array([g_value]),
        "cr_W1": np.outer(cache["enc"], g_z1),
        "cr_b1": g_z1,
    }
    g_enc = params["cr_W1"] @ g_z1
    grads.update(_encoder_backward(g_enc, cache["features"], cache["z_e"], params))
    return grads


def actor_loss_grad_alpha(action: DirichletAction, td_error: float) -> np.ndarray:
    """dL_a/dalpha for L_a = -ln q(sample | alpha) * delta (delta constant)."""
    a = action.alpha
    return -td_error * (digamma(a.sum()) - digamma(a) + action.log_simplex)


def a2c_gradients(
    features: MgfFeatures,
    theta,
    x,
    action: DirichletAction,
    td: float,
    params: PolicyParams,
):
    """Per-loss parameter gradients for one transition.

    Returns (actor_loss_grads, critic_loss_grads): the actor loss
    -ln q(a|alpha) * td reaches the actor and encoder tensors; the critic
    loss td^2 (constant bootstrap target) reaches the critic and encoder
    tensors.
    """
    cache_a: dict = {}
    actor_forward(features, theta, x, params, cache=cache_a)
    g_alpha = actor_loss_grad_alpha(action, td)
    actor_grads = actor_backward(cache_a, g_alpha, params)

    cache_c: dict = {}
    critic_forward(features, params, cache=cache_c)
    # L_c = td^2 with td = target - value and constant target: dL/dvalue = -2 td
    critic_grads = critic_backward(cache_c, -2.0 * td, params)
    return actor_grads, critic_grads


# ---------------------------------------------------------------------------
# gradient verification


def _loss_value(params, belief, theta, x, action, td, target, loss_kind):
    feats = mgf_features(belief, params)
    if loss_kind == "actor-loss":
        alpha = actor_forward(feats, theta, x, params)
        return -td * dirichlet_log_density(alpha, action.log_simplex)
    if loss_kind == "critic-loss":
        return (target - critic_forward(feats, params)) ** 2
    raise ValueError(f"unknown loss kind: {loss_kind}")


def grad_check(
    params: PolicyParams,
    belief: ParticleBelief,
    theta,
    x,
    loss_kind: str,
    rng: np.random.Generator,
    n_entries: int = 120,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes ``n_entries`` randomly chosen parameter entries across every
    tensor the given loss touches.
    """
    feats = mgf_features(belief, params)
    action = sample_kernel_row(actor_forward(feats, theta, x, params), rng)
    td = 0.7
    target = critic_forward(feats, params) + td

    actor_grads, critic_grads = a2c_gradients(feats, theta, x, action, td, params)
    analytic = actor_grads if loss_kind == "actor-loss" else critic_grads

    names = sorted(analytic)
    worst = 0.0
    for _ in range(n_entries):
        name = names[int(rng.integers(len(names)))]
        tensor = params.tensors[name]
        flat_idx = int(rng.integers(tensor.size))
        idx = np.unravel_index(flat_idx, tensor.shape)
        orig = tensor[idx]
        tensor[idx] = orig + step
        up = _loss_value(params, belief, theta, x, action, td, target, loss_kind)
        tensor[idx] = orig - step
        dn = _loss_value(params, belief, theta, x, action, td, target, loss_kind)
        tensor[idx] = orig
        fd = (up - dn) / (2 * step)
        an = analytic[name][idx]
        denom = max(abs(an), abs(fd), 1e-6)
        worst = max(worst, abs(an - fd) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

_CKPT_MAGIC = "platoon-privacy-checkpoint v1"


def save_params(params: PolicyParams, path_or_buf, config_text: str = "") -> None:
    """Versioned text container: every tensor as name, shape, row-major values."""
    buf = io.StringIO()
    buf.write(_CKPT_MAGIC + "\n")
    cfg_lines = config_text.splitlines()
    buf.write(f"config {len(cfg_lines)}\n")
    for ln in cfg_lines:
        buf.write(ln + "\n")
    buf.write(f"scaler {' '.join(f'{x:.17g}' for x in params.scaler.center)} "
              f"{' '.join(f'{x:.17g}' for x in params.scaler.scale)}\n")
    for name in params.flat_names():
        t = params.tensors[name]
        shape = " ".join(str(d) for d in t.shape)
        buf.write(f"tensor {name} {shape}\n")
        buf.write(" ".join(f"{x:.17g}" for x in t.ravel()) + "\n")
    text = buf.getvalue()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)


def load_params(path_or_buf) -> tuple[PolicyParams, str]:
    """Restore (params, embedded config text) from the container format."""
    if hasattr(path_or_buf, "read"):
        lines = path_or_buf.read().splitlines()
    else:
        with open(path_or_buf) as fh:
            lines = fh.read().splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise ValueError("not a policy checkpoint (bad magic line)")
    i = 1
    head, n = lines[i].split()
    if head != "config":
        raise ValueError("checkpoint missing config block")
    n = int(n)
    config_text = "\n".join(lines[i + 1 : i + 1 + n])
    i += 1 + n
    parts = lines[i].split()
    if parts[0] != "scaler":
        raise ValueError("checkpoint missing scaler line")
    vals = [float(x) for x in parts[1:]]
    scaler = FeatureScaler(center=np.array(vals[:4]), scale=np.array(vals[4:]))
    i += 1
    tensors: dict[str, np.ndarray] = {}
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        tag, name, *shape = lines[i].split()
        if tag != "tensor":
            raise ValueError(f"unexpected line in checkpoint: {lines[i][:40]}")
        shape = tuple(int(d) for d in shape)
        values = np.fromiter((float(x) for x in lines[i + 1].split()), dtype=float)
        tensors[name] = values.reshape(shape)
        i += 2
    return PolicyParams(tensors, scaler), config_text
