"""Experiment orchestration: training runs, the evaluation protocol, and
attack replays, with deterministic CSV export.

Every output file starts with a ``# schema: <name> v1`` line. All
randomness derives from seed sequences keyed by (seed, theta index,
repetition, role), so any command rerun with the same config and seed
produces byte-identical files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .adversary import (
    AttackObservation,
    RlsState,
    bayes_attack_filtered_step,
    bayes_attack_real_step,
    estimation_rmse,
    rls_regressor,
    rls_update,
    success_rate,
)
from .belief import (
    init_belief,
    marginal_of,
    maybe_resample,
    propagate,
    reweight,
    state_lattice,
    theta_marginal,
)
from .config import ExperimentConfig
from .dynamics import PlatoonState, ThetaParams, cav_control, fuel_rate, platoon_step
from .policy import (
    DistortionGrid,
    PolicyParams,
    actor_forward,
    emit_distorted,
    load_params,
    mgf_features,
    particle_kernels,
    sample_kernel_row,
    save_params,
)
from .training import draw_initial_state, train

__all__ = [
    "MetricsRow",
    "cmd_train",
    "cmd_eval",
    "cmd_attack",
    "run_stream",
    "write_csv",
]


@dataclass
class MetricsRow:
    theta_label: str
    sigma_e_real: float
    sr_real: float
    sigma_e_filtered: float
    sr_filtered: float
    fuel_real: float
    fuel_filtered: float

    @property
    def delta_pct(self) -> float:
        return 100.0 * (self.fuel_filtered - self.fuel_real) / self.fuel_real


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, schema: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write(f"# schema: {schema} v1\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# schema: "):
        raise ValueError(f"{path}: missing schema line")
    schema = lines[0][len("# schema: "):]
    header = lines[1].split(",")
    return schema, header, [ln.split(",") for ln in lines[2:] if ln]


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


# ---------------------------------------------------------------------------
# evaluation runs


@dataclass
class StreamResult:
    """Everything one simulated sharing run produces."""

    observations: list[AttackObservation]   # shared data + public CAV speed
    belief_trace: list[dict]                # per-step theta marginals (attacker)
    rls_estimates: list[np.ndarray]
    sigma_e_final: float
    sigma_e_mean: float
    mean_fuel: float
    p_true_final: float


def run_stream(
    cfg: ExperimentConfig,
    theta: ThetaParams,
    params: PolicyParams | None,
    seed_key: tuple,
    n_steps: int | None = None,
) -> StreamResult:
    """Simulate one evaluation run and attack it online.

    ``params`` None means identity sharing (the true HDV state goes out);
    otherwise the policy emits distorted grid cells. One belief serves both
    the defender's feature pipeline and the Bayesian attacker (the policy
    is public knowledge). RLS consumes the shared stream either way.
    """
    scn = cfg.scenario
    grid = cfg.distortion_grid()
    n_steps = cfg.evaluation.steps if n_steps is None else n_steps
    rng_sim = _rng(*seed_key, 1)
    rng_filter = _rng(*seed_key, 2)

    belief = init_belief(
        cfg.evaluation.thetas,
        state_lattice(scn.eq, cfg.filter.half_s, cfg.filter.half_v, cfg.filter.eval_per_side),
        n_eff_fraction=cfg.filter.n_eff_fraction,
    )
    belief.rough_s = cfg.filter.rough_s
    belief.rough_v = cfg.filter.rough_v

    state = draw_initial_state(scn, rng_sim, cfg.filter.half_s, cfg.filter.half_v)
    theta_pair = (theta.m, theta.n)
    rls = RlsState()
    observations: list[AttackObservation] = []
    belief_trace: list[dict] = []
    rls_estimates: list[np.ndarray] = []
    sigma_series: list[float] = []
    fuel_acc = 0.0

    prev_obs: AttackObservation | None = None
    for t in range(n_steps):
        x_true = (float(state.s[2]), float(state.v[2]))
        if params is None:
            y = state.hdv
        else:
            feats = mgf_features(belief, params)
            alpha = actor_forward(feats, theta_pair, x_true, params)
            action = sample_kernel_row(alpha, rng_sim)
            y = emit_distorted(action.sampled_simplex, grid, rng_sim)
        obs = AttackObservation(y[0], y[1], float(state.v[1]), scn.dt)
        observations.append(obs)

        # Bayesian attacker: evidence, then readout, then motion
        if params is None:
            belief = bayes_attack_real_step(belief, y)
        else:
            belief = bayes_attack_filtered_step(belief, y, params, grid)
        belief_trace.append(theta_marginal(belief))
        belief = propagate(belief, obs.v_cav, scn, rng_filter)
        belief = maybe_resample(belief, rng_filter)

        # RLS attacker on consecutive shared data
        if prev_obs is not None:
            x_reg, y_reg = rls_regressor(prev_obs, obs, scn.thr)
            rls = rls_update(rls, x_reg, y_reg)
            rls_estimates.append(rls.theta_hat.copy())
            sigma_series.append(estimation_rmse(rls.theta_hat, theta))
        prev_obs = obs

        u = cav_control(state, scn.gains, scn.eq, y, scn.thr)
        hdv_velocity = float(state.v[2])
        state, a3_model = platoon_step(state, theta, u, scn, rng_sim)
        fuel_acc += fuel_rate(hdv_velocity, a3_model)

    sigma_final = sigma_series[-1] if sigma_series else float("nan")
    sigma_mean = float(np.mean(sigma_series)) if sigma_series else float("nan")
    return StreamResult(
        observations=observations,
        belief_trace=belief_trace,
        rls_estimates=rls_estimates,
        sigma_e_final=sigma_final,
        sigma_e_mean=sigma_mean,
        mean_fuel=fuel_acc / max(n_steps, 1),
        p_true_final=marginal_of(belief, theta_pair) if n_steps else float("nan"),
    )


def _theta_label(idx: int) -> str:
    return f"theta{idx + 1}"


def _write_belief_trace(path, thetas, trace):
    header = ["step"] + [f"p_{_theta_label(i)}" for i in range(len(thetas))]
    rows = [[t] + [marg.get(tuple(th), 0.0) for th in thetas] for t, marg in enumerate(trace)]
    write_csv(path, "belief-trace", header, rows)


def _write_stream(path, theta, kind, seed_key, observations, dt):
    with open(path, "w") as fh:
        fh.write("# schema: shared-stream v1\n")
        fh.write(f"# theta_m: {theta.m!r}\n")
        fh.write(f"# theta_n: {theta.n!r}\n")
        fh.write(f"# kind: {kind}\n")
        fh.write(f"# dt: {dt!r}\n")
        fh.write(f"# seed_key: {'/'.join(str(k) for k in seed_key)}\n")
        fh.write("step,v_shared,s_shared,v_cav\n")
        for t, o in enumerate(observations):
            fh.write(f"{t},{o.v_hdv!r},{o.s_hdv!r},{o.v_cav!r}\n")


def read_stream(path) -> tuple[ThetaParams, str, tuple, float, list[AttackObservation]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "# schema: shared-stream v1":
        raise ValueError(f"{path}: not a shared-stream file")
    meta = {}
    body_start = None
    for i, ln in enumerate(lines[1:], start=1):
        if ln.startswith("# "):
            key, _, val = ln[2:].partition(": ")
            meta[key] = val
        else:
            body_start = i
            break
    if body_start is None or lines[body_start] != "step,v_shared,s_shared,v_cav":
        raise ValueError(f"{path}: missing stream header row")
    dt = float(meta.get("dt", "0.2"))
    theta = ThetaParams(float(meta["theta_m"]), float(meta["theta_n"]))
    seed_key = tuple(int(x) for x in meta.get("seed_key", "0").split("/"))
    obs = []
    for ln_no, ln in enumerate(lines[body_start + 1 :], start=body_start + 2):
        if not ln:
            continue
        parts = ln.split(",")
        if len(parts) != 4:
            raise ValueError(f"{path}:{ln_no}: expected 4 fields, got {len(parts)}")
        try:
            obs.append(AttackObservation(float(parts[1]), float(parts[2]), float(parts[3]), dt))
        except ValueError as exc:
            raise ValueError(f"{path}:{ln_no}: {exc}") from exc
    return theta, meta.get("kind", "real"), seed_key, dt, obs


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig, out_dir: str | None = None) -> str:
    """Run training; write the reward curve and checkpoints. Returns the
    final checkpoint path."""
    out = out_dir or cfg.output.directory
    os.makedirs(out, exist_ok=True)
    ckpt_path = os.path.join(out, "policy_final.ckpt")

    every = cfg.training.checkpoint_every

    def on_episode(episode, params, row):
        if every > 0 and (episode + 1) % every == 0:
            save_params(params, os.path.join(out, f"policy_ep{episode + 1}.ckpt"), cfg.source_text)

    params, curve = train(cfg.training, cfg.scenario, cfg.distortion_grid(), on_episode=on_episode)
    write_csv(
        os.path.join(out, "reward_curve.csv"),
        "reward-curve",
        ["episode", "reward", "mi_sum", "fuel_sum", "distortion_sum"],
        [[r["episode"], r["reward"], r["mi_sum"], r["fuel_sum"], r["distortion_sum"]] for r in curve],
    )
    save_params(params, ckpt_path, cfg.source_text)
    return ckpt_path


def cmd_eval(cfg: ExperimentConfig, checkpoint_path: str, out_dir: str | None = None) -> list[MetricsRow]:
    """Paired filtered/real runs for every theta and repetition.

    Writes the aggregate metrics table, the per-repetition table, belief
    traces, and (optionally) replayable shared-data streams for the first
    repetition of each run kind.
    """
    out = out_dir or cfg.output.directory
    os.makedirs(out, exist_ok=True)
    params, _ = load_params(checkpoint_path)

    agg_rows: list[MetricsRow] = []
    rep_rows: list[list] = []
    for i, theta_pair in enumerate(cfg.evaluation.thetas):
        theta = ThetaParams(*theta_pair)
        label = _theta_label(i)
        acc = {"sr": [], "sf": [], "fr": [], "ff": [], "sr_mean": [], "sf_mean": []}
        for rep in range(cfg.evaluation.repetitions):
            real = run_stream(cfg, theta, None, (cfg.seed, i, rep, 0))
            filt = run_stream(cfg, theta, params, (cfg.seed, i, rep, 1))
            acc["sr"].append(real.sigma_e_final)
            acc["sf"].append(filt.sigma_e_final)
            acc["fr"].append(real.mean_fuel)
            acc["ff"].append(filt.mean_fuel)
            acc["sr_mean"].append(real.sigma_e_mean)
            acc["sf_mean"].append(filt.sigma_e_mean)
            rep_rows.append(
                [
                    label,
                    rep,
                    real.sigma_e_final,
                    filt.sigma_e_final,
                    real.sigma_e_mean,
                    filt.sigma_e_mean,
                    real.mean_fuel,
                    filt.mean_fuel,
                    real.p_true_final,
                    filt.p_true_final,
                ]
            )
            if rep == 0:
                _write_belief_trace(
                    os.path.join(out, f"belief_{label}_real.csv"), cfg.evaluation.thetas, real.belief_trace
                )
                _write_belief_trace(
                    os.path.join(out, f"belief_{label}_filtered.csv"), cfg.evaluation.thetas, filt.belief_trace
                )
                if cfg.evaluation.save_streams:
                    _write_stream(
                        os.path.join(out, f"stream_{label}_real.csv"),
                        theta, "real", (cfg.seed, i, 0, 0), real.observations, cfg.scenario.dt,
                    )
                    _write_stream(
                        os.path.join(out, f"stream_{label}_filtered.csv"),
                        theta, "filtered", (cfg.seed, i, 0, 1), filt.observations, cfg.scenario.dt,
                    )
        if cfg.evaluation.repetitions:
            row = MetricsRow(
                theta_label=label,
                sigma_e_real=float(np.mean(acc["sr"])),
                sr_real=success_rate(float(np.mean(acc["sr"]))),
                sigma_e_filtered=float(np.mean(acc["sf"])),
                sr_filtered=success_rate(float(np.mean(acc["sf"]))),
                fuel_real=float(np.mean(acc["fr"])),
                fuel_filtered=float(np.mean(acc["ff"])),
            )
            agg_rows.append(row)

    write_csv(
        os.path.join(out, "metrics.csv"),
        "metrics",
        [
            "theta_label", "sigma_e_real", "sr_real", "sigma_e_filtered", "sr_filtered",
            "fuel_real", "fuel_filtered", "delta_pct",
        ],
        [
            [
                r.theta_label, r.sigma_e_real, r.sr_real, r.sigma_e_filtered, r.sr_filtered,
                r.fuel_real, r.fuel_filtered, r.delta_pct,
            ]
            for r in agg_rows
        ],
    )
    write_csv(
        os.path.join(out, "metrics_reps.csv"),
        "metrics-reps",
        [
            "theta_label", "repetition", "sigma_e_real_final", "sigma_e_filtered_final",
            "sigma_e_real_mean", "sigma_e_filtered_mean", "fuel_real", "fuel_filtered",
            "p_true_final_real", "p_true_final_filtered",
        ],
        rep_rows,
    )
    return agg_rows


def cmd_attack(
    cfg: ExperimentConfig,
    trace_path: str,
    out_dir: str | None = None,
    checkpoint_path: str | None = None,
) -> str:
    """Replay both attackers over a stored shared-data stream.

    Real streams are attacked with the observation-likelihood filter; a
    filtered stream replays the policy-kernel attacker when a checkpoint is
    supplied (reproducing the evaluation-time belief under the stored seed
    key). Writes one attack-trace CSV and returns its path.
    """
    out = out_dir or cfg.output.directory
    os.makedirs(out, exist_ok=True)
    theta, kind, seed_key, dt, observations = read_stream(trace_path)
    scn = cfg.scenario
    grid = cfg.distortion_grid()
    params = None
    if kind == "filtered" and checkpoint_path:
        params, _ = load_params(checkpoint_path)

    belief = init_belief(
        cfg.evaluation.thetas,
        state_lattice(scn.eq, cfg.filter.half_s, cfg.filter.half_v, cfg.filter.eval_per_side),
        n_eff_fraction=cfg.filter.n_eff_fraction,
    )
    belief.rough_s = cfg.filter.rough_s
    belief.rough_v = cfg.filter.rough_v
    rng_filter = _rng(*seed_key, 2)
    rls = RlsState()
    theta_pair = (theta.m, theta.n)

    rows = []
    prev = None
    for t, obs in enumerate(observations):
        y = (obs.v_hdv, obs.s_hdv)
        if params is None:
            belief = bayes_attack_real_step(belief, y)
        else:
            belief = bayes_attack_filtered_step(belief, y, params, grid)
        # same grouping as the eval-time trace so replays match byte-for-byte
        p_true = theta_marginal(belief).get(theta_pair, 0.0)
        belief = propagate(belief, obs.v_cav, scn, rng_filter)
        belief = maybe_resample(belief, rng_filter)
        if prev is not None:
            x_reg, y_reg = rls_regressor(prev, obs, scn.thr)
            rls = rls_update(rls, x_reg, y_reg)
        prev = obs
        sigma = estimation_rmse(rls.theta_hat, theta)
        rows.append([t, p_true, rls.theta_hat[0], rls.theta_hat[1], sigma])

    name = os.path.splitext(os.path.basename(trace_path))[0]
    out_path = os.path.join(out, f"attack_{name}.csv")
    write_csv(out_path, "attack-trace", ["step", "p_true_theta", "theta_hat_m", "theta_hat_n", "sigma_e"], rows)
    return out_path
