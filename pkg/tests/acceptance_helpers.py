"""Shared machinery for the acceptance suite.

Desk-scale training runs are expensive (tens of minutes each), so trained
policies and reward curves are cached under tests/_artifacts keyed by the
exact training configuration; reruns load the cache. Training is fully
seeded, so a cache hit is equivalent to retraining.
"""

import hashlib
import os
from pathlib import Path

import numpy as np

from platoon_privacy.experiment import read_csv, write_csv
from platoon_privacy.policy import load_params, save_params
from platoon_privacy.training import TrainConfig, train

ARTIFACTS = Path(__file__).parent / "_artifacts"

ACCEPTANCE_TRAIN_EPISODES = 10_000
ACCEPTANCE_SEEDS = (0, 1, 2)


def acceptance_train_config(seed: int) -> TrainConfig:
    return TrainConfig(episodes=ACCEPTANCE_TRAIN_EPISODES, seed=seed)


def _cache_paths(cfg: TrainConfig):
    key = hashlib.sha1(repr(cfg).encode()).hexdigest()[:10]
    return (
        ARTIFACTS / f"policy_s{cfg.seed}_{key}.ckpt",
        ARTIFACTS / f"curve_s{cfg.seed}_{key}.csv",
    )


def trained_run(seed: int):
    """(params, reward list) for the acceptance training config; cached."""
    cfg = acceptance_train_config(seed)
    ckpt_path, curve_path = _cache_paths(cfg)
    if ckpt_path.exists() and curve_path.exists():
        params, _ = load_params(str(ckpt_path))
        _, _, rows = read_csv(curve_path)
        rewards = [float(r[1]) for r in rows]
        if len(rewards) == cfg.episodes:
            return params, rewards
    os.makedirs(ARTIFACTS, exist_ok=True)
    params, curve = train(cfg)
    save_params(params, str(ckpt_path))
    write_csv(
        curve_path,
        "reward-curve",
        ["episode", "reward", "mi_sum", "fuel_sum", "distortion_sum"],
        [[r["episode"], r["reward"], r["mi_sum"], r["fuel_sum"], r["distortion_sum"]] for r in curve],
    )
    return params, [r["reward"] for r in curve]


def report(criterion: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    line = f"ACCEPTANCE {criterion}: {status}"
    if detail:
        line += f"  [{detail}]"
    print(line, flush=True)
