import os

import numpy as np
import pytest

from platoon_privacy.cli import main
from platoon_privacy.config import ConfigError, default_config_text, parse_config
from platoon_privacy.dynamics import ThetaParams
from platoon_privacy.experiment import (
    cmd_attack,
    cmd_eval,
    cmd_train,
    read_csv,
    read_stream,
    run_stream,
    write_csv,
)
from platoon_privacy.policy import PolicyParams, save_params


class TestParseConfig:
    def test_empty_document_gives_defaults(self):
        cfg = parse_config("")
        assert cfg.scenario.dt == 0.2
        assert cfg.scenario.eq.s_star == 20.0
        assert cfg.training.lr_actor == 1e-3
        assert cfg.training.d_hat_total == 800.0
        assert cfg.training.horizon == 200
        assert cfg.evaluation.steps == 1200
        assert cfg.evaluation.repetitions == 10
        assert len(cfg.evaluation.thetas) == 4

    def test_default_text_parses_to_defaults(self):
        cfg = parse_config(default_config_text())
        base = parse_config("")
        for fld in ("seed", "scenario", "filter", "policy", "training", "evaluation", "output"):
            assert getattr(cfg, fld) == getattr(base, fld)

    def test_override_with_default_value_is_idempotent(self):
        cfg = parse_config("[training]\nlr_actor = 1e-3\n")
        assert cfg.training == parse_config("").training

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key scenario.warp"):
            parse_config("[scenario]\nwarp = 9\n")
        with pytest.raises(ConfigError, match="unknown config section"):
            parse_config("[warp_drive]\nx = 1\n")

    def test_invariant_violation_names_keys(self):
        with pytest.raises(ConfigError, match="s_st/s_go"):
            parse_config("[scenario]\ns_st = 40\ns_go = 35\n")

    def test_type_error_named(self):
        with pytest.raises(ConfigError, match="training.episodes"):
            parse_config("[training]\nepisodes = soon\n")

    def test_cli_style_overrides(self):
        cfg = parse_config("", {"training.episodes": "7", "scenario.dt": "0.1"})
        assert cfg.training.episodes == 7
        assert cfg.scenario.dt == 0.1
        with pytest.raises(ConfigError):
            parse_config("", {"training.nope": "1"})

    def test_missing_file_rejected(self):
        with pytest.raises(ConfigError, match="not found"):
            parse_config("/nonexistent/path.cfg")

    def test_thetas_parse(self):
        cfg = parse_config("[evaluation]\nthetas = 0.5,0.6;1.2,1.3\n")
        assert cfg.evaluation.thetas == ((0.5, 0.6), (1.2, 1.3))
        with pytest.raises(ConfigError):
            parse_config("[evaluation]\nthetas = 1.0\n")


SMOKE_CONFIG = """
[training]
episodes = 4
horizon = 15
[evaluation]
steps = 40
repetitions = 1
[filter]
eval_per_side = 4
"""


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    cfg = parse_config(SMOKE_CONFIG)
    ckpt = cmd_train(cfg, str(out / "train"))
    rows = cmd_eval(cfg, ckpt, str(out / "eval"))
    return out, cfg, ckpt, rows


class TestCommands:
    def test_train_writes_curve_and_checkpoint(self, smoke_run):
        out, cfg, ckpt, _ = smoke_run
        assert os.path.exists(ckpt)
        schema, header, rows = read_csv(out / "train" / "reward_curve.csv")
        assert schema == "reward-curve v1"
        assert header == ["episode", "reward", "mi_sum", "fuel_sum", "distortion_sum"]
        assert len(rows) == 4

    def test_eval_outputs(self, smoke_run):
        out, cfg, ckpt, rows = smoke_run
        assert len(rows) == 4
        schema, header, data = read_csv(out / "eval" / "metrics.csv")
        assert schema == "metrics v1"
        assert header[-1] == "delta_pct"
        assert len(data) == 4
        # delta_pct recomputes from the stored fuel columns
        for row in data:
            fr, ff, dp = float(row[5]), float(row[6]), float(row[7])
            assert dp == pytest.approx(100 * (ff - fr) / fr, abs=1e-9)
        for label in ("theta1", "theta3"):
            assert os.path.exists(out / "eval" / f"belief_{label}_real.csv")
            assert os.path.exists(out / "eval" / f"stream_{label}_filtered.csv")

    def test_eval_zero_repetitions_header_only(self, tmp_path):
        cfg = parse_config(SMOKE_CONFIG, {"evaluation.repetitions": "0"})
        params = PolicyParams.init(np.random.default_rng(0))
        ckpt = str(tmp_path / "p.ckpt")
        save_params(params, ckpt)
        rows = cmd_eval(cfg, ckpt, str(tmp_path / "eval0"))
        assert rows == []
        schema, header, data = read_csv(tmp_path / "eval0" / "metrics.csv")
        assert data == []

    def test_attack_replay_reproduces_filtered_belief(self, smoke_run):
        out, cfg, ckpt, _ = smoke_run
        trace = out / "eval" / "stream_theta1_filtered.csv"
        attack_csv = cmd_attack(cfg, str(trace), str(out / "attack"), checkpoint_path=ckpt)
        _, _, attack_rows = read_csv(attack_csv)
        _, _, belief_rows = read_csv(out / "eval" / "belief_theta1_filtered.csv")
        # p_true_theta column must match the eval-time belief trace exactly
        for arow, brow in zip(attack_rows, belief_rows):
            assert arow[1] == brow[1]

    def test_attack_on_empty_trace_is_header_only(self, smoke_run, tmp_path):
        out, cfg, ckpt, _ = smoke_run
        src = (out / "eval" / "stream_theta1_real.csv").read_text().splitlines()
        empty = tmp_path / "empty_stream.csv"
        empty.write_text("\n".join(ln for ln in src if ln.startswith("#") or ln.startswith("step")) + "\n")
        out_path = cmd_attack(cfg, str(empty), str(tmp_path))
        _, _, rows = read_csv(out_path)
        assert rows == []

    def test_attack_malformed_trace_names_line(self, smoke_run, tmp_path):
        out, cfg, _, _ = smoke_run
        src = (out / "eval" / "stream_theta1_real.csv").read_text().splitlines()
        src[8] = "0,1.0,2.0"  # drop a field somewhere in the body
        bad = tmp_path / "bad_stream.csv"
        bad.write_text("\n".join(src) + "\n")
        with pytest.raises(ValueError, match="bad_stream.csv:9"):
            cmd_attack(cfg, str(bad), str(tmp_path))


class TestDeterminism:
    def test_train_byte_identical(self, tmp_path):
        cfg = parse_config(SMOKE_CONFIG)
        cmd_train(cfg, str(tmp_path / "a"))
        cmd_train(cfg, str(tmp_path / "b"))
        assert (tmp_path / "a" / "reward_curve.csv").read_bytes() == (
            tmp_path / "b" / "reward_curve.csv"
        ).read_bytes()
        assert (tmp_path / "a" / "policy_final.ckpt").read_bytes() == (
            tmp_path / "b" / "policy_final.ckpt"
        ).read_bytes()

    def test_eval_byte_identical(self, smoke_run, tmp_path):
        out, cfg, ckpt, _ = smoke_run
        cmd_eval(cfg, ckpt, str(tmp_path / "e1"))
        cmd_eval(cfg, ckpt, str(tmp_path / "e2"))
        for name in ("metrics.csv", "metrics_reps.csv", "belief_theta2_filtered.csv"):
            assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()

    def test_identity_sharing_fuel_matches_same_seed(self):
        # a policy-free run and the "real" side of eval share the seed path
        cfg = parse_config(SMOKE_CONFIG)
        theta = ThetaParams(1.0, 1.1)
        a = run_stream(cfg, theta, None, (0, 0, 0, 0), n_steps=30)
        b = run_stream(cfg, theta, None, (0, 0, 0, 0), n_steps=30)
        assert a.mean_fuel == b.mean_fuel
        assert a.sigma_e_final == b.sigma_e_final


class TestCli:
    def test_train_then_eval_and_attack(self, tmp_path, capsys):
        cfgfile = tmp_path / "smoke.cfg"
        cfgfile.write_text(SMOKE_CONFIG)
        rc = main(["train", "--config", str(cfgfile), "--out", str(tmp_path / "t")])
        assert rc == 0
        ckpt = str(tmp_path / "t" / "policy_final.ckpt")
        rc = main(["eval", "--config", str(cfgfile), "--checkpoint", ckpt, "--out", str(tmp_path / "e")])
        assert rc == 0
        rc = main(
            [
                "attack",
                "--config", str(cfgfile),
                "--trace", str(tmp_path / "e" / "stream_theta1_real.csv"),
                "--out", str(tmp_path / "a"),
            ]
        )
        assert rc == 0
        assert "attack trace written" in capsys.readouterr().out

    def test_cli_override_flag(self, tmp_path):
        rc = main(
            [
                "train",
                "--out", str(tmp_path / "t"),
                "--training.episodes", "2",
                "--training.horizon", "10",
            ]
        )
        assert rc == 0
        _, _, rows = read_csv(tmp_path / "t" / "reward_curve.csv")
        assert len(rows) == 2

    def test_cli_bad_key_fails_cleanly(self, capsys):
        rc = main(["train", "--bogus.key", "1"])
        assert rc == 2
        assert "unknown key" in capsys.readouterr().err

    def test_cli_seed_flag_changes_output(self, tmp_path):
        for seed, sub in ((1, "s1"), (2, "s2")):
            rc = main(
                [
                    "train", "--seed", str(seed), "--out", str(tmp_path / sub),
                    "--training.episodes", "2", "--training.horizon", "10",
                ]
            )
            assert rc == 0
        assert (tmp_path / "s1" / "reward_curve.csv").read_bytes() != (
            tmp_path / "s2" / "reward_curve.csv"
        ).read_bytes()


def test_write_read_csv_roundtrip(tmp_path):
    path = tmp_path / "x.csv"
    write_csv(path, "test-schema", ["a", "b"], [[1, 0.5], [2, 1.25]])
    schema, header, rows = read_csv(path)
    assert schema == "test-schema v1"
    assert header == ["a", "b"]
    assert rows == [["1", "0.5"], ["2", "1.25"]]
