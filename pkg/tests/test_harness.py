import pytest

from skillsafe import cli
from skillsafe import worlds as wd
from skillsafe.errors import ConfigError, ParseError
from skillsafe.harness import (RecordWriter, config_digest, parse_config,
                               read_records, rng_for)


def test_empty_config_gives_defaults():
    cfg = parse_config("")
    assert cfg.world.name == "merge"
    assert cfg.world.num_agents == 4
    assert cfg.world.dynamics.model == "frenet_bicycle"
    assert cfg.seed == 0
    assert cfg.learn.termination_scheme == "continue"


def test_lane_width_override_reaches_geometry():
    cfg = parse_config("world:\n  lane_width: 3.25\n")
    world = wd.make_world(cfg.world, rng_for(0, 0))
    band = world.geom.band("main", 50.0)
    assert band.hi == pytest.approx(3.25 / 2)
    assert band.lo == pytest.approx(-3.25 / 2)


def test_unknown_keys_rejected():
    with pytest.raises(ParseError):
        parse_config("world:\n  lane_widht: 3.5\n")
    with pytest.raises(ParseError):
        parse_config("wheels: 4\n")
    with pytest.raises(ParseError):
        parse_config("learn:\n  optimizer: sgd\n")


def test_invalid_values_rejected():
    with pytest.raises(ParseError):
        parse_config("world:\n  dt: -0.1\n")
    with pytest.raises(ParseError):
        parse_config("learn:\n  gamma: 1.5\n")
    with pytest.raises(ParseError):
        parse_config("learn:\n  lam: 2.0\n")
    with pytest.raises(ParseError):
        parse_config("skills:\n  dv: 0\n")
    with pytest.raises(ParseError):
        parse_config("world:\n  name: tollgate\n")


def test_config_digest_stable_and_sensitive():
    a = parse_config("")
    b = parse_config("")
    c = parse_config("seed: 1\n")
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest(c)


def test_rng_streams_are_independent_and_deterministic():
    assert rng_for(0, 1, 2).integers(1 << 30) == rng_for(0, 1, 2).integers(1 << 30)
    assert rng_for(0, 1, 2).integers(1 << 30) != rng_for(0, 1, 3).integers(1 << 30)


def test_record_round_trip(tmp_path):
    path = tmp_path / "log.jsonl"
    records = [
        {"type": "step", "t": 0, "r_H": -1.2345678901234567,
         "agents": [{"id": 0, "control": [0.1, -0.2]}]},
        {"type": "segment", "agent": 1, "k": 7, "R": 3.5},
        {"type": "event", "kind": "infeasible_qp", "min_b": -0.25},
    ]
    with RecordWriter(path, run_id="t", seed=3) as w:
        w.set_iteration(2)
        for r in records:
            w(r)
    back = read_records(path)
    assert len(back) == 3
    for orig, got in zip(records, back):
        assert got["run"] == "t" and got["seed"] == 3 and got["iter"] == 2
        for k, v in orig.items():
            assert got[k] == v          # exact float round trip
    only_steps = read_records(path, kind="step")
    assert len(only_steps) == 1


def test_cli_check_grad_small(capsys):
    rc = cli.main(["check-grad", "--count", "5", "--seed", "1"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "PASS" in out


def test_cli_check_grad_zero(capsys):
    rc = cli.main(["check-grad", "--count", "0"])
    assert rc == 0


def test_cli_audit_small(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("world:\n  name: target\n  num_agents: 2\n"
                   "  max_steps: 60\n")
    rc = cli.main(["audit-safety", "--episodes", "2",
                   "--config", str(cfg)])
    out = capsys.readouterr().out
    assert rc == 0 and "PASS" in out


def test_cli_rollout_random(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("world:\n  max_steps: 80\n")
    rc = cli.main(["rollout", "--policy", "random", "--episodes", "1",
                   "--config", str(cfg), "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "rollout.jsonl").exists()
    recs = read_records(tmp_path / "rollout.jsonl", kind="step")
    assert recs and all("r_H" in r for r in recs)


def test_cli_train_eval_report_round_trip(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("world:\n  max_steps: 60\nlearn:\n  iterations: 3\n")
    out = tmp_path / "run"
    rc = cli.main(["train", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    hist = read_records(out / "history.jsonl")
    assert len(hist) == 3
    ck = out / "checkpoint.npz"
    assert ck.exists()

    rc = cli.main(["eval", "--checkpoint", str(ck), "--episodes", "2",
                   "--config", str(cfg)])
    assert rc == 0
    msg = capsys.readouterr().out
    assert "success_rate" in msg

    rc = cli.main(["report", "--run", str(out)])
    assert rc == 0
    assert (out / "metrics.png").exists()
    assert (out / "safety.png").exists()
    assert (out / "summary.csv").exists()


def test_cli_eval_checkpoint_hash_mismatch(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("world:\n  max_steps: 50\nlearn:\n  iterations: 1\n")
    out = tmp_path / "run"
    cli.main(["train", "--config", str(cfg), "--out", str(out)])
    other = tmp_path / "other.yaml"
    other.write_text("world:\n  max_steps: 50\nlearn:\n  iterations: 1\n"
                     "seed: 9\n")
    from skillsafe.harness import load_config
    from skillsafe.training import load_checkpoint
    with pytest.raises(ConfigError):
        load_checkpoint(out / "checkpoint.npz", load_config(other))
    # and the escape hatch works
    load_checkpoint(out / "checkpoint.npz", load_config(other), strict=False)


def test_metric_history_bytes_identical(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("world:\n  max_steps: 60\nlearn:\n  iterations: 2\n")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        cli.main(["train", "--config", str(cfg), "--out", str(out)])
        outs.append((out / "history.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_training_aborts_cleanly_on_numerical_error(tmp_path, monkeypatch):
    from skillsafe import training
    from skillsafe.errors import NumericalError
    cfg = parse_config("world:\n  max_steps: 40\nlearn:\n  iterations: 3\n")
    calls = {"n": 0}
    orig = training.training_iteration

    def boom(*a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NumericalError("synthetic failure")
        return orig(*a, **k)

    monkeypatch.setattr(training, "training_iteration", boom)
    art = training.run_training(cfg, tmp_path)
    assert art.aborted
    assert art.checkpoint.exists()
    assert len(art.history) == 1
