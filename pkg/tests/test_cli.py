import json

import pytest

from dwre.cli import EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_PASS, EXIT_USAGE, main, source_digest
from dwre.environment import builtin_spec, realize, serialize


def run(capsys, *args):
    code = main(list(args))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_verify_paper_example_passes(capsys):
    code, out, _ = run(capsys, "--env", "builtin:paper-example", "verify")
    rep = json.loads(out)
    assert code == EXIT_PASS
    assert rep["verdict"] == "pass" and rep["result"]["gt2_depth_checked"] == 5
    assert rep["config"]["seed"] == 0 and rep["library"] == source_digest()


def test_verify_gate_wider_than_bound_fails_with_warning(capsys):
    # c, theta, D', C, M chosen so the delta0 bound is far below the gate width
    code, out, err = run(capsys, "--env", "builtin:paper-example", "verify", "--model-a", "0.001,0.5,1,10,10")
    assert code == EXIT_FAIL
    assert "warning" in err
    assert json.loads(out)["result"]["model_a"]["delta0_bound"] < 1e-4


def test_verify_wrapping_is_inconclusive(capsys):
    code, out, _ = run(capsys, "--env", "builtin:relaxed", "verify", "--relaxed", "--nmax", "6")
    assert code == EXIT_INCONCLUSIVE
    assert json.loads(out)["verdict"] == "inconclusive"


def test_verify_strict_rejects_weak_expansion(capsys):
    code, _, _ = run(capsys, "--env", "builtin:relaxed", "verify", "--nmax", "0")
    assert code == EXIT_FAIL


def test_missing_env_file(capsys):
    code, _, err = run(capsys, "--env", "/nonexistent/env.json", "clt")
    assert code == EXIT_USAGE and "not found" in err


def test_usage_errors_exit_above_two(capsys):
    assert run(capsys, "clt", "--n", "abc")[0] == EXIT_USAGE
    assert run(capsys, "--grid", "1000", "clt", "--n", "10")[0] == EXIT_USAGE
    assert run(capsys, "nosuchcommand")[0] == EXIT_USAGE
    assert run(capsys, "--env", "builtin:nope", "clt")[0] == EXIT_USAGE


def test_same_config_twice_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    args = ["--env", "builtin:nested-iid", "--samples", "3000", "--seed", "4"]
    assert main(args + ["--out", str(a), "clt", "--n", "300"]) == EXIT_PASS
    assert main(args + ["--out", str(b), "clt", "--n", "300"]) == EXIT_PASS
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("command", [["clt", "--n", "300"], ["scale", "--zmax", "310", "--n", "300"],
                                     ["simulate", "--observable", "z", "--at", "50,100"]])
def test_thread_count_does_not_change_output(tmp_path, command):
    outs = []
    for t in ("1", "3"):
        p = tmp_path / f"r{t}.json"
        main(["--env", "builtin:nested-iid", "--samples", "20000", "--threads", t, "--out", str(p)] + command)
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_simulate_writes_csv(tmp_path):
    p = tmp_path / "sim.json"
    assert main(["--env", "builtin:relaxed", "--samples", "100", "--out", str(p), "simulate", "--at", "5,10"]) == 0
    lines = (tmp_path / "sim.csv").read_text().splitlines()
    assert lines[0] == "x0,tau_5,tau_10" and len(lines) == 101


def test_config_file_with_cli_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"env": "builtin:relaxed", "samples": 2000, "seed": 9, "clt": {"n": 120}}))
    code, out, _ = run(capsys, "--config", str(cfg), "--seed", "2", "clt")
    rep = json.loads(out)
    assert code == EXIT_PASS
    assert rep["config"]["seed"] == 2 and rep["config"]["samples"] == 2000
    assert rep["config"]["params"]["n"] == 120 and rep["result"]["n"] == 120


def test_config_file_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"env": "builtin:relaxed",\n "bogus": 1}')
    code, _, err = run(capsys, "--config", str(bad), "clt")
    assert code == EXIT_USAGE and "bogus" in err
    bad.write_text("{\n oops")
    code, _, err = run(capsys, "--config", str(bad), "clt")
    assert code == EXIT_USAGE and "line 2" in err


def test_env_file_round_trip(tmp_path, capsys):
    path = tmp_path / "env.json"
    serialize(realize(builtin_spec("nested-iid", (-1, 400)), 6), path)
    code, out, _ = run(capsys, "--env", str(path), "--samples", "1000", "simulate", "--at", "100")
    assert code == EXIT_PASS
    assert json.loads(out)["result"]["N_s"] == 1000


def test_inadmissible_env_needs_force(tmp_path, capsys):
    d = builtin_spec("relaxed", (-1, 200)).to_dict()
    d["alphabet"][0]["gate"]["center"] = 0.5  # breaks the no-immediate-return condition
    path = tmp_path / "bad_env.json"
    path.write_text(json.dumps(d))
    code, _, err = run(capsys, "--env", str(path), "--samples", "200", "simulate", "--at", "20")
    assert code == EXIT_FAIL and "--force" in err
    code, _, _ = run(capsys, "--env", str(path), "--samples", "200", "--force", "simulate", "--at", "20",
                     "--mode", "direct")
    assert code == EXIT_PASS


def test_mixing_command(capsys):
    code, out, _ = run(capsys, "--env", "builtin:paper-example", "--grid", "512", "mixing", "--nmax", "20",
                       "--min-steps", "30", "--ly-trials", "20")
    rep = json.loads(out)
    assert code == EXIT_PASS
    assert rep["result"]["decay"]["theta"] < 0.9
    assert rep["result"]["lasota_yorke"]["violations"] == 0


def test_drift_and_counterexample_commands(capsys):
    code, out, _ = run(capsys, "--env", "builtin:nested-iid", "--grid", "256", "--samples", "2000", "drift",
                       "--nmax", "400")
    assert code in (EXIT_PASS, EXIT_INCONCLUSIVE)
    assert 1 <= json.loads(out)["result"]["a"] <= 3
    code, _, err = run(capsys, "--env", "builtin:relaxed", "counterexample", "--klist", "5")
    assert code == EXIT_USAGE and "two-pair" in err
