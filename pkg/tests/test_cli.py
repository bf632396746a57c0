import os
import subprocess
import sys

import pytest

from actionlab.cli import ConfigError, load_config, main, run_scenario

SMALL = dict(m=200, n_paths=3000, seed=5)


def write_config(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(body)
    return path


def run(tmp_path, body, **kwargs):
    cfg_path = write_config(tmp_path, "scenario.ini", body)
    cfg = load_config(cfg_path)
    out = tmp_path / "out"
    code = run_scenario(cfg, out, **kwargs)
    return code, out


EL_POS = """
[scenario]
kind = el-certify
law = pinned_brownian
lagrangian = kinetic
m = 200
n_paths = 3000
seed = 5
[law]
y = 1.0
"""

EL_NEG = """
[scenario]
kind = el-certify
law = brownian_drift_t
lagrangian = kinetic
m = 200
n_paths = 3000
seed = 5
"""


def test_el_certify_positive(tmp_path):
    code, out = run(tmp_path, EL_POS)
    assert code == 0
    verdict = (out / "verdict.txt").read_text().strip()
    tokens = verdict.split()
    assert len(tokens) == 3
    assert tokens[0] == "el-certify" and tokens[1] == "PASS"
    assert tokens[2].startswith("max_stat=")
    header = (out / "report.csv").read_text().splitlines()[0]
    assert header == "probe_s,probe_t,column,z"


def test_el_certify_negative_exit_one(tmp_path):
    code, out = run(tmp_path, EL_NEG)
    assert code == 1
    assert "FAIL" in (out / "verdict.txt").read_text()


def test_unknown_key_lists_valid(tmp_path):
    body = EL_POS.replace("lagrangian = kinetic",
                          "lagrangian = kinetic\nnonsense = 1")
    path = write_config(tmp_path, "bad.ini", body)
    with pytest.raises(ConfigError, match="nonsense") as err:
        load_config(path)
    assert "valid keys" in str(err.value)


def test_unknown_law_parameter_is_config_error(tmp_path):
    body = EL_POS + "bogus_param = 3\n"   # lands in the [law] section
    code = main(["run", "--config", str(write_config(tmp_path, "c.ini", body)),
                 "--out", str(tmp_path / "o")])
    assert code == 2


def test_unknown_registry_entry(tmp_path):
    body = EL_POS.replace("pinned_brownian", "mystery_law")
    code = main(["run", "--config", str(write_config(tmp_path, "c.ini", body)),
                 "--out", str(tmp_path / "o")])
    assert code == 2


def test_unknown_kind(tmp_path):
    path = write_config(tmp_path, "k.ini", "[scenario]\nkind = dance\n")
    with pytest.raises(ConfigError, match="kind"):
        load_config(path)


def test_simulate_writes_paths_csv(tmp_path):
    body = """
[scenario]
kind = simulate
law = brownian
m = 100
n_paths = 2000
seed = 6
expected_mean = 0.0
expected_var = 1.0
"""
    code, out = run(tmp_path, body)
    assert code == 0
    assert (out / "paths.csv").exists()


def test_simulate_wrong_variance_fails(tmp_path):
    body = """
[scenario]
kind = simulate
law = brownian
m = 100
n_paths = 2000
seed = 6
expected_var = 2.0
"""
    code, _ = run(tmp_path, body)
    assert code == 1


def test_action_scenario_with_expected(tmp_path):
    body = """
[scenario]
kind = action
law = squared_increment_weighted
lagrangian = kinetic
m = 200
n_paths = 20000
seed = 7
expected = 0.7296371545385218
allowance = 0.012
"""
    code, out = run(tmp_path, body)
    assert code == 0
    body_bad = body.replace("expected = 0.7296371545385218", "expected = 0.9")
    cfg = load_config(write_config(tmp_path, "bad.ini", body_bad))
    assert run_scenario(cfg, tmp_path / "out2") == 1


def test_variational_scenarios(tmp_path):
    pos = """
[scenario]
kind = variational
law = brownian
lagrangian = kinetic
shift = plus_minus
expect_critical = true
m = 200
n_paths = 3000
seed = 8
"""
    code, _ = run(tmp_path, pos)
    assert code == 0
    neg = pos.replace("law = brownian", "law = brownian_drift_t")
    cfg = load_config(write_config(tmp_path, "neg.ini", neg))
    assert run_scenario(cfg, tmp_path / "outn") == 1


def test_operators_scenarios(tmp_path):
    pos = """
[scenario]
kind = operators
m = 192
n_paths = 2000
seed = 9
shift_count = 2
"""
    code, _ = run(tmp_path, pos)
    assert code == 0
    neg = pos + "peeking = true\n"
    cfg = load_config(write_config(tmp_path, "neg.ini", neg))
    assert run_scenario(cfg, tmp_path / "outn") == 1


def test_bridge_scenario(tmp_path):
    body = """
[scenario]
kind = bridge
lagrangian = kinetic
m = 200
n_paths = 20000
seed = 10
expected_action = 0.15342640972002736
expected_entropy = 0.15342640972002736
tv_tol = 0.04

[bridge]
final_mean = 0.0
final_var = 2.0
"""
    code, out = run(tmp_path, body)
    assert code == 0
    report = (out / "report.csv").read_text()
    assert "entropy" in report and "terminal_tv" in report


def test_fbsde_scenarios(tmp_path):
    body = """
[scenario]
kind = fbsde
variant = adapted
lagrangian = kinetic_quadratic
m = 400
n_paths = 2000
seed = 11
"""
    code, _ = run(tmp_path, body)
    assert code == 0
    filt = body.replace("variant = adapted", "variant = filtering")
    filt = filt.replace("m = 400", "m = 200").replace("n_paths = 2000",
                                                      "n_paths = 3000")
    cfg = load_config(write_config(tmp_path, "f.ini", filt))
    assert run_scenario(cfg, tmp_path / "outf") == 0
    wrong = body.replace("lagrangian = kinetic_quadratic", "lagrangian = kinetic")
    wrong = wrong.replace("m = 400", "m = 200").replace("n_paths = 2000",
                                                        "n_paths = 3000")
    cfg = load_config(write_config(tmp_path, "w.ini", wrong))
    assert run_scenario(cfg, tmp_path / "outw") == 1


def test_navier_stokes_scenario(tmp_path):
    body = """
[scenario]
kind = navier-stokes
lagrangian = kinetic_taylor_green
m = 200
n_paths = 3000
seed = 12
"""
    code, _ = run(tmp_path, body)
    assert code == 0


def test_noether_scenarios(tmp_path):
    body = """
[scenario]
kind = noether
law = oscillator_adapted
lagrangian = kinetic_quadratic
family = rotation
m = 200
n_paths = 3000
seed = 13

[law]
dim = 2
x0 = 1.0, 0.0

[lagrangian]
dim = 2
"""
    code, _ = run(tmp_path, body)
    assert code == 0
    neg = body.replace("law = oscillator_adapted", "law = oscillator_nonradial")
    neg = neg.replace("lagrangian = kinetic_quadratic", "lagrangian = kinetic_x1sq")
    neg = neg.replace("[law]\ndim = 2\nx0 = 1.0, 0.0", "[law]")
    cfg = load_config(write_config(tmp_path, "neg.ini", neg))
    assert run_scenario(cfg, tmp_path / "outn") == 1


def test_reports_byte_identical_across_threads_and_reruns(tmp_path):
    blobs = {}
    for tag, threads in (("a", 1), ("b", 2), ("c", 8), ("rerun", 1)):
        cfg = load_config(write_config(tmp_path, f"{tag}.ini", EL_POS))
        out = tmp_path / tag
        assert run_scenario(cfg, out, threads=threads) == 0
        blobs[tag] = (out / "report.csv").read_bytes()
    assert blobs["a"] == blobs["b"] == blobs["c"] == blobs["rerun"]


def test_seed_override_changes_report(tmp_path):
    cfg = load_config(write_config(tmp_path, "s.ini", EL_POS))
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    run_scenario(cfg, out1, seed=123)
    cfg2 = load_config(write_config(tmp_path, "s2.ini", EL_POS))
    run_scenario(cfg2, out2, seed=456)
    assert (out1 / "report.csv").read_bytes() != (out2 / "report.csv").read_bytes()


def test_plot_renders_figures(tmp_path):
    pytest.importorskip("matplotlib")
    cfg = load_config(write_config(tmp_path, "p.ini", EL_POS))
    out = tmp_path / "plot_out"
    run_scenario(cfg, out, plot=True)
    assert (out / "paths.png").exists()
    assert (out / "statistics.png").exists()


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path, "cli.ini", EL_NEG)
    proc = subprocess.run(
        [sys.executable, "-m", "actionlab.cli", "run", "--config", str(cfg),
         "--out", str(tmp_path / "o")],
        capture_output=True, text=True)
    assert proc.returncode == 1
    assert "el-certify FAIL" in proc.stdout


def test_bundled_scenarios_parse():
    here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    scen_dir = os.path.join(here, "scenarios")
    names = sorted(os.listdir(scen_dir))
    assert len(names) >= 18
    kinds = set()
    for name in names:
        cfg = load_config(os.path.join(scen_dir, name))
        kinds.add(cfg["scenario"]["kind"])
    assert kinds == {"simulate", "action", "el-certify", "variational",
                     "noether", "bridge", "fbsde", "navier-stokes", "operators"}
