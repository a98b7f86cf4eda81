import json

import pytest

from cascadeopf import cli, failrate


def _cfg(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(kw))
    return str(path)


def test_flags_override_config(tmp_path):
    args = cli.build_parser().parse_args(["kmc", "--config", _cfg(tmp_path, seed=1, runs=7, case="case9"), "--seed", "5"])
    cfg = cli.make_config(args)
    assert (cfg.mode, cfg.seed, cfg.runs, cfg.case) == ("kmc", 5, 7, "case9")


def test_epsilon_converts_to_rate_limit():
    cfg = cli.ExperimentConfig(mode="fpacopf", epsilon=1e-3, horizon=3600.0)
    cfg.validate()
    assert cfg.rate_limit() == pytest.approx(failrate.rate_limit_from_probability(1e-3, 3600.0))


def test_digest_ignores_output_location():
    a = cli.ExperimentConfig(out="a", threads=1)
    b = cli.ExperimentConfig(out="b", threads=4)
    assert a.digest() == b.digest()
    assert a.digest() != cli.ExperimentConfig(seed=1).digest()


@pytest.mark.parametrize("argv", [
    ["fpacopf", "--case", "case9"],
    ["fpacopf", "--case", "case9", "--lambda-lim", "1e-9", "--epsilon", "0.01"],
    ["acopf", "--lambda-lim", "-1"],
    ["kmc", "--runs", "0"],
    ["acopf", "--case", "no_such_case"],
])
def test_bad_input_exits_2(tmp_path, argv, capsys):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path):
    assert cli.main(["acopf", "--config", _cfg(tmp_path, colour="red"), "--out", str(tmp_path)]) == 2


def test_parser_rejects_unknown_mode():
    with pytest.raises(SystemExit) as err:
        cli.main(["optimise"])
    assert err.value.code == 2


def test_solver_failure_exits_1(tmp_path, capsys):
    assert cli.main(["acopf", "--case", "case9", "--max-iter", "1", "--out", str(tmp_path)]) == 1
    assert "solver failure" in capsys.readouterr().err


def test_acopf_rerun_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["acopf", "--case", "case9", "--out", str(tmp_path / d)]) == 0
    a, b = (tmp_path / d / "solution.json" for d in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert doc["header"]["seed"] == 0 and len(doc["header"]["config_hash"]) == 16
    assert (tmp_path / "a" / "timing.json").exists()


def test_rates_from_dispatch_file(tmp_path):
    assert cli.main(["acopf", "--case", "case9", "--out", str(tmp_path / "opf")]) == 0
    assert cli.main(["rates", "--case", "case9", "--dispatch", str(tmp_path / "opf" / "solution.json"),
                     "--out", str(tmp_path / "rates")]) == 0
    text = (tmp_path / "rates" / "rates.csv").read_text()
    assert text.startswith("# config_hash")


def test_dispatch_file_must_match_case(tmp_path):
    assert cli.main(["acopf", "--case", "case9", "--out", str(tmp_path / "opf")]) == 0
    assert cli.main(["rates", "--case", "case30", "--dispatch", str(tmp_path / "opf" / "solution.json"),
                     "--out", str(tmp_path / "rates")]) == 2


def test_kmc_rerun_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["kmc", "--case", "case30", "--runs", "2", "--seed", "9", "--out", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert {"n0_traces.csv", "stats.csv", "plots.gp", "n0_failed.dat", "n0_timeline.dat"} <= set(names)
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n


def test_sweep_writes_one_directory_per_cell(tmp_path):
    cfg = _cfg(tmp_path, case="case9", sweep={"load_scale": [1.0, 1.02]})
    assert cli.main(["acopf", "--config", cfg, "--out", str(tmp_path / "sw")]) == 0
    cells = sorted(p.name for p in (tmp_path / "sw").iterdir())
    assert cells == ["load_scale=1.0", "load_scale=1.02"]
    obj = [json.loads((tmp_path / "sw" / c / "solution.json").read_text())["solution"]["objective"] for c in cells]
    assert obj[1] > obj[0]


def test_bad_sweep_key_exits_2(tmp_path):
    cfg = _cfg(tmp_path, case="case9", sweep={"seed": [1, 2]})
    assert cli.main(["acopf", "--config", cfg, "--out", str(tmp_path)]) == 2
