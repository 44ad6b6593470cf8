import json
import re

import numpy as np
import pytest
from click.testing import CliRunner

from chf.cli import main
from chf.errors import InvalidConfig, UnknownExperiment
from chf.harness import (
    CRITERIA, EXPERIMENTS, ExperimentSpec, experiment, get_experiment, list_experiments, make_rng,
    resolve_params, run, validate,
)


def test_rng_is_seeded_philox():
    a, b = make_rng(42), make_rng(42)
    assert isinstance(a.bit_generator, np.random.Philox)
    assert np.array_equal(a.standard_normal(5), b.standard_normal(5))
    assert not np.array_equal(make_rng(1).standard_normal(5), make_rng(2).standard_normal(5))


def test_spec_from_dict():
    spec = ExperimentSpec.from_dict({"name": "priming", "seed": 3, "params": {"dim": 4}})
    assert (spec.name, spec.seed, spec.params, spec.output_dir) == ("priming", 3, {"dim": 4}, "runs")
    with pytest.raises(InvalidConfig):
        ExperimentSpec.from_dict({"name": "priming", "colour": "red"})
    with pytest.raises(InvalidConfig):
        ExperimentSpec.from_dict({"seed": 1})


def test_unknown_experiment():
    with pytest.raises(UnknownExperiment):
        get_experiment("nonexistent")
    with pytest.raises(KeyError):
        run(ExperimentSpec("nonexistent"))


def test_parameter_validation():
    exp = get_experiment("gain-sweep")
    params = resolve_params(exp, {"T": "10", "gains": [1, 2]})
    assert params["T"] == 10.0 and params["gains"] == [1, 2]
    with pytest.raises(InvalidConfig):
        resolve_params(exp, {"bogus": 1})
    with pytest.raises(InvalidConfig):
        resolve_params(exp, {"T": "soon"})
    with pytest.raises(InvalidConfig):
        resolve_params(exp, {"gains": 3})
    with pytest.raises(InvalidConfig):
        validate(ExperimentSpec("priming", params={"presentations": 2.5}))


def test_every_criterion_runs_in_exactly_one_experiment():
    owners = {}
    for exp in list_experiments():
        for c in exp.criteria:
            owners.setdefault(c, []).append(exp.name)
    assert set(owners) == set(CRITERIA)
    assert all(len(v) == 1 for v in owners.values())
    numbered = {int(m.group(1)) for c in CRITERIA for m in [re.match(r"c(\d+)-", c)] if m}
    assert numbered == set(range(1, 14))


def test_run_writes_summary_and_series(tmp_path):
    res = run(ExperimentSpec("oracle-match", 0, {"instances": 2}, str(tmp_path)))
    assert res.run_dir == tmp_path / "oracle-match-seed0"
    assert all(f.exists() for f in res.series_files)
    text = (res.run_dir / "summary.json").read_text()
    data = json.loads(text)
    assert list(data) == sorted(data)
    assert "elapsed" not in text
    assert set(data["verdicts"]) <= set(CRITERIA)
    assert data["params"]["instances"] == 2


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(InvalidConfig):
        run(ExperimentSpec("oracle-match", 0, {"instances": 1}, str(blocker)))


def test_unregistered_verdict_rejected(tmp_path, monkeypatch):
    monkeypatch.setitem(EXPERIMENTS, "toy", None)

    @experiment("toy", ["c5-oracle"])
    def toy(ctx):
        return {}, {"c6-deconv": True}

    with pytest.raises(KeyError):
        run(ExperimentSpec("toy", 0, {}, str(tmp_path)))
    with pytest.raises(KeyError):
        experiment("toy2", ["not-a-criterion"])


def test_gain_sweep_is_byte_identical(tmp_path):
    blobs = []
    for sub in ("a", "b"):
        res = run(ExperimentSpec("gain-sweep", 1, {}, str(tmp_path / sub)))
        blobs.append((res.run_dir / "summary.json").read_bytes())
    assert blobs[0] == blobs[1]


# --- CLI ----------------------------------------------------------------------

def test_cli_list_and_describe():
    runner = CliRunner()
    out = runner.invoke(main, ["list"])
    assert out.exit_code == 0
    for exp in list_experiments():
        assert exp.name in out.output
    desc = runner.invoke(main, ["describe", "ica-bench"])
    assert desc.exit_code == 0 and '"updates": 50000' in desc.output


def test_cli_help_lists_parameters():
    out = CliRunner().invoke(main, ["run", "--help"])
    assert out.exit_code == 0
    assert "gain-sweep" in out.output and "slope_lo" in out.output


def test_cli_run_exit_codes(tmp_path):
    runner = CliRunner()
    ok = runner.invoke(main, ["run", "oracle-match", "--out", str(tmp_path), "--param", "instances=2"])
    assert ok.exit_code == 0, ok.output
    assert "PASS  c5-oracle" in ok.output
    failing = runner.invoke(main, ["run", "oracle-match", "--out", str(tmp_path),
                                   "--param", "instances=1", "--param", "tol=1e-30"])
    assert failing.exit_code == 1 and "FAIL  c5-oracle" in failing.output
    assert runner.invoke(main, ["run", "bogus", "--out", str(tmp_path)]).exit_code == 2
    assert runner.invoke(main, ["run", "oracle-match", "--out", str(tmp_path),
                                "--param", "nope=1"]).exit_code == 2


def test_cli_spec_file_and_validate(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"name": "oracle-match", "seed": 5, "params": {"instances": 1},
                                "output_dir": str(tmp_path / "out")}))
    runner = CliRunner()
    val = runner.invoke(main, ["validate", str(spec)])
    assert val.exit_code == 0 and json.loads(val.output)["params"]["instances"] == 1
    res = runner.invoke(main, ["run", "--spec", str(spec)])
    assert res.exit_code == 0
    assert (tmp_path / "out" / "oracle-match-seed5" / "summary.json").exists()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "oracle-match", "params": {"zzz": 1}}))
    assert runner.invoke(main, ["validate", str(bad)]).exit_code == 2
