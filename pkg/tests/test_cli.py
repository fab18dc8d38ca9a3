import csv
import json
import subprocess
import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

from cimeta import cli
from cimeta.evaluate import ESTIMATOR_IDS, BootstrapSpec, EstimatorSettings, bootstrap_ci, loso_evaluate, \
    make_estimator, run_estimator
from cimeta.ipd_core import partition, write_dataset
from simdata import age_disjoint, from_arrays, separated_toy, small_instance

BASE = """\
config_version = 1

[data]
path = "data.csv"
treatment = "T"
control = "C"

[[covariates]]
name = "x"
kind = "continuous"
"""

CATEGORICAL = """
[[covariates]]
name = "g"
kind = "categorical"
levels = ["lo", "mid", "hi"]
"""


def setup_run(tmp_path, ds, analysis="", extra="", categorical=False, covariate="x"):
    write_dataset(ds, tmp_path / "data.csv")
    text = BASE.replace('name = "x"', f'name = "{covariate}"')
    if categorical:
        text += CATEGORICAL
    text += f"\n[analysis]\n{analysis}\n{extra}\n[output]\ndir = \"out\"\n"
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return path


def run(argv):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return cli.main([str(a) for a in argv])


def records(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


class TestConfig:
    def test_defaults(self, tmp_path):
        cfg = cli.load_config(setup_run(tmp_path, small_instance(0, categorical=False)))
        assert cfg.target == "loso" and cfg.estimators == ("om",)
        assert cfg.data_path == tmp_path / "data.csv"
        assert cfg.output_dir == tmp_path / "out"
        assert cfg.bootstrap is None and cfg.settings == EstimatorSettings()

    def test_unknown_key_names_line_and_field(self, tmp_path):
        path = setup_run(tmp_path, small_instance(0, categorical=False), 'target = "s0"\nestimatrs = ["om"]')
        with pytest.raises(cli.ConfigError) as info:
            cli.load_config(path)
        lineno = path.read_text().splitlines().index('estimatrs = ["om"]') + 1
        assert f"line {lineno}" in str(info.value)
        assert "[analysis].estimatrs: unknown key" in str(info.value)

    def test_unknown_estimator(self, tmp_path):
        path = setup_run(tmp_path, small_instance(0, categorical=False), 'estimators = ["om", "gcomp"]')
        with pytest.raises(cli.ConfigError, match=r"line \d+: \[analysis\].estimators: unknown estimator 'gcomp'"):
            cli.load_config(path)

    def test_wrong_type(self, tmp_path):
        path = setup_run(tmp_path, small_instance(0, categorical=False), 'clip_epsilon = "tiny"')
        with pytest.raises(cli.ConfigError, match=r"\[analysis\].clip_epsilon: must be of type float"):
            cli.load_config(path)

    def test_seed_required_with_bootstrap(self, tmp_path):
        path = setup_run(tmp_path, small_instance(0, categorical=False), extra="[bootstrap]\nreplicates = 10\n")
        with pytest.raises(cli.ConfigError, match=r"\[bootstrap\].seed: is required"):
            cli.load_config(path)

    def test_version_required(self, tmp_path):
        path = setup_run(tmp_path, small_instance(0, categorical=False))
        path.write_text(path.read_text().replace("config_version = 1", "config_version = 2"))
        with pytest.raises(cli.ConfigError, match="config_version: must be 1"):
            cli.load_config(path)

    def test_malformed_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("config_version = \n")
        with pytest.raises(cli.ConfigError, match="line 1"):
            cli.load_config(path)

    def test_transforms_and_lists(self, tmp_path):
        ds = small_instance(0, categorical=False)
        ds = from_arrays(ds.study, ds.arm, ds.outcome, {"x": np.exp(ds.column("x"))}, ds.schema)
        path = setup_run(tmp_path, ds, 'outcome_covariates = ["x"]\nn_jobs = 2',
                         extra='[[transforms]]\ncovariate = "x"\nkind = "log"\n')
        cfg = cli.load_config(path)
        assert cfg.transforms == (("x", "log"),) and cfg.outcome_covariates == ("x",) and cfg.n_jobs == 2
        loaded = cli.load_run_dataset(cfg)
        np.testing.assert_allclose(loaded.column("x"), small_instance(0, categorical=False).column("x"),
                                   rtol=1e-12)

    def test_exit_code_one(self, tmp_path, capsys):
        path = setup_run(tmp_path, small_instance(0, categorical=False), "bogus = 1")
        assert run(["loso", path]) == cli.EXIT_CONFIG
        assert "[analysis].bogus" in capsys.readouterr().err


class TestTransport:
    def test_om_two_study_toy(self, tmp_path):
        ds = small_instance(0, n_studies=2, categorical=False)
        path = setup_run(tmp_path, ds, 'target = "s0"\nestimators = ["om"]')
        assert run(["transport", path]) == cli.EXIT_OK
        [rec] = records(tmp_path / "out" / "transport_s0.jsonl")
        assert rec["estimator"] == "om" and rec["failure"] is None
        assert rec["estimate"] == run_estimator(ds, partition(ds, "s0"), "om").point
        table = (tmp_path / "out" / "transport_s0.txt").read_text()
        assert table.count("\n") == 3 and rec["estimate_display"] in table

    def test_ipw_separated_infinite_weight(self, tmp_path, capsys):
        path = setup_run(tmp_path, separated_toy(), 'target = "t"\nestimators = ["ipw"]\nclip_epsilon = 0.0')
        assert run(["transport", path]) == cli.EXIT_ESTIMATION
        err = capsys.readouterr().err
        assert "infinite weight" in err and "rows pinned at the bound: [" in err
        [rec] = records(tmp_path / "out" / "transport_t.jsonl")
        assert rec["estimate"] is None and "infinite weight" in rec["failure"]

    def test_clip_makes_ipw_finite(self, tmp_path):
        path = setup_run(tmp_path, separated_toy(), 'target = "t"\nestimators = ["ipw"]\nclip_epsilon = 0.01')
        assert run(["transport", path]) == cli.EXIT_OK

    def test_all_estimators_match_library_bitwise(self, tmp_path):
        ds = small_instance(4, n_studies=6, n_per_study=40)
        ests = ", ".join(f'"{e}"' for e in ESTIMATOR_IDS)
        path = setup_run(tmp_path, ds, f'target = "s1"\nestimators = [{ests}]', categorical=True)
        assert run(["transport", path]) == cli.EXIT_OK
        got = {r["estimator"]: r["estimate"] for r in records(tmp_path / "out" / "transport_s1.jsonl")}
        assert list(got) == list(ESTIMATOR_IDS)
        assign = partition(ds, "s1")
        for e in ESTIMATOR_IDS:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                direct = run_estimator(ds, assign, e, EstimatorSettings()).point
            assert got[e] is not None
            assert np.float64(got[e]).tobytes() == np.float64(direct).tobytes(), e
        diag = json.loads((tmp_path / "out" / "transport_s1_diagnostics.json").read_text())
        assert set(diag) == {"ipw", "ipw-h", "np-ipw", "np-ipw-h", "dr"}

    def test_bootstrap_ci_written(self, tmp_path):
        ds = small_instance(2, categorical=False)
        path = setup_run(tmp_path, ds, 'target = "s0"\nestimators = ["om"]',
                         extra="[bootstrap]\nreplicates = 30\nseed = 5\nlevel = 0.9\n")
        assert run(["transport", path]) == cli.EXIT_OK
        [rec] = records(tmp_path / "out" / "transport_s0.jsonl")
        lo, hi = bootstrap_ci(make_estimator("om"), ds, partition(ds, "s0"), BootstrapSpec(30, 5), 0.9)
        assert (rec["ci_lo"], rec["ci_hi"], rec["ci_level"]) == (lo, hi, 0.9)

    def test_needs_named_target(self, tmp_path):
        path = setup_run(tmp_path, small_instance(0, categorical=False))
        assert run(["transport", path]) == cli.EXIT_CONFIG
        assert run(["transport", path, "--target", "s2"]) == cli.EXIT_OK
        assert (tmp_path / "out" / "transport_s2.txt").exists()

    def test_data_error_exit_two(self, tmp_path, capsys):
        path = setup_run(tmp_path, small_instance(0, categorical=False), 'target = "s0"')
        (tmp_path / "data.csv").write_text("study,arm,outcome\nA,T,1\n")
        assert run(["transport", path]) == cli.EXIT_DATA
        assert "missing required column" in capsys.readouterr().err

    def test_unknown_target_is_data_error(self, tmp_path):
        path = setup_run(tmp_path, small_instance(0, categorical=False), 'target = "nope"')
        assert run(["transport", path]) == cli.EXIT_DATA

    def test_out_override(self, tmp_path):
        path = setup_run(tmp_path, small_instance(0, categorical=False), 'target = "s0"')
        assert run(["transport", path, "--out", tmp_path / "elsewhere"]) == cli.EXIT_OK
        assert (tmp_path / "elsewhere" / "transport_s0.jsonl").exists()


class TestLoso:
    def test_two_study_fe_table(self, tmp_path):
        path = setup_run(tmp_path, small_instance(0, n_studies=2, categorical=False), 'estimators = ["fe-ma"]')
        # a single contributing study cannot be pooled, so both cells fail but the run completes
        assert run(["loso", path]) == cli.EXIT_ESTIMATION
        lines = (tmp_path / "out" / "loso.txt").read_text().splitlines()
        assert lines[0].split() == ["Target", "Study", "Observed", "TE", "FE", "MA"]
        assert [ln.split()[0] for ln in lines[1:3]] == ["s0", "s1"]
        assert "FAIL" in lines[1] and "Failed cells:" in lines

    def test_two_study_om_table(self, tmp_path):
        ds = small_instance(0, n_studies=2, categorical=False)
        path = setup_run(tmp_path, ds, 'estimators = ["om"]')
        assert run(["loso", path]) == cli.EXIT_OK
        lines = (tmp_path / "out" / "loso.txt").read_text().splitlines()
        assert len(lines) == 5 and lines[3].startswith("Avg Abs Diff") and lines[4].startswith("St Abs Diff")

    def test_six_study_layout(self, tmp_path):
        ds = small_instance(6, n_studies=6, n_per_study=40)
        ests = ", ".join(f'"{e}"' for e in ESTIMATOR_IDS)
        path = setup_run(tmp_path, ds, f"estimators = [{ests}]\nn_jobs = 3", categorical=True)
        run(["loso", path])
        lines = (tmp_path / "out" / "loso.txt").read_text().splitlines()
        header = lines[0]
        for title in cli.COLUMN_TITLES.values():
            assert title in header
        body = lines[1:7]
        assert [ln.split()[0] for ln in body] == [f"s{i}" for i in range(6)]
        assert all(len(ln.split()) == 11 for ln in body)

    def test_table_numbers_appear_in_records(self, tmp_path):
        ds = small_instance(3, n_studies=4, n_per_study=40)
        path = setup_run(tmp_path, ds, 'estimators = ["om", "ipw-h", "re-ma"]', categorical=True)
        run(["loso", path])
        table = (tmp_path / "out" / "loso.txt").read_text()
        recs = records(tmp_path / "out" / "loso.jsonl")
        displays = set()
        for r in recs:
            displays.update(v for k, v in r.items() if k.endswith("display"))
        tokens = [tok for ln in table.split("\nFailed cells:")[0].splitlines()[1:]
                  for tok in ln.split() if tok[0].isdigit() or tok[0] == "-"]
        assert tokens
        for tok in tokens:
            if tok.startswith("s"):
                continue
            assert tok in displays, tok
        # full-precision records agree with the library
        report = loso_evaluate(ds, ["om", "ipw-h", "re-ma"])
        for r in recs:
            if r["kind"] == "cell":
                assert r["estimate"] == report.cells[(r["target"], r["estimator"])].estimate
                assert r["observed_te"] == report.observed[r["target"]].te
            elif r["metric"] == "avg_abs_diff":
                assert r["value"] == report.summary(r["estimator"]).avg_abs_diff

    def test_rerun_byte_identical(self, tmp_path):
        ds = small_instance(9, n_studies=3, n_per_study=40)
        path = setup_run(tmp_path, ds, 'estimators = ["om", "np-ipw-h", "dr"]\nn_jobs = 4',
                         extra="[bootstrap]\nreplicates = 10\nseed = 3\n", categorical=True)
        run(["loso", path, "--out", tmp_path / "a"])
        run(["loso", path, "--out", tmp_path / "b"])
        for name in ("loso.txt", "loso.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert all("ci_lo" in r for r in records(tmp_path / "a" / "loso.jsonl") if r["kind"] == "cell")


class TestDiagnose:
    def test_age_shift_flagged(self, tmp_path):
        ds, _ = age_disjoint(0)
        path = setup_run(tmp_path, ds, 'target = "child"\nparticipation_method = "kernel"', covariate="age")
        assert run(["diagnose", path]) == cli.EXIT_OK
        rec = json.loads((tmp_path / "out" / "diagnose_child.json").read_text())
        assert rec["implied_weight_sum"] < 0.7 and rec["implied_weight_flag"]
        assert rec["hajek_implied_weight_sum"] == pytest.approx(1.0, abs=1e-12)
        overlap = rec["overlap"]["age"]
        assert overlap["target"]["max"] < 17 and overlap["contributing"]["min"] >= 12
        assert {s["study"] for s in rec["studies"]} == {"adult0", "adult1", "adult2"}

    def test_identical_distributions(self, tmp_path):
        rng = np.random.default_rng(1)
        n = 600
        x = rng.normal(size=n)
        study = np.repeat(["a", "b", "c"], 200)
        arm = np.where(rng.random(n) < 0.5, "T", "C")
        ds = from_arrays(study, arm, x + rng.normal(size=n), {"x": x}, small_instance(0, categorical=False).schema)
        res = cli.diagnose(ds, "a", EstimatorSettings())
        rec = res["record"]
        assert rec["implied_weight_sum"] == pytest.approx(1.0, abs=0.05) and not rec["implied_weight_flag"]
        q = rec["weight_quantiles"]
        assert 0.5 < q["min"] and q["max"] < 2.0
        assert rec["top_decile_share"] == pytest.approx(0.1, abs=0.03)

    def test_long_tail_top_decile(self):
        rng = np.random.default_rng(3)
        x = np.concatenate([rng.lognormal(0.0, 1.5, 300), rng.normal(1.0, 0.3, 600)])
        study = np.repeat(["t", "c1", "c2"], 300)
        arm = np.where(rng.random(900) < 0.5, "T", "C")
        ds = from_arrays(study, arm, rng.normal(size=900), {"x": x}, small_instance(0, categorical=False).schema)
        rec = cli.diagnose(ds, "t", EstimatorSettings(participation_method="kernel"))["record"]
        assert rec["top_decile_share"] > 0.3

    def test_weights_csv(self, tmp_path):
        ds = small_instance(1, categorical=False)
        path = setup_run(tmp_path, ds, 'target = "s1"')
        assert run(["diagnose", path]) == cli.EXIT_OK
        with (tmp_path / "out" / "weights_s1.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assign = partition(ds, "s1")
        assert [int(r["row_id"]) for r in rows] == assign.contributing_rows.tolist()
        assert all(r["study"] != "s1" for r in rows)
        assert list(rows[0]) == ["row_id", "study", "arm", "weight", "participation_prob", "treatment_prob"]
        w = np.array([float(r["weight"]) for r in rows])
        rec = json.loads((tmp_path / "out" / "diagnose_s1.json").read_text())
        # each arm contributes half of the implied weight total
        assert w.sum() / (2 * assign.n_target) == pytest.approx(rec["implied_weight_sum"], rel=1e-12)

    def test_separated_logistic_is_estimation_error(self, tmp_path):
        path = setup_run(tmp_path, separated_toy(), 'target = "t"')
        assert run(["diagnose", path]) == cli.EXIT_ESTIMATION


def test_screen_command(tmp_path):
    path = setup_run(tmp_path, small_instance(0, n_per_study=200), extra="[screening]\nalpha = 0.05\n",
                     categorical=True)
    assert run(["screen", path]) == cli.EXIT_OK
    rec = json.loads((tmp_path / "out" / "screening.json").read_text())
    assert set(rec["pvalues"]) == {"x", "g"} and "x" in rec["selected"]


def test_module_entry_point(tmp_path):
    path = setup_run(tmp_path, small_instance(0, categorical=False), 'target = "s0"')
    proc = subprocess.run([sys.executable, "-m", "cimeta", "transport", str(path)], capture_output=True, text=True)
    assert proc.returncode == 0 and "OM" in proc.stdout


def test_fmt3():
    assert cli.fmt3(-0.0004) == "0.000"
    assert cli.fmt3(float("nan")) == "NA" and cli.fmt3(None) == "NA"
    assert cli.fmt3(1.23456) == "1.235"
