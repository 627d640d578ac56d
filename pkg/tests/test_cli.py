import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from scorenorm.api.commands import cli
from scorenorm.config import settings
from scorenorm.core.lgsm import normalize_trial
from scorenorm.models.schemas import Hypothesis, LabelMatrix, RunConfig, Subcommand, TrainingInfo, TrialContext
from scorenorm.models.storage import ScoreRecord, TrialRecord, storage
from tests.oracles import random_params

GENERATOR = {
    "d": 1, "mu_tar": 2.0, "mu_non": -1.0, "var_tar": 0.5, "var_non": 1.0,
    "alpha_tar": [0.6], "beta_tar": [0.4], "alpha_non": [0.4], "beta_non": [0.3],
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def params_file(tmp_path):
    path = tmp_path / "params.yaml"
    path.write_text(yaml.safe_dump(GENERATOR), encoding="utf-8")
    return path


def invoke(runner, *args):
    return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False)


def simulate(runner, params_file, out, *extra):
    result = invoke(runner, "simulate", "--params", params_file, "--out", out, "--seed", 3,
                    "--n-matrices", 3, "--rows", 6, "--cols", 6, *extra)
    assert result.exit_code == 0, result.output
    return out


# ============== simulate ==============

def test_simulate_is_byte_identical_for_a_seed(runner, params_file, tmp_path):
    a = simulate(runner, params_file, tmp_path / "a", "--eval-trials", 4, 6, "--cohort-size", 3, 2)
    b = simulate(runner, params_file, tmp_path / "b", "--eval-trials", 4, 6, "--cohort-size", 3, 2)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_simulate_manifest_lists_every_matrix(runner, params_file, tmp_path):
    out = simulate(runner, params_file, tmp_path / "sim")
    manifest = storage.read_manifest(out / "manifest.json")
    assert len(manifest["matrices"]) == 3
    assert manifest["seed"] == 3
    assert manifest["params"]["mu_tar"] == 2.0


def test_simulate_zero_matrices_is_a_usage_error(runner, params_file, tmp_path):
    result = invoke(runner, "simulate", "--params", params_file, "--out", tmp_path / "x", "--n-matrices", 0)
    assert result.exit_code == 2


def test_simulate_bad_params_is_a_usage_error(runner, tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({**GENERATOR, "var_tar": -1.0}), encoding="utf-8")
    result = invoke(runner, "simulate", "--params", path, "--out", tmp_path / "x")
    assert result.exit_code == 2


def test_config_file_merges_under_flags(runner, params_file, tmp_path):
    config = tmp_path / "run.yaml"
    config.write_text(yaml.safe_dump({
        "seed": 5,
        "simulate": {"params_path": str(params_file), "rows": 4, "cols": 5, "n_matrices": 2},
    }), encoding="utf-8")
    out = tmp_path / "sim"
    result = invoke(runner, "--config", config, "simulate", "--out", out, "--n-matrices", 3)
    assert result.exit_code == 0, result.output

    manifest = storage.read_manifest(out / "manifest.json")
    assert len(manifest["matrices"]) == 3
    assert manifest["seed"] == 5
    scores, _ = storage.read_matrix(manifest["matrices"][0])
    assert scores.shape == (4, 5)


def test_run_defaults_follow_settings(tmp_path, monkeypatch):
    matrix = tmp_path / "m.tsv"
    matrix.write_text("", encoding="utf-8")
    monkeypatch.setattr(settings, "EM_TOL", 1e-3)
    monkeypatch.setattr(settings, "EM_MAX_ITERS", 7)
    monkeypatch.setattr(settings, "DEFAULT_DIM", 2)
    monkeypatch.setattr(settings, "DEFAULT_PRIOR", 0.3)
    config = RunConfig(subcommand=Subcommand.TRAIN, inputs=[str(matrix)])
    assert (config.tol, config.max_iters, config.dim, config.prior) == (1e-3, 7, 2, 0.3)
    assert RunConfig(subcommand=Subcommand.TRAIN, inputs=[str(matrix)], tol=1e-5).tol == 1e-5


def test_train_uses_settings_when_flags_are_absent(runner, params_file, tmp_path, monkeypatch):
    out = simulate(runner, params_file, tmp_path / "sim")
    monkeypatch.setattr(settings, "DEFAULT_DIM", 0)
    model = tmp_path / "model.json"
    result = invoke(runner, "train", out / "manifest.json", "--out", model)
    assert result.exit_code == 0, result.output
    params, _ = storage.read_model(model)
    assert params.d == 0


# ============== train / inspect-model ==============

def test_train_without_hidden_variables(runner, params_file, tmp_path):
    out = simulate(runner, params_file, tmp_path / "sim")
    model = tmp_path / "model.json"
    result = invoke(runner, "train", out / "manifest.json", "--dim", 0, "--out", model)
    assert result.exit_code == 0, result.output
    assert "converged" in result.output

    params, info = storage.read_model(model)
    assert params.d == 0
    assert info.iterations == 1 and info.converged
    trace = json.loads((tmp_path / "model.trace.json").read_text(encoding="utf-8"))
    assert len(trace["objective"]) == 2


def test_train_is_deterministic(runner, params_file, tmp_path):
    out = simulate(runner, params_file, tmp_path / "sim")
    for name in ("m1.json", "m2.json"):
        result = invoke(runner, "train", out / "manifest.json", "--dim", 1, "--max-iters", 5, "--out", tmp_path / name)
        assert result.exit_code == 0, result.output
    assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


def test_train_without_targets_fails(runner, params_file, tmp_path):
    out = simulate(runner, params_file, tmp_path / "sim", "--layout", "none")
    result = invoke(runner, "train", out / "manifest.json", "--out", tmp_path / "model.json")
    assert result.exit_code == 2


def test_inspect_model(runner, tmp_path, rng):
    params = random_params(rng, 2)
    path = tmp_path / "model.json"
    storage.write_model(path, params, TrainingInfo(seed=1, iterations=3, final_objective=-10.0, converged=True))
    result = invoke(runner, "inspect-model", path)
    assert result.exit_code == 0
    summary = json.loads(result.stdout)[str(path)]
    assert summary["nu_tar"] == pytest.approx(params.nu_tar)
    assert summary["n_parameters"] == 12
    assert summary["training"]["iterations"] == 3


# ============== normalize ==============

def _hand_cohort(tmp_path, test_row):
    cohort = storage.write_cohort(
        tmp_path / "cohort",
        s_inter=np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]]),
        enroll=np.array([[0.0, 2.0]]),
        test=np.array([test_row]),
    )
    trials = tmp_path / "trials.tsv"
    storage.write_trials(trials, [TrialRecord("t0", 3.0, 0, 0, Hypothesis.TARGET)])
    return cohort, trials


def test_normalize_tnorm_example(runner, tmp_path):
    cohort, trials = _hand_cohort(tmp_path, [1.0, 2.0, 3.0])
    out = tmp_path / "scores.tsv"
    result = invoke(runner, "normalize", "--method", "tnorm", "--cohort", cohort, "--trials", trials, "--out", out)
    assert result.exit_code == 0, result.output
    method, records = storage.read_scores(out)
    assert method == "tnorm"
    assert records[0].score == pytest.approx(1.0)
    assert records[0].label == Hypothesis.TARGET


def test_normalize_degenerate_cohort_fails(runner, tmp_path):
    cohort, trials = _hand_cohort(tmp_path, [2.0, 2.0, 2.0])
    result = invoke(runner, "normalize", "--method", "tnorm", "--cohort", cohort, "--trials", trials,
                    "--out", tmp_path / "scores.tsv")
    assert result.exit_code == 2


def test_normalize_raw_is_identity(runner, params_file, tmp_path):
    out = simulate(runner, params_file, tmp_path / "sim", "--eval-trials", 3, 5)
    scores = tmp_path / "raw.tsv"
    result = invoke(runner, "normalize", "--method", "raw", "--cohort", out / "eval" / "cohort.json",
                    "--trials", out / "eval" / "trials.tsv", "--out", scores, "--posterior")
    assert result.exit_code == 0, result.output

    trials = storage.read_trials(out / "eval" / "trials.tsv")
    _, records = storage.read_scores(scores)
    assert [r.score for r in records] == [t.s_trial for t in trials]
    assert [r.label for r in records] == [t.label for t in trials]
    assert all(r.posterior is not None for r in records)


def test_normalize_lgsm_matches_per_trial_scoring(runner, params_file, tmp_path, rng):
    out = simulate(runner, params_file, tmp_path / "sim", "--eval-trials", 10, 20, "--cohort-size", 4, 3)
    params = random_params(rng, 1)
    model = tmp_path / "model.json"
    storage.write_model(model, params, TrainingInfo(seed=0, iterations=1, final_objective=0.0, converged=True))

    scores = tmp_path / "lgsm.tsv"
    result = invoke(runner, "normalize", "--method", "lgsm", "--model", model,
                    "--cohort", out / "eval" / "cohort.json", "--trials", out / "eval" / "trials.tsv", "--out", scores)
    assert result.exit_code == 0, result.output

    cohort = storage.read_cohort(out / "eval" / "cohort.json")
    trials = storage.read_trials(out / "eval" / "trials.tsv")
    _, records = storage.read_scores(scores)
    for trial, record in zip(trials, records):
        ctx = TrialContext(
            s_trial=trial.s_trial,
            s_e=cohort.enroll[trial.enroll_row],
            s_t=cohort.test[trial.test_row],
            s_inter=cohort.s_inter,
            cohort_labels=cohort.grid_labels(),
        )
        assert record.score == pytest.approx(normalize_trial(params, ctx), abs=1e-10)


def test_normalize_lgsm_skips_unobserved_cohort_cells(runner, tmp_path, rng):
    cohort = storage.write_cohort(
        tmp_path / "cohort",
        s_inter=rng.normal(size=(3, 3)),
        enroll=rng.normal(size=(2, 3)),
        test=rng.normal(size=(2, 3)),
        labels=LabelMatrix.full((3, 3)).with_cell(0, 2, Hypothesis.UNOBSERVED),
    )
    trials = tmp_path / "trials.tsv"
    storage.write_trials(trials, [TrialRecord("a", 1.0, 0, 0, Hypothesis.TARGET),
                                  TrialRecord("b", -0.5, 1, 1, Hypothesis.NONTARGET)])
    model = tmp_path / "model.json"
    storage.write_model(model, random_params(rng, 1),
                        TrainingInfo(seed=0, iterations=1, final_objective=0.0, converged=True))

    out = tmp_path / "lgsm.tsv"
    result = invoke(runner, "normalize", "--method", "lgsm", "--model", model,
                    "--cohort", cohort, "--trials", trials, "--out", out)
    assert result.exit_code == 0, result.output
    _, records = storage.read_scores(out)
    assert len(records) == 2
    assert all(np.isfinite(r.score) and r.error == "" for r in records)


def test_normalize_lgsm_needs_a_model(runner, params_file, tmp_path):
    out = simulate(runner, params_file, tmp_path / "sim", "--eval-trials", 2, 2)
    result = invoke(runner, "normalize", "--method", "lgsm", "--cohort", out / "eval" / "cohort.json",
                    "--trials", out / "eval" / "trials.tsv")
    assert result.exit_code == 2


# ============== eval ==============

def test_eval_separable_scores(runner, tmp_path):
    scores = tmp_path / "scores.tsv"
    storage.write_scores(scores, "raw", [
        ScoreRecord("a", 2.0, Hypothesis.TARGET),
        ScoreRecord("b", 3.0, Hypothesis.TARGET),
        ScoreRecord("c", 0.0, Hypothesis.NONTARGET),
        ScoreRecord("d", 1.0, Hypothesis.NONTARGET),
        ScoreRecord("e", float("nan"), Hypothesis.TARGET, error="degenerate"),
    ])
    report_path = tmp_path / "report.json"
    result = invoke(runner, "eval", f"sep={scores}", "--out", report_path)
    assert result.exit_code == 0, result.output

    report = storage.read_report(report_path)
    summary = report["methods"]["sep"]
    assert summary["eer"] == 0.0
    assert summary["skipped"] == 1
    assert summary["det"]["probit_pfa"][0] is None
    assert report["comparison"][0]["method"] == "sep"
    assert (tmp_path / "det_sep.tsv").exists()


def test_eval_duplicate_names_fail(runner, tmp_path):
    scores = tmp_path / "scores.tsv"
    storage.write_scores(scores, "raw", [ScoreRecord("a", 1.0, Hypothesis.TARGET),
                                         ScoreRecord("b", 0.0, Hypothesis.NONTARGET)])
    result = invoke(runner, "eval", scores, scores, "--out", tmp_path / "report.json")
    assert result.exit_code == 2


def test_eval_missing_file_fails(runner, tmp_path):
    result = invoke(runner, "eval", tmp_path / "nope.tsv")
    assert result.exit_code == 2
