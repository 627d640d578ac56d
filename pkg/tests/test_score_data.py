import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scorenorm.core.grid import assemble_runtime_grid, disassemble_runtime_grid
from scorenorm.errors import FormatError, LabelError, ShapeError
from scorenorm.models.schemas import (
    Hypothesis,
    LabelMatrix,
    LgsmParams,
    Prior,
    ScoreMatrix,
    TrainingInfo,
    TrialContext,
)
from scorenorm.models.storage import ScoreRecord, TrialRecord, storage

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


# ============== Types ==============

def test_score_matrix_rejects_non_2d():
    with pytest.raises(ShapeError):
        ScoreMatrix(cells=[1.0, 2.0])
    with pytest.raises(ShapeError):
        ScoreMatrix(cells=np.zeros((0, 3)))


def test_label_matrix_needs_an_observed_cell():
    with pytest.raises(LabelError):
        LabelMatrix(codes=[["NA", "NA"]])


def test_label_matrix_accepts_tokens():
    labels = LabelMatrix(codes=[["tar", "non"], ["NA", "non"]])
    assert labels.hypothesis(0, 0) == Hypothesis.TARGET
    assert labels.hypothesis(1, 0) == Hypothesis.UNOBSERVED
    assert labels.observed.sum() == 3


def test_prior_bounds():
    assert Prior(pi=0.5).logit == 0.0
    with pytest.raises(ValueError):
        Prior(pi=1.0)


def test_lgsm_params_count_and_dims():
    params = LgsmParams(d=2, mu_tar=1, mu_non=0, var_tar=1, var_non=1,
                        alpha_tar=[1, 0], alpha_non=[0, 1], beta_tar=[0, 0], beta_non=[1, 1])
    assert params.n_parameters == 12
    assert params.nu_non == pytest.approx(3.0)
    with pytest.raises(ValueError):
        LgsmParams(d=2, mu_tar=1, mu_non=0, var_tar=1, var_non=1, alpha_tar=[1])
    with pytest.raises(ValueError):
        LgsmParams(d=0, mu_tar=1, mu_non=0, var_tar=0.0, var_non=1)


def test_trial_context_defaults_to_nontarget_cohort():
    ctx = TrialContext(s_trial=1.0, s_e=[0.1, 0.2], s_t=[0.3], s_inter=[[1.0, 2.0]])
    assert ctx.cohort_labels.shape == (2, 3)
    assert ctx.cohort_labels.nontarget.all()


def test_trial_context_shape_mismatch():
    with pytest.raises(ShapeError):
        TrialContext(s_trial=1.0, s_e=[0.1, 0.2], s_t=[0.3], s_inter=[[1.0]])


# ============== Runtime grid ==============

def test_empty_cohort_grid_is_the_trial():
    ctx = TrialContext(s_trial=0.7, s_e=[], s_t=[])
    scores, labels = assemble_runtime_grid(ctx, Hypothesis.TARGET)
    assert scores.cells.tolist() == [[0.7]]
    assert labels.hypothesis(0, 0) == Hypothesis.TARGET


def test_direct_placement():
    ctx = TrialContext(s_trial=1.0, s_e=[0.2], s_t=[0.1], s_inter=[[0.5]])
    scores, labels = assemble_runtime_grid(ctx, Hypothesis.NONTARGET)
    assert scores.cells.tolist() == [[0.5, 0.1], [0.2, 1.0]]
    assert labels.nontarget.all()


def test_trial_label_must_be_a_class():
    ctx = TrialContext(s_trial=1.0, s_e=[0.2], s_t=[0.1], s_inter=[[0.5]])
    with pytest.raises(LabelError):
        assemble_runtime_grid(ctx, Hypothesis.UNOBSERVED)


@st.composite
def contexts(draw):
    n = draw(st.integers(0, 4))
    m = draw(st.integers(0, 4))
    return TrialContext(
        s_trial=draw(finite),
        s_e=draw(arrays(np.float64, m, elements=finite)),
        s_t=draw(arrays(np.float64, n, elements=finite)),
        s_inter=draw(arrays(np.float64, (n, m), elements=finite)),
    )


@given(contexts(), st.sampled_from([Hypothesis.TARGET, Hypothesis.NONTARGET]))
def test_assemble_disassemble_round_trip(ctx, label):
    scores, labels = assemble_runtime_grid(ctx, label)
    back, back_label = disassemble_runtime_grid(scores, labels)
    assert back_label == label
    assert back.s_trial == ctx.s_trial
    np.testing.assert_array_equal(back.s_e, ctx.s_e)
    np.testing.assert_array_equal(back.s_t, ctx.s_t)
    np.testing.assert_array_equal(back.s_inter, ctx.s_inter)


# ============== Files ==============

def test_matrix_round_trip_is_exact(tmp_path, rng):
    cells = rng.normal(size=(3, 4)) * 1e3
    labels = LabelMatrix(codes=[["tar", "non", "NA", "non"], ["non", "tar", "non", "non"], ["non", "non", "tar", "NA"]])
    storage.write_matrix(tmp_path / "m.tsv", ScoreMatrix(cells=cells), labels)
    scores, back = storage.read_matrix(tmp_path / "m.tsv")
    np.testing.assert_array_equal(back.codes, labels.codes)
    np.testing.assert_array_equal(scores.cells[labels.observed], cells[labels.observed])


def test_na_cell_ignores_score_field(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("#scorenorm-matrix v1 rows=1 cols=2\n=1.5:tar\t=whatever:NA\n", encoding="utf-8")
    scores, labels = storage.read_matrix(path)
    assert labels.hypothesis(0, 1) == Hypothesis.UNOBSERVED
    assert scores.cells[0, 0] == 1.5


def test_ragged_row_names_line(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("#scorenorm-matrix v1 rows=2 cols=2\n=1:tar\t=2:non\n=3:non\n", encoding="utf-8")
    with pytest.raises(FormatError) as err:
        storage.read_matrix(path)
    assert err.value.line == 3
    assert ":3" in str(err.value)


@pytest.mark.parametrize("body, line", [
    ("#scorenorm-matrix v2 rows=1 cols=1\n=1:tar\n", 1),
    ("#scorenorm-matrix v1 rows=1 cols=1\n=abc:tar\n", 2),
    ("#scorenorm-matrix v1 rows=1 cols=1\n=1:maybe\n", 2),
    ("#scorenorm-matrix v1 rows=1 cols=1\n1:tar\n", 2),
    ("#scorenorm-matrix v1 rows=1 cols=1\n=inf:tar\n", 2),
])
def test_malformed_matrix_files(tmp_path, body, line):
    path = tmp_path / "m.tsv"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(FormatError) as err:
        storage.read_matrix(path)
    assert err.value.line == line


def test_trials_and_scores_files(tmp_path):
    trials = [TrialRecord("a", 0.1, 0, 1, Hypothesis.TARGET), TrialRecord("b", -2.5, 1, 0)]
    storage.write_trials(tmp_path / "trials.tsv", trials)
    assert storage.read_trials(tmp_path / "trials.tsv") == trials

    records = [ScoreRecord("a", 1 / 3, Hypothesis.TARGET, posterior=0.25), ScoreRecord("b", 2.0)]
    storage.write_scores(tmp_path / "scores.tsv", "tnorm", records)
    method, back = storage.read_scores(tmp_path / "scores.tsv")
    assert method == "tnorm"
    assert back == records


def test_model_file_round_trip_is_exact(tmp_path, rng):
    from tests.oracles import random_params

    params = random_params(rng, 3)
    info = TrainingInfo(seed=7, iterations=12, final_objective=-1234.5678901234567, converged=True, n_matrices=2)
    storage.write_model(tmp_path / "model.json", params, info)
    back, back_info = storage.read_model(tmp_path / "model.json")
    assert back == params
    assert back_info == info
