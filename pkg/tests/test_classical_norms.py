import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from scorenorm.core.classical import cohort_stats, snorm, tnorm, znorm, ztnorm
from scorenorm.errors import DegenerateCohortError
from scorenorm.models.schemas import TrialContext

moderate = st.floats(min_value=-100, max_value=100, allow_nan=False)
cohorts = st.lists(moderate, min_size=2, max_size=20).filter(lambda c: np.std(c, ddof=1) > 1e-3)


def test_tnorm_hand_example():
    assert tnorm(3.0, [1.0, 2.0, 3.0]) == pytest.approx(1.0)


def test_tnorm_at_cohort_mean():
    assert tnorm(2.0, [1.0, 2.0, 3.0]) == pytest.approx(0.0)


def test_znorm_examples():
    assert znorm(2.0, [0.0, 2.0]) == pytest.approx(0.70711, abs=1e-5)
    assert znorm(1.0, [0.0, 2.0]) == pytest.approx(0.0)


def test_zero_variance_cohort_is_degenerate():
    with pytest.raises(DegenerateCohortError) as err:
        znorm(1.0, [1.0, 1.0])
    assert err.value.step == "Z"


def test_single_score_cohort_is_degenerate():
    with pytest.raises(DegenerateCohortError):
        cohort_stats([1.0], "T")


def test_sample_std_divisor():
    stats = cohort_stats([0.0, 2.0], "T")
    assert stats.mean == 1.0
    assert stats.std == pytest.approx(np.sqrt(2.0))


@given(moderate, cohorts, st.floats(min_value=0.1, max_value=10), st.floats(min_value=-50, max_value=50))
def test_tnorm_affine_invariance(s, cohort, a, b):
    expected = tnorm(s, cohort)
    assert tnorm(a * s + b, [a * c + b for c in cohort]) == pytest.approx(expected, rel=1e-6, abs=1e-6)


@given(moderate, cohorts)
def test_znorm_antisymmetric_under_negation(s, cohort):
    assert znorm(-s, [-c for c in cohort]) == pytest.approx(-znorm(s, cohort), rel=1e-9, abs=1e-9)


def test_ztnorm_hand_example():
    ctx = TrialContext(s_trial=2.0, s_e=[0.0, 2.0], s_t=[3.0, 0.0], s_inter=[[0.0, 2.0], [-2.0, 0.0]])
    assert ztnorm(ctx) == pytest.approx(-0.70711, abs=1e-5)


def _straight_line_ztnorm(s, s_e, s_t, s_inter):
    s_e, s_t, s_inter = np.asarray(s_e), np.asarray(s_t), np.asarray(s_inter)
    z = (s - s_e.mean()) / s_e.std(ddof=1)
    zc = np.array([(s_t[i] - s_inter[i].mean()) / s_inter[i].std(ddof=1) for i in range(len(s_t))])
    return (z - zc.mean()) / zc.std(ddof=1)


def test_ztnorm_matches_straight_line_version(rng):
    for _ in range(20):
        n, m = rng.integers(2, 8, size=2)
        s_e, s_t, s_inter = rng.normal(size=m), rng.normal(size=n), rng.normal(size=(n, m))
        s = float(rng.normal())
        ctx = TrialContext(s_trial=s, s_e=s_e, s_t=s_t, s_inter=s_inter)
        assert ztnorm(ctx) == pytest.approx(_straight_line_ztnorm(s, s_e, s_t, s_inter), rel=1e-12)


def test_ztnorm_reduces_to_tnorm_when_z_step_is_identity():
    # rows and s_e with mean 0 and sample std 1
    unit = np.array([-1.0, 1.0]) / np.sqrt(2.0)
    s_t = [0.3, 1.7, -0.4]
    ctx = TrialContext(s_trial=0.9, s_e=unit, s_t=s_t, s_inter=np.tile(unit, (3, 1)))
    assert ztnorm(ctx) == pytest.approx(tnorm(0.9, s_t), rel=1e-12)


def test_ztnorm_needs_two_enrollment_cohort_members():
    ctx = TrialContext(s_trial=1.0, s_e=[0.0, 2.0], s_t=[3.0], s_inter=[[0.0, 2.0]])
    with pytest.raises(DegenerateCohortError) as err:
        ztnorm(ctx)
    assert err.value.step == "T"


def test_ztnorm_reports_degenerate_z_row():
    ctx = TrialContext(s_trial=1.0, s_e=[0.0, 2.0], s_t=[3.0, 1.0], s_inter=[[0.0, 2.0], [5.0, 5.0]])
    with pytest.raises(DegenerateCohortError) as err:
        ztnorm(ctx)
    assert err.value.step == "Z"


def test_snorm_examples():
    assert snorm(2.0, [0.0, 2.0], [1.0, 3.0]) == pytest.approx(0.35355, abs=1e-5)
    assert snorm(1.0, [0.0, 2.0], [-1.0, 3.0]) == pytest.approx(0.0)


@given(moderate, cohorts, cohorts)
def test_snorm_symmetric(s, a, b):
    assume(np.std(a) > 0 and np.std(b) > 0)
    assert snorm(s, a, b) == pytest.approx(snorm(s, b, a), rel=1e-12, abs=1e-12)
