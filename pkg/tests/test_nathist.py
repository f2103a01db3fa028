import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_intensity, series_expm
from crcvoi.nathist import (
    ALIVE_STATES,
    LAMBDA5_DESTINATION,
    N_STATES,
    DomainError,
    HealthState,
    LifeTable,
    NaturalHistoryParams,
    build_intensity_matrix,
    bundled_life_table,
    matrix_exponential,
    transition_table,
    weibull_hazard,
)

S = HealthState


def test_default_params_are_the_data_generating_values(truth):
    assert truth.calibrated_vector().tolist() == [0.25, 0.71, 2.86e-6, 2.78, 0.0346, 0.0215, 0.3697, 0.2382, 0.4582]
    assert (truth.lam7, truth.lam8) == (0.0302, 0.2099)


def test_with_calibrated_round_trip(truth):
    theta = truth.calibrated_vector() * 1.1
    p = truth.with_calibrated(theta)
    assert np.allclose(p.calibrated_vector(), theta)
    assert (p.lam7, p.lam8) == (truth.lam7, truth.lam8)
    with pytest.raises(ValueError):
        truth.with_calibrated(theta[:3])


@pytest.mark.parametrize("field,value", [("p_adeno", 1.2), ("p_small", -0.1), ("l", 0.0), ("gamma", -1.0),
                                         ("lam4", -0.01), ("lam2", math.nan)])
def test_invalid_params_rejected(field, value):
    with pytest.raises(DomainError):
        NaturalHistoryParams(**{field: value})


def test_weibull_hazard_values():
    assert weibull_hazard(2.86e-6, 2.78, 50) == pytest.approx(2.86e-6 * 2.78 * 50 ** 1.78, rel=1e-14)
    assert weibull_hazard(1.0, 1.0, np.array([10.0, 60.0])).tolist() == [1.0, 1.0]
    with pytest.raises(DomainError):
        weibull_hazard(0.0, 2.0, 50)
    with pytest.raises(DomainError):
        weibull_hazard(1e-6, 2.0, -1)


def test_intensity_matrix_structure(truth, life_table):
    q = build_intensity_matrix(truth, life_table, 60)
    assert np.allclose(q.sum(axis=1), 0.0, atol=1e-15)
    off = q - np.diag(np.diag(q))
    assert np.all(off >= 0)
    assert q[S.NORMAL, S.SMALL_ADENOMA] == pytest.approx(weibull_hazard(truth.l, truth.gamma, 60))
    assert q[S.PRECLINICAL_EARLY, LAMBDA5_DESTINATION] == truth.lam5
    assert LAMBDA5_DESTINATION == S.CLINICAL_EARLY
    for s in ALIVE_STATES:
        assert q[s, S.OTHER_DEATH] == life_table.rate(60)
    assert np.all(q[[S.CRC_DEATH, S.OTHER_DEATH]] == 0)


def test_hazard_ratio_scales_only_adenoma_onset(truth, life_table):
    q1 = build_intensity_matrix(truth, life_table, 70)
    q3 = build_intensity_matrix(truth, life_table, 70, hr_lambda1=3.0)
    diff = q3 - q1
    assert diff[S.NORMAL, S.SMALL_ADENOMA] == pytest.approx(2 * q1[S.NORMAL, S.SMALL_ADENOMA])
    diff[S.NORMAL, S.SMALL_ADENOMA] = 0
    diff[S.NORMAL, S.NORMAL] += 2 * q1[S.NORMAL, S.SMALL_ADENOMA]
    assert np.allclose(diff, 0, atol=1e-15)


def test_two_state_closed_form():
    a, b = 0.3, 0.1
    q = np.array([[-a, a], [b, -b]])
    e = math.exp(-(a + b))
    expected = np.array([[b + a * e, a - a * e], [b - b * e, a + b * e]]) / (a + b)
    assert np.allclose(matrix_exponential(q), expected, atol=1e-15)


def test_zero_matrix_gives_identity():
    assert np.array_equal(matrix_exponential(np.zeros((9, 9))), np.eye(9))


def test_matches_series_on_random_intensities(rng):
    for _ in range(50):
        q = random_intensity(rng, scale=rng.uniform(0.01, 1.5))
        p = matrix_exponential(q)
        assert np.max(np.abs(p - series_expm(q))) < 1e-12
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_large_norm_matches_scipy(rng):
    from scipy.linalg import expm

    q = random_intensity(rng, scale=20.0)
    assert np.allclose(matrix_exponential(q), expm(q), atol=1e-10)


def test_batched_equals_single(rng):
    qs = np.stack([random_intensity(rng) for _ in range(5)])
    batch = matrix_exponential(qs)
    for q, p in zip(qs, batch):
        assert np.allclose(matrix_exponential(q), p, atol=1e-15)


@pytest.mark.parametrize("bad", [np.full((3, 3), np.nan), np.array([[0.0, np.inf], [0.0, 0.0]]), np.zeros((2, 3))])
def test_expm_rejects_bad_input(bad):
    with pytest.raises(DomainError):
        matrix_exponential(bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.001, 3.0))
def test_expm_is_stochastic(seed, scale):
    q = random_intensity(np.random.default_rng(seed), scale=scale)
    p = matrix_exponential(q)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-10)


def test_transition_table(truth, life_table):
    table = transition_table(truth, life_table, 50, 100)
    assert len(table) == 51 and table.age_max == 100
    for a in (50, 75, 100):
        assert np.allclose(table.at(a), matrix_exponential(build_intensity_matrix(truth, life_table, a)), atol=1e-15)
    assert np.allclose(table.matrices.sum(axis=2), 1.0, atol=1e-12)
    death = table.at(80)[[S.CRC_DEATH, S.OTHER_DEATH]]
    assert np.array_equal(death, np.eye(N_STATES)[[S.CRC_DEATH, S.OTHER_DEATH]])
    with pytest.raises(ValueError):
        table.at(101)


def test_transition_table_outside_life_table(truth):
    with pytest.raises(ValueError):
        transition_table(truth, LifeTable.constant(0.01, 0, 90), 50, 100)


def test_zero_rates_allowed(life_table):
    p = NaturalHistoryParams(lam2=0.0, lam3=0.0, lam4=0.0, lam5=0.0, lam6=0.0)
    table = transition_table(p, life_table, 50, 60)
    assert table.at(55)[S.SMALL_ADENOMA, S.LARGE_ADENOMA] == 0.0


def test_life_table_csv_round_trip(tmp_path):
    lt = LifeTable.gompertz()
    path = tmp_path / "lt.csv"
    lt.to_csv(path)
    back = LifeTable.from_csv(path)
    assert np.array_equal(back.ages, lt.ages) and np.array_equal(back.rates, lt.rates)


def test_bundled_life_table_is_gompertz():
    lt = bundled_life_table()
    assert (lt.min_age, lt.max_age) == (0, 110)
    assert np.allclose(lt.rates, LifeTable.gompertz().rates, rtol=1e-15)
    assert lt.rate(30) == pytest.approx(1e-4)


@pytest.mark.parametrize("text", ["age,rate\n50,0.01\n52,0.01\n", "age,rate\n50,-0.1\n", "age,rate\n50,abc\n",
                                  "years,q\n50,0.1\n"])
def test_life_table_validation(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ValueError):
        LifeTable.from_csv(path)


def test_life_table_rate_out_of_range():
    with pytest.raises(ValueError):
        LifeTable.constant(0.01, 0, 100).rate(101)
