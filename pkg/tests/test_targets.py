import math
import warnings

import numpy as np
import pytest

from crcvoi.microsim import ModelPrediction, epi_outputs, expected_outputs, initial_state_distribution
from crcvoi.nathist import NaturalHistoryParams, transition_table
from crcvoi.targets import (
    MISSING_PENALTY,
    TARGET_TYPES,
    CalibrationLikelihood,
    CalibrationTarget,
    TargetBinSpec,
    TargetFileError,
    TargetSet,
    generate_targets,
    log_likelihood,
    log_likelihood_terms,
    read_targets,
    sidecar_path,
    write_targets,
)

ONE_BIN = TargetBinSpec(adenoma_ages=(60,), incidence_bins=((60, 64),))


def one_per_type(means=(0.25, 0.7, 50.0, 60.0), ses=(0.05, 0.05, 5.0, 5.0), bins=ONE_BIN):
    ts = []
    for ttype, m, s in zip(TARGET_TYPES, means, ses):
        lo, hi = bins.positions(ttype)[0]
        ts.append(CalibrationTarget(ttype, lo, hi, m, s, 100))
    return TargetSet(tuple(ts), bins)


def phi_of(values):
    return ModelPrediction(*(np.array([v], dtype=float) for v in values))


@pytest.fixture(scope="module")
def small_targets(life_table):
    return generate_targets(NaturalHistoryParams(), life_table, reps=4, n_adenoma=300, n_cancer=3000, master_seed=5)


def test_single_target_oracle():
    ts = one_per_type()
    terms = log_likelihood_terms(phi_of([0.25, 0.7, 50.0, 60.0]), ts)
    assert terms[0] == pytest.approx(-math.log(0.05 * math.sqrt(2 * math.pi)), abs=1e-12)
    assert terms[0] == pytest.approx(2.0768, abs=1e-4)


def test_shift_by_one_sigma_costs_half():
    ts = one_per_type()
    best = log_likelihood(phi_of([0.25, 0.7, 50.0, 60.0]), ts)
    shifted = log_likelihood(phi_of([0.30, 0.7, 50.0, 60.0]), ts)
    assert best - shifted == pytest.approx(0.5, abs=1e-12)


def test_doubling_sigma():
    a = one_per_type()
    b = one_per_type(ses=(0.1, 0.1, 10.0, 10.0))
    phi = phi_of([0.25, 0.7, 50.0, 60.0])
    assert log_likelihood(phi, b) - log_likelihood(phi, a) == pytest.approx(-4 * math.log(2))


def test_decomposition_over_disjoint_sets(small_targets):
    truth = NaturalHistoryParams()
    phi = ModelPrediction(*(np.full(len(small_targets.bins.positions(t)), v)
                            for t, v in zip(TARGET_TYPES, (0.3, 0.65, 80.0, 90.0))))
    terms = log_likelihood_terms(phi, small_targets)
    mask = np.arange(len(small_targets)) % 3 == 0
    a, b = terms[mask].sum(), terms[~mask].sum()
    assert log_likelihood(phi, small_targets) == pytest.approx(a + b, rel=1e-12)
    assert truth is not None


def test_missing_and_nonfinite_predictions():
    ts = one_per_type()
    base = log_likelihood(phi_of([0.25, 0.7, 50.0, 60.0]), ts)
    pen = log_likelihood(phi_of([0.25, np.nan, 50.0, 60.0]), ts)
    finite_part = base - (-math.log(0.05 * math.sqrt(2 * math.pi)))
    assert pen == pytest.approx(finite_part + MISSING_PENALTY)
    assert log_likelihood(phi_of([np.nan, 0.7, 50.0, 60.0]), ts) == -math.inf
    assert log_likelihood(phi_of([0.25, 0.7, np.inf, 60.0]), ts) == -math.inf


def test_target_validation():
    with pytest.raises(ValueError):
        CalibrationTarget("adenoma_prevalence", 60, 60, 0.2, 0.0, 1)
    with pytest.raises(ValueError):
        CalibrationTarget("adenoma_prevalence", 60, 60, 1.2, 0.1, 1)
    with pytest.raises(ValueError):
        CalibrationTarget("colon_length", 60, 60, 1.0, 0.1, 1)
    with pytest.raises(ValueError):
        one_per_type().select(lambda t: t.target_type != "incidence_late")


def test_bin_spec_validation():
    with pytest.raises(ValueError):
        TargetBinSpec(incidence_bins=((50, 55), (55, 60)))
    with pytest.raises(ValueError):
        TargetBinSpec(adenoma_ages=(40,))
    assert TargetBinSpec().required_age_max == 85
    assert TargetBinSpec.from_dict(TargetBinSpec().to_dict()) == TargetBinSpec()


def test_generate_targets_structure(small_targets):
    assert {t.target_type for t in small_targets.targets} == set(TARGET_TYPES)
    assert len(small_targets) == 6 + 6 + 7 + 7
    assert all(t.se > 0 for t in small_targets.targets)
    assert small_targets.metadata["reps"] == 4


def test_generate_targets_deterministic(life_table, small_targets, tmp_path):
    again = generate_targets(NaturalHistoryParams(), life_table, reps=4, n_adenoma=300, n_cancer=3000,
                             master_seed=5, workers=2)
    assert again == small_targets
    write_targets(small_targets, tmp_path / "a.csv")
    write_targets(again, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_sem_mode_divides_by_sqrt_reps(life_table, small_targets):
    sem = generate_targets(NaturalHistoryParams(), life_table, reps=4, n_adenoma=300, n_cancer=3000,
                           master_seed=5, se_mode="sem")
    assert np.allclose(sem.ses, small_targets.ses / 2)
    assert np.array_equal(sem.means, small_targets.means)


def test_reps_below_two_rejected(life_table):
    with pytest.raises(ValueError):
        generate_targets(NaturalHistoryParams(), life_table, reps=1)


def test_identical_replications_rejected(life_table):
    with pytest.raises(ValueError, match="zero variance"):
        generate_targets(NaturalHistoryParams(), life_table, reps=2, n_adenoma=200, n_cancer=2000,
                         draw_indices=[0, 0])


def test_no_progression_leaves_only_prevalent_cancers(life_table):
    """Without adenoma progression every diagnosis comes from a cancer present at age 50."""
    from crcvoi.microsim import simulate_cohort
    from crcvoi.nathist import HealthState as S

    p = NaturalHistoryParams(lam3=0.0)
    c = simulate_cohort(p, life_table, 50_000, 1)
    prevalent = c.state_counts[0, S.PRECLINICAL_EARLY] + c.state_counts[0, S.PRECLINICAL_LATE]
    assert 0 < c.new_diagnoses.sum() <= prevalent
    phi = epi_outputs(c, TargetBinSpec())
    assert phi.incidence_early[0] + phi.incidence_late[0] > 0
    # after ten years the prevalent pool is essentially exhausted
    assert np.all(phi.incidence_early[2:] + phi.incidence_late[2:] < 5.0)
    e = expected_outputs(transition_table(p, life_table), initial_state_distribution(p))
    assert e.new_diagnoses.sum() < 0.002


def test_missing_bin_dropped_with_warning(life_table):
    with pytest.warns(UserWarning, match="dropping proportion_small"):
        ts = generate_targets(NaturalHistoryParams(), life_table, reps=6, n_adenoma=3, n_cancer=2000, master_seed=2)
    small = [t for t in ts.targets if t.target_type == "proportion_small"]
    assert 0 < len(small) < 6


def test_round_trip(tmp_path, small_targets):
    path = tmp_path / "targets.csv"
    write_targets(small_targets, path, extra_meta={"note": "x"})
    back = read_targets(path)
    assert back == small_targets
    assert back.metadata["note"] == "x"
    assert sidecar_path(path).exists()


def test_read_hand_written_file(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("# comment\ntarget_type,bin_lo,bin_hi,mean,se,cohort_size\n"
                    "adenoma_prevalence,60,60,0.3,0.02,500\nproportion_small,60,60,0.6,0.04,500\n"
                    "incidence_early,60,64,80.0,4.0,100000\nincidence_late,60,64,90.0,5.0,100000\n")
    ts = read_targets(path)
    assert len(ts) == 4
    assert ts.bins.adenoma_ages == (60,) and ts.bins.incidence_bins == ((60, 64),)


@pytest.mark.parametrize("body,match", [
    ("", "empty"),
    ("a,b\n", "expected columns"),
    ("target_type,bin_lo,bin_hi,mean,se,cohort_size\nadenoma_prevalence,60,60,0.3,0.0,500\n", "row 2"),
    ("target_type,bin_lo,bin_hi,mean,se,cohort_size\nadenoma_prevalence,60,60,0.3\n", "row 2"),
])
def test_read_errors(tmp_path, body, match):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(TargetFileError, match=match):
        read_targets(path)


def test_calibration_likelihood_modes(life_table, small_targets):
    truth = NaturalHistoryParams()
    exp = CalibrationLikelihood(small_targets, life_table, mode="expected")
    table = transition_table(truth, life_table, 50, small_targets.bins.required_age_max)
    phi = epi_outputs(expected_outputs(table, initial_state_distribution(truth)), small_targets.bins)
    assert exp(truth.calibrated_vector()) == pytest.approx(log_likelihood(phi, small_targets))
    sim = CalibrationLikelihood(small_targets, life_table, mode="microsim", n_lik=2000, master_seed=3)
    v = sim(truth.calibrated_vector())
    assert math.isfinite(v) and v == sim(truth.calibrated_vector())


def test_calibration_likelihood_rejects_invalid(life_table, small_targets):
    lik = CalibrationLikelihood(small_targets, life_table)
    bad = NaturalHistoryParams().calibrated_vector()
    bad[0] = 1.5
    assert lik(bad) == -math.inf
    bad[0] = np.nan
    assert lik(bad) == -math.inf
    with pytest.raises(ValueError):
        CalibrationLikelihood(small_targets, life_table, mode="exact")
