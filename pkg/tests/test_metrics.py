"""Point metrics, probabilistic scores, and the joint-distribution distance."""

from __future__ import annotations

import json

import numpy as np
import pytest

from eventflow.dataset import SyntheticConfig, generate_synthetic
from eventflow.errors import DataError
from eventflow.metrics import (
    DEFAULT_QUANTILES,
    crps_ensemble,
    crps_series,
    compute_report,
    dataset_pairs,
    delta_j_ftsd,
    frechet_distance,
    j_ftsd,
    joint_features,
    mae,
    mse,
    rmse,
    wape,
    wql,
    write_report,
)

RNG = np.random.default_rng(31)


# -------------------------------------------------------------- point metrics


def test_unit_error_example():
    y = np.array([0.0, 2.0])
    y_hat = np.array([1.0, 1.0])
    assert mae(y, y_hat) == 1.0
    assert mse(y, y_hat) == 1.0
    assert rmse(y, y_hat) == 1.0


def test_rmse_is_sqrt_of_mse():
    y = RNG.normal(size=50)
    y_hat = RNG.normal(size=50)
    assert rmse(y, y_hat) ** 2 == pytest.approx(mse(y, y_hat), rel=1e-12)


def test_perfect_forecast_scores_zero():
    y = RNG.normal(size=20)
    assert mae(y, y) == 0.0
    assert mse(y, y) == 0.0
    assert wape(y, y) == 0.0


def test_wape_example_and_scale_invariance():
    y = np.array([2.0, 2.0])
    y_hat = np.array([1.0, 3.0])
    assert wape(y, y_hat) == pytest.approx(0.5)
    assert wape(10 * y, 10 * y_hat) == pytest.approx(wape(y, y_hat))


def test_wape_all_zero_truth_raises():
    with pytest.raises(DataError):
        wape(np.zeros(4), np.ones(4))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        mae(np.zeros(3), np.zeros(4))


# ----------------------------------------------------------------------- CRPS


def test_crps_point_mass_on_truth():
    assert crps_ensemble(np.full(10, 1.5), 1.5) == 0.0


def test_crps_two_sample_example():
    assert crps_ensemble(np.array([0.0, 2.0]), 1.0) == pytest.approx(0.5)


def test_crps_duplication_invariance():
    a = crps_ensemble(np.array([0.0, 2.0]), 1.0)
    b = crps_ensemble(np.array([0.0, 0.0, 2.0, 2.0]), 1.0)
    assert a == pytest.approx(b)


def test_crps_single_sample_is_mae():
    for y, x in ((1.0, 3.5), (-2.0, 0.25)):
        assert crps_ensemble(np.array([x]), y) == pytest.approx(abs(x - y))


def test_crps_permutation_invariance():
    x = RNG.normal(size=64)
    perm = RNG.permutation(64)
    assert crps_ensemble(x, 0.3) == pytest.approx(crps_ensemble(x[perm], 0.3))


def test_crps_gaussian_reference():
    """CRPS of N(0,1) draws against y=0 approaches (sqrt(2)-1)/sqrt(pi)."""
    x = np.random.default_rng(0).standard_normal(4000)
    want = (np.sqrt(2.0) - 1.0) / np.sqrt(np.pi)
    assert crps_ensemble(x, 0.0) == pytest.approx(want, abs=0.02)


def test_crps_series_averages_pointwise():
    samples = RNG.normal(size=(32, 5))
    y = RNG.normal(size=5)
    want = np.mean([crps_ensemble(samples[:, j], y[j]) for j in range(5)])
    assert crps_series(samples, y) == pytest.approx(want, rel=1e-12)


def test_crps_rejects_empty_and_misshapen():
    with pytest.raises(ValueError):
        crps_ensemble(np.array([]), 0.0)
    with pytest.raises(ValueError):
        crps_series(RNG.normal(size=(4, 3)), np.zeros(5))


# ------------------------------------------------------------------------ WQL


def test_wql_perfect_forecast_is_zero():
    y = np.array([1.0, 2.0, 3.0])
    qf = {q: y.copy() for q in DEFAULT_QUANTILES}
    assert wql(qf, y) == 0.0


def test_wql_single_median_example():
    assert wql({0.5: np.array([0.0])}, np.array([2.0])) == pytest.approx(1.0)


def test_wql_tail_asymmetry():
    """At q=0.9, undershooting costs 9x what overshooting costs."""
    y = np.array([2.0])
    under = wql({0.9: np.array([1.0])}, y)
    over = wql({0.9: np.array([3.0])}, y)
    assert under / over == pytest.approx(9.0)


def test_wql_median_matches_wape():
    y = RNG.normal(size=30) + 5.0
    f = RNG.normal(size=30) + 5.0
    assert wql({0.5: f}, y) == pytest.approx(wape(y, f), rel=1e-12)


def test_wql_crossing_warning():
    y = np.array([1.0, 1.0])
    qf = {0.1: np.array([2.0, 0.0]), 0.9: np.array([0.0, 2.0])}
    with pytest.warns(RuntimeWarning, match="crossing"):
        wql(qf, y)


def test_wql_zero_truth_raises():
    with pytest.raises(DataError):
        wql({0.5: np.zeros(3)}, np.zeros(3))


# ------------------------------------------------------------- joint features


def test_joint_features_layout():
    pairs = [(RNG.normal(size=24), RNG.normal(size=32)) for _ in range(5)]
    feats = joint_features(pairs, seed=0)
    assert feats.shape == (5, 28)
    seg = pairs[0][0]
    assert feats[0, 0] == pytest.approx(seg.mean())
    assert feats[0, 1] == pytest.approx(seg.std())
    assert feats[0, 2] == pytest.approx(seg.min())
    assert feats[0, 3] == pytest.approx(seg.max())


def test_joint_features_constant_segment_has_zero_std():
    feats = joint_features([(np.full(24, 2.0), RNG.normal(size=8))], seed=1)
    assert feats[0, 1] == 0.0


def test_joint_features_deterministic_and_seeded():
    pairs = [(RNG.normal(size=16), RNG.normal(size=8)) for _ in range(4)]
    a = joint_features(pairs, seed=3)
    b = joint_features(pairs, seed=3)
    c = joint_features(pairs, seed=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a[:, 12:], c[:, 12:])
    np.testing.assert_array_equal(a[:, :12], c[:, :12])


def test_joint_features_short_segment_pads_spectrum():
    feats = joint_features([(np.ones(4), np.ones(8))], seed=0)
    assert feats.shape == (1, 28)
    assert np.all(feats[0, 7:12] == 0.0)  # rFFT of length 4 has 3 bins


# ----------------------------------------------------------- Frechet distance


def test_frechet_identical_clouds_vanish():
    X = RNG.normal(size=(200, 6))
    assert frechet_distance(X, X.copy()) < 1e-8


def test_frechet_identical_degenerate_clouds_vanish():
    """Rank-deficient covariance: a constant column must not break the root."""
    X = RNG.normal(size=(50, 4))
    X[:, 2] = 1.0
    assert frechet_distance(X, X.copy()) < 1e-8


def test_frechet_unit_mean_shift():
    """N(0, I) vs N(1, I) in 1-d: distance -> ||mu||^2 = 1."""
    rng = np.random.default_rng(5)
    a = rng.standard_normal((100_000, 1))
    b = rng.standard_normal((100_000, 1)) + 1.0
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=0.05)


def test_frechet_symmetry():
    X = RNG.normal(size=(80, 5))
    Y = RNG.normal(size=(90, 5)) * 1.3 + 0.2
    assert frechet_distance(X, Y) == pytest.approx(frechet_distance(Y, X),
                                                   abs=1e-8)


def test_frechet_requires_two_samples_and_same_width():
    X = RNG.normal(size=(10, 3))
    with pytest.raises(ValueError):
        frechet_distance(X[:1], X)
    with pytest.raises(ValueError):
        frechet_distance(X, RNG.normal(size=(10, 4)))


def test_j_ftsd_self_distance_negligible(small_dataset):
    pairs = dataset_pairs(small_dataset)
    assert abs(j_ftsd(pairs, pairs, seed=0)) < 1e-8


def test_j_ftsd_detects_corruption(small_dataset):
    pairs = dataset_pairs(small_dataset)
    corrupted = [(seg + 1.0, emb) for seg, emb in pairs]
    assert j_ftsd(pairs, corrupted, seed=0) > 0.5


# ---------------------------------------------------- event predictability


def test_delta_jftsd_zero_noise_level_cancels(small_dataset):
    """At nu=0 both distances compare identical clouds, so the score is
    estimator noise only."""
    pairs = dataset_pairs(small_dataset)
    assert abs(delta_j_ftsd(pairs, noise_levels=(0.0,), seed=0)) < 1e-8


def test_delta_jftsd_deterministic(small_dataset):
    pairs = dataset_pairs(small_dataset)
    a = delta_j_ftsd(pairs, seed=2)
    b = delta_j_ftsd(pairs, seed=2)
    assert a == b


def test_delta_jftsd_informative_vs_noise_events():
    """Informative embeddings score above the noise-event control.

    Full-width embeddings: narrow ones blur the annotation categories
    and the separation shrinks below estimator noise.
    """
    ds = generate_synthetic(SyntheticConfig(n_waves=400, points_per_wave=24, seed=0))
    pairs = dataset_pairs(ds)
    informative = delta_j_ftsd(pairs, seed=0)
    d_text = pairs[0][1].shape[0]
    rng = np.random.default_rng(99)
    noise_pairs = [(seg, rng.standard_normal(d_text)) for seg, _ in pairs]
    control = delta_j_ftsd(noise_pairs, seed=0)
    assert informative > 0.0
    assert informative > abs(control)


def test_delta_jftsd_validates_inputs(small_dataset):
    pairs = dataset_pairs(small_dataset)
    with pytest.raises(ValueError):
        delta_j_ftsd(pairs, noise_levels=())
    with pytest.raises(ValueError):
        delta_j_ftsd([])


# --------------------------------------------------------------------- report


class _Ens:
    def __init__(self, trajectories):
        self.trajectories = trajectories
        self.point_forecast = trajectories.mean(axis=0)


class _Win:
    def __init__(self, future_values):
        self.future_values = future_values


def _report_inputs(n_windows=3, m=16, q=1, W=8):
    ensembles, windows = [], []
    for i in range(n_windows):
        truth = RNG.normal(size=(q, W)) + 3.0
        ensembles.append(_Ens(truth[None] + 0.1 * RNG.normal(size=(m, q, W))))
        windows.append(_Win(truth))
    return ensembles, windows


def test_report_aggregate_is_mean_of_rows():
    ensembles, windows = _report_inputs()
    report = compute_report(ensembles, windows, metadata={"split": "test"})
    assert len(report.per_window) == 3
    for name, value in report.aggregate.items():
        rows = [r[name] for r in report.per_window]
        assert value == pytest.approx(np.mean(rows), rel=1e-12)
    assert report.metadata == {"split": "test"}


def test_report_perfect_forecast_zeroes_out():
    truth = RNG.normal(size=(2, 8)) + 5.0
    ens = _Ens(np.repeat(truth[None], 4, axis=0))
    report = compute_report([ens], [_Win(truth)])
    for name in ("mae", "mse", "rmse", "wape", "crps", "wql"):
        assert report.aggregate[name] == 0.0


def test_report_validates_alignment():
    ensembles, windows = _report_inputs()
    with pytest.raises(ValueError):
        compute_report(ensembles[:2], windows)
    with pytest.raises(ValueError):
        compute_report([], [])


def test_write_report_files(tmp_path):
    ensembles, windows = _report_inputs(n_windows=2)
    report = compute_report(ensembles, windows, metadata={"k": 1})
    jp = tmp_path / "report.json"
    cp = tmp_path / "report.csv"
    write_report(report, jp, cp)
    payload = json.loads(jp.read_text())
    assert set(payload) == {"metadata", "aggregate", "per_window"}
    assert payload["aggregate"] == report.aggregate
    lines = cp.read_text().splitlines()
    assert lines[0].startswith("window,")
    assert len(lines) == 3
