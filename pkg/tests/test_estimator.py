"""Estimator wrapper: sklearn conventions, fit/predict wiring, persistence."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from eventflow.dataset import make_windows
from eventflow.denoiser import DenoiserParams
from eventflow.estimator import EventFlowForecaster
from eventflow.forecasting import ForecastEnsemble

TINY = dict(
    p=2,
    q=1,
    depth=2,
    d_model=16,
    d_state=8,
    m_state=2,
    d_ff=32,
    n_heads=2,
    batch_size=8,
    max_epochs=2,
    eval_every=1,
    patience=3,
    lr_peak=1e-3,
    T=10,
    n_samples=3,
    seed=0,
)


@pytest.fixture(scope="module")
def fitted(small_dataset):
    """One trained estimator shared by the read-only tests."""
    est = EventFlowForecaster(**TINY)
    ret = est.fit(small_dataset)
    return est, ret


def test_get_params_round_trip():
    est = EventFlowForecaster(**TINY)
    params = est.get_params()
    for key, value in TINY.items():
        assert params[key] == value
    other = EventFlowForecaster().set_params(**params)
    assert other.get_params() == params


def test_set_params_returns_self():
    est = EventFlowForecaster()
    assert est.set_params(T=25) is est
    assert est.get_params()["T"] == 25


def test_set_params_rejects_unknown():
    with pytest.raises(ValueError):
        EventFlowForecaster().set_params(horizon=3)


def test_clone_preserves_params():
    est = EventFlowForecaster(**TINY)
    twin = clone(est)
    assert twin is not est
    assert twin.get_params() == est.get_params()


def test_unfitted_estimator_raises(small_dataset, tmp_path):
    est = EventFlowForecaster(**TINY)
    with pytest.raises(NotFittedError):
        est.predict(small_dataset)
    with pytest.raises(NotFittedError):
        est.sample(small_dataset)
    with pytest.raises(NotFittedError):
        est.score(small_dataset)
    with pytest.raises(NotFittedError):
        est.save(tmp_path / "model.bin")


def test_fit_returns_self(fitted):
    est, ret = fitted
    assert ret is est


def test_fit_sets_fitted_attributes(fitted):
    est, _ = fitted
    assert isinstance(est.params_, DenoiserParams)
    assert est.model_config_.W == 8
    assert est.model_config_.d_text == 16
    assert est.n_parameters_ == est.params_.n_parameters() > 0
    # 30 segments, p=2, q=1 -> 28 windows; trailing 15% held out
    assert est.n_train_windows_ == 24
    assert est.n_val_windows_ == 4
    assert len(est.history_) > 0
    assert all("step" in row for row in est.history_)


def test_predict_shape_and_units(fitted, small_dataset):
    est, _ = fitted
    points = est.predict(small_dataset)
    assert points.shape == (28, 1, 8)
    assert np.all(np.isfinite(points))


def test_sample_returns_ensembles(fitted, small_dataset):
    est, _ = fitted
    ensembles = est.sample(small_dataset)
    assert len(ensembles) == 28
    assert all(isinstance(e, ForecastEnsemble) for e in ensembles)
    assert ensembles[0].trajectories.shape == (3, 1, 8)


def test_predict_matches_sample_means(fitted, small_dataset):
    """predict is the stacked ensemble means, and repeat calls reproduce it."""
    est, _ = fitted
    points = est.predict(small_dataset)
    means = np.stack([e.point_forecast for e in est.sample(small_dataset)])
    np.testing.assert_array_equal(points, means)


def test_score_is_negative_mean_mae(fitted, small_dataset):
    est, _ = fitted
    windows = make_windows(small_dataset, est.p, est.q, est.stride)
    points = est.predict(small_dataset)
    expected = -np.mean(
        [np.abs(w.future_values - points[i]).mean() for i, w in enumerate(windows)]
    )
    score = est.score(small_dataset)
    assert score <= 0.0
    assert score == pytest.approx(expected, rel=1e-12)


def test_fit_accepts_window_list(small_dataset):
    """A prepared window list trains to bitwise the same model as the dataset."""
    windows = make_windows(small_dataset, TINY["p"], TINY["q"])
    est_ds = EventFlowForecaster(**TINY).fit(small_dataset)
    est_wl = EventFlowForecaster(**TINY).fit(windows)
    for name, t in est_ds.params_.tensors.items():
        np.testing.assert_array_equal(t.data, est_wl.params_.tensors[name].data)
    np.testing.assert_array_equal(
        est_ds.predict(small_dataset), est_wl.predict(windows)
    )


def test_event_delta_toggle_changes_predictions(fitted, small_dataset):
    est, _ = fitted
    off = EventFlowForecaster(**{**est.get_params(), "use_event_delta": False})
    off.params_ = est.params_
    assert not np.array_equal(est.predict(small_dataset), off.predict(small_dataset))


def test_fixed_timestep_overrides_event_delta(fitted, small_dataset):
    """fixed_timestep forces the uniform grid even with use_event_delta on."""
    est, _ = fitted
    off = EventFlowForecaster(**{**est.get_params(), "use_event_delta": False})
    off.params_ = est.params_
    forced = EventFlowForecaster(**{**est.get_params(), "fixed_timestep": True})
    forced.params_ = est.params_
    np.testing.assert_array_equal(
        off.predict(small_dataset), forced.predict(small_dataset)
    )


def test_save_load_round_trip(fitted, small_dataset, tmp_path):
    est, _ = fitted
    path = tmp_path / "model.bin"
    est.save(path)
    loaded = EventFlowForecaster.load(path)
    assert loaded.get_params() == est.get_params()
    assert loaded.n_parameters_ == est.n_parameters_
    for name, t in est.params_.tensors.items():
        np.testing.assert_array_equal(t.data, loaded.params_.tensors[name].data)
    np.testing.assert_array_equal(
        est.predict(small_dataset), loaded.predict(small_dataset)
    )
