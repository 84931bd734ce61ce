import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from diffcr import DiffCRDiT, ToyDataset

SMALL = dict(image_side=8, hidden_dim=16, heads=2, layers=2, n_classes=3, train_timesteps=20,
             sample_steps=4, regions=2, steps=4, batch_size=4, log_every=2)


@pytest.fixture(scope="module")
def data():
    return ToyDataset(classes=3, image_side=8).make(12, seed=0)


@pytest.fixture(scope="module")
def fitted(data):
    return DiffCRDiT(**SMALL).fit(*data)


def test_params_api():
    est = DiffCRDiT(**SMALL)
    assert est.get_params()["layers"] == 2
    est.set_params(target_ratio=0.2)
    c = clone(est)
    assert c.target_ratio == 0.2 and not hasattr(c, "params_")


def test_not_fitted():
    with pytest.raises(NotFittedError):
        DiffCRDiT(**SMALL).sample(1)


def test_fit_records_history(fitted):
    assert fitted.n_steps_ == 4 and len(fitted.history_) == 4
    assert sorted(fitted.trajectory_.ratio_series()) == [2, 4]
    assert 0 < fitted.mean_ratio() < 1
    assert fitted.snapped_table().is_snapped()


def test_predict_and_sample(fitted):
    xt = np.random.default_rng(0).normal(size=(3, 8, 8))
    eps = fitted.predict(xt, [0, 5, 19], [0, 1, 3])
    assert eps.shape == (3, 8, 8)
    imgs = fitted.sample(2, y=[0, 2], random_state=1)
    assert imgs.shape == (2, 8, 8) and imgs.min() >= 0 and imgs.max() <= 1
    np.testing.assert_array_equal(imgs, fitted.sample(2, y=[0, 2], random_state=1))
    dense = fitted.sample(2, y=[0, 2], random_state=1, dense=True)
    assert dense.shape == imgs.shape


def test_input_validation(fitted, data):
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 7, 7)), 0, 0)
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 8, 8)), [0, 20], 0)
    with pytest.raises(ValueError):
        fitted.sample(1, y=[5])
    X, y = data
    with pytest.raises(ValueError):
        DiffCRDiT(**SMALL).fit(X, y[:5])


def test_router_maps(fitted, data):
    maps = fitted.router_maps(data[0][:1], [2, 15])
    assert set(maps) == {(l, t) for l in range(2) for t in (2, 15)}
    assert all(m.shape == (4, 4) and np.all((m > 0) & (m < 1)) for m in maps.values())


def test_ratio_coefficient_schedule():
    est = DiffCRDiT(steps=11, ratio_loss_coeff=0.3)
    assert est.ratio_coeff_at(1) == est.ratio_coeff_at(11) == 0.3
    est.set_params(ratio_loss_coeff_end=0.8)
    assert est.ratio_coeff_at(1) == 0.3 and est.ratio_coeff_at(11) == pytest.approx(0.8)
    assert est.ratio_coeff_at(6) == pytest.approx(0.55)


def test_dense_estimator(data):
    est = DiffCRDiT(**{**SMALL, "routing": False}).fit(*data)
    assert est.ratio_table_ is None and est.mean_ratio() == 0.0
    assert "ratio_table" not in est.state_arrays()
    with pytest.raises(ValueError):
        est.router_maps(data[0][:1], [3])
