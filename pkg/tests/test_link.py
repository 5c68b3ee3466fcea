"""Parameter link network: anchoring, positivity, batching."""

import numpy as np
import pytest

from gludyn import link


class TestSoftplusUnit:
    def test_unity_at_zero(self):
        assert float(link.softplus_unit(0.0)) == pytest.approx(1.0, abs=1e-12)

    def test_positive_and_monotone(self):
        x = np.linspace(-20, 20, 200)
        y = np.asarray(link.softplus_unit(x))
        assert np.all(y > 0)
        assert np.all(np.diff(y) > 0)

    def test_asymptotes(self):
        assert float(link.softplus_unit(-40.0)) == pytest.approx(0.0,
                                                                 abs=1e-12)
        assert float(link.softplus_unit(40.0)) == pytest.approx(
            40.0 + np.log(np.e - 1), rel=1e-9)


class TestLink:
    def test_zero_init_reproduces_anchors(self, rng):
        phi = link.init_link(D=3, K=4, seed=0)
        anchors = np.array([0.047, 0.057, 2.7, 1.0])
        for _ in range(20):
            z = rng.normal(size=3) * 5
            np.testing.assert_allclose(np.asarray(link.link(z, phi, anchors)),
                                       anchors, rtol=1e-12)

    def test_outputs_positive_for_random_weights(self, rng):
        phi = link.init_link(D=2, K=3, seed=1)
        phi["W3"] = rng.normal(size=phi["W3"].shape)
        phi["b3"] = rng.normal(size=phi["b3"].shape)
        anchors = np.array([1.0, 2.0, 3.0])
        z = rng.normal(size=(50, 2)) * 3
        out = np.asarray(link.link(z, phi, anchors))
        assert out.shape == (50, 3)
        assert np.all(out > 0)

    def test_batch_matches_single(self, rng):
        phi = link.init_link(D=2, K=2, seed=2)
        phi["W3"] = rng.normal(size=phi["W3"].shape)
        anchors = np.array([1.0, 5.0])
        zs = rng.normal(size=(6, 2))
        batch = np.asarray(link.link(zs, phi, anchors))
        for i, z in enumerate(zs):
            np.testing.assert_allclose(batch[i],
                                       np.asarray(link.link(z, phi, anchors)),
                                       rtol=1e-12)

    def test_hidden_width_default(self):
        phi = link.init_link(D=3, K=2, seed=0)
        assert phi["W1"].shape == (128, 3)
        assert phi["W2"].shape == (128, 128)
        assert np.all(phi["W3"] == 0) and np.all(phi["b3"] == 0)

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            link.init_link(D=0, K=1, seed=0)
