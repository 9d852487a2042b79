import numpy as np
import pytest
from sklearn.base import clone

from driftadapt.datasets import generate_stream
from driftadapt.estimators import ContinualAdapter, MlpClassifier
from driftadapt.layers import MlpModel


def toy_data(seed=0, n=400):
    stream = generate_stream(class_count=3, dim=4, n_domains=1, batches_per_domain=1,
                             batch_size=4, source_size=n, seed=seed)
    return stream.source_x, stream.source_y


class TestMlpClassifier:
    def test_fit_predict_shapes(self):
        X, y = toy_data()
        clf = MlpClassifier(hidden_layer_sizes=(16,), epochs=5).fit(X, y)
        assert clf.predict(X).shape == (len(X),)
        probs = clf.predict_proba(X)
        assert probs.shape == (len(X), 3)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_learns_separable_data(self):
        X, y = toy_data(seed=1, n=800)
        clf = MlpClassifier(hidden_layer_sizes=(16,), epochs=20).fit(X, y)
        assert clf.score(X, y) > 0.9

    def test_classes_preserved(self):
        X, y = toy_data()
        y_str = np.array(["a", "b", "c"])[y]
        clf = MlpClassifier(epochs=2).fit(X, y_str)
        assert set(clf.predict(X)) <= {"a", "b", "c"}

    def test_get_params_clone_roundtrip(self):
        clf = MlpClassifier(hidden_layer_sizes=(9,), epochs=7, learning_rate=0.002)
        cloned = clone(clf)
        assert cloned.get_params() == clf.get_params()

    def test_same_seed_identical_fits(self):
        X, y = toy_data()
        a = MlpClassifier(epochs=3, random_state=11).fit(X, y)
        b = MlpClassifier(epochs=3, random_state=11).fit(X, y)
        for p, q in zip(a.model_.parameters(), b.model_.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_unfitted_predict_raises(self):
        X, _ = toy_data()
        with pytest.raises(Exception):
            MlpClassifier().predict(X)

    def test_mismatched_lengths(self):
        X, y = toy_data()
        with pytest.raises(ValueError):
            MlpClassifier().fit(X, y[:-1])


class TestContinualAdapter:
    def fitted_source(self, seed=0):
        X, y = toy_data(seed=seed)
        return MlpClassifier(hidden_layer_sizes=(8,), epochs=10, random_state=seed).fit(X, y)

    def test_fit_initializes_pair(self):
        src = self.fitted_source()
        adapter = ContinualAdapter(source=src, high_rank=16).fit()
        assert adapter.pair_.teacher is not adapter.pair_.student
        np.testing.assert_array_equal(adapter.classes_, src.classes_)

    def test_starts_equivalent_to_source(self):
        src = self.fitted_source(1)
        adapter = ContinualAdapter(source=src, high_rank=16, gate_dropout=0.0).fit()
        X, _ = toy_data(seed=2)
        np.testing.assert_array_equal(adapter.predict(X), src.predict(X))

    def test_partial_fit_returns_self_and_updates(self):
        src = self.fitted_source(2)
        adapter = ContinualAdapter(source=src, high_rank=16, learning_rate=0.05).fit()
        X, _ = toy_data(seed=3, n=32)
        out = adapter.partial_fit(X)
        assert out is adapter
        assert adapter.pair_.step == 1
        assert adapter.last_outcome_.loss >= 0.0

    def test_predict_does_not_update(self):
        src = self.fitted_source(3)
        adapter = ContinualAdapter(source=src, high_rank=16).fit()
        X, _ = toy_data(seed=4, n=16)
        before = [p.copy() for p in adapter.pair_.student.adapter_parameters()]
        adapter.predict(X)
        for p, b in zip(adapter.pair_.student.adapter_parameters(), before):
            np.testing.assert_array_equal(p, b)

    def test_accepts_bare_model(self):
        src = self.fitted_source(4)
        adapter = ContinualAdapter(source=src.model_, high_rank=16).fit()
        assert isinstance(adapter.pair_.student.fold(), MlpModel)
        np.testing.assert_array_equal(adapter.classes_, np.arange(3))

    def test_folded_model_matches_student_at_neutral_scales(self):
        src = self.fitted_source(5)
        adapter = ContinualAdapter(source=src, high_rank=16, learning_rate=0.05).fit()
        X, _ = toy_data(seed=6, n=32)
        for _ in range(3):
            adapter.partial_fit(X)
        folded = adapter.folded_model()
        from driftadapt.adapters import ScalePair

        np.testing.assert_allclose(
            folded.forward(X),
            adapter.pair_.student.forward(X, ScalePair(1.0, 1.0)),
            atol=1e-9,
        )

    def test_invalid_source(self):
        with pytest.raises(ValueError):
            ContinualAdapter(source="nope").fit()

    def test_clone_compatible(self):
        adapter = ContinualAdapter(low_rank=2, high_rank=32, alpha=0.9)
        cloned = clone(adapter)
        assert cloned.get_params()["high_rank"] == 32
