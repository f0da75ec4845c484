"""Vectors, partitions, models, training, and partitioning contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dprec.errors import InvalidConfigError, ShapeMismatchError, TrainingDivergedError
from dprec.params import (
    GroupPartition,
    LocalDataset,
    Model,
    ModelSpec,
    ParamVector,
    dirichlet_partition,
    load_dataset_csv,
    load_dataset_npz,
    local_train,
    model_delta,
    save_dataset_csv,
    save_dataset_npz,
    synthetic_classification,
)


def small_dataset(n=120, d=6, classes=3, seed=5):
    return synthetic_classification(n, d, classes, seed=seed, class_sep=3.0)


class TestPartition:
    def test_from_sizes_tiles_exactly(self):
        p = GroupPartition.from_sizes([("w", 4), ("b", 2)])
        assert p.total_length == 6
        assert [g.slice for g in p.groups] == [slice(0, 4), slice(4, 6)]

    def test_rejects_gap_overlap_and_duplicates(self):
        from dprec.params import Group

        with pytest.raises(InvalidConfigError):
            GroupPartition((Group("a", 0, 2), Group("b", 3, 1)))
        with pytest.raises(InvalidConfigError):
            GroupPartition((Group("a", 0, 2), Group("a", 2, 1)))
        with pytest.raises(InvalidConfigError):
            GroupPartition((Group("a", 0, 0),))

    def test_listing_order_may_differ_from_offset_order(self):
        from dprec.params import Group

        p = GroupPartition((Group("b", 4, 2), Group("a", 0, 4)))
        assert p.total_length == 6

    @given(sizes=st.lists(st.integers(1, 9), min_size=1, max_size=6))
    @settings(max_examples=50, deadline=None)
    def test_groupwise_map_then_concat_is_identity(self, sizes):
        p = GroupPartition.from_sizes([(f"g{i}", n) for i, n in enumerate(sizes)])
        values = np.arange(p.total_length, dtype=float)
        v = ParamVector(values, p)
        rebuilt = np.concatenate([v.group_values(i) for i in range(len(p))])
        # Concatenation in canonical (offset) order is the identity.
        order = np.argsort([g.offset for g in p.groups])
        rebuilt = np.concatenate([v.group_values(int(i)) for i in order])
        assert np.array_equal(rebuilt, values)


class TestParamVector:
    def test_rejects_nan_and_length_mismatch(self):
        p = GroupPartition.single(3)
        with pytest.raises(InvalidConfigError):
            ParamVector(np.array([1.0, np.nan, 2.0]), p)
        with pytest.raises(ShapeMismatchError):
            ParamVector(np.zeros(4), p)

    def test_add_sub_roundtrip(self):
        p = GroupPartition.single(4)
        a = ParamVector(np.array([1.0, 2, 3, 4]), p)
        b = ParamVector(np.array([0.5, -1, 2, 0]), p)
        assert (a - b) + b == a


class TestModelDelta:
    def test_identity_and_zero_base(self):
        spec = ModelSpec("logreg", 4, 3)
        m = Model.init(spec, seed=1)
        zero = Model(spec, ParamVector(np.zeros(spec.partition().total_length), spec.partition()))
        assert np.all(model_delta(m, m).values == 0.0)
        assert np.array_equal(model_delta(m, zero).values, m.weights.values)

    def test_delta_plus_base_reconstructs(self):
        spec = ModelSpec("mlp", 5, 3, hidden_dim=4)
        a = Model.init(spec, seed=1)
        b = Model.init(spec, seed=2)
        d = model_delta(a, b)
        assert np.array_equal(b.weights.values + d.values, a.weights.values)

    def test_architecture_mismatch_raises(self):
        with pytest.raises(ShapeMismatchError):
            model_delta(Model.init(ModelSpec("logreg", 4, 3), 1), Model.init(ModelSpec("logreg", 5, 3), 1))


class TestLocalTrain:
    def test_zero_epochs_is_identity(self):
        data = small_dataset()
        m = Model.init(ModelSpec("logreg", data.feature_dim, data.num_classes), 3)
        out = local_train(m, data, epochs=0, batch_size=8, lr=0.1, seed=1)
        assert np.array_equal(out.weights.values, m.weights.values)

    def test_zero_lr_is_identity_on_weights(self):
        data = small_dataset()
        m = Model.init(ModelSpec("logreg", data.feature_dim, data.num_classes), 3)
        out = local_train(m, data, epochs=2, batch_size=8, lr=0.0, seed=1)
        assert np.array_equal(out.weights.values, m.weights.values)

    def test_input_model_is_unchanged_and_run_is_deterministic(self):
        data = small_dataset()
        m = Model.init(ModelSpec("logreg", data.feature_dim, data.num_classes), 3)
        before = m.weights.values.copy()
        a = local_train(m, data, epochs=2, batch_size=16, lr=0.2, seed=9)
        b = local_train(m, data, epochs=2, batch_size=16, lr=0.2, seed=9)
        assert np.array_equal(m.weights.values, before)
        assert np.array_equal(a.weights.values, b.weights.values)

    def test_single_example_full_batch_step_matches_analytic_gradient(self):
        # 1-D logistic regression (two classes), one example, one step.
        spec = ModelSpec("logreg", 1, 2)
        m = Model.init(spec, seed=4)
        x, y = 1.7, 1
        data = LocalDataset(np.array([[x]]), np.array([y]), num_classes=2)
        lr = 0.25
        out = local_train(m, data, epochs=1, batch_size=1, lr=lr, seed=0)
        w = m.weights.values
        logits = np.array([w[0] * x + w[2], w[1] * x + w[3]])
        p = np.exp(logits - logits.max())
        p /= p.sum()
        err = p.copy()
        err[y] -= 1.0
        grad = np.array([err[0] * x, err[1] * x, err[0], err[1]])
        assert np.allclose(out.weights.values, w - lr * grad, rtol=0, atol=1e-15)

    def test_converges_on_separable_data(self):
        data = small_dataset(n=200, d=4, classes=2, seed=8)
        m = Model.init(ModelSpec("logreg", 4, 2), 3)
        out = local_train(m, data, epochs=50, batch_size=32, lr=0.5, seed=1)
        assert out.accuracy(data) >= 0.99

    def test_divergence_raises(self):
        data = small_dataset()
        m = Model.init(ModelSpec("mlp", data.feature_dim, data.num_classes, hidden_dim=8), 3)
        with pytest.raises(TrainingDivergedError):
            local_train(m, data, epochs=60, batch_size=8, lr=1e12, seed=1)

    def test_empty_shard_is_noop(self):
        data = LocalDataset(np.empty((0, 4)), np.empty(0, dtype=int), num_classes=3)
        m = Model.init(ModelSpec("logreg", 4, 3), 3)
        out = local_train(m, data, epochs=3, batch_size=8, lr=0.5, seed=1)
        assert np.array_equal(out.weights.values, m.weights.values)


@pytest.mark.parametrize("kind,hidden", [("logreg", 0), ("mlp", 7)])
def test_analytic_gradient_matches_central_differences(kind, hidden):
    # 10 random (model, example) pairs per architecture, 1e-5 relative.
    from dprec.rng import GaussianStream, StreamKey

    stream = GaussianStream(StreamKey(99, 1))
    spec = ModelSpec(kind, 5, 3, hidden_dim=hidden)
    dim = spec.partition().total_length
    for trial in range(10):
        weights = 0.5 * stream.normals(dim)
        model = Model(spec, ParamVector(weights, spec.partition()))
        x = stream.normals(5).reshape(1, 5)
        y = np.array([trial % 3])
        _, grad = model.loss_and_grad(x, y)
        idx = int(stream.randint_below(dim))
        eps = 1e-6
        up = model.copy()
        up.weights.values[idx] += eps
        down = model.copy()
        down.weights.values[idx] -= eps
        fd = (up.loss(x, y) - down.loss(x, y)) / (2 * eps)
        denom = max(abs(fd), abs(grad[idx]), 1e-8)
        assert abs(grad[idx] - fd) / denom < 1e-5


class TestDirichletPartition:
    def test_single_client_gets_everything(self):
        data = small_dataset(n=100)
        parts = dirichlet_partition(data, 1, 0.3, seed=1)
        assert len(parts) == 1 and len(parts[0]) == 100

    def test_partition_is_a_bijection_on_examples(self):
        data = small_dataset(n=240, d=5, classes=4, seed=2)
        parts = dirichlet_partition(data, 7, 0.5, seed=3)
        assert sum(len(p) for p in parts) == len(data)
        stacked = np.vstack([p.features for p in parts if len(p)])
        assert np.array_equal(
            np.sort(stacked.round(12), axis=0), np.sort(data.features.round(12), axis=0)
        )

    def test_deterministic_given_seed(self):
        data = small_dataset(n=150)
        a = dirichlet_partition(data, 5, 1.0, seed=42)
        b = dirichlet_partition(data, 5, 1.0, seed=42)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.features, pb.features)
            assert np.array_equal(pa.labels, pb.labels)

    def test_low_concentration_skews_label_histograms(self):
        data = synthetic_classification(2000, 4, 10, seed=6, class_sep=2.0)
        parts = dirichlet_partition(data, 20, 0.1, seed=7)
        maxshares = [
            np.bincount(p.labels, minlength=10).max() / len(p) for p in parts if len(p) >= 10
        ]
        # Strong non-i.i.d.: most clients dominated by few labels.
        assert np.median(maxshares) > 0.5

    def test_huge_concentration_approaches_uniform_shares(self):
        # 100 seeds; each client's max label share within 0.05 of 1/classes
        # in at least 99 of them.
        data = synthetic_classification(10000, 3, 10, seed=1, class_sep=1.0)
        ok = 0
        for seed in range(100):
            parts = dirichlet_partition(data, 10, 1e6, seed=seed)
            good = all(
                abs(np.bincount(p.labels, minlength=10).max() / len(p) - 0.1) <= 0.05
                for p in parts
            )
            ok += good
        assert ok >= 99

    def test_too_many_clients_raises(self):
        data = small_dataset(n=30)
        with pytest.raises(InvalidConfigError):
            dirichlet_partition(data, 31, 1.0, seed=1)


def test_dataset_csv_and_npz_roundtrip(tmp_path):
    data = small_dataset(n=40, d=3, classes=2, seed=9)
    csv_path = tmp_path / "d.csv"
    npz_path = tmp_path / "d.npz"
    save_dataset_csv(str(csv_path), data)
    save_dataset_npz(str(npz_path), data)
    for loaded in (load_dataset_csv(str(csv_path)), load_dataset_npz(str(npz_path))):
        assert np.array_equal(loaded.features, data.features)
        assert np.array_equal(loaded.labels, data.labels)


def test_synthetic_split_shares_task_structure():
    train = synthetic_classification(300, 6, 3, seed=1, task_seed=50)
    test = synthetic_classification(300, 6, 3, seed=2, task_seed=50)
    m = local_train(
        Model.init(ModelSpec("logreg", 6, 3), 0), train, epochs=30, batch_size=32, lr=0.3, seed=0
    )
    assert m.accuracy(test) > 0.9
