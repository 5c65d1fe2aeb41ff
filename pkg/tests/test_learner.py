import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlmule.errors import ContractError, EvaluationError
from mlmule.learner import (
    Architecture,
    Hyperparams,
    ModelParams,
    ModelSnapshot,
    aggregate_weighted,
    evaluate,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grad,
    merge_snapshots,
    predict,
    save_checkpoint,
    train,
)
from mlmule.partition import LabeledDataset, SynthSpec, class_means, synth_dataset

LOGISTIC = Architecture("logistic", 4, 3)
MLP = Architecture("mlp", 4, 3, hidden=6)


def _snap(values, n=1, t=0, tag=None):
    v = np.asarray(values, dtype=float)
    tag = tag or f"logistic:1:{len(v) // 2}"
    return ModelSnapshot(ModelParams(v, tag), t, n)


def test_shape_tags_round_trip():
    assert LOGISTIC.shape_tag == "logistic:4:3"
    assert Architecture.from_tag(MLP.shape_tag) == MLP
    with pytest.raises(ContractError):
        Architecture.from_tag("cnn:3")


def test_init_size_bounds_and_determinism():
    arch = Architecture("logistic", 2, 3)
    p = init_model(arch, np.random.default_rng(0))
    assert len(p.values) == 2 * 3 + 3
    assert np.array_equal(p.values, init_model(arch, np.random.default_rng(0)).values)
    q = init_model(MLP, np.random.default_rng(1))
    (w1, b1), (w2, b2) = MLP.unpack(q.values)
    assert np.all(np.abs(w1) <= 1 / np.sqrt(4)) and np.all(np.abs(w2) <= 1 / np.sqrt(6))
    assert not b1.any() and not b2.any()
    assert np.all(np.isfinite(q.values))


def test_params_are_immutable_values():
    raw = np.zeros(LOGISTIC.n_params)
    p = ModelParams(raw, LOGISTIC.shape_tag)
    raw[0] = 5.0
    assert p.values[0] == 0.0
    with pytest.raises(ValueError):
        p.values[0] = 1.0
    assert p == ModelParams(np.zeros(LOGISTIC.n_params), LOGISTIC.shape_tag)
    with pytest.raises(ContractError):
        ModelParams(np.zeros(3), LOGISTIC.shape_tag)
    with pytest.raises(ContractError):
        ModelParams(np.full(LOGISTIC.n_params, np.nan), LOGISTIC.shape_tag)


def _fd_grad(arch, v, x, y, l2, coords, h=1e-5):
    out = []
    for i in coords:
        e = np.zeros_like(v)
        e[i] = h
        lp, _ = loss_and_grad(arch, v + e, x, y, l2)
        lm, _ = loss_and_grad(arch, v - e, x, y, l2)
        out.append((lp - lm) / (2 * h))
    return np.array(out)


@pytest.mark.parametrize("arch", [LOGISTIC, MLP], ids=["logistic", "mlp"])
def test_gradient_matches_central_differences(arch):
    rng = np.random.default_rng(5)
    v = rng.normal(scale=0.5, size=arch.n_params)
    x = rng.normal(size=(20, arch.n_features))
    y = rng.integers(0, arch.n_classes, size=20)
    coords = rng.choice(arch.n_params, size=min(32, arch.n_params), replace=False)
    _, g = loss_and_grad(arch, v, x, y, 0.01)
    fd = _fd_grad(arch, v, x, y, 0.01, coords)
    rel = np.abs(g[coords] - fd) / np.maximum(np.abs(fd) + np.abs(g[coords]), 1e-8)
    assert rel.max() <= 1e-4


def test_logistic_loss_matches_direct_formula():
    rng = np.random.default_rng(2)
    v = rng.normal(size=LOGISTIC.n_params)
    x = rng.normal(size=(7, 4))
    y = rng.integers(0, 3, size=7)
    w = v[:12].reshape(4, 3)
    b = v[12:]
    z = x @ w + b
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(p[np.arange(7), y])) + 0.5 * 0.1 * np.sum(w ** 2)
    loss, _ = loss_and_grad(LOGISTIC, v, x, y, 0.1)
    assert loss == pytest.approx(expected, rel=1e-12)
    assert np.allclose(forward(LOGISTIC, v, x), z)


@pytest.fixture(scope="module")
def tight():
    spec = SynthSpec(n_superclasses=2, n_subclasses=2, samples_per_subclass=40, n_features=4, sigma=1e-3)
    return synth_dataset(spec, np.random.default_rng(4))


def test_training_fits_separable_data(tight):
    arch = Architecture("logistic", 4, 4)
    p = train(init_model(arch, np.random.default_rng(0)), tight, Hyperparams(0.1, 32, 20), np.random.default_rng(1))
    assert evaluate(p, tight).accuracy == 1.0


def test_mlp_reaches_high_training_accuracy_within_fifty_epochs(tight):
    arch = Architecture("mlp", 4, 4, hidden=32)
    p = train(init_model(arch, np.random.default_rng(0)), tight, Hyperparams(0.1, 32, 50), np.random.default_rng(1))
    assert evaluate(p, tight).accuracy >= 0.99


def test_zero_epochs_and_empty_data_are_identities(tight):
    arch = Architecture("logistic", 4, 4)
    p = init_model(arch, np.random.default_rng(0))
    assert train(p, tight, Hyperparams(epochs=0), np.random.default_rng(1)) == p
    empty = LabeledDataset.empty(4, 4)
    assert train(p, empty, Hyperparams(), np.random.default_rng(1)) == p


def test_train_is_deterministic_and_pure(tight):
    arch = Architecture("logistic", 4, 4)
    p = init_model(arch, np.random.default_rng(0))
    before = p.values.copy()
    a = train(p, tight, Hyperparams(epochs=2), np.random.default_rng(9))
    b = train(p, tight, Hyperparams(epochs=2), np.random.default_rng(9))
    assert a == b
    assert np.array_equal(p.values, before)


def test_shape_mismatch_is_rejected(tight):
    p = init_model(Architecture("logistic", 3, 4), np.random.default_rng(0))
    with pytest.raises(ContractError):
        train(p, tight, Hyperparams(), np.random.default_rng(0))


def test_zero_params_predict_class_zero():
    ds = LabeledDataset(np.random.default_rng(0).normal(size=(8, 2)), np.repeat(np.arange(4), 2), 4)
    p = ModelParams(np.zeros(Architecture("logistic", 2, 4).n_params), "logistic:2:4")
    assert np.all(predict(p, ds.features) == 0)
    m = evaluate(p, ds)
    assert m.accuracy == 0.25
    assert m.loss == pytest.approx(np.log(4))


def test_centroid_aligned_params_are_perfect(tight):
    mu = class_means(tight)
    w = mu.T
    b = -0.5 * (mu ** 2).sum(axis=1)
    p = ModelParams(np.concatenate([w.ravel(), b]), "logistic:4:4")
    assert evaluate(p, tight).accuracy == 1.0


def test_evaluate_needs_data():
    p = ModelParams(np.zeros(9), "logistic:2:3")
    with pytest.raises(EvaluationError):
        evaluate(p, LabeledDataset.empty(2, 3))


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.integers(1, 1000))
def test_evaluate_loss_is_non_negative(vals, n):
    rng = np.random.default_rng(n)
    p = ModelParams(np.array(vals + [0.0, 0.0]), "logistic:2:2")
    ds = LabeledDataset(rng.normal(size=(5, 2)), rng.integers(0, 2, size=5), 2)
    assert evaluate(p, ds).loss >= 0.0


# --- aggregation ----------------------------------------------------------------


def test_aggregation_examples():
    assert np.allclose(aggregate_weighted([_snap([0, 2]), _snap([2, 0])]).values, [1, 1])
    # independent oracle: (3*[0,0] + 1*[4,4]) / 4
    assert np.allclose(aggregate_weighted([_snap([0, 0], n=3), _snap([4, 4], n=1)]).values, [1, 1])
    p = [0.3, -1.7]
    assert aggregate_weighted([_snap(p, n=5), _snap(p, n=900)]).values.tolist() == p


def test_untrained_snapshots_get_unit_weight():
    out = aggregate_weighted([_snap([0, 0], n=0), _snap([3, 3], n=2)])
    assert np.allclose(out.values, [2, 2])


def test_aggregation_rejects_mixed_shapes_and_empty_input():
    with pytest.raises(ContractError):
        aggregate_weighted([])
    with pytest.raises(ContractError):
        aggregate_weighted([_snap([0, 0]), _snap([0, 0, 0, 0])])


snapsets = st.lists(
    st.tuples(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6), st.integers(0, 500)),
    min_size=1, max_size=6,
)


@given(snapsets, st.randoms(use_true_random=False))
def test_aggregation_is_convex_and_order_free(items, rnd):
    snaps = [_snap(v, n=n, tag="logistic:2:2") for v, n in items]
    out = aggregate_weighted(snaps).values
    stack = np.array([v for v, _ in items])
    assert np.all(out >= stack.min(axis=0)) and np.all(out <= stack.max(axis=0))
    shuffled = list(snaps)
    rnd.shuffle(shuffled)
    assert np.array_equal(aggregate_weighted(shuffled).values, out)
    w = np.array([max(n, 1) for _, n in items], dtype=float)
    assert np.allclose(out, (w[:, None] * stack).sum(0) / w.sum(), rtol=1e-9, atol=1e-9)


@given(st.lists(st.floats(-1e6, 1e6), min_size=6, max_size=6), st.lists(st.integers(0, 10**6), min_size=1, max_size=5))
def test_aggregation_is_idempotent(vals, weights):
    snaps = [_snap(vals, n=n, tag="logistic:2:2") for n in weights]
    assert aggregate_weighted(snaps).values.tolist() == [float(v) for v in vals]


def test_merge_keeps_newest_time_and_largest_weight():
    m = merge_snapshots(_snap([0, 0], n=3, t=5), _snap([2, 2], n=7, t=9))
    assert m.last_update == 9 and m.n_train_samples == 7
    assert np.allclose(m.params.values, [1.4, 1.4])


def test_checkpoint_round_trip(tmp_path):
    snap = ModelSnapshot(init_model(MLP, np.random.default_rng(3)), 17, 250)
    path = tmp_path / "ckpt.txt"
    save_checkpoint(snap, path)
    back = load_checkpoint(path)
    assert back.params == snap.params
    assert back.last_update == 17 and back.n_train_samples == 250
    assert path.read_text().splitlines()[0] == MLP.shape_tag
